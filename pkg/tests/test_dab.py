import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from seqdab import tensor as T
from seqdab.dab import (ConvBlockConfig, DabConfig, DabConvBlock, TapRegistry, dab, dab_apply, dab_backward,
                        dab_forward, dab_forward_fast)
from seqdab.gradcheck import block_check, check
from seqdab.tensor import Tensor

SIGNED = DabConfig("signed")
MAG = DabConfig("magnitude")


def pairwise_oracle(fc, mode="signed", m=None):
    """Straight transcription of the accumulation, one scalar at a time."""
    c, n, h, w = fc.shape
    out = np.zeros_like(fc, dtype=np.float64)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                for i in range(n):
                    if i == n - 1:
                        out[ch, i, y, x] = fc[ch, i, y, x]
                        continue
                    ks = range(i + 1, n) if m is None else range(i, min(i + m, n - 1) + 1)
                    for k in ks:
                        d = float(fc[ch, i, y, x]) - float(fc[ch, k, y, x])
                        out[ch, i, y, x] += abs(d) if mode == "magnitude" else d
    return out


def col(*vals):
    return np.array(vals, dtype=np.float64).reshape(1, len(vals), 1, 1)


def test_signed_examples():
    np.testing.assert_array_equal(dab_forward(col(1, 2, 4), SIGNED).ravel(), [-4, -2, 4])
    np.testing.assert_array_equal(dab_forward(col(3, 3, 3, 3), SIGNED).ravel(), [0, 0, 0, 3])
    np.testing.assert_array_equal(dab_forward(col(5, 7), SIGNED).ravel(), [-2, 7])


def test_magnitude_and_windowed_examples():
    np.testing.assert_array_equal(dab_forward(col(1, 2, 4), MAG).ravel(), [4, 2, 4])
    np.testing.assert_array_equal(dab_forward(col(1, 2, 4, 8), DabConfig("windowed", 1)).ravel(), [-1, -2, -4, 8])
    np.testing.assert_array_equal(dab_forward(col(1, 2, 4), DabConfig("windowed", 0)).ravel(), [0, 0, 4])
    np.testing.assert_array_equal(dab_forward(col(1, 2, 4), DabConfig("disabled")).ravel(), [0, 0, 0])


def test_config_validation():
    with pytest.raises(ValueError):
        DabConfig("sideways")
    with pytest.raises(ValueError):
        DabConfig("windowed")
    with pytest.raises(ValueError):
        DabConfig("windowed", -1)
    with pytest.raises(ValueError):
        DabConfig("signed", 2)
    assert DabConfig.parse("windowed:2") == DabConfig("windowed", 2)
    assert DabConfig.parse("magnitude").label() == "magnitude"
    assert DabConfig.from_dict(DabConfig("windowed", 3).to_dict()) == DabConfig("windowed", 3)


def test_single_frame_rejected():
    with pytest.raises(ValueError):
        dab_forward(np.zeros((1, 1, 2, 2)), SIGNED)
    with pytest.raises(ValueError):
        dab_apply(np.zeros((2, 2)), SIGNED)


def test_fast_path_is_signed_only():
    with pytest.raises(ValueError):
        dab_forward_fast(np.zeros((1, 3, 2, 2)), MAG)


@pytest.mark.parametrize("mode,m", [("signed", None), ("magnitude", None), ("windowed", 0), ("windowed", 1),
                                    ("windowed", 2), ("windowed", 9)])
def test_reference_matches_scalar_oracle(rng, mode, m):
    fc = rng.standard_normal((3, 5, 2, 3))
    cfg = DabConfig(mode, m)
    want = pairwise_oracle(fc, mode, m)
    np.testing.assert_allclose(dab_forward(fc, cfg), want, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(dab_apply(fc, cfg)[0], want, rtol=1e-12, atol=1e-12)


def test_fast_matches_naive_many_shapes(rng):
    # 1000 random tensors over c 1..8, n 2..6, h,w 1..9
    for _ in range(1000):
        c, n, h, w = rng.integers(1, 9), rng.integers(2, 7), rng.integers(1, 10), rng.integers(1, 10)
        fc = rng.standard_normal((c, n, h, w)).astype(np.float32)
        a = dab_forward_fast(fc)
        b = dab_forward(fc, SIGNED)
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)


def test_fast_path_batched_and_noncontiguous(rng):
    fc = rng.standard_normal((2, 3, 5, 4, 4))
    np.testing.assert_allclose(dab_forward_fast(fc), dab_forward(fc, SIGNED), rtol=1e-12, atol=1e-12)
    view = rng.standard_normal((3, 5, 4, 8))[..., ::2]
    np.testing.assert_allclose(dab_forward_fast(view), dab_forward(view, SIGNED), rtol=1e-12, atol=1e-12)


def test_windowed_full_width_equals_signed(rng):
    fc = rng.standard_normal((4, 5, 3, 3))
    for m in (4, 5, 50):
        np.testing.assert_array_equal(dab_apply(fc, DabConfig("windowed", m))[0], dab_apply(fc, SIGNED)[0])


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=4, max_dims=4, min_side=1, max_side=4).filter(
    lambda s: s[1] >= 2), elements=st.floats(-10, 10)))
def test_signed_invariants(fc):
    n = fc.shape[1]
    fs = dab_forward(fc, SIGNED)
    # constant over time: only the copied last slice survives
    const = np.repeat(fc[:, :1], n, axis=1)
    fs_c = dab_forward(const, SIGNED)
    np.testing.assert_allclose(fs_c[:, :-1], 0.0, atol=1e-9)
    np.testing.assert_array_equal(fs_c[:, -1], const[:, -1])
    # linear in the input
    np.testing.assert_allclose(dab_forward(2.5 * fc, SIGNED), 2.5 * fs, rtol=1e-9, atol=1e-9)
    # last slice is a copy
    np.testing.assert_array_equal(fs[:, -1], fc[:, -1])
    # summing every pair difference: sum_{i<n-1} F_s[i] = sum_j (n-1-2j) F_c[j]
    w = np.array([n - 1 - 2 * j for j in range(n)], dtype=np.float64)
    lhs = fs[:, :-1].sum(axis=1)
    rhs = np.tensordot(fc, w, axes=([1], [0]))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-8)


@given(hnp.arrays(np.float64, (2, 4, 2, 2), elements=st.floats(-5, 5)))
def test_magnitude_nonnegative_and_bounds_signed(fc):
    mag = dab_forward(fc, MAG)
    assert (mag[:, :-1] >= 0).all()
    assert (mag[:, :-1] + 1e-12 >= np.abs(dab_forward(fc, SIGNED)[:, :-1])).all()


def test_reversing_time_is_not_symmetric():
    fc = col(1, 2, 4)
    rev = dab_forward(fc[:, ::-1], SIGNED)
    assert not np.allclose(rev, dab_forward(fc, SIGNED)[:, ::-1])


@pytest.mark.parametrize("cfg", [SIGNED, MAG, DabConfig("windowed", 1), DabConfig("windowed", 2),
                                 DabConfig("disabled")])
def test_adjoint_identity(rng, cfg):
    # <dab(x), g> == <x, dab^T(g)> for the linear modes; magnitude is linear given its signs
    x = rng.standard_normal((2, 5, 3, 3))
    g = rng.standard_normal(x.shape)
    y, signs = dab_apply(x, cfg)
    np.testing.assert_allclose((y * g).sum(), (x * dab_backward(g, cfg, signs)).sum(), rtol=1e-10)


def test_magnitude_backward_requires_signs(rng):
    with pytest.raises(ValueError):
        dab_backward(rng.standard_normal((1, 3, 2, 2)), MAG)


@pytest.mark.parametrize("cfg", [SIGNED, MAG, DabConfig("windowed", 1), DabConfig("disabled")])
def test_dab_gradient_fd(rng, cfg):
    x = Tensor(rng.standard_normal((2, 4, 3, 3)))
    probe = rng.standard_normal(x.shape)
    assert check("dab", lambda: T.inner(dab(x, cfg), probe), [x]).error < 1e-3


@pytest.mark.parametrize("cfg", [SIGNED, MAG, DabConfig("windowed", 1), DabConfig("disabled")])
def test_conv_block_gradient_fd(cfg):
    assert block_check(4, cfg).passed


def test_conv_block_shapes(rng):
    blk = DabConvBlock(ConvBlockConfig(4, 8, 3, 2), rng)
    out = blk(Tensor(rng.standard_normal((2, 4, 3, 8, 8)).astype(np.float32)))
    assert out.shape == (2, 8, 3, 4, 4)
    assert blk.fuse.weight.shape == (8, 8, 1, 3, 3)
    assert blk.spatial.weight.shape == (4, 4, 1, 3, 3)


def test_disabled_block_fs_half_is_zero(rng):
    blk = DabConvBlock(ConvBlockConfig(2, 3, dab=DabConfig("disabled")), rng, tag="b")
    taps = TapRegistry()
    taps.enable()
    blk(Tensor(rng.standard_normal((2, 3, 5, 5))), taps)
    np.testing.assert_array_equal(taps.get("b"), 0.0)


def test_tap_registry():
    taps = TapRegistry()
    taps.record("a", np.ones(2))
    assert "a" not in taps
    taps.enable(["a"])
    taps.record("a", np.ones(2))
    taps.record("b", np.ones(2))
    assert "a" in taps and "b" not in taps
    with pytest.raises(KeyError):
        taps.record("a", np.ones(2))
    with pytest.raises(KeyError):
        taps.get("b")
    taps.disable()
    assert len(taps) == 0
