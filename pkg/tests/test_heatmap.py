import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from seqdab import heatmap as H
from seqdab.backbone import build_network, preset
from seqdab.dab import DabConfig, dab_forward
from seqdab.data import SpriteSceneConfig, synthetic_set


def loop_heat(fs):
    c, n, h, w = fs.shape
    out = np.zeros((n, h, w))
    for i in range(n):
        for y in range(h):
            for x in range(w):
                out[i, y, x] = sum(abs(fs[ch, i, y, x]) for ch in range(c)) / c
    return out


def test_mean_of_absolutes():
    fs = np.array([-2.0, 2.0]).reshape(2, 1, 1, 1)
    maps = H.compute_heatmap(fs, "t")
    assert maps[0].grid[0, 0] == 2.0 and maps[0].tag == "t" and maps[0].frame == 0


def test_disabled_tap_gives_zero_heat(rng):
    fs = dab_forward(rng.standard_normal((3, 4, 5, 5)), DabConfig("disabled"))
    assert all((m.grid == 0).all() for m in H.compute_heatmap(fs))


def test_matches_loop_oracle(rng):
    fs = rng.standard_normal((5, 3, 4, 6))
    np.testing.assert_allclose(H.heat_stack(fs), loop_heat(fs), rtol=1e-6)


def test_missing_tap():
    with pytest.raises(KeyError):
        H.compute_heatmap(None)


@given(hnp.arrays(np.float64, (4, 2, 3, 3), elements=st.floats(-100, 100)), st.floats(0, 10),
       st.permutations(range(4)))
def test_homogeneous_and_channel_blind(fs, alpha, order):
    base = H.heat_stack(fs)
    assert (base >= 0).all()
    np.testing.assert_allclose(H.heat_stack(alpha * fs), alpha * base, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(H.heat_stack(fs[list(order)]), base, rtol=1e-12, atol=1e-12)


def test_normalize_spans_full_range():
    maps = [H.HeatMap(np.array([[0.0, 1.0]]), "t", 0), H.HeatMap(np.array([[2.0, 4.0]]), "t", 1)]
    norm = H.normalize_maps(maps)
    assert norm.min() == 0 and norm.max() == 255
    assert norm[0, 0, 1] == pytest.approx(255 / 4)  # shared scale across frames


def test_constant_map_exports_zeros_with_warning(tmp_path):
    maps = [H.HeatMap(np.full((2, 2), 3.0), "c", i) for i in range(2)]
    with pytest.warns(H.ConstantMapWarning):
        paths = H.normalize_and_export(maps, tmp_path)
    assert [p.name for p in paths] == ["c_00.pgm", "c_01.pgm"]
    assert (H.read_pgm(paths[0]) == 0).all()


def test_bilinear_corner_aligned(rng):
    g = rng.random((8, 8))
    up = H.upscale_bilinear(g, (32, 32))
    assert up.shape == (32, 32)
    for (y, x), (Y, X) in [((0, 0), (0, 0)), ((0, 7), (0, 31)), ((7, 0), (31, 0)), ((7, 7), (31, 31))]:
        assert up[Y, X] == pytest.approx(g[y, x])
    lin = np.add.outer(np.arange(4.0), np.zeros(4))
    np.testing.assert_allclose(H.upscale_bilinear(lin, (7, 7))[:, 0], np.linspace(0, 3, 7))


def test_export_reread_within_one_level(tmp_path, rng):
    maps = H.compute_heatmap(rng.standard_normal((3, 4, 8, 8)), "x")
    norm = H.normalize_maps(maps)
    paths = H.normalize_and_export(maps, tmp_path)
    assert paths[0].read_bytes()[:2] == b"P5"
    for p, want in zip(paths, norm):
        assert np.abs(H.read_pgm(p).astype(float) - want).max() <= 1.0


@pytest.fixture(scope="module")
def net():
    return build_network(preset("desk-10", 4), seed=0)


def test_progression_groups(net, rng):
    frames = rng.random((3, 4, 40, 40)).astype(np.float32)
    groups = H.progression(net, frames)
    assert list(groups) == ["conv1", "layer1.last", "layer2.last", "layer3.last"]
    assert [g[0].grid.shape for g in groups.values()] == [(32, 32), (32, 32), (16, 16), (8, 8)]
    assert all(len(g) == 4 for g in groups.values())
    with pytest.raises(KeyError):
        H.progression(net, frames, tags=["layer9.last"])


def test_identical_frames_heat_only_in_last_slice(net, rng):
    # exact at the stem; deeper layers already see the copied slice as a different frame
    frame = rng.random((3, 1, 40, 40)).astype(np.float32)
    maps = H.progression(net, np.repeat(frame, 4, axis=1), tags=["conv1"])["conv1"]
    last = maps[-1].grid.mean()
    assert last > 0
    for m in maps[:-1]:
        assert m.grid.max() <= 1e-5 * last


def test_box_mask_and_mass():
    mask = H.box_mask(np.array([[4.0, 4.0, 6.0, 6.0]]), (16, 16), dilation=2.0)
    # centre (5,5), half-width 2 after dilation -> pixels 3..7 on each axis
    assert mask.sum() == 25 and mask[3, 3] and mask[7, 7] and not mask[8, 8]
    shifted = H.box_mask(np.array([[4.0, 4.0, 6.0, 6.0]]), (16, 16), offset=(2, 1), dilation=1.0)
    assert shifted[3, 4] and shifted[2, 3] and not shifted[1, 3] and not shifted[3, 6]
    heat = np.zeros((1, 4, 4))
    heat[0, 0, 0] = 1.0
    heat[0, 3, 3] = 1.0
    m = np.zeros((16, 16), bool)
    m[:4, :4] = True
    np.testing.assert_allclose(H.mass_fraction(heat, m), [0.5])
    with pytest.raises(ValueError):
        H.mass_fraction(np.ones((1, 5, 5)), m)


def test_localization_report_csv(tmp_path, net):
    seqs = synthetic_set(SpriteSceneConfig(frames=9), 3, 0, 4, 2)
    rep = H.localization(net, seqs)
    assert set(rep.tags) == set(net.tap_tags())
    assert rep.fractions["conv1"].shape == (3, 4)
    assert all(0 <= rep.mean(t) <= 1 for t in rep.tags)
    rep.write_csv(tmp_path / "loc.csv")
    rows = (tmp_path / "loc.csv").read_text().splitlines()
    assert rows[0] == "sequence,tag,frame,fraction" and len(rows) == 1 + 4 * 3 * 4
