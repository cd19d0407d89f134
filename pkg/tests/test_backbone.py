import itertools

import numpy as np
import pytest

from seqdab import tensor as T
from seqdab.backbone import NetworkConfig, build_network, count_params, preset, with_dab
from seqdab.dab import DabConfig
from seqdab.gradcheck import backbone_check
from seqdab.tensor import Tensor


def batch(rng, b, n, size=32):
    return Tensor(rng.standard_normal((b, 3, n, size, size)).astype(np.float32))


def test_logit_widths():
    assert build_network(preset("desk-10", 3)).cfg.classes == 3
    assert preset("paper-50", 5).classes == 60
    assert preset("paper-18", 6).classes == 360


def test_desk10_forward_shapes(rng):
    net = build_network(preset("desk-10", 4))
    assert net(batch(rng, 2, 4)).shape == (2, 12)
    net3 = build_network(preset("desk-10", 3))
    assert net3(batch(rng, 1, 3)).shape == (1, 3)


def test_forward_rejects_bad_shapes(rng):
    net = build_network(preset("desk-10", 4))
    with pytest.raises(ValueError):
        net(batch(rng, 1, 3))
    with pytest.raises(ValueError):
        net(batch(rng, 1, 4, size=24))


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(widths=[16, 32], blocks=[1])
    with pytest.raises(ValueError):
        NetworkConfig(block="wide")
    with pytest.raises(ValueError):
        NetworkConfig(input_size=0)
    with pytest.raises(ValueError):
        preset("desk-99", 4)
    cfg = preset("paper-50", 5, DabConfig("windowed", 2))
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_same_seed_bit_identical_parameters():
    a = build_network(preset("desk-10", 4), seed=7)
    b = build_network(preset("desk-10", 4), seed=7)
    c = build_network(preset("desk-10", 4), seed=8)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert pa.data.tobytes() == pb.data.tobytes()
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


def test_param_counts():
    net = build_network(preset("desk-10", 3))
    assert net.fc_weight.size + net.fc_bias.size == 64 * 3 + 3
    assert count_params(net) == count_params(build_network(preset("desk-10", 3)))
    assert count_params(net) < 500_000
    # changing n only changes the head
    net4 = build_network(preset("desk-10", 4))
    assert count_params(net4) - count_params(net) == 64 * 9 + 9


def test_param_names_unique():
    names = [n for n, _ in build_network(preset("desk-10", 4)).named_parameters()]
    assert len(names) == len(set(names))


def test_bottleneck_only_middle_conv_is_dab():
    cfg = NetworkConfig(seq_len=3, input_size=8, block="bottleneck", stem_channels=4, widths=[2], blocks=[1])
    net = build_network(cfg)
    blk = net.stages[0][0]
    assert len(blk.dab_blocks) == 1
    assert net.feature_width == 8


def test_temporal_depth_preserved(rng):
    net = build_network(preset("desk-10", 5)).eval()
    net.taps.enable(net.tap_tags())
    with T.no_grad():
        net(batch(rng, 1, 5))
    sizes = {"conv1": 32, "layer1.last": 32, "layer2.last": 16, "layer3.last": 8}
    for tag, v in net.taps.items():
        assert v.shape[2] == 5
        assert v.shape[-1] == sizes[tag]
    assert net.tap_tags() == list(sizes)


def test_duplicate_rows_identical_in_eval(rng):
    net = build_network(preset("desk-10", 4)).eval()
    x = batch(rng, 1, 4).data
    with T.no_grad():
        out = net(Tensor(np.concatenate([x, x]))).data
        again = net(Tensor(np.concatenate([x, x]))).data
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out, again)


def test_disabled_with_zeroed_fs_half_is_order_blind(rng):
    net = build_network(preset("desk-10", 4, DabConfig("disabled"))).eval()
    for blk in net.dab_blocks():
        c = blk.cfg.in_channels
        blk.fuse.weight.data[:, c:] = 0.0
    x = batch(rng, 1, 4).data
    with T.no_grad():
        ref = net(Tensor(x)).data
        for p in itertools.permutations(range(4)):
            np.testing.assert_allclose(net(Tensor(x[:, :, list(p)])).data, ref, rtol=1e-4, atol=1e-5)


def test_signed_network_is_order_sensitive(rng):
    net = build_network(preset("desk-10", 4)).eval()
    x = batch(rng, 1, 4).data
    with T.no_grad():
        a = net(Tensor(x)).data
        b = net(Tensor(x[:, :, [1, 0, 2, 3]])).data
    assert not np.allclose(a, b)


def test_with_dab_swaps_mode_only():
    cfg = preset("desk-10", 4)
    alt = with_dab(cfg, DabConfig("magnitude"))
    assert alt.dab.mode == "magnitude" and alt.widths == cfg.widths


@pytest.mark.parametrize("block", ["basic", "bottleneck"])
def test_end_to_end_gradient_fd(block):
    res = backbone_check(seed=2, block=block)
    assert res.passed, res.line()


def test_one_step_moves_every_stage(rng):
    net = build_network(preset("desk-10", 4))
    opt = T.SGD(net.parameters(), lr=0.1, momentum=0.9)
    before = {n: p.data.copy() for n, p in net.named_parameters()}
    loss = T.softmax_cross_entropy(net(batch(rng, 4, 4)), np.array([0, 1, 2, 3]))
    T.backward(loss)
    opt.step()
    moved = {n.split(".")[0] for n, p in net.named_parameters() if not np.array_equal(before[n], p.data)}
    assert {"conv1", "layer1", "layer2", "layer3", "fc"} <= moved
