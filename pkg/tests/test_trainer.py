import json
import math

import numpy as np
import pytest

from seqdab import perm as P
from seqdab import tensor as T
from seqdab.backbone import build_network, preset
from seqdab.data import SpriteSceneConfig, synthetic_set
from seqdab.trainer import (Checkpoint, CheckpointFormatError, PlateauSchedule, TrainConfig, evaluate, expand, fit,
                            load_checkpoint, make_batch, restore_network, save_checkpoint, snapshot)

SCENE = SpriteSceneConfig(frames=9, speed=(0.6, 1.2))


@pytest.fixture(scope="module")
def small_set():
    return synthetic_set(SCENE, 24, 5, 4, 2)


def tiny_cfg(**kw):
    base = dict(epochs=2, perm_cap=1, batch_size=8, seed=3, val_fraction=0.25)
    base.update(kw)
    return TrainConfig(**base)


def test_schedule_example():
    s = PlateauSchedule(1.0, factor=0.1, patience=2)
    lrs = [s.step(v) for v in (1.0, 0.9, 0.9, 0.9)]
    assert lrs[:3] == [1.0, 1.0, 1.0]
    assert lrs[3] == pytest.approx(0.1)
    s = PlateauSchedule(0.1, patience=2)
    assert [round(s.step(v), 6) for v in (1.0, 0.9, 0.9, 0.9)][-1] == 0.01


def test_schedule_min_delta_and_monotone():
    s = PlateauSchedule(0.1, patience=3, min_delta=1e-3)
    lrs = [s.step(v) for v in (1.0, 0.9995, 0.9991, 0.9992, 0.5, 0.6, 0.6, 0.6)]
    assert lrs[3] == pytest.approx(0.01)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_schedule_state_roundtrip():
    s = PlateauSchedule(0.1, patience=2)
    s.step(1.0)
    s.step(1.0)
    t = PlateauSchedule(0.5)
    t.load(json.loads(json.dumps(s.state())))
    assert (t.lr, t.best, t.bad_epochs) == (s.lr, s.best, s.bad_epochs)


def test_expand_counts(small_set):
    full = expand(small_set.subset(range(2)), None, None)
    assert len(full) == 48
    labels = [P.encode(p) for i, p in full if i == 0]
    assert sorted(set(labels)) == list(range(12)) and len(labels) == 24
    capped = expand(small_set.subset(range(3)), 5, np.random.default_rng(0))
    assert len(capped) == 15 and len(set(capped)) == 15


def test_make_batch_presents_permuted_frames(small_set):
    p = (2, 0, 3, 1)
    x, y = make_batch(small_set, [(0, p)], 32, None)
    x0, _ = make_batch(small_set, [(0, (0, 1, 2, 3))], 32, None)
    np.testing.assert_array_equal(x[0], x0[0][:, list(p)])
    assert y[0] == P.encode(p)
    assert x.dtype == np.float32 and x.shape == (1, 3, 4, 32, 32)


def test_checkpoint_roundtrip(tmp_path):
    net = build_network(preset("desk-10", 4), seed=1)
    opt = T.SGD(net.parameters(), lr=0.1, momentum=0.9)
    for v in opt.velocity:
        v += 0.25
    ck = snapshot(net, opt, {"epoch": 3, "note": "x"})
    save_checkpoint(ck, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.meta["epoch"] == 3 and back.meta["network"] == net.cfg.to_dict()
    assert back.tensors.keys() == ck.tensors.keys()
    for k in ck.tensors:
        assert back.tensors[k].tobytes() == ck.tensors[k].tobytes()
    net2 = restore_network(back)
    for (_, a), (_, b) in zip(net.named_parameters(), net2.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_checkpoint_format_errors(tmp_path):
    net = build_network(preset("desk-10", 3))
    save_checkpoint(snapshot(net, None, {}), tmp_path / "c.ckpt")
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(tmp_path / "m.ckpt")
    (tmp_path / "v.ckpt").write_bytes(raw[:4] + b"\x09\x00" + raw[6:])
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "t.ckpt").write_bytes(raw[:-7])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")


def test_zero_head_predicts_first_class(small_set):
    net = build_network(preset("desk-10", 4))
    net.fc_weight.data[:] = 0
    net.fc_bias.data[:] = 0
    m = evaluate(net, small_set.subset(range(2)), all_perms=True)
    assert m.accuracy == pytest.approx(1 / 12)
    assert m.loss == pytest.approx(math.log(12), rel=1e-5)


def test_evaluate_order_invariant(small_set):
    net = build_network(preset("desk-10", 4), seed=2)
    sub = small_set.subset(range(4))
    a = evaluate(net, sub)
    b = evaluate(net, sub.subset([3, 1, 0, 2]))
    assert a.accuracy == b.accuracy and a.count == b.count == 96
    assert a.loss == pytest.approx(b.loss, rel=1e-6)


def test_evaluate_n_mismatch(small_set):
    with pytest.raises(ValueError):
        evaluate(build_network(preset("desk-10", 5)), small_set)


def test_fit_writes_metrics_and_checkpoints(tmp_path, small_set):
    res = fit(tiny_cfg(), small_set, out_dir=tmp_path, metrics_path=tmp_path / "m.jsonl")
    lines = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [l["epoch"] for l in lines] == [1, 2]
    for l in lines:
        assert 0 <= l["train_accuracy"] <= 1 and 0 <= l["val_accuracy"] <= 1
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    ck = load_checkpoint(tmp_path / "last.ckpt")
    assert ck.meta["train"]["lr0"] == 0.1 and ck.meta["train"]["weight_decay"] == 0.001
    assert ck.meta["epoch"] == 2
    assert res.history == lines


def test_fit_deterministic(small_set):
    a = fit(tiny_cfg(epochs=1), small_set)
    b = fit(tiny_cfg(epochs=1), small_set)
    assert a.history == b.history
    for (_, p), (_, q) in zip(a.net.named_parameters(), b.net.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_resume_matches_uninterrupted(tmp_path, small_set):
    full = fit(tiny_cfg(epochs=2), small_set)
    fit(tiny_cfg(epochs=1), small_set, out_dir=tmp_path)
    resumed = fit(tiny_cfg(epochs=2), small_set, resume=load_checkpoint(tmp_path / "last.ckpt"))
    assert resumed.history == full.history
    for (_, p), (_, q) in zip(full.net.named_parameters(), resumed.net.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    for (_, a), (_, b) in zip(full.net.named_buffers(), resumed.net.named_buffers()):
        assert a.tobytes() == b.tobytes()


def test_one_batch_overfit(small_set):
    perms = P.enumerate_permutations(4)
    items = [(i, perms[(5 * i) % 24]) for i in range(8)]
    x, y = make_batch(small_set, items, 32, None)
    net = build_network(preset("desk-10", 4), seed=0)
    opt = T.SGD(net.parameters(), lr=0.1, momentum=0.9, weight_decay=1e-3)
    best = math.inf
    for _ in range(200):
        loss = T.softmax_cross_entropy(net(T.Tensor(x)), y)
        best = min(best, float(loss.data))
        if best < 0.01:
            break
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    assert best < 0.01


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_divergence_aborts_with_checkpoint(tmp_path, small_set):
    from seqdab.trainer import TrainingDiverged
    with pytest.raises(TrainingDiverged):
        fit(tiny_cfg(lr0=1e30, epochs=1), small_set, out_dir=tmp_path)
    assert (tmp_path / "diverged.ckpt").exists()


def test_train_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 0.1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()
