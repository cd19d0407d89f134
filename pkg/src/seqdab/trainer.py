"""SGD training with plateau decay, checkpointing and all-permutation evaluation."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import perm as P
from . import tensor as T
from .backbone import Network, NetworkConfig, build_network, preset
from .dab import DabConfig
from .data import DESK_CROP, DESK_SCALE, IMAGENET_MEAN, IMAGENET_STD, SequenceSet, center_offsets, group_split

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.001
    lr_decay: float = 0.1
    patience: int = 3
    min_delta: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    dab: str = "signed"
    preset: str = "desk-10"
    seq_len: int = 4
    train_shards: list[str] = field(default_factory=list)
    val_fraction: float = 0.1
    perm_cap: int = 24
    scale: int = DESK_SCALE
    crop: int = DESK_CROP
    eval_batch_size: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def network_config(self) -> NetworkConfig:
        return preset(self.preset, self.seq_len, DabConfig.parse(self.dab), input_size=self.crop)


class TrainingDiverged(RuntimeError):
    pass


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` once validation loss has failed
    to improve by more than ``min_delta`` for ``patience`` consecutive epochs."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 3, min_delta: float = 1e-3):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best if math.isfinite(self.best) else None,
                "bad_epochs": self.bad_epochs}

    def load(self, d: dict) -> None:
        self.lr = d["lr"]
        self.best = math.inf if d["best"] is None else d["best"]
        self.bad_epochs = d["bad_epochs"]


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"DSQC"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray]

    @property
    def network_config(self) -> NetworkConfig:
        return NetworkConfig.from_dict(self.meta["network"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<H", CKPT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in ckpt.tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    pos = 0

    def take(k: int, what: str) -> bytes:
        nonlocal pos
        if pos + k > len(raw):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        chunk = raw[pos:pos + k]
        pos += k
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version, = struct.unpack("<H", take(2, "version"))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    mlen, = struct.unpack("<I", take(4, "config length"))
    try:
        meta = json.loads(take(mlen, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint config: {exc}") from exc
    tensors = {}
    while pos < len(raw):
        nlen, = struct.unpack("<H", take(2, "tensor name length"))
        name = take(nlen, "tensor name").decode("utf-8")
        rank, = struct.unpack("<B", take(1, f"{name} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * count, f"{name} payload"), dtype="<f4").astype(np.float32)
        tensors[name] = arr.reshape(dims)
    return Checkpoint(meta, tensors)


def snapshot(net: Network, opt: T.SGD | None, meta: dict) -> Checkpoint:
    tensors = {}
    for name, p in net.named_parameters():
        tensors[f"param/{name}"] = p.data.copy()
    for name, buf in net.named_buffers():
        tensors[f"buffer/{name}"] = buf.copy()
    if opt is not None:
        for (name, _), v in zip(net.named_parameters(), opt.velocity):
            tensors[f"velocity/{name}"] = v.copy()
    meta = dict(meta)
    meta["network"] = net.cfg.to_dict()
    return Checkpoint(meta, tensors)


def restore_network(ckpt: Checkpoint) -> Network:
    net = build_network(ckpt.network_config, seed=0)
    for name, p in net.named_parameters():
        key = f"param/{name}"
        if key not in ckpt.tensors:
            raise CheckpointFormatError(f"checkpoint lacks parameter {name}")
        if ckpt.tensors[key].shape != p.shape:
            raise CheckpointFormatError(f"{name}: shape {ckpt.tensors[key].shape}, network wants {p.shape}")
        p.data = ckpt.tensors[key].copy()
    for bn in net.batch_norms():
        bn.params.running_mean = ckpt.tensors[f"buffer/{bn.name}.running_mean"].copy()
        bn.params.running_var = ckpt.tensors[f"buffer/{bn.name}.running_var"].copy()
    return net


# ---------------------------------------------------------------------------
# batches


def _present(frames: np.ndarray, perm: Sequence[int], offset: tuple[int, int], crop: int) -> np.ndarray:
    oy, ox = offset
    return frames[:, list(perm), oy:oy + crop, ox:ox + crop]


_MEAN = IMAGENET_MEAN.reshape(1, 3, 1, 1, 1)
_STD = IMAGENET_STD.reshape(1, 3, 1, 1, 1)


def make_batch(seqs: SequenceSet, items, crop: int, rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``(seq_index, perm)`` items into a normalized ``(b, 3, n, crop, crop)`` batch.

    ``rng`` draws one crop offset per sample (shared by its frames); ``None``
    means center crop.
    """
    h, w = seqs.frames.shape[-2:]
    out, labels = [], []
    for i, p in items:
        if rng is None:
            off = center_offsets(h, w, crop)
        else:
            off = (int(rng.integers(h - crop + 1)), int(rng.integers(w - crop + 1)))
        out.append(_present(seqs.frames[i], p, off, crop))
        labels.append(P.encode(p))
    x = (np.stack(out) - _MEAN) / _STD
    return x.astype(np.float32), np.asarray(labels)


def expand(seqs: SequenceSet, cap: int | None, rng: np.random.Generator | None) -> list[tuple[int, tuple[int, ...]]]:
    """(sequence, presentation order) pairs: all ``n!`` orders, or ``cap`` random ones each."""
    perms = P.enumerate_permutations(seqs.n)
    items = []
    for i in range(len(seqs)):
        if cap is None or cap >= len(perms):
            chosen = perms
        else:
            chosen = [perms[j] for j in rng.choice(len(perms), size=cap, replace=False)]
        items += [(i, p) for p in chosen]
    return items


@dataclass
class Metrics:
    loss: float
    accuracy: float
    count: int

    def to_dict(self) -> dict:
        return {"loss": self.loss, "accuracy": self.accuracy, "count": self.count}


def run_eval(net: Network, seqs: SequenceSet, items, crop: int, batch_size: int = 64) -> Metrics:
    net.eval()
    total_loss, correct = 0.0, 0
    with T.no_grad():
        for s in range(0, len(items), batch_size):
            chunk = items[s:s + batch_size]
            x, y = make_batch(seqs, chunk, crop, None)
            logits = net(T.Tensor(x))
            loss = T.softmax_cross_entropy(logits, y)
            total_loss += float(loss.data) * len(chunk)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    net.train()
    n = max(len(items), 1)
    return Metrics(total_loss / n, correct / n, len(items))


def evaluate(net_or_ckpt, seqs: SequenceSet, all_perms: bool = True, crop: int = DESK_CROP,
             cap: int | None = None, seed: int = 0, batch_size: int = 64) -> Metrics:
    """Accuracy of argmax(logits) against the merged class id.

    With ``all_perms`` every sequence is shown in all ``n!`` orders.
    """
    net = net_or_ckpt if isinstance(net_or_ckpt, Network) else restore_network(net_or_ckpt)
    if seqs.n != net.cfg.seq_len:
        raise ValueError(f"sequences have n={seqs.n}, network expects n={net.cfg.seq_len}")
    items = expand(seqs, None if all_perms else cap, np.random.default_rng([seed, 7]))
    return run_eval(net, seqs, items, crop, batch_size)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    net: Network
    history: list[dict]
    best: Checkpoint
    last: Checkpoint


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def fit(cfg: TrainConfig, train_set: SequenceSet, val_set: SequenceSet | None = None,
        out_dir=None, metrics_path=None, resume: Checkpoint | None = None,
        net_cfg: NetworkConfig | None = None, log_every: int = 0) -> TrainResult:
    """Train on capture-ordered sequences; each epoch re-draws presentation orders."""
    net_cfg = net_cfg or cfg.network_config()
    if train_set.n != net_cfg.seq_len:
        raise ValueError(f"training sequences have n={train_set.n}, network expects {net_cfg.seq_len}")
    if val_set is None:
        tr_idx, va_idx = group_split(train_set.sources, cfg.val_fraction, cfg.seed)
        train_set, val_set = train_set.subset(tr_idx), train_set.subset(va_idx)
    if resume is not None:
        net = restore_network(resume)
    else:
        net = build_network(net_cfg, seed=cfg.seed)
    opt = T.SGD(net.parameters(), cfg.lr0, cfg.momentum, cfg.weight_decay)
    sched = PlateauSchedule(cfg.lr0, cfg.lr_decay, cfg.patience, cfg.min_delta)
    history: list[dict] = []
    start = 1
    best_ckpt = None
    if resume is not None:
        for (name, _), v in zip(net.named_parameters(), opt.velocity):
            v[...] = resume.tensors[f"velocity/{name}"]
        sched.load(resume.meta["schedule"])
        history = list(resume.meta.get("history", []))
        start = resume.meta["epoch"] + 1
    opt.lr = sched.lr

    val_items = expand(val_set, cfg.perm_cap, np.random.default_rng([cfg.seed, 10**6])) if len(val_set) else []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        # keep the pre-interruption best unless a later epoch beats its validation loss
        prev = out_dir / "best.ckpt" if out_dir is not None else None
        best_ckpt = load_checkpoint(prev) if prev is not None and prev.exists() else resume
    mfile = open(metrics_path, "a" if resume is not None else "w") if metrics_path else None

    def meta(epoch: int) -> dict:
        return {"train": cfg.to_dict(), "epoch": epoch, "schedule": sched.state(),
                "best_val_loss": sched.state()["best"], "history": history,
                "rng": {"scheme": "default_rng([seed, epoch])", "seed": cfg.seed, "next_epoch": epoch + 1}}

    try:
        for epoch in range(start, cfg.epochs + 1):
            rng = _epoch_rng(cfg.seed, epoch)
            items = expand(train_set, cfg.perm_cap, rng)
            order = rng.permutation(len(items))
            items = [items[j] for j in order]
            net.train()
            tot, correct, seen = 0.0, 0, 0
            for s in range(0, len(items), cfg.batch_size):
                chunk = items[s:s + cfg.batch_size]
                x, y = make_batch(train_set, chunk, cfg.crop, rng)
                logits = net(T.Tensor(x))
                try:
                    loss = T.softmax_cross_entropy(logits, y)
                except FloatingPointError as exc:
                    if out_dir is not None:
                        save_checkpoint(snapshot(net, opt, meta(epoch)), out_dir / "diverged.ckpt")
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {s // cfg.batch_size}") from exc
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                tot += float(loss.data) * len(chunk)
                correct += int((logits.data.argmax(axis=1) == y).sum())
                seen += len(chunk)
                if log_every and (s // cfg.batch_size) % log_every == 0:
                    log.info("epoch %d batch %d loss %.4f", epoch, s // cfg.batch_size, float(loss.data))
            val = run_eval(net, val_set, val_items, cfg.crop, cfg.eval_batch_size) if val_items else None
            lr_used = opt.lr
            improved = val is not None and val.loss < sched.best - sched.min_delta
            if val is not None:
                opt.lr = sched.step(val.loss)
            rec = {"epoch": epoch, "lr": lr_used, "train_loss": tot / max(seen, 1),
                   "train_accuracy": correct / max(seen, 1),
                   "val_loss": None if val is None else val.loss,
                   "val_accuracy": None if val is None else val.accuracy}
            history.append(rec)
            log.info("epoch %d %s", epoch, rec)
            if mfile:
                mfile.write(json.dumps(rec) + "\n")
                mfile.flush()
            if improved or best_ckpt is None:
                best_ckpt = snapshot(net, opt, meta(epoch))
                if out_dir is not None:
                    save_checkpoint(best_ckpt, out_dir / "best.ckpt")
            if out_dir is not None:
                save_checkpoint(snapshot(net, opt, meta(epoch)), out_dir / "last.ckpt")
    finally:
        if mfile:
            mfile.close()
    last = snapshot(net, opt, meta(cfg.epochs))
    return TrainResult(net, history, best_ckpt or last, last)


def train(cfg: TrainConfig, out_dir=None, metrics_path=None, resume=None) -> TrainResult:
    """Train from the shards named in ``cfg.train_shards``."""
    if not cfg.train_shards:
        raise ValueError("no training shards given")
    seqs = SequenceSet.from_shards(cfg.train_shards)
    if seqs.n != cfg.seq_len:
        raise ValueError(f"shards hold n={seqs.n} sequences but seq_len={cfg.seq_len}")
    if isinstance(resume, (str, Path)):
        resume = load_checkpoint(resume)
    return fit(cfg, seqs, out_dir=out_dir, metrics_path=metrics_path, resume=resume)
