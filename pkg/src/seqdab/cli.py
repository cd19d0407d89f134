"""Command-line entry point: ``seqdab <subcommand> [flags]``.

Every subcommand takes ``--config`` (a JSON document with a ``"task"`` key),
``--out`` (default ``$SEQDAB_OUT/<task>``) and ``--seed``; flags override
config values. The fully resolved config is written to ``<out>/config.json``
before any work starts, and re-running with that file repeats the job.

Exit codes: 0 ok, 1 failed check / training failure, 2 config error, 3 IO error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import dab as D
from .data import (ExtractedWindow, ShardFormatError, SpriteSceneConfig, SequenceSet, extract_sequences,
                   read_header, samples_from_set, save_boxes, shuffle_and_label, synthetic_set, write_shard)
from .trainer import (CheckpointFormatError, TrainConfig, TrainingDiverged, evaluate, fit, load_checkpoint,
                      restore_network)

log = logging.getLogger("seqdab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
TASKS = ("gen-data", "extract", "train", "eval", "gradcheck", "heatmap", "bench", "ablate")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class DataSpec:
    count: int = 2000
    len: int = 4
    step: int = 2
    shard_size: int = 0          # 0: one shard
    random_start: bool = True


@dataclass
class EvalSpec:
    checkpoint: str = ""
    shards: list[str] = field(default_factory=list)
    all_perms: bool = True
    cap: int = 24


@dataclass
class HeatmapSpec:
    checkpoint: str = ""
    shards: list[str] = field(default_factory=list)
    tags: list[str] = field(default_factory=list)   # empty: every tap
    index: int = 0
    sequences: int = 50
    dilation: float = 2.0
    csv: bool = True


@dataclass
class BenchSpec:
    n: list[int] = field(default_factory=lambda: [2, 3, 4, 5, 6])
    channels: int = 64
    size: int = 28
    repeats: int = 20


@dataclass
class ExtractSpec:
    frames: str = ""
    len: int = 4
    step: int = 1
    energy_min: float = 0.0


@dataclass
class AblateSpec:
    modes: list[str] = field(default_factory=lambda: ["signed", "magnitude", "windowed:0", "windowed:1",
                                                      "windowed:2", "windowed:n", "disabled"])
    test_shards: list[str] = field(default_factory=list)


SECTIONS = {"scene": SpriteSceneConfig, "data": DataSpec, "train": TrainConfig, "eval": EvalSpec,
            "heatmap": HeatmapSpec, "bench": BenchSpec, "extract": ExtractSpec, "ablate": AblateSpec}


@dataclass
class RunConfig:
    task: str
    seed: int = 0
    sequential: bool = False
    resume: str = ""
    scene: SpriteSceneConfig = field(default_factory=SpriteSceneConfig)
    data: DataSpec = field(default_factory=DataSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    heatmap: HeatmapSpec = field(default_factory=HeatmapSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)
    extract: ExtractSpec = field(default_factory=ExtractSpec)
    ablate: AblateSpec = field(default_factory=AblateSpec)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if "task" not in d:
            raise ConfigError("config needs a top-level \"task\" key")
        if d["task"] not in TASKS:
            raise ConfigError(f"unknown task {d['task']!r}; expected one of {TASKS}")
        top = {"task", "seed", "sequential", "resume", *SECTIONS}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: d[k] for k in ("task", "seed", "sequential", "resume") if k in d}
        for name, typ in SECTIONS.items():
            if name in d:
                sec = d[name]
                if not isinstance(sec, dict):
                    raise ConfigError(f"section {name!r} must be an object")
                known = {f.name for f in fields(typ)}
                bad = set(sec) - known
                if bad:
                    raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
                try:
                    kw[name] = typ(**sec)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid {name!r} section: {exc}") from exc
        return cls(**kw)

    def to_dict(self) -> dict:
        d = {"task": self.task, "seed": self.seed, "sequential": self.sequential, "resume": self.resume}
        for name in SECTIONS:
            v = getattr(self, name)
            d[name] = v.to_dict() if hasattr(v, "to_dict") else asdict(v)
        return d


def _set(obj, key: str, value) -> None:
    if value is not None:
        setattr(obj, key, value)


def resolve(args: argparse.Namespace) -> RunConfig:
    """Config file (if any), then flag overrides."""
    if args.config:
        try:
            with open(args.config) as f:
                raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from exc
        if raw.get("task", args.task) != args.task:
            raise ConfigError(f"config is for task {raw.get('task')!r}, not {args.task!r}")
        raw.setdefault("task", args.task)
        cfg = RunConfig.from_dict(raw)
    else:
        cfg = RunConfig(task=args.task)
    _set(cfg, "seed", args.seed)
    if args.sequential:
        cfg.sequential = True
    _set(cfg, "resume", getattr(args, "resume", None))
    t = args.task
    if t == "gen-data":
        _set(cfg.data, "count", args.count)
        _set(cfg.data, "len", args.len)
        _set(cfg.data, "step", args.step)
        _set(cfg.data, "shard_size", args.shard_size)
    elif t == "extract":
        _set(cfg.extract, "frames", args.frames)
        _set(cfg.extract, "len", args.len)
        _set(cfg.extract, "step", args.step)
        _set(cfg.extract, "energy_min", args.energy_min)
    elif t in ("train", "ablate"):
        if args.shards:
            cfg.train.train_shards = list(args.shards)
        _set(cfg.train, "epochs", args.epochs)
        _set(cfg.train, "dab", getattr(args, "dab", None))
        _set(cfg.train, "perm_cap", args.perm_cap)
        _set(cfg.train, "seq_len", args.len)
        _set(cfg.train, "preset", args.preset)
        _set(cfg.train, "batch_size", args.batch_size)
        cfg.train.seed = cfg.seed
        if t == "ablate":
            if args.test_shards:
                cfg.ablate.test_shards = list(args.test_shards)
            if args.modes:
                cfg.ablate.modes = list(args.modes)
    elif t == "eval":
        _set(cfg.eval, "checkpoint", args.checkpoint)
        if args.shards:
            cfg.eval.shards = list(args.shards)
        _set(cfg.eval, "cap", args.cap)
        if args.sample_perms:
            cfg.eval.all_perms = False
    elif t == "heatmap":
        _set(cfg.heatmap, "checkpoint", args.checkpoint)
        if args.shards:
            cfg.heatmap.shards = list(args.shards)
        if args.tags:
            cfg.heatmap.tags = list(args.tags)
        _set(cfg.heatmap, "index", args.index)
        _set(cfg.heatmap, "sequences", args.sequences)
    elif t == "bench":
        if args.n:
            cfg.bench.n = list(args.n)
        _set(cfg.bench, "channels", args.channels)
        _set(cfg.bench, "size", args.size)
        _set(cfg.bench, "repeats", args.repeats)
    return cfg


def out_dir(args: argparse.Namespace) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("SEQDAB_OUT", "runs")) / args.task


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    d = cfg.data
    if d.count < 0:
        raise ConfigError("--count must be >= 0")
    if d.count == 0:
        hdr = write_shard([], out / "shard-00000.dsq", header_dims=(d.len, cfg.scene.height, cfg.scene.width))
        save_boxes(out / "shard-00000.dsq", np.zeros((0, d.len, cfg.scene.sprites, 4), np.float32))
        print(f"wrote 0 sequences to {out}")
        return EXIT_OK
    try:
        seqs = synthetic_set(cfg.scene, d.count, cfg.seed, d.len, d.step, d.random_start)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    samples = samples_from_set(seqs, cfg.seed)
    size = d.shard_size or d.count
    paths = []
    for k, s in enumerate(range(0, d.count, size)):
        p = out / f"shard-{k:05d}.dsq"
        write_shard(samples[s:s + size], p)
        save_boxes(p, seqs.boxes[s:s + size])
        paths.append(p)
    print(f"wrote {d.count} sequences in {len(paths)} shard(s) to {out}")
    return EXIT_OK


def cmd_extract(cfg: RunConfig, out: Path) -> int:
    e = cfg.extract
    if not e.frames:
        raise ConfigError("extract needs --frames")
    wins: list[ExtractedWindow] = extract_sequences(e.frames, e.len, e.step, e.energy_min)
    print(f"{len(wins)} windows")
    if wins:
        samples = [shuffle_and_label(w.frames, seed=cfg.seed * 100003 + i, source=f"{w.source}@{w.start}", step=w.step)
                   for i, w in enumerate(wins)]
        write_shard(samples, out / "extracted.dsq")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    tc = cfg.train
    if not tc.train_shards:
        raise ConfigError("train needs --shards")
    seqs = _load_set(tc.train_shards)
    if seqs.n != tc.seq_len:
        raise ConfigError(f"shards hold n={seqs.n} sequences but seq_len={tc.seq_len}")
    resume = load_checkpoint(cfg.resume) if cfg.resume else None
    try:
        res = fit(tc, seqs, out_dir=out, metrics_path=out / "metrics.jsonl", resume=resume)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    last = res.history[-1] if res.history else {}
    print(json.dumps(last))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    e = cfg.eval
    if not e.checkpoint or not e.shards:
        raise ConfigError("eval needs --checkpoint and --shards")
    net = restore_network(load_checkpoint(e.checkpoint))
    lines = []
    for shard in e.shards:
        seqs = _load_set([shard])
        try:
            m = evaluate(net, seqs, e.all_perms, crop=net.cfg.input_size, cap=e.cap, seed=cfg.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        lines.append({"shard": Path(shard).name, "step": seqs.step, **m.to_dict()})
    with open(out / "metrics.jsonl", "w") as f:
        for rec in lines:
            f.write(json.dumps(rec) + "\n")
            print(json.dumps(rec))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    from .gradcheck import run_suite
    results = run_suite(cfg.seed)
    with open(out / "gradcheck.txt", "w") as f:
        for r in results:
            print(r.line())
            f.write(r.line() + "\n")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_heatmap(cfg: RunConfig, out: Path) -> int:
    from . import heatmap as H
    h = cfg.heatmap
    if not h.checkpoint or not h.shards:
        raise ConfigError("heatmap needs --checkpoint and --shards")
    net = restore_network(load_checkpoint(h.checkpoint))
    seqs = _load_set(h.shards)
    if not 0 <= h.index < len(seqs):
        raise ConfigError(f"--index {h.index} out of range for {len(seqs)} sequences")
    tags = h.tags or None
    try:
        groups = H.progression(net, seqs.frames[h.index], tags)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    size = (net.cfg.input_size, net.cfg.input_size)
    paths = H.export_progression(groups, out / "maps", size)
    print(f"wrote {len(paths)} heat maps to {out / 'maps'}")
    if h.csv and seqs.boxes is not None:
        k = min(h.sequences, len(seqs))
        rep = H.localization(net, seqs.subset(range(k)), tags, h.dilation)
        rep.write_csv(out / "localization.csv")
        for t in rep.tags:
            print(f"{t}: mean heat fraction in boxes {rep.mean(t):.4f}")
    return EXIT_OK


def bench(ns, channels: int, size: int, repeats: int, seed: int = 0) -> list[dict]:
    """Best-of-``repeats`` wall time of the naive pairwise loop vs the suffix-sum path."""
    rng = np.random.default_rng(seed)
    rows = []
    cfg = D.DabConfig("signed")
    for n in ns:
        x = rng.standard_normal((channels, n, size, size)).astype(np.float32)
        tn, tf = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            D.dab_forward(x, cfg)
            t1 = time.perf_counter()
            D.dab_forward_fast(x, cfg)
            t2 = time.perf_counter()
            tn.append(t1 - t0)
            tf.append(t2 - t1)
        rows.append({"n": n, "naive_ms": 1e3 * min(tn), "fast_ms": 1e3 * min(tf),
                     "speedup": min(tn) / min(tf)})
    return rows


def cmd_bench(cfg: RunConfig, out: Path) -> int:
    b = cfg.bench
    rows = bench(b.n, b.channels, b.size, b.repeats, cfg.seed)
    with open(out / "bench.csv", "w", newline="") as f:
        wr = csv.DictWriter(f, ["n", "naive_ms", "fast_ms", "speedup"])
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    print(f"{'n':>3} {'naive ms':>10} {'fast ms':>10} {'speedup':>8}")
    for r in rows:
        print(f"{r['n']:>3} {r['naive_ms']:>10.3f} {r['fast_ms']:>10.3f} {r['speedup']:>7.2f}x")
    return EXIT_OK


def ablation_modes(tokens, n: int) -> list[D.DabConfig]:
    modes = []
    for tok in tokens:
        if tok.startswith("windowed"):
            _, _, m = tok.partition(":")
            modes.append(D.DabConfig("windowed", n if m == "n" else int(m)))
        else:
            modes.append(D.DabConfig(tok))
    return modes


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    tc = cfg.train
    if not tc.train_shards or not cfg.ablate.test_shards:
        raise ConfigError("ablate needs --shards and --test-shards")
    train_set = _load_set(tc.train_shards)
    heldout_set = _load_set(cfg.ablate.test_shards)
    if train_set.n != tc.seq_len or heldout_set.n != tc.seq_len:
        raise ConfigError(f"shards must hold n={tc.seq_len} sequences")
    try:
        modes = ablation_modes(cfg.ablate.modes, tc.seq_len)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = []
    for mode in modes:
        run = TrainConfig.from_dict({**tc.to_dict(), "dab": mode.label()})
        sub = out / mode.label().replace(":", "_")
        res = fit(run, train_set, out_dir=sub, metrics_path=sub / "metrics.jsonl")
        m = evaluate(res.best, heldout_set, all_perms=True, crop=tc.crop)
        rows.append({"mode": mode.mode, "m": "" if mode.m is None else mode.m, "accuracy": f"{m.accuracy:.6f}"})
        print(f"{mode.label():>12}  accuracy {m.accuracy:.4f}")
    with open(out / "ablation.csv", "w", newline="") as f:
        wr = csv.DictWriter(f, ["mode", "m", "accuracy"])
        wr.writeheader()
        wr.writerows(rows)
    return EXIT_OK


def _load_set(paths) -> SequenceSet:
    for p in paths:
        read_header(p)
    return SequenceSet.from_shards(list(paths))


COMMANDS = {"gen-data": cmd_gen_data, "extract": cmd_extract, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "heatmap": cmd_heatmap, "bench": cmd_bench, "ablate": cmd_ablate}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seqdab", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="task", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config with a \"task\" key")
        p.add_argument("--out", help="output directory (default $SEQDAB_OUT/<task>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--sequential", action="store_true", help="single worker, bit-reproducible")
        return p

    p = common(sub.add_parser("gen-data", help="generate synthetic sprite-sequence shards"))
    p.add_argument("--count", type=int)
    p.add_argument("--len", type=int)
    p.add_argument("--step", type=int)
    p.add_argument("--shard-size", type=int)

    p = common(sub.add_parser("extract", help="cut evenly spaced windows from a frame directory"))
    p.add_argument("--frames")
    p.add_argument("--len", type=int)
    p.add_argument("--step", type=int)
    p.add_argument("--energy-min", type=float)

    for name, hlp in (("train", "train a network"), ("ablate", "train and test every DAB mode")):
        p = common(sub.add_parser(name, help=hlp))
        p.add_argument("--shards", nargs="+")
        p.add_argument("--epochs", type=int)
        p.add_argument("--perm-cap", type=int)
        p.add_argument("--len", type=int)
        p.add_argument("--preset")
        p.add_argument("--batch-size", type=int)
        if name == "train":
            p.add_argument("--dab", help="signed | magnitude | disabled | windowed:M")
            p.add_argument("--resume", help="checkpoint to continue from")
        else:
            p.add_argument("--test-shards", nargs="+")
            p.add_argument("--modes", nargs="+")

    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--shards", nargs="+")
    p.add_argument("--sample-perms", action="store_true", help="use --cap random orders instead of all n!")
    p.add_argument("--cap", type=int)

    common(sub.add_parser("gradcheck", help="finite-difference gradient suite"))

    p = common(sub.add_parser("heatmap", help="export motion heat maps"))
    p.add_argument("--checkpoint")
    p.add_argument("--shards", nargs="+")
    p.add_argument("--tags", nargs="+")
    p.add_argument("--index", type=int)
    p.add_argument("--sequences", type=int)

    p = common(sub.add_parser("bench", help="naive vs fast DAB timing"))
    p.add_argument("--n", type=int, nargs="+")
    p.add_argument("--channels", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--repeats", type=int)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w") as f:
            json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        if cfg.sequential:
            # a single intra-op thread fixes the floating-point reduction order
            torch.set_num_threads(1)
        return COMMANDS[args.task](cfg, out)
    except (ShardFormatError, CheckpointFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AssertionError, FloatingPointError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
