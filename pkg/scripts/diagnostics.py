"""Follow-up experiments for the two ablations whose direction does not show
up under the acceptance budget. Results go to ``results/diagnostics``.

    python scripts/diagnostics.py window   # n=5 window arms, 3x the epochs
    python scripts/diagnostics.py camera   # localization with strong camera motion

About two hours for ``window`` and 25 minutes for ``camera`` on one core.
"""

import argparse
import dataclasses
import json
import logging
from pathlib import Path

from seqdab.data import synthetic_set
from seqdab.experiments import ACCEPT_SCENE, RUNS, TEST_SEED, TRAIN_SEED, ensure_trained, heldout_set
from seqdab.heatmap import localization
from seqdab.trainer import evaluate, fit, restore_network


def window(root: Path) -> None:
    seqs = heldout_set(5, count=50)
    rows = []
    for m in (1, 2, 5):
        base = RUNS[f"n5-windowed-{m}"]
        run = dataclasses.replace(base, name=f"n5-windowed-{m}-long", epochs=3 * base.epochs)
        ckpt = ensure_trained(run, root)
        acc = evaluate(ckpt, seqs, all_perms=True).accuracy
        rows.append({"m": m, "epochs": run.epochs, "accuracy": acc,
                     "val_curve": [h["val_accuracy"] for h in ckpt.meta["history"]]})
        print(f"m={m}: {run.epochs} epochs, test accuracy {acc:.4f}", flush=True)
    (root / "window.json").write_text(json.dumps(rows, indent=2))


def camera(root: Path, jitter: float = 1.0) -> None:
    scene = dataclasses.replace(ACCEPT_SCENE, camera_jitter=jitter)
    base = RUNS["n4-signed"]
    out = root / f"camera-{jitter:g}"
    out.mkdir(parents=True, exist_ok=True)
    cfg = base.train_config()
    res = fit(cfg, synthetic_set(scene, base.count, TRAIN_SEED, 4, base.step), out_dir=out,
              metrics_path=out / "metrics.jsonl")
    test = synthetic_set(scene, 50, TEST_SEED, 4, base.step)
    net = restore_network(res.best)
    rep = localization(net, test)
    rep.write_csv(out / "localization.csv")
    summary = {"camera_jitter": jitter, "test_accuracy": evaluate(net, test, all_perms=True).accuracy,
               **{t: rep.mean(t) for t in rep.tags}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary), flush=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("which", choices=["window", "camera"], nargs="+")
    ap.add_argument("--root", default="results/diagnostics")
    ap.add_argument("--jitter", type=float, default=1.0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    if "camera" in args.which:
        camera(root, args.jitter)
    if "window" in args.which:
        window(root)


if __name__ == "__main__":
    main()
