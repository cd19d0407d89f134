"""Train (or reuse) every network the acceptance suite needs, then print the
headline numbers.

    python scripts/run_acceptance.py [--root results/acceptance] [--only n4-signed ...]

Roughly two hours on one CPU core when nothing is cached.
"""

import argparse
import logging
import time

from seqdab.experiments import RUNS, ensure_trained, heldout_set, train_seconds
from seqdab.trainer import evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--root", default="results/acceptance")
    ap.add_argument("--only", nargs="+", choices=sorted(RUNS))
    ap.add_argument("--no-eval", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    names = args.only or list(RUNS)
    for name in names:
        run = RUNS[name]
        t0 = time.time()
        ckpt = ensure_trained(run, args.root)
        line = f"{name:>14}: trained in {train_seconds(run, args.root) / 60:.1f} min"
        if not args.no_eval:
            seqs = heldout_set(run.n, count=200 if run.n == 4 else 50)
            line += f", test accuracy {evaluate(ckpt, seqs, all_perms=True).accuracy:.4f}"
        print(line + f" ({time.time() - t0:.0f}s this call)", flush=True)


if __name__ == "__main__":
    main()
