"""Export the heat-map progression (stem -> last stage) of the cached n=4
signed network on a few held-out sprite sequences, and print the
box-localization score of every tapped layer.

    python scripts/heatmap_demo.py [--root results/acceptance] [--out results/heatmaps]
"""

import argparse
from pathlib import Path

from seqdab.experiments import RUNS, ensure_trained, heldout_set
from seqdab.heatmap import export_progression, localization, progression
from seqdab.trainer import restore_network


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--root", default="results/acceptance")
    ap.add_argument("--out", default="results/heatmaps")
    ap.add_argument("--sequences", type=int, default=3)
    ap.add_argument("--upscale", type=int, default=128)
    args = ap.parse_args()

    net = restore_network(ensure_trained(RUNS["n4-signed"], args.root))
    seqs = heldout_set(4, count=50)
    for s in range(args.sequences):
        groups = progression(net, seqs.frames[s])
        paths = export_progression(groups, Path(args.out) / f"seq{s:02d}", (args.upscale, args.upscale))
        print(f"sequence {s}: {len(paths)} maps -> {Path(args.out) / f'seq{s:02d}'}")

    rep = localization(net, seqs)
    rep.write_csv(Path(args.out) / "localization.csv")
    for tag in rep.tags:
        print(f"{tag:>12}: heat mass inside 2x boxes {rep.mean(tag):.3f}")


if __name__ == "__main__":
    main()
