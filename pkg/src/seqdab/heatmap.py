"""Motion heat maps: channel-mean of absolute DAB outputs, exported as PGM.

A heat map for frame ``i`` of a tapped ``F_s`` of shape ``(c, n, h, w)`` is
``H_i(y, x) = mean_ch |F_s[ch, i, y, x]|``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import tensor as T
from .backbone import Network
from .data import IMAGENET_MEAN, IMAGENET_STD, SequenceSet, center_offsets


@dataclass
class HeatMap:
    grid: np.ndarray   # (h_l, w_l), non-negative
    tag: str
    frame: int


class ConstantMapWarning(UserWarning):
    pass


def heat_stack(fs: np.ndarray | None) -> np.ndarray:
    """``(c, n, h, w)`` tap -> ``(n, h, w)`` heat."""
    if fs is None:
        raise KeyError("missing DAB tap")
    fs = np.asarray(fs)
    if fs.ndim != 4:
        raise ValueError(f"tap must be (c, n, h, w), got shape {fs.shape}")
    return np.abs(fs).mean(axis=0)


def compute_heatmap(fs: np.ndarray | None, tag: str = "") -> list[HeatMap]:
    return [HeatMap(g, tag, i) for i, g in enumerate(heat_stack(fs))]


def normalize_maps(maps: Sequence[HeatMap] | np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 255] with one min/max shared across the whole sequence.

    A constant sequence has no contrast to show; it comes back as zeros with a
    warning.
    """
    stack = np.stack([m.grid for m in maps]) if not isinstance(maps, np.ndarray) else maps
    stack = stack.astype(np.float64)
    lo, hi = stack.min(), stack.max()
    if hi == lo:
        warnings.warn("constant heat map; exporting zeros", ConstantMapWarning, stacklevel=2)
        return np.zeros_like(stack)
    return (stack - lo) / (hi - lo) * 255.0


def upscale_bilinear(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resampling: output corners sample input corners exactly."""
    h, w = grid.shape
    H, W = size
    ys = np.linspace(0, h - 1, H) if H > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, W) if W > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(grid.astype(np.float64), [yy, xx], order=1, mode="nearest")


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary (P5) PGM."""
    Image.fromarray(np.clip(np.rint(img), 0, 255).astype(np.uint8), mode="L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def normalize_and_export(maps: Sequence[HeatMap], out_dir, upscale_to: tuple[int, int] | None = None,
                         tag: str | None = None) -> list[Path]:
    """One ``{tag}_{frame:02}.pgm`` per map, normalized jointly then upscaled."""
    if not maps:
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    norm = normalize_maps(maps)
    paths = []
    for m, img in zip(maps, norm):
        if upscale_to is not None:
            img = upscale_bilinear(img, upscale_to)
        p = out_dir / f"{tag or m.tag or 'heat'}_{m.frame:02}.pgm"
        write_pgm(p, img)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# layer-wise progression


def prepare_input(frames: np.ndarray, crop: int) -> np.ndarray:
    """Center-crop and normalize ``(3, n, H, W)`` frames in [0, 1] to a batch of one."""
    h, w = frames.shape[-2:]
    oy, ox = center_offsets(h, w, crop)
    x = frames[:, :, oy:oy + crop, ox:ox + crop]
    x = (x - IMAGENET_MEAN.reshape(3, 1, 1, 1)) / IMAGENET_STD.reshape(3, 1, 1, 1)
    return x[None].astype(np.float32)


def tap_outputs(net: Network, x: np.ndarray, tags: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Eval-mode forward of a ``(b, 3, n, S, S)`` batch; returns DAB outputs per tag."""
    known = net.tap_tags()
    tags = list(known if tags is None else tags)
    unknown = [t for t in tags if t not in known]
    if unknown:
        raise KeyError(f"unknown tap tag(s) {unknown}; available: {known}")
    was_training = net.training
    net.eval()
    net.taps.enable(tags)
    try:
        with T.no_grad():
            net(T.Tensor(x.astype(net.parameters()[0].data.dtype, copy=False)))
        return {t: net.taps.get(t) for t in tags}
    finally:
        net.taps.disable()
        if was_training:
            net.train()


def progression(net_or_ckpt, frames: np.ndarray, tags: Sequence[str] | None = None,
                perm: Sequence[int] | None = None) -> dict[str, list[HeatMap]]:
    """Heat maps of one sequence at each tapped layer (stem, then the last DAB of every stage).

    ``frames`` is ``(3, n, H, W)`` in [0, 1], capture order; ``perm`` optionally
    shuffles the presentation (position ``j`` shows capture rank ``perm[j]``).
    """
    net = net_or_ckpt if isinstance(net_or_ckpt, Network) else _restore(net_or_ckpt)
    if perm is not None:
        frames = frames[:, list(perm)]
    x = prepare_input(frames, net.cfg.input_size)
    taps = tap_outputs(net, x, tags)
    return {t: compute_heatmap(v[0], t) for t, v in taps.items()}


def _restore(ckpt):
    from .trainer import load_checkpoint, restore_network
    if isinstance(ckpt, (str, Path)):
        ckpt = load_checkpoint(ckpt)
    return restore_network(ckpt)


def export_progression(groups: dict[str, list[HeatMap]], out_dir, upscale_to: tuple[int, int] | None) -> list[Path]:
    paths = []
    for tag, maps in groups.items():
        paths += normalize_and_export(maps, out_dir, upscale_to, tag=tag.replace(".", "_"))
    return paths


# ---------------------------------------------------------------------------
# localization metric (synthetic data only)


def box_mask(boxes: np.ndarray, shape: tuple[int, int], offset: tuple[int, int] = (0, 0),
             dilation: float = 2.0) -> np.ndarray:
    """Union of boxes ``(x0, y0, x1, y1)`` scaled by ``dilation`` about their
    centres, shifted by the crop ``offset = (oy, ox)``, rasterized at pixel centres."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    H, W = shape
    oy, ox = offset
    yy, xx = np.mgrid[0:H, 0:W]
    mask = np.zeros((H, W), dtype=bool)
    for x0, y0, x1, y1 in boxes:
        cx, cy = (x0 + x1) / 2 - ox, (y0 + y1) / 2 - oy
        hx, hy = (x1 - x0) / 2 * dilation, (y1 - y0) / 2 * dilation
        mask |= (np.abs(xx - cx) <= hx) & (np.abs(yy - cy) <= hy)
    return mask


def mass_fraction(heat: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-frame share of heat mass inside ``mask``.

    ``heat`` is ``(n, h, w)`` at layer resolution; each cell is spread uniformly
    over the input pixels it covers (block upsampling), which conserves mass.
    """
    n, h, w = heat.shape
    H, W = mask.shape
    if H % h or W % w:
        raise ValueError(f"heat grid {h}x{w} does not tile the {H}x{W} input")
    up = np.repeat(np.repeat(heat, H // h, axis=1), W // w, axis=2)
    total = up.sum(axis=(1, 2))
    inside = (up * mask).sum(axis=(1, 2))
    return np.divide(inside, total, out=np.zeros_like(total, dtype=np.float64), where=total > 0)


@dataclass
class LocalizationReport:
    tags: list[str]
    fractions: dict[str, np.ndarray]   # tag -> (sequences, n)

    def mean(self, tag: str) -> float:
        return float(self.fractions[tag].mean())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["sequence", "tag", "frame", "fraction"])
            for tag in self.tags:
                for s, row in enumerate(self.fractions[tag]):
                    for i, v in enumerate(row):
                        wr.writerow([s, tag, i, f"{v:.6f}"])


def localization(net: Network, seqs: SequenceSet, tags: Sequence[str] | None = None,
                 dilation: float = 2.0, batch_size: int = 16) -> LocalizationReport:
    """Fraction of heat mass inside the dilated sprite boxes (union over the
    sequence's frames), per tapped layer, for every sequence in capture order."""
    if seqs.boxes is None:
        raise ValueError("sequence set carries no sprite boxes")
    tags = list(net.tap_tags() if tags is None else tags)
    crop = net.cfg.input_size
    h, w = seqs.frames.shape[-2:]
    off = center_offsets(h, w, crop)
    fr = {t: [] for t in tags}
    for s in range(0, len(seqs), batch_size):
        idx = range(s, min(s + batch_size, len(seqs)))
        x = np.concatenate([prepare_input(seqs.frames[i], crop) for i in idx])
        taps = tap_outputs(net, x, tags)
        for j, i in enumerate(idx):
            mask = box_mask(seqs.boxes[i], (crop, crop), off, dilation)
            for t in tags:
                fr[t].append(mass_fraction(heat_stack(taps[t][j]), mask))
    return LocalizationReport(tags, {t: np.stack(v) for t, v in fr.items()})
