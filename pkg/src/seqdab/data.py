"""Sequence samples: synthetic sprite scenes, frame-directory ingestion,
augmentation, normalization and the binary shard format."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import perm as P

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

DESK_SCALE, DESK_CROP = 40, 32
PAPER_SCALE, PAPER_CROP = 136, 112

FRAME_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


@dataclass
class SequenceSample:
    """``frames`` is ``(3, n, H, W)`` in presentation order; position ``j`` shows
    the frame whose capture rank is ``perm[j]``."""

    frames: np.ndarray
    perm: tuple[int, ...]
    source: str = ""
    step: int = 1
    crop: tuple[int, int] = (0, 0)
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.frames.shape[1]

    @property
    def label(self) -> int:
        return P.encode(self.perm)

    def ordered(self) -> np.ndarray:
        """Frames sorted back into capture order."""
        return self.frames[:, list(P.inverse(self.perm))]


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SpriteSceneConfig:
    height: int = 40
    width: int = 40
    frames: int = 7
    sprites: int = 1
    shapes: tuple[str, ...] = ("disc", "rect")
    size: tuple[float, float] = (3.0, 5.0)
    speed: tuple[float, float] = (1.0, 2.0)
    direction: float | None = None     # radians; None draws a uniform heading per sprite
    accel_std: float = 0.0
    texture_scale: float = 3.0
    texture_contrast: float = 0.25
    camera_jitter: float = 0.0
    noise_std: float = 0.0
    margin: int = 1

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.size = tuple(self.size)
        self.speed = tuple(self.speed)
        if not 1 <= self.sprites <= 3:
            raise ValueError(f"sprite count must be 1..3, got {self.sprites}")
        if any(s not in ("disc", "rect") for s in self.shapes) or not self.shapes:
            raise ValueError(f"shapes must be drawn from ('disc', 'rect'), got {self.shapes}")
        if self.frames < 1 or self.height < 4 or self.width < 4:
            raise ValueError("scene needs at least one frame and a 4x4 canvas")
        if self.size[0] <= 0 or self.size[1] < self.size[0] or self.speed[1] < self.speed[0] or self.speed[0] < 0:
            raise ValueError("size/speed ranges must be (lo, hi) with 0 <= lo <= hi")

    @classmethod
    def from_dict(cls, d: dict) -> "SpriteSceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class SyntheticVideo:
    frames: np.ndarray      # (T, H, W) grayscale in [0, 1]
    boxes: np.ndarray       # (T, sprites, 4) as (x0, y0, x1, y1), image coordinates
    source: str


def _texture(rng: np.random.Generator, h: int, w: int, scale: float, contrast: float) -> np.ndarray:
    noise = rng.normal(size=(h, w))
    if scale > 0:
        noise = ndimage.gaussian_filter(noise, scale, mode="wrap")
    noise -= noise.mean()
    peak = np.abs(noise).max()
    if peak > 0:
        noise /= peak
    return 0.5 + contrast * noise


def _sprite_mask(kind: str, cx: float, cy: float, half: tuple[float, float], yy, xx) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] (one-pixel soft edge)."""
    if kind == "disc":
        dist = np.hypot(xx - cx, yy - cy)
        return np.clip(half[0] + 0.5 - dist, 0.0, 1.0)
    ax = np.clip(half[0] + 0.5 - np.abs(xx - cx), 0.0, 1.0)
    ay = np.clip(half[1] + 0.5 - np.abs(yy - cy), 0.0, 1.0)
    return ax * ay


def _one_video(cfg: SpriteSceneConfig, rng: np.random.Generator, source: str, max_tries: int = 2000) -> SyntheticVideo:
    H, W, Tn = cfg.height, cfg.width, cfg.frames
    pad = int(np.ceil(3 * cfg.camera_jitter * np.sqrt(Tn))) + 1 if cfg.camera_jitter > 0 else 0
    bg_full = _texture(rng, H + 2 * pad, W + 2 * pad, cfg.texture_scale, cfg.texture_contrast)

    steps = rng.normal(0.0, cfg.camera_jitter, size=(Tn, 2)) if cfg.camera_jitter > 0 else np.zeros((Tn, 2))
    steps[0] = 0.0
    cam = np.clip(np.round(np.cumsum(steps, axis=0)), -pad, pad).astype(int)

    sprites = []
    for _ in range(cfg.sprites):
        for _try in range(max_tries):
            kind = cfg.shapes[rng.integers(len(cfg.shapes))]
            r = rng.uniform(*cfg.size)
            half = (r, r) if kind == "disc" else (r, rng.uniform(cfg.size[0], cfg.size[1]))
            speed = rng.uniform(*cfg.speed)
            angle = rng.uniform(0, 2 * np.pi) if cfg.direction is None else cfg.direction
            vel = np.array([np.cos(angle), np.sin(angle)]) * speed
            lo = np.array([half[0], half[1]]) + cfg.margin
            hi = np.array([W - 1 - half[0], H - 1 - half[1]]) - cfg.margin
            if np.any(hi < lo):
                continue
            pos = rng.uniform(lo, hi)
            track = np.empty((Tn, 2))
            for t in range(Tn):
                track[t] = pos
                if cfg.accel_std > 0:
                    vel = vel + rng.normal(0.0, cfg.accel_std, size=2)
                pos = pos + vel
            img = track - cam[:, ::-1]  # camera (dy, dx) -> image (x, y)
            if np.all(img >= lo) and np.all(img <= hi):
                intensity = rng.uniform(0.85, 1.0) if rng.random() < 0.5 else rng.uniform(0.0, 0.15)
                sprites.append((kind, half, img, intensity))
                break
        else:
            raise ValueError(f"sprite cannot fit a {H}x{W} canvas over {Tn} frames; lower speed or size")

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    frames = np.empty((Tn, H, W), dtype=np.float32)
    boxes = np.empty((Tn, cfg.sprites, 4), dtype=np.float32)
    for t in range(Tn):
        dy, dx = cam[t]
        img = bg_full[pad + dy: pad + dy + H, pad + dx: pad + dx + W].copy()
        for s, (kind, half, track, intensity) in enumerate(sprites):
            cx, cy = track[t]
            a = _sprite_mask(kind, cx, cy, half, yy, xx)
            img = img * (1 - a) + intensity * a
            boxes[t, s] = (cx - half[0], cy - half[1], cx + half[0], cy + half[1])
        if cfg.noise_std > 0:
            img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
        frames[t] = np.clip(img, 0.0, 1.0)
    return SyntheticVideo(frames, boxes, source)


def gen_synthetic(cfg: SpriteSceneConfig, count: int, seed: int, prefix: str = "syn") -> list[SyntheticVideo]:
    """``count`` videos; video ``i`` draws from its own generator seeded ``(seed, i)``."""
    return [_one_video(cfg, np.random.default_rng([seed, i]), f"{prefix}{seed}-{i:06d}") for i in range(count)]


def to_rgb(gray: np.ndarray) -> np.ndarray:
    """``(T, H, W)`` grayscale -> ``(3, T, H, W)``."""
    return np.repeat(gray[None], 3, axis=0)


def window(video: SyntheticVideo, n: int, step: int, start: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Frames ``start, start+step, ...`` as ``(3, n, H, W)`` plus their boxes ``(n, sprites, 4)``."""
    idx = start + step * np.arange(n)
    if idx[-1] >= len(video.frames):
        raise ValueError(f"window needs {(n - 1) * step + 1 + start} frames, video has {len(video.frames)}")
    return to_rgb(video.frames[idx]), video.boxes[idx]


# ---------------------------------------------------------------------------
# ingestion of frame directories


def load_frame(path: str | os.PathLike) -> np.ndarray:
    """One PNG/PPM/PGM image as ``(3, H, W)`` float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
                return np.repeat(arr[None], 3, axis=0)
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            return arr.transpose(2, 0, 1).copy()
    except (OSError, SyntaxError) as exc:
        raise OSError(f"cannot read frame {path}: {exc}") from exc


def list_frames(frame_dir: str | os.PathLike) -> list[Path]:
    d = Path(frame_dir)
    if not d.is_dir():
        raise OSError(f"frame directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def motion_energy(frames) -> float:
    """Mean over adjacent pairs of the mean absolute pixel difference.

    ``frames`` is indexed by time on its first axis: ``(T, ...)``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 2:
        raise ValueError("motion energy needs at least two frames")
    return float(np.mean([np.abs(frames[t + 1] - frames[t]).mean() for t in range(frames.shape[0] - 1)]))


@dataclass
class ExtractedWindow:
    frames: np.ndarray   # (3, n, H, W), capture order
    start: int
    step: int
    energy: float
    source: str


def extract_sequences(frame_dir: str | os.PathLike, n: int, step: int, energy_min: float = 0.0) -> list[ExtractedWindow]:
    """Every evenly spaced window ``(t, t+step, ..., t+(n-1)step)`` whose motion
    energy reaches ``energy_min``."""
    if n < 2 or step < 1:
        raise ValueError(f"need n >= 2 and step >= 1, got n={n}, step={step}")
    paths = list_frames(frame_dir)
    need = (n - 1) * step + 1
    if len(paths) < need:
        raise ValueError(f"{len(paths)} frames in {frame_dir}; length {n} at step {step} needs {need}")
    frames = np.stack([load_frame(p) for p in paths])  # (T, 3, H, W)
    source = Path(frame_dir).name
    out = []
    for t in range(len(paths) - need + 1):
        idx = t + step * np.arange(n)
        seq = frames[idx]
        e = motion_energy(seq)
        if e < energy_min or (energy_min > 0 and e == 0.0):
            continue
        out.append(ExtractedWindow(seq.transpose(1, 0, 2, 3).copy(), t, step, e, source))
    return out


# ---------------------------------------------------------------------------
# labeling, augmentation, normalization


def shuffle_and_label(ordered: np.ndarray, perm=None, seed: int | None = None, source: str = "", step: int = 1) -> SequenceSample:
    """Present capture-ordered frames ``(3, n, H, W)`` under ``perm`` (or a seeded random one)."""
    n = ordered.shape[1]
    if perm is None:
        rng = np.random.default_rng(seed)
        perm = tuple(int(v) for v in rng.permutation(n))
    perm = tuple(int(v) for v in perm)
    if len(perm) != n:
        raise ValueError(f"permutation of length {len(perm)} for {n} frames")
    P.encode(perm)
    return SequenceSample(ordered[:, list(perm)], perm, source, step, seed=seed)


def _resize_shorter(frames: np.ndarray, target: int) -> np.ndarray:
    h, w = frames.shape[-2:]
    short = min(h, w)
    if short == target:
        return frames
    f = target / short
    nh, nw = max(target, int(round(h * f))), max(target, int(round(w * f)))
    return ndimage.zoom(frames, (1, 1, nh / h, nw / w), order=1)


def center_offsets(h: int, w: int, crop: int) -> tuple[int, int]:
    return (h - crop) // 2, (w - crop) // 2


def augment(sample: SequenceSample, seed=None, train_mode: bool = True,
            scale: int = DESK_SCALE, crop: int = DESK_CROP) -> SequenceSample:
    """Rescale shorter edge to ``scale`` (train), crop ``crop x crop``; one
    offset for all frames. ``seed`` may be an int or a numpy Generator."""
    frames = sample.frames
    if train_mode:
        frames = _resize_shorter(frames, scale)
    h, w = frames.shape[-2:]
    if h < crop or w < crop:
        raise ValueError(f"frame {h}x{w} is smaller than the {crop}x{crop} crop")
    if train_mode:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        oy, ox = int(rng.integers(h - crop + 1)), int(rng.integers(w - crop + 1))
    else:
        oy, ox = center_offsets(h, w, crop)
    out = frames[:, :, oy:oy + crop, ox:ox + crop]
    return replace(sample, frames=out, crop=(oy, ox))


def normalize(sample_or_frames):
    """Per-channel ``(x - mean) / std`` with the ImageNet constants."""
    if isinstance(sample_or_frames, SequenceSample):
        return replace(sample_or_frames, frames=normalize(sample_or_frames.frames))
    x = np.asarray(sample_or_frames, dtype=np.float32)
    # channels precede (n, H, W)
    c_axis = x.ndim - 4
    bshape = [1] * x.ndim
    bshape[c_axis] = 3
    return (x - IMAGENET_MEAN.reshape(bshape)) / IMAGENET_STD.reshape(bshape)


# ---------------------------------------------------------------------------
# shards

SHARD_MAGIC = b"DSQ1"
SHARD_VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHIIIIIB")


class ShardFormatError(ValueError):
    pass


@dataclass
class ShardHeader:
    count: int
    n: int
    height: int
    width: int
    channels: int = 3
    dtype: int = DTYPE_F32
    version: int = SHARD_VERSION

    def pack(self) -> bytes:
        return _HEADER.pack(SHARD_MAGIC, self.version, self.count, self.n, self.height, self.width,
                            self.channels, self.dtype)

    @classmethod
    def unpack(cls, raw: bytes) -> "ShardHeader":
        if len(raw) < _HEADER.size:
            raise ShardFormatError("truncated shard header")
        magic, version, count, n, h, w, c, dt = _HEADER.unpack(raw[:_HEADER.size])
        if magic != SHARD_MAGIC:
            raise ShardFormatError(f"bad shard magic {magic!r}")
        if version != SHARD_VERSION:
            raise ShardFormatError(f"unsupported shard version {version}")
        if dt != DTYPE_F32:
            raise ShardFormatError(f"unsupported dtype tag {dt}")
        return cls(count, n, h, w, c, dt, version)


def index_path(path) -> Path:
    return Path(str(path) + ".idx.jsonl")


def write_shard(samples: Iterable[SequenceSample], path, header_dims: tuple[int, int, int] | None = None) -> ShardHeader:
    """Stream samples to ``path`` plus a JSON-lines sidecar index.

    ``header_dims`` = ``(n, H, W)`` is required only for an empty shard.
    """
    path = Path(path)
    header = None
    count = 0
    with open(path, "wb") as f, open(index_path(path), "w") as idx:
        f.write(b"\0" * _HEADER.size)
        for s in samples:
            c, n, h, w = s.frames.shape
            if header is None:
                header = ShardHeader(0, n, h, w, c)
            elif (n, h, w, c) != (header.n, header.height, header.width, header.channels):
                raise ValueError(f"sample {count} has shape {s.frames.shape}, shard is "
                                 f"({header.channels}, {header.n}, {header.height}, {header.width})")
            offset = f.tell()
            src = s.source.encode("utf-8")
            f.write(struct.pack("<I", s.label))
            f.write(bytes(s.perm))
            f.write(struct.pack("<H", len(src)))
            f.write(src)
            f.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
            idx.write(json.dumps({"i": count, "offset": offset, "label": s.label, "source": s.source,
                                  "step": s.step}) + "\n")
            count += 1
        if header is None:
            if header_dims is None:
                header_dims = (2, 1, 1)
            header = ShardHeader(0, *header_dims)
        header.count = count
        f.seek(0)
        f.write(header.pack())
    return header


def read_header(path) -> ShardHeader:
    with open(path, "rb") as f:
        return ShardHeader.unpack(f.read(_HEADER.size))


def _read_exact(f, k: int, what: str) -> bytes:
    raw = f.read(k)
    if len(raw) != k:
        raise ShardFormatError(f"truncated shard while reading {what}")
    return raw


def iter_shard(path) -> Iterator[SequenceSample]:
    """Yield samples one at a time without loading the whole shard."""
    with open(path, "rb") as f:
        header = ShardHeader.unpack(f.read(_HEADER.size))
        n = header.n
        payload = header.channels * n * header.height * header.width * 4
        step_of = {}
        ip = index_path(path)
        if ip.exists():
            with open(ip) as idx:
                for line in idx:
                    rec = json.loads(line)
                    step_of[rec["i"]] = rec.get("step", 1)
        for i in range(header.count):
            label, = struct.unpack("<I", _read_exact(f, 4, f"sample {i} label"))
            perm = tuple(_read_exact(f, n, f"sample {i} permutation"))
            slen, = struct.unpack("<H", _read_exact(f, 2, f"sample {i} source length"))
            source = _read_exact(f, slen, f"sample {i} source").decode("utf-8")
            frames = np.frombuffer(_read_exact(f, payload, f"sample {i} frames"), dtype="<f4")
            frames = frames.reshape(header.channels, n, header.height, header.width).astype(np.float32)
            try:
                expect = P.encode(perm)
            except ValueError as exc:
                raise ShardFormatError(f"sample {i}: corrupt permutation {perm}") from exc
            if expect != label:
                raise ShardFormatError(f"sample {i}: label {label} does not match permutation {perm}")
            yield SequenceSample(frames, perm, source, step_of.get(i, 1))
        if f.read(1):
            raise ShardFormatError("trailing bytes after the last sample")


def read_shard(path) -> list[SequenceSample]:
    return list(iter_shard(path))


# ---------------------------------------------------------------------------
# in-memory sequence sets


@dataclass
class SequenceSet:
    """Capture-ordered sequences ``(N, 3, n, H, W)`` with their provenance."""

    frames: np.ndarray
    sources: list[str]
    step: int = 1
    boxes: np.ndarray | None = None   # (N, n, sprites, 4), capture order

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def n(self) -> int:
        return self.frames.shape[2]

    def subset(self, idx) -> "SequenceSet":
        idx = np.asarray(idx, dtype=int)
        return SequenceSet(self.frames[idx], [self.sources[i] for i in idx], self.step,
                           None if self.boxes is None else self.boxes[idx])

    @classmethod
    def from_samples(cls, samples: Sequence[SequenceSample], boxes=None) -> "SequenceSet":
        if not samples:
            raise ValueError("no samples")
        frames = np.stack([s.ordered() for s in samples]).astype(np.float32)
        return cls(frames, [s.source for s in samples], samples[0].step, boxes)

    @classmethod
    def from_shards(cls, paths) -> "SequenceSet":
        samples, boxes = [], []
        for p in ([paths] if isinstance(paths, (str, Path)) else paths):
            samples += read_shard(p)
            b = load_boxes(p)
            boxes.append(b)
        has_boxes = all(b is not None for b in boxes)
        return cls.from_samples(samples, np.concatenate(boxes) if has_boxes and boxes else None)


def synthetic_set(cfg: SpriteSceneConfig, count: int, seed: int, n: int, step: int,
                  random_start: bool = True) -> SequenceSet:
    """Generate ``count`` videos and cut one step-spaced window from each."""
    videos = gen_synthetic(cfg, count, seed)
    frames, boxes, sources = [], [], []
    span = (n - 1) * step + 1
    for i, v in enumerate(videos):
        last = len(v.frames) - span
        if last < 0:
            raise ValueError(f"videos of {len(v.frames)} frames cannot hold length {n} at step {step}")
        start = int(np.random.default_rng([seed, i, 1]).integers(last + 1)) if random_start else 0
        f, b = window(v, n, step, start)
        frames.append(f)
        boxes.append(b)
        sources.append(v.source)
    return SequenceSet(np.stack(frames), sources, step, np.stack(boxes))


def samples_from_set(seqs: SequenceSet, seed: int) -> list[SequenceSample]:
    """One seeded random presentation order per sequence (shard payloads)."""
    return [shuffle_and_label(seqs.frames[i], seed=_mix(seed, i), source=seqs.sources[i], step=seqs.step)
            for i in range(len(seqs))]


def _mix(seed: int, i: int) -> int:
    return int(np.random.default_rng([seed, i, 2]).integers(2**31))


def boxes_path(path) -> Path:
    return Path(str(path) + ".boxes.json")


def save_boxes(path, boxes: np.ndarray) -> None:
    with open(boxes_path(path), "w") as f:
        json.dump({"shape": list(boxes.shape), "boxes": np.round(boxes.astype(float), 4).tolist()}, f)


def load_boxes(path) -> np.ndarray | None:
    bp = boxes_path(path)
    if not bp.exists():
        return None
    with open(bp) as f:
        d = json.load(f)
    return np.asarray(d["boxes"], dtype=np.float32).reshape(d["shape"])


def group_split(sources: Sequence[str], fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split indices so that every source id lands entirely on one side."""
    groups = sorted(set(sources))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(groups))
    k = int(round(fraction * len(groups)))
    if fraction > 0 and len(groups) > 1:
        k = min(max(k, 1), len(groups) - 1)
    held = {groups[j] for j in order[:k]}
    a = np.array([i for i, s in enumerate(sources) if s not in held], dtype=int)
    b = np.array([i for i, s in enumerate(sources) if s in held], dtype=int)
    return a, b
