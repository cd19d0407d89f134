"""Difference Accumulator Block and the convolutional block built around it.

For per-frame features ``F_c`` with frames ``F_c[0..n-1]`` along axis -3
(0-based here), the signed block computes::

    F_s[i] = sum_{k=i+1}^{n-1} (F_c[i] - F_c[k])      for i < n-1
    F_s[n-1] = F_c[n-1]

``magnitude`` accumulates ``|F_c[i] - F_c[k]|`` instead, ``windowed`` limits
``k`` to ``i..min(i+m, n-1)`` and ``disabled`` returns zeros everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, Tensor

MODES = ("signed", "magnitude", "windowed", "disabled")
TIME_AXIS = -3


@dataclass(frozen=True)
class DabConfig:
    mode: str = "signed"
    m: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown DAB mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "windowed":
            if self.m is None or self.m < 0:
                raise ValueError(f"windowed DAB needs m >= 0, got {self.m}")
        elif self.m is not None:
            raise ValueError(f"m is only meaningful for windowed mode (mode={self.mode!r})")

    def effective(self, n: int) -> "DabConfig":
        """Windowed with m >= n-1 covers every later frame: same map as signed."""
        if self.mode == "windowed" and self.m >= n - 1:
            return DabConfig("signed")
        return self

    def to_dict(self) -> dict:
        return {"mode": self.mode, "m": self.m}

    @classmethod
    def from_dict(cls, d: dict) -> "DabConfig":
        return cls(d.get("mode", "signed"), d.get("m"))

    @classmethod
    def parse(cls, text: str) -> "DabConfig":
        """``"signed"``, ``"magnitude"``, ``"disabled"`` or ``"windowed:2"``."""
        if text.startswith("windowed"):
            _, _, m = text.partition(":")
            return cls("windowed", int(m))
        return cls(text)

    def label(self) -> str:
        return f"windowed:{self.m}" if self.mode == "windowed" else self.mode


def _frames(x: np.ndarray, n_min: int = 2) -> int:
    if x.ndim < 3:
        raise ValueError(f"DAB input needs a temporal axis, got shape {x.shape}")
    n = x.shape[TIME_AXIS]
    if n < n_min:
        raise ValueError(f"DAB needs at least {n_min} frames, got {n}")
    return n


def _t(x: np.ndarray, i) -> np.ndarray:
    """View of frame(s) ``i`` along the temporal axis."""
    return x[..., i, :, :]


def dab_forward(fc: np.ndarray, cfg: DabConfig) -> np.ndarray:
    """Reference evaluation: an explicit loop over every (i, k) frame pair."""
    fc = np.asarray(fc)
    n = _frames(fc)
    out = np.zeros_like(fc)
    if cfg.mode == "disabled":
        return out
    for i in range(n - 1):
        if cfg.mode == "windowed":
            ks = range(i, min(i + cfg.m, n - 1) + 1)
        else:
            ks = range(i + 1, n)
        acc = np.zeros_like(_t(fc, i))
        for k in ks:
            d = _t(fc, i) - _t(fc, k)
            acc = acc + (np.abs(d) if cfg.mode == "magnitude" else d)
        out[..., i, :, :] = acc
    out[..., n - 1, :, :] = _t(fc, n - 1)
    return out


def dab_forward_fast(fc: np.ndarray, cfg: DabConfig = DabConfig()) -> np.ndarray:
    """Signed mode in one reverse pass: ``F_s[i] = (n-1-i) F_c[i] - sum_{k>i} F_c[k]``."""
    if cfg.mode != "signed":
        raise ValueError(f"fast DAB path only supports signed mode, got {cfg.mode!r}")
    fc = np.asarray(fc)
    n = _frames(fc)
    if fc.ndim == 4 and fc.flags.c_contiguous:
        # a C-ordered (c, n, h, w) frame is c strided chunks; stream over a
        # frame-major copy instead and hand back a view in the logical order
        fm = np.ascontiguousarray(np.moveaxis(fc, -3, 0))
        return np.moveaxis(_suffix_pass(fm, 0), 0, -3)
    return _suffix_pass(fc, -3)


def _suffix_pass(fc: np.ndarray, axis: int) -> np.ndarray:
    n = fc.shape[axis]
    frame = (lambda a, i: a[i]) if axis == 0 else _t
    out = np.empty_like(fc)
    suffix = frame(fc, n - 1).copy()
    frame(out, n - 1)[...] = suffix
    for i in range(n - 2, -1, -1):
        cur = frame(fc, i)
        dst = frame(out, i)
        np.multiply(cur, fc.dtype.type(n - 1 - i), out=dst)
        dst -= suffix
        suffix += cur
    return out


def _windowed(fc: np.ndarray, m: int) -> np.ndarray:
    n = fc.shape[TIME_AXIS]
    out = np.zeros_like(fc)
    for d in range(1, min(m, n - 1) + 1):
        # pairs (i, i+d) with i + d <= n-1
        out[..., : n - d, :, :] += fc[..., : n - d, :, :] - fc[..., d:, :, :]
    out[..., n - 1, :, :] = _t(fc, n - 1)
    return out


def _magnitude(fc: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    n = fc.shape[TIME_AXIS]
    out = np.zeros_like(fc)
    signs = []
    for d in range(1, n):
        diff = fc[..., : n - d, :, :] - fc[..., d:, :, :]
        signs.append(np.sign(diff))
        out[..., : n - d, :, :] += np.abs(diff)
    out[..., n - 1, :, :] = _t(fc, n - 1)
    return out, signs


def dab_apply(fc: np.ndarray, cfg: DabConfig) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Production forward used inside networks. Returns ``(F_s, saved_signs)``."""
    n = _frames(fc)
    cfg = cfg.effective(n)
    if cfg.mode == "signed":
        return dab_forward_fast(fc), None
    if cfg.mode == "disabled":
        return np.zeros_like(fc), None
    if cfg.mode == "windowed":
        return _windowed(fc, cfg.m), None
    return _magnitude(fc)


def dab_backward(grad_fs: np.ndarray, cfg: DabConfig, signs: list[np.ndarray] | None = None) -> np.ndarray:
    """Adjoint of ``dab_apply``: maps dL/dF_s to dL/dF_c.

    Magnitude mode needs the signs saved by the forward pass.
    """
    g = np.asarray(grad_fs)
    n = _frames(g)
    cfg = cfg.effective(n)
    if cfg.mode == "disabled":
        return np.zeros_like(g)
    out = np.zeros_like(g)
    if cfg.mode == "signed":
        # frame i < n-1 gets (n-1-i) g[i] from its own slot and -g[j] from every j < i
        prefix = np.zeros_like(_t(g, 0))
        for i in range(n - 1):
            out[..., i, :, :] = (n - 1 - i) * _t(g, i) - prefix
            prefix = prefix + _t(g, i)
        out[..., n - 1, :, :] = _t(g, n - 1) - prefix
        return out
    if cfg.mode == "windowed":
        for d in range(1, min(cfg.m, n - 1) + 1):
            gi = g[..., : n - d, :, :]
            out[..., : n - d, :, :] += gi
            out[..., d:, :, :] -= gi
        out[..., n - 1, :, :] += _t(g, n - 1)
        return out
    if signs is None:
        raise ValueError("magnitude DAB backward needs the signs saved by the forward pass")
    for d in range(1, n):
        sg = signs[d - 1] * g[..., : n - d, :, :]
        out[..., : n - d, :, :] += sg
        out[..., d:, :, :] -= sg
    out[..., n - 1, :, :] += _t(g, n - 1)
    return out


class TapRegistry:
    """Keeps copies of DAB outputs keyed by layer tag for heat-map extraction."""

    def __init__(self):
        self.enabled = False
        self.wanted: set[str] | None = None
        self._store: dict[str, np.ndarray] = {}

    def enable(self, tags=None) -> None:
        self.enabled = True
        self.wanted = None if tags is None else set(tags)
        self._store.clear()

    def disable(self) -> None:
        self.enabled = False
        self._store.clear()

    def clear(self) -> None:
        self._store.clear()

    def record(self, tag: str, value: np.ndarray) -> None:
        if not self.enabled or (self.wanted is not None and tag not in self.wanted):
            return
        if tag in self._store:
            raise KeyError(f"duplicate DAB tap tag {tag!r}")
        self._store[tag] = value.copy()

    def get(self, tag: str) -> np.ndarray:
        if tag not in self._store:
            raise KeyError(f"no DAB tap recorded under {tag!r}")
        return self._store[tag]

    def items(self):
        return self._store.items()

    def __contains__(self, tag: str) -> bool:
        return tag in self._store

    def __len__(self) -> int:
        return len(self._store)


def dab(x: Tensor, cfg: DabConfig, taps: TapRegistry | None = None, tag: str | None = None) -> Tensor:
    """DAB as a tape op."""
    out, signs = dab_apply(x.data, cfg)
    if taps is not None and tag is not None:
        taps.record(tag, out)
    return T._node(out, (x,), lambda g: (dab_backward(g, cfg, signs),))


def dab_taps(fc: Tensor, cfg: DabConfig, taps: TapRegistry, tag: str) -> Tensor:
    """Forward identical to ``dab`` that always routes the output through ``taps``."""
    return dab(fc, cfg, taps, tag)


@dataclass
class ConvBlockConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dab: DabConfig = field(default_factory=DabConfig)

    @property
    def concat_channels(self) -> int:
        return 2 * self.in_channels


class DabConvBlock:
    """Per-frame conv (c -> c), DAB, channel concat (2c), per-frame conv (2c -> out)."""

    def __init__(self, cfg: ConvBlockConfig, rng: np.random.Generator, name: str = "block", tag: str | None = None):
        self.cfg = cfg
        self.name = name
        self.tag = tag or name
        c = cfg.in_channels
        self.spatial = ConvSpec.init(c, c, cfg.kernel, 1, rng=rng, name=f"{name}.spatial")
        self.fuse = ConvSpec.init(2 * c, cfg.out_channels, cfg.kernel, cfg.stride, rng=rng, name=f"{name}.fuse")

    def parameters(self) -> list[Tensor]:
        return self.spatial.parameters() + self.fuse.parameters()

    def __call__(self, x: Tensor, taps: TapRegistry | None = None) -> Tensor:
        fc = T.conv2d_per_frame(x, self.spatial)
        fs = dab(fc, self.cfg.dab, taps, self.tag)
        return T.conv2d_per_frame(T.concat_channels(fc, fs), self.fuse)


def conv_block_forward(x: Tensor, block: DabConvBlock, taps: TapRegistry | None = None) -> Tensor:
    return block(x, taps)
