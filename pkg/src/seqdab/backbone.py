"""Residual backbone whose spatial convolutions are DAB convolutional blocks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .dab import ConvBlockConfig, DabConfig, DabConvBlock, TapRegistry
from .perm import num_classes
from .tensor import BatchNormParams, ConvSpec, Tensor


@dataclass
class NetworkConfig:
    seq_len: int = 4
    input_size: int = 32
    block: str = "basic"
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: bool = False
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks: list[int] = field(default_factory=lambda: [1, 1, 1])
    dab: DabConfig = field(default_factory=DabConfig)

    def __post_init__(self):
        if self.block not in ("basic", "bottleneck"):
            raise ValueError(f"block must be 'basic' or 'bottleneck', got {self.block!r}")
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ValueError(f"widths {self.widths} and blocks {self.blocks} must be non-empty and equal length")
        if any(w <= 0 for w in self.widths) or any(b <= 0 for b in self.blocks):
            raise ValueError("widths and blocks must be positive")
        if isinstance(self.dab, dict):
            self.dab = DabConfig.from_dict(self.dab)
        num_classes(self.seq_len)
        size = self.input_size
        size = T.conv_out_size(size, self.stem_kernel, self.stem_stride, self.stem_kernel // 2)
        if self.stem_pool:
            size = T.conv_out_size(size, 3, 2, 1)
        for s in range(1, len(self.widths)):
            size = T.conv_out_size(size, 3, 2, 1)
        if size < 1:
            raise ValueError(f"input size {self.input_size} too small for {len(self.widths)} stages")

    @property
    def classes(self) -> int:
        return num_classes(self.seq_len)

    @property
    def expansion(self) -> int:
        return 4 if self.block == "bottleneck" else 1

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len, "input_size": self.input_size, "block": self.block,
            "stem_channels": self.stem_channels, "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride, "stem_pool": self.stem_pool,
            "widths": list(self.widths), "blocks": list(self.blocks), "dab": self.dab.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["dab"] = DabConfig.from_dict(d.get("dab", {}))
        return cls(**d)


def preset(name: str, seq_len: int, dab: DabConfig | None = None, input_size: int | None = None) -> NetworkConfig:
    dab = dab or DabConfig()
    if name == "desk-10":
        return NetworkConfig(seq_len, input_size or 32, "basic", 16, 3, 1, False, [16, 32, 64], [1, 1, 1], dab)
    if name == "paper-18":
        return NetworkConfig(seq_len, input_size or 112, "basic", 64, 7, 2, True, [64, 128, 256, 512], [2, 2, 2, 2], dab)
    if name == "paper-50":
        return NetworkConfig(seq_len, input_size or 112, "bottleneck", 64, 7, 2, True, [64, 128, 256, 512], [3, 4, 6, 3], dab)
    raise ValueError(f"unknown network preset {name!r}")


PRESETS = ("desk-10", "paper-18", "paper-50")


class BatchNorm:
    def __init__(self, channels: int, name: str):
        self.name = name
        self.params = BatchNormParams.init(channels, name)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(x, self.params, training)


class Projection:
    """1x1 conv + BN skip path, used when width or stride changes."""

    def __init__(self, cin: int, cout: int, stride: int, rng, name: str):
        self.conv = ConvSpec.init(cin, cout, 1, stride, 0, rng=rng, name=f"{name}.conv")
        self.bn = BatchNorm(cout, f"{name}.bn")

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.bn(T.conv2d_per_frame(x, self.conv), training)


class BasicBlock:
    def __init__(self, cin: int, cout: int, stride: int, dab: DabConfig, rng, name: str):
        self.name = name
        self.a = DabConvBlock(ConvBlockConfig(cin, cout, 3, stride, dab), rng, f"{name}.a")
        self.bn_a = BatchNorm(cout, f"{name}.bn_a")
        self.b = DabConvBlock(ConvBlockConfig(cout, cout, 3, 1, dab), rng, f"{name}.b")
        self.bn_b = BatchNorm(cout, f"{name}.bn_b")
        self.skip = Projection(cin, cout, stride, rng, f"{name}.skip") if (stride != 1 or cin != cout) else None

    @property
    def dab_blocks(self) -> list[DabConvBlock]:
        return [self.a, self.b]

    def __call__(self, x: Tensor, training: bool, taps) -> Tensor:
        out = T.relu(self.bn_a(self.a(x, taps), training))
        out = self.bn_b(self.b(out, taps), training)
        short = x if self.skip is None else self.skip(x, training)
        return T.relu(T.add(out, short))


class Bottleneck:
    def __init__(self, cin: int, width: int, stride: int, dab: DabConfig, rng, name: str):
        self.name = name
        cout = width * 4
        self.reduce = ConvSpec.init(cin, width, 1, 1, 0, rng=rng, name=f"{name}.reduce")
        self.bn_r = BatchNorm(width, f"{name}.bn_r")
        self.mid = DabConvBlock(ConvBlockConfig(width, width, 3, stride, dab), rng, f"{name}.mid")
        self.bn_m = BatchNorm(width, f"{name}.bn_m")
        self.expand = ConvSpec.init(width, cout, 1, 1, 0, rng=rng, name=f"{name}.expand")
        self.bn_e = BatchNorm(cout, f"{name}.bn_e")
        self.skip = Projection(cin, cout, stride, rng, f"{name}.skip") if (stride != 1 or cin != cout) else None

    @property
    def dab_blocks(self) -> list[DabConvBlock]:
        return [self.mid]

    def __call__(self, x: Tensor, training: bool, taps) -> Tensor:
        out = T.relu(self.bn_r(T.conv2d_per_frame(x, self.reduce), training))
        out = T.relu(self.bn_m(self.mid(out, taps), training))
        out = self.bn_e(T.conv2d_per_frame(out, self.expand), training)
        short = x if self.skip is None else self.skip(x, training)
        return T.relu(T.add(out, short))


class Network:
    """Stem DAB block, residual stages, global (n, h, w) average pool, linear head."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg
        self.taps = TapRegistry()
        self.training = True
        rng = np.random.default_rng(seed)
        self.stem = DabConvBlock(
            ConvBlockConfig(3, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, cfg.dab), rng, "conv1", tag="conv1")
        self.stem_bn = BatchNorm(cfg.stem_channels, "conv1.bn")
        self.stages: list[list] = []
        cin = cfg.stem_channels
        for s, (width, count) in enumerate(zip(cfg.widths, cfg.blocks), start=1):
            stage = []
            for b in range(count):
                stride = 2 if (s > 1 and b == 0) else 1
                name = f"layer{s}.{b}"
                if cfg.block == "basic":
                    blk = BasicBlock(cin, width, stride, cfg.dab, rng, name)
                else:
                    blk = Bottleneck(cin, width, stride, cfg.dab, rng, name)
                stage.append(blk)
                cin = width * cfg.expansion
            stage[-1].dab_blocks[-1].tag = f"layer{s}.last"
            self.stages.append(stage)
        self.feature_width = cin
        w = rng.normal(0.0, np.sqrt(1.0 / cin), size=(cfg.classes, cin)).astype(T.DEFAULT_DTYPE)
        self.fc_weight = Tensor(w, requires_grad=True, name="fc.weight")
        self.fc_bias = Tensor(np.zeros(cfg.classes, T.DEFAULT_DTYPE), requires_grad=True, name="fc.bias")

    # -- bookkeeping -------------------------------------------------------

    def _modules(self):
        yield self.stem
        yield self.stem_bn
        for stage in self.stages:
            for blk in stage:
                yield blk

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[Tensor] = []
        out += self.stem.parameters() + self.stem_bn.params.parameters()
        for stage in self.stages:
            for blk in stage:
                out += _block_params(blk)
        out += [self.fc_weight, self.fc_bias]
        return [(p.name, p) for p in out]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def batch_norms(self) -> list[BatchNorm]:
        bns = [self.stem_bn]
        for stage in self.stages:
            for blk in stage:
                bns += _block_bns(blk)
        return bns

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for bn in self.batch_norms():
            out.append((f"{bn.name}.running_mean", bn.params.running_mean))
            out.append((f"{bn.name}.running_var", bn.params.running_var))
        return out

    def dab_blocks(self) -> list[DabConvBlock]:
        blocks = [self.stem]
        for stage in self.stages:
            for blk in stage:
                blocks += blk.dab_blocks
        return blocks

    def tap_tags(self) -> list[str]:
        """Stem tap plus the last DAB of every stage, in depth order."""
        return ["conv1"] + [f"layer{s}.last" for s in range(1, len(self.stages) + 1)]

    def astype(self, dtype) -> "Network":
        """Cast every parameter and buffer in place (gradient checks run in float64)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for bn in self.batch_norms():
            bn.params.running_mean = bn.params.running_mean.astype(dtype)
            bn.params.running_var = bn.params.running_var.astype(dtype)
        return self

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    # -- forward -----------------------------------------------------------

    def features(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != 3 or x.shape[2] != self.cfg.seq_len:
            raise ValueError(f"expected input (b, 3, {self.cfg.seq_len}, H, W), got {x.shape}")
        if x.shape[3] != self.cfg.input_size or x.shape[4] != self.cfg.input_size:
            raise ValueError(f"expected spatial size {self.cfg.input_size}, got {x.shape[3:]}")
        if self.taps.enabled:
            self.taps.clear()
        tr = self.training
        out = T.relu(self.stem_bn(self.stem(x, self.taps), tr))
        if self.cfg.stem_pool:
            out = T.max_pool_per_frame(out)
        for stage in self.stages:
            for blk in stage:
                out = blk(out, tr, self.taps)
        return out

    def forward(self, x: Tensor) -> Tensor:
        feats = self.features(x)
        return T.linear(T.global_avg_pool(feats), self.fc_weight, self.fc_bias)

    __call__ = forward


def _block_params(blk) -> list[Tensor]:
    if isinstance(blk, BasicBlock):
        ps = blk.a.parameters() + blk.bn_a.params.parameters() + blk.b.parameters() + blk.bn_b.params.parameters()
    else:
        ps = (blk.reduce.parameters() + blk.bn_r.params.parameters() + blk.mid.parameters()
              + blk.bn_m.params.parameters() + blk.expand.parameters() + blk.bn_e.params.parameters())
    if blk.skip is not None:
        ps += blk.skip.conv.parameters() + blk.skip.bn.params.parameters()
    return ps


def _block_bns(blk) -> list[BatchNorm]:
    bns = [blk.bn_a, blk.bn_b] if isinstance(blk, BasicBlock) else [blk.bn_r, blk.bn_m, blk.bn_e]
    if blk.skip is not None:
        bns.append(blk.skip.bn)
    return bns


def build_network(cfg: NetworkConfig, seed: int = 0) -> Network:
    return Network(cfg, seed)


def count_params(net: Network) -> int:
    return sum(p.size for p in net.parameters())


def with_dab(cfg: NetworkConfig, dab: DabConfig) -> NetworkConfig:
    return replace(cfg, dab=dab)
