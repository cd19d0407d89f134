"""Central finite-difference checks of the engine's reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import NetworkConfig, build_network
from .dab import ConvBlockConfig, DabConfig, DabConvBlock, dab
from .tensor import BatchNormParams, ConvSpec, Tensor

EPS = 1e-5
TOL = 1e-3


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``.

    The floor keeps gradients that vanish exactly (a conv bias feeding batch
    norm) from turning round-off noise into a relative error of 1.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name:<28} rel_err={self.error:.2e}"


def check(name: str, loss_fn: Callable[[], Tensor], leaves: list[Tensor], eps: float = EPS, tol: float = TOL) -> CheckResult:
    """Compare ``backward`` against finite differences for every leaf.

    ``loss_fn`` rebuilds the graph from the current leaf values each call.
    """
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    T.backward(loss_fn())
    worst = 0.0
    for t in leaves:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numeric_grad(lambda: float(loss_fn().data), t.data, eps)
        worst = max(worst, rel_error(analytic, numeric))
    return CheckResult(name, worst, worst < tol)


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _conv(rng, cin, cout, k, stride=1) -> ConvSpec:
    spec = ConvSpec.init(cin, cout, k, stride, rng=rng)
    spec.weight.data = spec.weight.data.astype(np.float64)
    spec.bias.data = rng.standard_normal(cout)
    return spec


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    def probe(shape):
        return rng.standard_normal(shape)

    x = _rand(rng, 2, 3, 5, 5)
    spec = _conv(rng, 2, 3, 3)
    r = probe((3, 3, 5, 5))
    out.append(check("conv2d_per_frame", lambda: T.inner(T.conv2d_per_frame(x, spec), r), [x, spec.weight, spec.bias]))

    xb = _rand(rng, 2, 2, 3, 4, 4)
    spec2 = _conv(rng, 2, 2, 3, stride=2)
    r2 = probe((2, 2, 3, 2, 2))
    out.append(check("conv2d_per_frame[stride2]", lambda: T.inner(T.conv2d_per_frame(xb, spec2), r2),
                     [xb, spec2.weight, spec2.bias]))

    xbn = _rand(rng, 2, 2, 2, 3, 3)
    bn = BatchNormParams.init(2)
    bn.gamma.data = rng.uniform(0.5, 1.5, 2)
    bn.beta.data = rng.standard_normal(2)
    bn.running_mean = bn.running_mean.astype(np.float64)
    bn.running_var = bn.running_var.astype(np.float64)
    rb = probe(xbn.shape)
    out.append(check("batch_norm[train]", lambda: T.inner(T.batch_norm(xbn, bn, True), rb), [xbn, bn.gamma, bn.beta]))
    bn.running_mean[:] = rng.standard_normal(2)
    bn.running_var[:] = rng.uniform(0.5, 2.0, 2)
    out.append(check("batch_norm[eval]", lambda: T.inner(T.batch_norm(xbn, bn, False), rb), [xbn, bn.gamma, bn.beta]))

    a, b = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 4, 4)
    ra = probe(a.shape)
    out.append(check("relu", lambda: T.inner(T.relu(a), ra), [a]))
    out.append(check("add", lambda: T.inner(T.add(a, b), ra), [a, b]))
    out.append(check("sub", lambda: T.inner(T.sub(a, b), ra), [a, b]))
    c = _rand(rng, 1, 3, 4, 4)
    rc = probe((3, 3, 4, 4))
    out.append(check("concat_channels", lambda: T.inner(T.concat_channels(a, c), rc), [a, c]))
    rp = probe((2,))
    out.append(check("global_avg_pool", lambda: T.inner(T.global_avg_pool(a), rp), [a]))

    v = _rand(rng, 3, 5)
    W, bias = _rand(rng, 4, 5), _rand(rng, 4)
    rl = probe((3, 4))
    out.append(check("linear", lambda: T.inner(T.linear(v, W, bias), rl), [v, W, bias]))
    logits = _rand(rng, 3, 6)
    targets = rng.integers(0, 6, 3)
    out.append(check("softmax_cross_entropy", lambda: T.softmax_cross_entropy(logits, targets), [logits]))

    xm = _rand(rng, 1, 2, 2, 5, 5)
    rm = probe((1, 2, 2, 3, 3))
    out.append(check("max_pool_per_frame", lambda: T.inner(T.max_pool_per_frame(xm), rm), [xm]))

    for cfg in (DabConfig("signed"), DabConfig("magnitude"), DabConfig("windowed", 1),
                DabConfig("windowed", 2), DabConfig("disabled")):
        f = _rand(rng, 2, 4, 3, 3)
        rf = probe(f.shape)
        out.append(check(f"dab[{cfg.label()}]", lambda f=f, cfg=cfg, rf=rf: T.inner(dab(f, cfg), rf), [f]))
    return out


def block_check(seed: int = 0, mode: DabConfig = DabConfig()) -> CheckResult:
    rng = np.random.default_rng(seed)
    block = DabConvBlock(ConvBlockConfig(2, 3, 3, 1, mode), rng)
    for p in block.parameters():
        p.data = p.data.astype(np.float64)
    block.fuse.bias.data = rng.standard_normal(3)
    x = _rand(rng, 2, 3, 5, 5)
    r = rng.standard_normal((3, 3, 5, 5))
    return check(f"conv_block[{mode.label()}]", lambda: T.inner(block(x), r), [x] + block.parameters())


def backbone_check(seed: int = 0, block: str = "basic") -> CheckResult:
    cfg = NetworkConfig(seq_len=3, input_size=6, block=block, stem_channels=4, widths=[4], blocks=[1])
    net = build_network(cfg, seed).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.standard_normal((2, 3, 3, 6, 6)))
    y = rng.integers(0, cfg.classes, 2)
    return check(f"backbone[{block}]", lambda: T.softmax_cross_entropy(net(x), y), net.parameters())


def run_suite(seed: int = 0) -> list[CheckResult]:
    results = op_checks(seed)
    for mode in (DabConfig("signed"), DabConfig("magnitude"), DabConfig("windowed", 1), DabConfig("disabled")):
        results.append(block_check(seed, mode))
    results.append(backbone_check(seed, "basic"))
    results.append(backbone_check(seed, "bottleneck"))
    return results
