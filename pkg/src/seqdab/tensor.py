"""Small reverse-mode tensor engine.

Feature maps are laid out ``(b, c, n, h, w)`` (or unbatched ``(c, n, h, w)``):
channels, temporal depth, height, width, row-major with ``w`` fastest.
Storage is a numpy array; the dense per-frame convolution kernel is delegated
to torch's CPU convolution, everything else (tape, adjoints, batch norm,
loss, optimizer) lives here.

Every op builds a node holding a closure that maps the output gradient to the
input gradients. ``backward`` walks the nodes in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float array with an optional place on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        """Leaf copy with a different float width (no tape link)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)


def tensor(data, dtype=None, requires_grad: bool = False, name: str | None = None) -> Tensor:
    arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    ``loss`` must be a scalar unless an explicit output gradient is given.
    """
    if not loss.requires_grad:
        raise RuntimeError("backward: loss is not connected to any tensor that requires grad")
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {node!r}")
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, x.dtype.type(0))
    return _node(out, (x,), lambda g: (g * mask,))


def scale(x: Tensor, alpha: float) -> Tensor:
    return _node(x.data * x.dtype.type(alpha), (x,), lambda g: (g * x.dtype.type(alpha),))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def inner(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` for a constant array; a generic scalar probe for gradient checks."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ValueError(f"inner: weight shape {weights.shape} vs {x.shape}")
    return _node(np.asarray((x.data * weights).sum(), dtype=x.dtype), (x,), lambda g: (g * weights,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis (axis -4)."""
    if a.ndim != b.ndim or a.shape[:-4] != b.shape[:-4] or a.shape[-3:] != b.shape[-3:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    c1 = a.shape[-4]
    if a.ndim == 5:
        # channels-last result so the following convolution needs no relayout
        bsz, _, n, h, w = a.shape
        phys = np.empty((bsz, n, h, w, c1 + b.shape[1]), dtype=np.result_type(a.data, b.data))
        out = phys.transpose(0, 4, 1, 2, 3)
        out[:, :c1] = a.data
        out[:, c1:] = b.data
    else:
        out = np.concatenate([a.data, b.data], axis=-4)

    def bw(g):
        return g[..., :c1, :, :, :], g[..., c1:, :, :, :]

    return _node(out, (a, b), bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[..., start:stop, :, :, :].copy()

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :, :, :] = g
        return (full,)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvSpec:
    """Per-frame convolution: kernel ``(out, in, 1, k, k)``, never mixes frames."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    weight: Tensor
    bias: Tensor | None

    def __post_init__(self):
        want = (self.out_channels, self.in_channels, 1, self.kernel, self.kernel)
        if self.weight.shape != want:
            raise ValueError(f"ConvSpec: weight shape {self.weight.shape}, expected {want}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ValueError(f"ConvSpec: bias shape {self.bias.shape}, expected ({self.out_channels},)")

    @classmethod
    def init(cls, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
             padding: int | None = None, rng: np.random.Generator | None = None,
             bias: bool = True, name: str = "conv") -> "ConvSpec":
        """Fan-in scaled Gaussian weights (std = sqrt(2 / fan_in)), zero bias."""
        rng = rng if rng is not None else np.random.default_rng(0)
        if padding is None:
            padding = kernel // 2
        fan_in = in_channels * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, 1, kernel, kernel))
        weight = Tensor(w.astype(DEFAULT_DTYPE), requires_grad=True, name=f"{name}.weight")
        b = Tensor(np.zeros(out_channels, DEFAULT_DTYPE), requires_grad=True, name=f"{name}.bias") if bias else None
        return cls(in_channels, out_channels, kernel, stride, padding, weight, b)

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


# channels-last layout roughly halves the CPU convolution cost; numpy sees the
# resulting arrays as strided views with the logical (b, c, n, h, w) shape
_CL = torch.channels_last_3d


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_per_frame(x: Tensor, spec: ConvSpec) -> Tensor:
    """Apply one 2D convolution to every temporal slice of ``x`` independently."""
    if x.ndim not in (4, 5):
        raise ValueError(f"conv2d_per_frame: expected (c,n,h,w) or (b,c,n,h,w), got {x.shape}")
    if x.shape[-4] != spec.in_channels:
        raise ValueError(f"conv2d_per_frame: input has {x.shape[-4]} channels, spec expects {spec.in_channels}")
    if not np.all(np.isfinite(spec.weight.data)):
        raise ValueError("conv2d_per_frame: non-finite weights")
    unbatched = x.ndim == 4
    xd = x.data[None] if unbatched else x.data
    h, w = xd.shape[-2:]
    if conv_out_size(h, spec.kernel, spec.stride, spec.padding) < 1 or conv_out_size(w, spec.kernel, spec.stride, spec.padding) < 1:
        raise ValueError(f"conv2d_per_frame: kernel {spec.kernel} does not fit input {h}x{w}")

    stride = (1, spec.stride, spec.stride)
    padding = (0, spec.padding, spec.padding)
    xt = torch.from_numpy(xd).contiguous(memory_format=_CL)
    wt = torch.from_numpy(spec.weight.data.astype(xd.dtype, copy=False)).contiguous(memory_format=_CL)
    bt = torch.from_numpy(spec.bias.data.astype(xd.dtype, copy=False)) if spec.bias is not None else None
    with torch.no_grad():
        out = torch.nn.functional.conv3d(xt, wt, bt, stride=stride, padding=padding).numpy()
    if unbatched:
        out = out[0]

    parents = (x, spec.weight) + ((spec.bias,) if spec.bias is not None else ())

    def bw(g):
        gt = torch.from_numpy(g[None] if unbatched else g).contiguous(memory_format=_CL)
        mask = [x.requires_grad, spec.weight.requires_grad, spec.bias is not None and spec.bias.requires_grad]
        gx, gw, gb = torch.ops.aten.convolution_backward(
            gt, xt, wt, [spec.out_channels] if spec.bias is not None else None,
            list(stride), list(padding), [1, 1, 1], False, [0, 0, 0], 1, mask)
        gx = None if gx is None else gx.numpy()
        if gx is not None and unbatched:
            gx = gx[0]
        res = [gx, None if gw is None else gw.numpy()]
        if spec.bias is not None:
            res.append(None if gb is None else gb.numpy())
        return res

    return _node(out, parents, bw)


def max_pool_per_frame(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Spatial max pooling applied to each frame (used only by the full-size stems)."""
    xt = torch.from_numpy(np.ascontiguousarray(x.data))
    ks, st, pd = (1, kernel, kernel), (1, stride, stride), (0, padding, padding)
    with torch.no_grad():
        out, idx = torch.nn.functional.max_pool3d(xt, ks, st, pd, return_indices=True)

    def bw(g):
        gx = torch.ops.aten.max_pool3d_with_indices_backward(
            torch.from_numpy(np.ascontiguousarray(g)), xt, list(ks), list(st), list(pd), [1, 1, 1], False, idx)
        return (gx.numpy(),)

    return _node(out.numpy(), (x,), bw)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def init(cls, channels: int, name: str = "bn") -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, DEFAULT_DTYPE), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, DEFAULT_DTYPE), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, DEFAULT_DTYPE),
            running_var=np.ones(channels, DEFAULT_DTYPE),
        )

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def _rows(a: np.ndarray) -> np.ndarray:
    """``(b, c, n, h, w)`` -> ``(b*n*h*w, c)``; a view when ``a`` is channels-last."""
    return a.transpose(0, 2, 3, 4, 1).reshape(-1, a.shape[1])


def _unrows(r: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    b, c, n, h, w = shape
    return r.reshape(b, n, h, w, c).transpose(0, 4, 1, 2, 3)


def batch_norm(x: Tensor, params: BatchNormParams, training: bool) -> Tensor:
    """Per-channel normalization pooled over batch, time and space.

    ``x`` is ``(b, c, n, h, w)``. Training mode uses batch statistics (biased
    variance) and updates the running estimates; eval mode uses the running
    estimates.
    """
    if x.ndim != 5:
        raise ValueError(f"batch_norm: expected (b,c,n,h,w), got {x.shape}")
    c = x.shape[1]
    if params.gamma.shape != (c,):
        raise ValueError(f"batch_norm: {c} channels, params for {params.gamma.shape[0]}")
    dt = x.dtype
    shape = x.shape
    r = _rows(x.data)
    gamma = params.gamma.data.astype(dt, copy=False)
    beta = params.beta.data.astype(dt, copy=False)

    if training:
        count = r.shape[0]
        mean = r.mean(axis=0)
        xc = r - mean
        var = (xc * xc).mean(axis=0)
        inv_std = (1.0 / np.sqrt(var + dt.type(params.eps))).astype(dt)
        xhat = xc * inv_std
        mom = params.momentum
        unbiased = var * (count / max(count - 1, 1))
        params.running_mean[...] = (1 - mom) * params.running_mean + mom * mean
        params.running_var[...] = (1 - mom) * params.running_var + mom * unbiased
        out = xhat * gamma + beta

        def bw(g):
            g = _rows(g)
            ggamma = (g * xhat).sum(axis=0)
            gbeta = g.sum(axis=0)
            gxhat = g * gamma
            gx = inv_std * (gxhat - gbeta * gamma / count - xhat * (ggamma * gamma / count))
            return _unrows(gx, shape), ggamma.astype(params.gamma.dtype), gbeta.astype(params.beta.dtype)
    else:
        mean = params.running_mean.astype(dt)
        inv_std = (1.0 / np.sqrt(params.running_var.astype(dt) + dt.type(params.eps))).astype(dt)
        xhat = (r - mean) * inv_std
        out = xhat * gamma + beta

        def bw(g):
            g = _rows(g)
            return (_unrows(g * (gamma * inv_std), shape), (g * xhat).sum(axis=0).astype(params.gamma.dtype),
                    g.sum(axis=0).astype(params.beta.dtype))

    return _node(_unrows(out.astype(dt, copy=False), shape), (x, params.gamma, params.beta), bw)


# ---------------------------------------------------------------------------
# head


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over (n, h, w): ``(c, n, h, w) -> (c,)`` or ``(b, c, n, h, w) -> (b, c)``."""
    if x.ndim not in (4, 5):
        raise ValueError(f"global_avg_pool: expected 4D or 5D input, got {x.shape}")
    count = x.shape[-1] * x.shape[-2] * x.shape[-3]
    out = x.data.mean(axis=(-3, -2, -1))

    def bw(g):
        return (np.broadcast_to(g[..., None, None, None] / x.dtype.type(count), x.shape).copy(),)

    return _node(out, (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias``; ``x`` is ``(c,)`` or ``(b, c)``, weight ``(classes, c)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        return (g @ weight.data, g2.T @ x2, g2.sum(axis=0))

    return _node(out, (x, weight, bias), bw)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[target]``.

    ``logits`` is ``(K,)`` with an int target or ``(b, K)`` with ``b`` targets.
    """
    z = logits.data
    k = z.shape[-1]
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    z2 = z.reshape(-1, k)
    if t.shape[0] != z2.shape[0]:
        raise ValueError(f"softmax_cross_entropy: {z2.shape[0]} rows but {t.shape[0]} targets")
    if np.any(t < 0) or np.any(t >= k):
        raise ValueError(f"softmax_cross_entropy: target out of range [0, {k})")
    logp = _log_softmax(z2)
    rows = np.arange(z2.shape[0])
    loss = -logp[rows, t].mean()
    if not np.isfinite(loss):
        raise FloatingPointError("softmax_cross_entropy: non-finite loss")

    def bw(g):
        p = np.exp(logp)
        p[rows, t] -= 1
        return ((p * (g / z2.shape[0])).reshape(z.shape).astype(z.dtype),)

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: np.ndarray, grads: np.ndarray, velocity: np.ndarray | None, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """One SGD update; returns ``(new_params, new_velocity)``.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """
    params = np.asarray(params)
    grads = np.asarray(grads)
    if params.shape != grads.shape:
        raise ValueError(f"sgd_step: param shape {params.shape} vs grad {grads.shape}")
    v = np.zeros_like(params) if velocity is None else velocity
    v = momentum * v + grads + weight_decay * params
    new = params - lr * v
    if not np.all(np.isfinite(new)):
        raise FloatingPointError("sgd_step: non-finite update")
    return new.astype(params.dtype, copy=False), v.astype(params.dtype, copy=False)


class SGD:
    """Momentum SGD over a fixed list of parameter tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.data, self.velocity[i] = sgd_step(p.data, p.grad, self.velocity[i], self.lr,
                                                self.momentum, self.weight_decay)
