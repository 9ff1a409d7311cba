"""Convolutions, batch norm, bilinear resizing, cross-entropy and SGD.

Feature maps are (B, C, H, W). Convolutions are 3x3 with zero padding 1 or
1x1; the depthwise-separable kind is a per-channel 3x3 followed by a 1x1.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import _kernels
from .tensor import ContractError, DimensionError, Tensor, get_default_dtype, make_result, relu, reshape

IGNORE_INDEX = 255
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

KINDS = ("pointwise_1x1", "standard_3x3", "depthwise_separable_3x3")


class ConfigurationError(ValueError):
    pass


class DataError(ValueError):
    pass


class Initializer:
    """Seeded parameter factory.

    Every tensor draws from its own generator keyed by (seed, name), so adding
    or resizing one layer never perturbs the initial values of any other.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        data = self.rng(name).uniform(-bound, bound, size=shape)
        return Tensor(data, requires_grad=True)


class Module:
    """Container with named learnable parameters, buffers and children.

    Parameters are learnable leaves, buffers are state saved in checkpoints
    but never optimized (running statistics, pinned scalars).
    """

    training = True

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def __setattr__(self, key, value):
        if isinstance(value, Module) and "_children" in self.__dict__:
            self._children[key] = value
        object.__setattr__(self, key, value)

    def add_param(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self._params[name] = tensor
        if not hasattr(type(self), name):
            object.__setattr__(self, name, tensor)
        return tensor

    def add_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        self._buffers[name] = array
        return array

    def add_children(self, prefix: str, modules: list["Module"]) -> list["Module"]:
        for i, m in enumerate(modules):
            self._children[f"{prefix}.{i}"] = m
        return modules

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, a in self._buffers.items():
            yield prefix + name, a
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self._iter_buffer_owners())
        expected = set(own) | set(bufs)
        missing, unexpected = expected - set(state), set(state) - expected
        if missing or unexpected:
            raise ConfigurationError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        dtype = get_default_dtype()
        for name, t in own.items():
            if t.shape != state[name].shape:
                raise DimensionError(f"{name}: checkpoint shape {state[name].shape} vs model {t.shape}")
            t.data = np.array(state[name], dtype=dtype)
        for name, (module, key) in bufs.items():
            module._buffers[key][...] = state[name]

    def _iter_buffer_owners(self, prefix: str = ""):
        for key in self._buffers:
            yield prefix + key, (self, key)
        for cname, child in self._children.items():
            yield from child._iter_buffer_owners(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


# --- convolution -------------------------------------------------------------


def _out_size(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def conv3x3_op(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1) -> Tensor:
    """Dense 3x3 cross-correlation, zero padding 1."""
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    if w.shape[1] != cin:
        raise DimensionError(f"conv3x3: input has {cin} channels, weight expects {w.shape[1]}")
    ho, wo = _out_size(h, stride), _out_size(wd, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _kernels.im2col(xp, stride, ho, wo).reshape(bsz, cin * 9, ho * wo)
    wmat = w.data.reshape(cout, cin * 9)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]

    def backward(g):
        g = g.reshape(bsz, cout, ho * wo)
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.matmul(wmat.T, g).reshape(bsz, cin, 9, ho, wo)
        gx = _kernels.col2im(gcols, stride, h + 2, wd + 2)[:, :, 1:-1, 1:-1]
        gb = None if b is None else g.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out.reshape(bsz, cout, ho, wo), parents, backward, "conv3x3")


def conv1x1_op(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    if w.shape[1] != cin:
        raise DimensionError(f"conv1x1: input has {cin} channels, weight expects {w.shape[1]}")
    xm = x.data.reshape(bsz, cin, h * wd)
    wmat = w.data.reshape(cout, cin)
    out = np.matmul(wmat, xm)
    if b is not None:
        out += b.data[:, None]

    def backward(g):
        g = g.reshape(bsz, cout, h * wd)
        gw = np.tensordot(g, xm, axes=([0, 2], [0, 2])).reshape(w.shape)
        gx = np.matmul(wmat.T, g).reshape(x.shape)
        gb = None if b is None else g.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out.reshape(bsz, cout, h, wd), parents, backward, "conv1x1")


def depthwise3x3_op(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Per-channel 3x3 cross-correlation; ``w`` is (C, 1, 3, 3)."""
    bsz, c, h, wd = x.shape
    if w.shape[0] != c:
        raise DimensionError(f"depthwise3x3: input has {c} channels, weight expects {w.shape[0]}")
    ho, wo = _out_size(h, stride), _out_size(wd, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _kernels.im2col(xp, stride, ho, wo).reshape(bsz, c, 9, ho * wo)
    wk = w.data.reshape(c, 9)
    out = np.einsum("ck,bckp->bcp", wk, cols)

    def backward(g):
        g = g.reshape(bsz, c, ho * wo)
        gw = np.einsum("bcp,bckp->ck", g, cols).reshape(w.shape)
        gcols = np.einsum("ck,bcp->bckp", wk, g).reshape(bsz, c, 9, ho, wo)
        gx = _kernels.col2im(gcols, stride, h + 2, wd + 2)[:, :, 1:-1, 1:-1]
        return gx, gw

    return make_result(out.reshape(bsz, c, ho, wo), (x, w), backward, "depthwise3x3")


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kind: str = "standard_3x3", stride: int = 1,
                 *, name: str, init: Initializer):
        super().__init__()
        if kind not in KINDS:
            raise ConfigurationError(f"unknown conv kind {kind!r}")
        if kind == "pointwise_1x1" and stride != 1:
            raise ConfigurationError("pointwise convolutions are stride 1")
        self.kind, self.stride = kind, stride
        self.in_channels, self.out_channels = in_channels, out_channels
        if kind == "standard_3x3":
            self.add_param("weight", init.uniform(f"{name}.weight", (out_channels, in_channels, 3, 3), in_channels * 9))
            fan_in = in_channels * 9
        else:
            if kind == "depthwise_separable_3x3":
                self.add_param("depthwise", init.uniform(f"{name}.depthwise", (in_channels, 1, 3, 3), 9))
            self.add_param("weight", init.uniform(f"{name}.weight", (out_channels, in_channels, 1, 1), in_channels))
            fan_in = in_channels
        self.add_param("bias", init.uniform(f"{name}.bias", (out_channels,), fan_in))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(self, x)


def conv2d(p: Conv2d, x: Tensor) -> Tensor:
    """Apply ``p`` to (B, Cin, H, W) or a single (Cin, H, W) map."""
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.shape[1] != p.in_channels:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, layer expects {p.in_channels}")
    if p.kind == "standard_3x3":
        y = conv3x3_op(x, p.weight, p.bias, p.stride)
    elif p.kind == "pointwise_1x1":
        y = conv1x1_op(x, p.weight, p.bias)
    else:
        y = conv1x1_op(depthwise3x3_op(x, p.depthwise, p.stride), p.weight, p.bias)
    return reshape(y, y.shape[1:]) if single else y


# --- batch normalization -----------------------------------------------------


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        dtype = get_default_dtype()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.add_param("gamma", Tensor(np.ones(channels, dtype=dtype)))
        self.add_param("shift", Tensor(np.zeros(channels, dtype=dtype)))
        self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.add_buffer("running_var", np.ones(channels, dtype=dtype))

    @property
    def running_mean(self) -> np.ndarray:
        return self._buffers["running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self._buffers["running_var"]

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(self, x)


def batch_norm(p: BatchNorm2d, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"batch_norm: expected (B, {p.channels}, H, W), got {x.shape}")
    gamma, shift = p.gamma, p.shift
    g4 = gamma.data[None, :, None, None]
    if p.training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(p.eps))
        xhat = centered * inv_std[None, :, None, None]
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mean
        unbiased = var * (n / (n - 1)) if n > 1 else var
        p.running_var[...] = (1 - m) * p.running_var + m * unbiased

        def backward(g):
            dxhat = g * g4
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv_std = 1.0 / np.sqrt(p.running_var.astype(x.dtype) + x.dtype.type(p.eps))
        xhat = (x.data - p.running_mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            dx = g * (g4 * inv_std[None, :, None, None])
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * g4 + shift.data[None, :, None, None]
    return make_result(out.astype(x.dtype, copy=False), (x, gamma, shift), backward, "batch_norm")


class ConvBNReLU(Module):
    def __init__(self, in_channels: int, out_channels: int, kind: str = "standard_3x3", stride: int = 1,
                 *, name: str, init: Initializer):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kind, stride, name=f"{name}.conv", init=init)
        self.bn = BatchNorm2d(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


# --- bilinear resize ---------------------------------------------------------


@lru_cache(maxsize=256)
def resize_plan(src: int, dst: int):
    """Half-pixel source taps for one axis: (i0, i1, lam, dense weight matrix)."""
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    lam = pos - i0
    mat = np.zeros((dst, src))
    np.add.at(mat, (np.arange(dst), i0), 1.0 - lam)
    np.add.at(mat, (np.arange(dst), i1), lam)
    return i0, i1, lam, mat


def resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the two trailing axes of a plain array.

    Interpolation is written as a + lam * (b - a), so constant maps stay
    exactly constant.
    """
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    dt = x.dtype
    i0, i1, lam, _ = resize_plan(h, out_h)
    lam = lam.astype(dt)[:, None]
    a, b = x[..., i0, :], x[..., i1, :]
    t = a + lam * (b - a)
    j0, j1, mu, _ = resize_plan(w, out_w)
    mu = mu.astype(dt)
    a, b = t[..., j0], t[..., j1]
    return a + mu * (b - a)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable half-pixel bilinear resize of (..., H, W)."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: invalid target size {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    rh = resize_plan(h, out_h)[3].astype(x.dtype)
    rw = resize_plan(w, out_w)[3].astype(x.dtype)

    def backward(g):
        return (np.matmul(rh.T, np.matmul(g, rw)),)

    return make_result(resize_array(x.data, out_h, out_w), (x,), backward, "bilinear_resize")


# --- loss --------------------------------------------------------------------


def cross_entropy(logits: Tensor, target: np.ndarray, ignore_index: int | None = IGNORE_INDEX) -> Tensor:
    """Mean per-pixel negative log-likelihood over non-ignored pixels.

    When every pixel is ignored the loss is 0 with zero gradient.
    """
    if logits.ndim != 4:
        raise DimensionError(f"cross_entropy: logits must be (B, K, H, W), got {logits.shape}")
    bsz, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (bsz, h, w):
        raise DimensionError(f"cross_entropy: target shape {target.shape} does not match logits {logits.shape}")
    valid = np.ones(target.shape, dtype=bool) if ignore_index is None else target != ignore_index
    bad = valid & ((target < 0) | (target >= k))
    if bad.any():
        raise DataError(f"cross_entropy: target value {int(target[bad][0])} outside 0..{k - 1}")
    n = int(valid.sum())
    dt = logits.dtype
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    tgt = np.where(valid, target, 0).astype(np.int64)[:, None]
    picked = np.take_along_axis(z, tgt, axis=1)[:, 0] - np.log(se[:, 0])
    loss = -(picked * valid).sum() / n if n else 0.0

    def backward(g):
        if n == 0:
            return (np.zeros_like(logits.data),)
        grad = e / se
        np.put_along_axis(grad, tgt, np.take_along_axis(grad, tgt, axis=1) - 1, axis=1)
        grad *= (valid[:, None] * (g / n)).astype(dt)
        return (grad,)

    return make_result(np.asarray(loss, dtype=dt), (logits,), backward, "cross_entropy")


# --- optimizer ---------------------------------------------------------------


def poly_lr(base: float, it: int, total: int, power: float = 0.9) -> float:
    if total <= 0:
        raise ConfigurationError("total_iter must be positive")
    if not 0 <= it <= total:
        raise ContractError(f"iteration {it} outside [0, {total}]")
    return base * (1.0 - it / total) ** power


@dataclass
class OptimizerState:
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_iter: int = 1
    power: float = 0.9
    iter: int = 0
    momentum_buffers: list[np.ndarray] = field(default_factory=list)

    @property
    def current_lr(self) -> float:
        return poly_lr(self.base_lr, self.iter, self.total_iter, self.power)


def sgd_step(state: OptimizerState, params: list[Tensor]) -> float:
    """One momentum SGD update with coupled weight decay; returns the lr used."""
    if state.total_iter <= 0:
        raise ConfigurationError("total_iter must be positive")
    if not state.momentum_buffers:
        state.momentum_buffers = [np.zeros_like(p.data) for p in params]
    lr = state.current_lr
    for p, v in zip(params, state.momentum_buffers):
        if p.grad is None:
            raise ContractError("sgd_step: a parameter has no gradient")
        v *= p.dtype.type(state.momentum)
        v += p.grad + p.dtype.type(state.weight_decay) * p.data
        p.data -= p.dtype.type(lr) * v
    state.iter += 1
    return lr


class SGD:
    def __init__(self, params: list[Tensor], total_iter: int, base_lr: float = 0.001, momentum: float = 0.9,
                 weight_decay: float = 1e-4, power: float = 0.9):
        if total_iter <= 0:
            raise ConfigurationError("total_iter must be positive")
        self.params = list(params)
        self.state = OptimizerState(base_lr, momentum, weight_decay, total_iter, power)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        return sgd_step(self.state, self.params)
