"""Dense tensors with reverse-mode differentiation over a recorded graph.

Only the operations the decoder math needs are provided. Binary elementwise
ops require identical shapes; the single exception is multiplication by a
one-element tensor (a learnable scalar gate).
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_anomaly_mode = False
_relu_monitor: list[bytes] | None = None
_corrupt_ops: dict[str, float] = {}


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the precision new tensors are created in."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def detect_anomaly():
    """Raise NonFiniteError naming the primitive that first produced NaN/Inf."""
    global _anomaly_mode
    previous = _anomaly_mode
    _anomaly_mode = True
    try:
        yield
    finally:
        _anomaly_mode = previous


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.01):
    """Test hook: scale every gradient emitted by primitive ``op``."""
    _corrupt_ops[op] = factor
    try:
        yield
    finally:
        _corrupt_ops.pop(op, None)


@contextlib.contextmanager
def _monitor_relu(log: list[bytes]):
    global _relu_monitor
    previous = _relu_monitor
    _relu_monitor = log
    try:
        yield
    finally:
        _relu_monitor = previous


class Tensor:
    """An array plus the bookkeeping needed to backpropagate into it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap a primitive's output and, if needed, record how to differentiate it.

    ``backward`` maps the output gradient to one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _anomaly_mode and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by primitive '{op}'")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a one-element operand acts as a scalar gate."""
    if a.shape == b.shape:
        return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    if a.size == 1 and a.ndim <= 1:
        s, t, swap = a, b, False
    elif b.size == 1 and b.ndim <= 1:
        s, t, swap = b, a, True
    else:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    sval = s.data.reshape(())

    def backward(g):
        gs = np.asarray(np.sum(g * t.data), dtype=s.dtype).reshape(s.shape)
        gt = g * sval
        return (gt, gs) if swap else (gs, gt)

    return make_result(sval * t.data, (a, b), backward, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant (non-learnable) real."""
    f = float(factor)
    return make_result(a.data * a.dtype.type(f), (a,), lambda g: (g * a.dtype.type(f),), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _relu_monitor is not None:
        _relu_monitor.append(np.packbits(mask).tobytes())
    return make_result(np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
    return make_result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sigmoid": sigmoid, "scale": scale}


def elementwise(op: str, *args):
    """Dispatch by name to one of add, sub, mul, relu, sigmoid, scale."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


# --- linear algebra and shape ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of (m, k) @ (k, n), or batched (B, m, k) @ (B, k, n)."""
    ok = a.ndim == b.ndim and a.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return make_result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-stabilized exponential normalization along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward, "softmax")


softmax_axis = softmax


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(np.transpose(x.data, axes)), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(i != axis % len(ref) and p != q for i, (p, q) in enumerate(zip(ref, other))):
            raise DimensionError(f"concat: incompatible shapes {xs[0].shape} and {t.shape}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return make_result(
        np.concatenate([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return make_result(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean"
    )


# --- backward ----------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it with d loss / d leaf.

    Leaf gradients accumulate across calls until reset.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        factor = _corrupt_ops.get(node.op)
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if factor is not None:
                pg = pg * factor
            if _anomaly_mode and not np.all(np.isfinite(pg)):
                raise NonFiniteError(f"non-finite gradient from primitive '{node.op}'")
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# --- finite-difference oracle ------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    skipped: int
    worst_index: int | None = None


def rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-6,
    indices: Iterable[int] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    Coordinates whose +/- eps probes land on different sides of any relu kink
    are skipped. ``indices`` restricts the check to a subset of flat positions.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    if not np.all(np.isfinite(x.data)):
        raise ContractError("grad_check input contains non-finite values")
    x.requires_grad = True
    x.grad = None
    with detect_anomaly():
        out = f(x)
        backward(out)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).astype(np.float64)
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(x.size) if indices is None else list(indices)
    worst, worst_i, checked, skipped = 0.0, None, 0, 0
    with no_grad():
        for i in idx:
            orig = flat[i]
            kinks_p: list[bytes] = []
            kinks_m: list[bytes] = []
            flat[i] = orig + eps
            with _monitor_relu(kinks_p), detect_anomaly():
                fp = float(f(x).data)
            flat[i] = orig - eps
            with _monitor_relu(kinks_m), detect_anomaly():
                fm = float(f(x).data)
            flat[i] = orig
            if kinks_p != kinks_m:
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * eps)
            err = float(rel_err(analytic[i], numeric))
            checked += 1
            if worst_i is None or err > worst:
                worst, worst_i = err, i
    return GradCheckReport(worst, worst <= tol, checked, skipped, worst_i)


# --- serialization -----------------------------------------------------------


def write_tensor(stream: BinaryIO, name: str, array: np.ndarray) -> None:
    """Append one record: name, rank, extents, little-endian float32 values."""
    raw = name.encode("utf-8")
    array = np.asarray(array)
    stream.write(struct.pack("<I", len(raw)))
    stream.write(raw)
    stream.write(struct.pack("<I", array.ndim))
    stream.write(struct.pack(f"<{array.ndim}I", *array.shape))
    stream.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensor(stream: BinaryIO) -> tuple[str, np.ndarray] | None:
    """Read one record, or return None at a clean end of stream."""
    head = stream.read(4)
    if not head:
        return None
    if len(head) < 4:
        raise ValueError("truncated tensor record header")
    (nlen,) = struct.unpack("<I", head)
    name = stream.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", stream.read(4))
    shape = struct.unpack(f"<{rank}I", stream.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError(f"truncated payload for tensor {name!r}")
    return name, np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensors(stream: BinaryIO, named: dict[str, np.ndarray]) -> None:
    for name, array in named.items():
        write_tensor(stream, name, array)


def load_tensors(stream: BinaryIO) -> dict[str, np.ndarray]:
    out = {}
    while (rec := read_tensor(stream)) is not None:
        out[rec[0]] = rec[1]
    return out
