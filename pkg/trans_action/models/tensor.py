"""
Dense tensors with tape-based reverse-mode differentiation.

Every op takes `Tensor` inputs, computes its result with numpy and, when a
`ComputationTape` is active and any input requires a gradient, appends an
entry holding the inputs, the output and a backward rule. `backward()`
replays the tape in reverse recording order and accumulates gradients
additively, so a tensor used twice receives the sum of both contributions.

Ops accept leading batch axes: a `[B, N, D]` sequence batch flows through the
same code path as a single `[N, D]` sequence, and no op mixes samples.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from trans_action.exceptions import NumericError, ShapeError
from trans_action.utils.config import config

_DTYPES = {32: np.float32, 64: np.float64}
_settings = {"precision": config.PRECISION, "debug": config.DEBUG}
_local = threading.local()


def set_precision(bits: int) -> None:
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _settings["precision"] = bits


def get_precision() -> int:
    return _settings["precision"]


def get_dtype():
    return _DTYPES[_settings["precision"]]


@contextmanager
def precision(bits: int):
    previous = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


def set_debug(enabled: bool) -> None:
    """Turn NaN/Inf checks on every newly created tensor on or off."""
    _settings["debug"] = bool(enabled)


class Tensor:
    """Row-major dense array plus an optional gradient buffer of the same shape."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=get_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        if _settings["debug"] and not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in tensor '{name or 'anonymous'}' of shape {self.shape}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


def tensor(data, name: Optional[str] = None) -> Tensor:
    """Constant tensor; the data is copied."""
    return Tensor(np.array(data, dtype=get_dtype()), name=name)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Trainable leaf tensor; the data is copied."""
    return Tensor(np.array(data, dtype=get_dtype()), requires_grad=True, name=name)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else tensor(value)


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ComputationTape:
    """Append-only record of differentiable ops; use as a context manager to activate."""

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_rule) -> None:
        self.entries.append(TapeEntry(op, inputs, output, backward_rule))

    def clear(self) -> None:
        self.entries = []

    def __len__(self):
        return len(self.entries)

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False


def current_tape() -> Optional[ComputationTape]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _emit(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_rule) -> Tensor:
    tape = current_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked, name=op)
    if tracked:
        tape.record(op, inputs, out, backward_rule)
    return out


def backward(loss: Tensor, tape: ComputationTape) -> None:
    """Populate `.grad` on every requires_grad tensor reachable from `loss`."""
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        upstream = entry.output.grad
        if upstream is None:
            continue
        for node, grad in zip(entry.inputs, entry.backward(upstream)):
            if grad is None or not node.requires_grad:
                continue
            grad = np.asarray(grad, dtype=node.data.dtype)
            # Never accumulate in place: grads may alias other buffers
            node.grad = grad if node.grad is None else node.grad + grad


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# === Linear algebra ===

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """`[..., M, K] @ [K, P]` (shared weight) or `[..., M, K] @ [..., K, P]` (same batch)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ for shapes {a.shape} and {b.shape}")

    shared_weight = b.ndim == 2 and a.ndim > 2

    def rule(g):
        grad_a = g @ _swap(b.data)
        if shared_weight:
            k, p = b.shape
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, p)
        else:
            grad_b = _swap(a.data) @ g
        return grad_a, grad_b

    return _emit("matmul", a.data @ b.data, (a, b), rule)


def transpose_last_two(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose_last_two needs at least 2 axes, got shape {x.shape}")
    return _emit("transpose", np.ascontiguousarray(_swap(x.data)), (x,), lambda g: (_swap(g),))


# === Elementwise ===

def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum; `y` may also match only the trailing axes of `x` (bias, positional table)."""
    if x.shape == y.shape:
        return _emit("add", x.data + y.data, (x, y), lambda g: (g, g))
    if y.ndim == 0 or y.ndim > x.ndim or x.shape[x.ndim - y.ndim:] != y.shape:
        raise ShapeError(f"add: cannot broadcast shape {y.shape} onto {x.shape}")

    def rule(g):
        return g, g.reshape((-1,) + y.shape).sum(axis=0)

    return _emit("add", x.data + y.data, (x, y), rule)


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"mul: shapes differ, {x.shape} and {y.shape}")
    return _emit("mul", x.data * y.data, (x, y), lambda g: (g * y.data, g * x.data))


def elementwise(x: Tensor, y: Tensor, op: str) -> Tensor:
    if op == "add":
        return add(x, y)
    if op == "mul":
        return mul(x, y)
    raise ValueError(f"unknown elementwise op '{op}' (expected 'add' or 'mul')")


def scale(x: Tensor, factor: float) -> Tensor:
    return _emit("scale", x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _emit("relu", np.where(active, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * active,))


# === Shape plumbing ===

def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}") from e
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = _axis(axis, ndim)
    for t in tensors:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(f"concat along axis {axis}: shapes {[t.shape for t in tensors]} disagree off-axis")

    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> List[Tensor]:
    axis = _axis(axis, x.ndim)
    if sum(sizes) != x.shape[axis] or any(s < 1 for s in sizes):
        raise ShapeError(f"split sizes {list(sizes)} do not partition extent {x.shape[axis]} of axis {axis}")

    parts = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def rule(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        parts.append(_emit("split", x.data[index].copy(), (x,), rule))
        start += size
    return parts


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    return concat([reshape(r, (1,) + r.shape) for r in rows], axis=0)


# === Reductions ===

def sum_all(x: Tensor) -> Tensor:
    return _emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def mean_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = _axis(axis, x.ndim)
    n = x.shape[axis]

    def rule(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _emit("mean", x.data.mean(axis=axis, keepdims=keepdims), (x,), rule)


# === Normalisation ===

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis of {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def rule(g):
        g_hat = g * gain.data
        grad_x = inv_std / d * (
            d * g_hat
            - g_hat.sum(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        grad_gain = (g * x_hat).reshape(-1, d).sum(axis=0)
        grad_bias = g.reshape(-1, d).sum(axis=0)
        return grad_x, grad_gain, grad_bias

    return _emit("layer_norm", x_hat * gain.data + bias.data, (x, gain, bias), rule)


# === Loss primitive ===

def weighted_softmax_nll(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """
    Mean over the batch of `-log(exp(z_t) / sum_k w_k exp(z_k))`.

    With all weights 1 this is cross-entropy, computed by the very same
    arithmetic. A class with weight 0 gets exactly zero gradient unless it is
    the target.
    """
    if logits.ndim != 2:
        raise ShapeError(f"expected [B, C] logits, got shape {logits.shape}")
    b, c = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (b,):
        raise ShapeError(f"expected {b} targets, got shape {targets.shape}")
    if weights.shape != (b, c):
        raise ShapeError(f"expected weights of shape {(b, c)}, got {weights.shape}")

    rows = np.arange(b)
    # Shift by the max over kept classes; the target is always kept
    kept = weights > 0
    shifted = logits.data - np.where(kept, logits.data, -np.inf).max(axis=1, keepdims=True)
    weighted = weights * np.exp(np.where(kept, shifted, -np.inf))
    denom = weighted.sum(axis=1)
    loss = -(shifted[rows, targets] - np.log(denom)).mean()

    def rule(g):
        grad = weighted / denom[:, None]
        grad[rows, targets] -= 1.0
        return (grad * (g / b),)

    return _emit("softmax_nll", np.asarray(loss), (logits,), rule)


def first_non_finite(named: Iterable[Tuple[str, Tensor]]) -> Optional[str]:
    """Name of the first tensor whose data or gradient holds NaN/Inf."""
    for name, t in named:
        if not np.all(np.isfinite(t.data)):
            return name
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            return f"{name}.grad"
    return None
