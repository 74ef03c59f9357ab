"""Dense-tensor arithmetic with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array; operations executed while a
:class:`Tape` is active are recorded so that :func:`backward` can replay
them in reverse and accumulate gradients.  Only the operations the matching
pipeline needs are provided; training runs in float32, gradient
verification re-runs in float64 (see :func:`check_gradients`).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import digamma, gammaln


class TapeConsumedError(RuntimeError):
    """Raised when backward is called a second time on the same tape."""


class NumericError(RuntimeError):
    """Raised when a numeric path produces non-finite values."""


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager around the forward computation, then call
    :func:`backward` on the scalar loss.  A tape can be consumed exactly
    once.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


class _Node:
    __slots__ = ("out", "parents", "grad_fn")

    def __init__(self, out: "Tensor", parents: tuple["Tensor", ...],
                 grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.out = out
        self.parents = parents
        self.grad_fn = grad_fn


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense n-d array with optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the recorded op functions
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _record(out: Tensor, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, parents, grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.shape),
                                           _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    out = Tensor(a.data ** e)
    return _record(out, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out = Tensor(np.maximum(a.data, floor))
    mask = (a.data > floor).astype(a.data.dtype)
    return _record(out, (a,), lambda g: (g * mask,))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = (a.data > 0).astype(a.data.dtype)
    return _record(out, (a,), lambda g: (g * mask,))


def lgamma(a: Tensor) -> Tensor:
    out = Tensor(gammaln(a.data).astype(a.data.dtype))
    return _record(out, (a,), lambda g: (g * digamma(a.data).astype(a.data.dtype),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _record(out, (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype) / n,)

    return _record(out, (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def index_select(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows along axis 0; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.data[idx])

    def grad_fn(g):
        acc = np.zeros(a.shape, dtype=a.data.dtype)
        np.add.at(acc, idx, g)
        return (acc,)

    return _record(out, (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# nonlinearities with pipeline-specific contracts


def apply_softmax(logits: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along `axis`; entries positive, sum to 1."""
    if not isinstance(axis, (int, np.integer)):
        raise ValueError("axis must be an integer")
    if axis >= logits.data.ndim or axis < -logits.data.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {logits.data.ndim}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("softmax input must be finite")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (logits,), grad_fn)


def apply_softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stabilized; strictly positive for finite input."""
    if np.any(np.isnan(x.data)):
        raise ValueError("softplus input contains NaN")
    d = x.data
    y = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    out = Tensor(y)
    sig = 1.0 / (1.0 + np.exp(-d))
    return _record(out, (x,), lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# convolution / pooling


def convolve_1d(inp: Tensor, kernel: Tensor, bias: Tensor,
                stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over the last axis.

    inp: (M, C_in, L), kernel: (C_out, C_in, K), bias: (C_out,).
    Output length L' = floor((L + 2*padding - K) / stride) + 1.
    """
    if inp.data.ndim != 3 or kernel.data.ndim != 3:
        raise ValueError("convolve_1d expects input (M,C_in,L) and kernel (C_out,C_in,K)")
    m, c_in, length = inp.shape
    c_out, c_in_k, k = kernel.shape
    if c_in != c_in_k:
        raise ValueError(f"channel mismatch: input has {c_in}, kernel expects {c_in_k}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} != ({c_out},)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if k > length + 2 * padding:
        raise ValueError(f"kernel size {k} exceeds padded length {length + 2 * padding}")

    x = np.pad(inp.data, ((0, 0), (0, 0), (padding, padding))) if padding else inp.data
    l_out = (length + 2 * padding - k) // stride + 1
    y = np.zeros((m, c_out, l_out), dtype=inp.data.dtype)
    for tap in range(k):
        win = x[:, :, tap:tap + l_out * stride:stride]           # (M, C_in, L')
        y += np.einsum("oc,mcl->mol", kernel.data[:, :, tap], win, optimize=True)
    y += bias.data[None, :, None]
    out = Tensor(y)

    def grad_fn(g):
        gx_pad = np.zeros_like(x)
        gk = np.zeros_like(kernel.data)
        for tap in range(k):
            win = x[:, :, tap:tap + l_out * stride:stride]
            gk[:, :, tap] = np.einsum("mol,mcl->oc", g, win, optimize=True)
            gx_pad[:, :, tap:tap + l_out * stride:stride] += np.einsum(
                "oc,mol->mcl", kernel.data[:, :, tap], g, optimize=True)
        gx = gx_pad[:, :, padding:padding + length] if padding else gx_pad
        gb = g.sum(axis=(0, 2))
        return (gx, gk, gb)

    return _record(out, (inp, kernel, bias), grad_fn)


def convolve_2d(inp: Tensor, kernel: Tensor, bias: Tensor,
                stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation on a single image.

    inp: (C_in, H, W), kernel: (C_out, C_in, K, K), bias: (C_out,).
    """
    if inp.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError("convolve_2d expects input (C_in,H,W) and kernel (C_out,C_in,K,K)")
    c_in, h, w = inp.shape
    c_out, c_in_k, kh, kw = kernel.shape
    if c_in != c_in_k:
        raise ValueError(f"channel mismatch: input has {c_in}, kernel expects {c_in_k}")
    x = np.pad(inp.data, ((0, 0), (padding, padding), (padding, padding))) if padding else inp.data
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    y = np.zeros((c_out, h_out, w_out), dtype=inp.data.dtype)
    for ki in range(kh):
        for kj in range(kw):
            win = x[:, ki:ki + h_out * stride:stride, kj:kj + w_out * stride:stride]
            y += np.tensordot(kernel.data[:, :, ki, kj], win, axes=([1], [0]))
    y += bias.data[:, None, None]
    out = Tensor(y)

    def grad_fn(g):
        gx_pad = np.zeros_like(x)
        gk = np.zeros_like(kernel.data)
        for ki in range(kh):
            for kj in range(kw):
                win = x[:, ki:ki + h_out * stride:stride, kj:kj + w_out * stride:stride]
                gk[:, :, ki, kj] = np.tensordot(g, win, axes=([1, 2], [1, 2]))
                gx_pad[:, ki:ki + h_out * stride:stride, kj:kj + w_out * stride:stride] += \
                    np.tensordot(kernel.data[:, :, ki, kj], g, axes=([0], [0]))
        gx = gx_pad[:, padding:padding + h, padding:padding + w] if padding else gx_pad
        gb = g.sum(axis=(1, 2))
        return (gx, gk, gb)

    return _record(out, (inp, kernel, bias), grad_fn)


def avg_pool_2d(inp: Tensor, window: int) -> Tensor:
    """Exact non-overlapping window means; spatial dims must divide evenly."""
    c, h, w = inp.shape
    if h % window or w % window:
        raise ValueError(f"pool window {window} does not divide {h}x{w}")
    hw, ww = h // window, w // window
    y = inp.data.reshape(c, hw, window, ww, window).mean(axis=(2, 4))
    out = Tensor(y)
    scale = 1.0 / (window * window)

    def grad_fn(g):
        gx = np.broadcast_to(g[:, :, None, :, None] * scale,
                             (c, hw, window, ww, window)).reshape(c, h, w)
        return (gx.astype(inp.data.dtype),)

    return _record(out, (inp,), grad_fn)


# ---------------------------------------------------------------------------
# backward + verification


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) into .grad of every requires_grad tensor."""
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeConsumedError("tape already consumed by a previous backward")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        loss.grad = grads[id(loss)]
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.grad_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
            parent.grad = grads[key]


def grad_of(f: Callable[[Tensor], Tensor], point: Tensor) -> np.ndarray:
    """Analytic gradient of a scalar function at `point` (fresh tape)."""
    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    backward(y, tape)
    if x.grad is None:
        return np.zeros_like(x.data)
    return x.grad


def check_gradients(f: Callable[[Tensor], Tensor], point: Tensor,
                    step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - central| / max(1,
    |analytic| + |central|); evaluation runs in float64.
    """
    if not (1e-7 <= step <= 1e-3):
        raise ValueError(f"step {step} outside [1e-7, 1e-3]")
    x0 = point.data.astype(np.float64)
    analytic = grad_of(f, Tensor(x0)).astype(np.float64)

    flat = x0.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - step
        fm = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        central = (fp - fm) / (2.0 * step)
        a = analytic.ravel()[i]
        rel = abs(a - central) / max(1.0, abs(a) + abs(central))
        worst = max(worst, rel)
    return worst


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, dtype=np.float32) -> np.ndarray:
    """Fan-in scaled normal init for conv/linear weights."""
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)
