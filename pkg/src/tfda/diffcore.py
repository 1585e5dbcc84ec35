"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operations the adaptation losses and the dual-branch network need
are provided.  Every op records a closure that accumulates into its parents'
``grad`` arrays; :meth:`Tensor.backward` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

MAGIC = b"TFDA0001"

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class ContractError(ValueError):
    """Raised when an operation's shape or value contract is violated."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor, clamp: float = 0.0) -> Tensor:
    """Natural log; with ``clamp > 0`` the input is floored at ``clamp``
    and the floored entries receive zero gradient."""
    if clamp > 0:
        keep = ~(a.data < clamp)  # NaN stays NaN rather than being floored
        x = np.where(keep, a.data, clamp)
        return _make(np.log(x), (a,), lambda g: (np.where(keep, g / x, 0.0),))
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), lambda g: (np.where(out > 0, g, 0.0),))


# -- reductions and shape ---------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / max(n, 1))


def amax(a: Tensor, axis: int = -1) -> Tensor:
    """Max along ``axis``; gradient goes to the first maximal entry."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ContractError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


# -- normalisation / probability ops ---------------------------------------

def softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (logits,), bw)


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (logits,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def logsumexp(x: Tensor, axis: int = -1, where: Optional[np.ndarray] = None) -> Tensor:
    """Stable log-sum-exp over ``axis``; ``where`` masks entries out of the sum.

    At least one entry per row must be kept.
    """
    mask = np.ones(x.shape, dtype=bool) if where is None else np.broadcast_to(where, x.shape)
    xm = np.where(mask, x.data, -np.inf)
    m = xm.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(xm - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s
    return _make(out, (x,), lambda g: (np.expand_dims(g, axis) * w,))


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit norm; rows with norm below ``eps``
    are divided by ``eps`` instead."""
    norm = np.sqrt((v.data ** 2).sum(axis=-1, keepdims=True))
    small = norm < eps
    denom = np.where(small, eps, norm)
    out = v.data / denom

    def bw(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(small, g / eps, (g - out * proj) / denom),)

    return _make(out, (v,), bw)


def l2_norm(v: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; zero-norm rows get zero gradient."""
    norm = np.sqrt((v.data ** 2).sum(axis=axis))
    safe = np.where(norm > 0, norm, 1.0)

    def bw(g):
        scale = np.where(norm > 0, g / safe, 0.0)
        return (v.data * np.expand_dims(scale, axis),)

    return _make(norm, (v,), bw)


# -- network layers ---------------------------------------------------------
#
# The network runs channels-last (B x S x F) internally so that im2col needs a
# single copy and no transposes; conv1d / maxpool1d / batchnorm1d keep the
# conventional B x C x S contract and wrap the channels-last kernels.

def conv1d_nlc(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
               stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a B x S x Ch batch with F x Ch x k filters -> B x S' x F."""
    if x.ndim != 3:
        raise ContractError(f"conv1d input must be rank 3, got rank {x.ndim}")
    if weight.ndim != 3:
        raise ContractError(f"conv1d weight must be F x Ch x k, got rank {weight.ndim}")
    B, S, Ch = x.shape
    F, wch, k = weight.shape
    if wch != Ch:
        raise ContractError(f"conv1d channel dimension mismatch: input {Ch}, weight {wch}")
    if bias is not None and bias.shape != (F,):
        raise ContractError(f"conv1d bias dimension mismatch: expected ({F},), got {bias.shape}")
    if stride < 1:
        raise ContractError("conv1d stride must be >= 1")
    if k > S + 2 * padding:
        raise ContractError(f"conv1d kernel size {k} exceeds padded length {S + 2 * padding}")
    S_out = (S + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    # cols[b, s, c, j] = xp[b, s*stride + j, c]
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride]
    cols = win.reshape(B * S_out, Ch * k)
    w2 = weight.data.reshape(F, Ch * k)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, S_out, F)

    def bw(g):
        g2 = g.reshape(B * S_out, F)
        gw = (g2.T @ cols).reshape(F, Ch, k) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(B, S_out, Ch, k)
            gxp = np.zeros_like(xp)
            stop = (S_out - 1) * stride + 1
            for j in range(k):
                gxp[:, j:j + stop:stride, :] += gcols[:, :, :, j]
            gx = gxp[:, padding:padding + S] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a B x Ch x S batch with F x Ch x k filters -> B x F x S'."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ContractError(f"conv1d input must be B x Ch x S, got rank {x.ndim}")
    out = conv1d_nlc(transpose(x, (0, 2, 1)), as_tensor(weight),
                     None if bias is None else as_tensor(bias), stride, padding)
    return transpose(out, (0, 2, 1))


def maxpool_nlc(x: Tensor) -> Tensor:
    """Size-2, stride-2 max pooling over axis 1 (an odd trailing step is dropped)."""
    n = x.shape[1] // 2
    a, b = x.data[:, 0:2 * n:2], x.data[:, 1:2 * n:2]
    first = a >= b
    out = np.where(first, a, b)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, 0:2 * n:2] = np.where(first, g, 0.0)
        gx[:, 1:2 * n:2] = np.where(first, 0.0, g)
        return (gx,)

    return _make(out, (x,), bw)


def maxpool1d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last axis of B x C x S (remainder dropped)."""
    if size != 2:
        raise ContractError("only size-2 pooling is implemented")
    return transpose(maxpool_nlc(transpose(as_tensor(x), (0, 2, 1))), (0, 2, 1))


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1


def batchnorm_nlc(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
                  running: Optional[RunningStats] = None, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over every axis except the last (channel) one.

    Train mode normalises with batch statistics and, when ``running`` is given,
    updates it in place (unbiased variance).  Eval mode uses ``running``.
    """
    F = x.shape[-1]
    axes = tuple(range(x.ndim - 1))
    n = x.data.size // F if F else 0
    if mode == "train":
        if n < 1:
            raise ContractError("batchnorm needs at least one value per channel")
        mu = x.data.mean(axis=axes)
        centred = x.data - mu
        c2 = centred.reshape(-1, F)
        var = np.einsum("if,if->f", c2, c2) / n
        if running is not None:
            m = running.momentum
            unbiased = var * n / (n - 1) if n > 1 else var
            running.mean[:] = (1 - m) * running.mean + m * mu
            running.var[:] = (1 - m) * running.var + m * unbiased
    elif mode == "eval":
        if running is None:
            raise ContractError("batchnorm eval mode needs running statistics")
        mu, var = running.mean, running.var
        centred = x.data - mu
    else:
        raise ContractError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = np.einsum("if,if->f", g.reshape(-1, F), xhat.reshape(-1, F))
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data
        if mode == "train":
            gx = (inv / n) * (n * gxhat - (gb * gamma.data) - xhat * (gg * gamma.data))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
                running: Optional[RunningStats] = None, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation of a B x F x S tensor (see :func:`batchnorm_nlc`)."""
    out = batchnorm_nlc(transpose(as_tensor(x), (0, 2, 1)), gamma, beta, mode, running, eps)
    return transpose(out, (0, 2, 1))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# -- parameter sets ---------------------------------------------------------

ParamSet = Dict[str, Tensor]


def shape_compatible(a: Mapping[str, Tensor], b: Mapping[str, Tensor]) -> bool:
    return set(a) == set(b) and all(a[k].shape == b[k].shape for k in a)


def copy_params(params: Mapping[str, Tensor], requires_grad: Optional[bool] = None) -> ParamSet:
    return {
        k: Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad)
        for k, v in params.items()
    }


def serialize_params(params: Mapping[str, np.ndarray | Tensor], header: Sequence[int] = ()) -> bytes:
    """Encode arrays as ``MAGIC`` + optional u32 header block + records.

    The header block is written only when ``header`` is non-empty: a u32 count
    followed by that many u32 values.  Each record is name length (u32),
    UTF-8 name, rank (u32), dims (u32 each), values (f64), all little endian.
    """
    parts = [MAGIC]
    if header:
        parts.append(struct.pack(f"<I{len(header)}I", len(header), *header))
    for name, arr in params.items():
        a = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_params(blob: bytes, with_header: bool = False):
    """Inverse of :func:`serialize_params`; returns ``{name: ndarray}`` or
    ``(header, {name: ndarray})`` when ``with_header``."""
    if blob[:8] != MAGIC:
        raise ContractError("not a parameter file (bad magic bytes)")
    pos = 8
    header: list[int] = []

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise ContractError("truncated parameter file")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    if with_header:
        (count,) = read("<I")
        header = list(read(f"<{count}I"))
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = read("<I")
        if pos + nlen > len(blob):
            raise ContractError("truncated parameter file")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = read("<I")
        dims = read(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if dims else 1
        if pos + 8 * count > len(blob):
            raise ContractError(f"truncated values for parameter {name!r}")
        if name in out:
            raise ContractError(f"duplicate parameter name {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    return (header, out) if with_header else out


# -- gradient checking ------------------------------------------------------

@dataclass
class GradReport:
    errors: Dict[str, float] = field(default_factory=dict)
    tol: float = 1e-6
    failure: Optional[str] = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and all(e <= self.tol for e in self.errors.values())


def grad_check(fn: Callable[[ParamSet], Tensor], params: ParamSet,
               h: float = 1e-5, tol: float = 1e-6) -> GradReport:
    """Compare reverse-mode gradients with central differences.

    ``fn`` maps the parameter set to a scalar tensor and must be deterministic.
    Relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    report = GradReport(tol=tol)
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = fn(params)
    if not np.all(np.isfinite(loss.data)):
        report.failure = "<output>: non-finite loss"
        return report
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            num = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn(params).data)
                flat[i] = orig - h
                fm = float(fn(params).data)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    report.failure = f"{name}: non-finite loss under perturbation"
                    return report
                num[i] = (fp - fm) / (2 * h)
            a = analytic[name].reshape(-1)
            denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(num)))
            report.errors[name] = float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0
    return report


# -- optimiser --------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, t: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update.  Inputs are left untouched; the
    updated parameters and moments are returned."""
    if lr <= 0 or t < 1:
        raise ContractError("adam_step needs lr > 0 and t >= 1")
    if set(grads) - set(params):
        raise ContractError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    new_params: ParamSet = {}
    new_m, new_v = dict(state.m), dict(state.v)
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = Tensor(p.data.copy(), requires_grad=p.requires_grad)
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = beta1 * state.m[name] + (1 - beta1) * g
        v = beta2 * state.v[name] + (1 - beta2) * g * g
        new_m[name], new_v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = Tensor(p.data - step, requires_grad=p.requires_grad)
    return new_params, AdamState(new_m, new_v)


class Adam:
    """Stateful wrapper around :func:`adam_step` that updates tensors in place."""

    def __init__(self, params: ParamSet, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like(params)
        self.t = 0

    def step(self):
        self.t += 1
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        new, self.state = adam_step(self.params, grads, self.state, self.lr, self.t,
                                    self.beta1, self.beta2, self.eps)
        for k, p in self.params.items():
            p.data = new[k].data

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def iter_params(params: Mapping[str, Tensor]) -> Iterable[tuple[str, Tensor]]:
    return sorted(params.items())
