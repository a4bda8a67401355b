"""Tape-based reverse-mode autodiff over dense numpy arrays.

Each forward op records its parents and a backward closure on the output
tensor; `backward()` replays the tape in reverse topological order and then
releases it, so graphs live for exactly one forward/backward pass. Training
runs in float32; gradient checking switches the whole stack to float64 via
`set_precision` / the EXCITOR_PRECISION environment variable.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class DegenerateRowError(ValueError):
    """A softmax row had no finite entry to normalize over."""


class EmptyBatchError(ValueError):
    """A reduction had zero contributing elements."""


class VocabularyError(ValueError):
    """An index fell outside the embedding/vocabulary range."""


class ContractError(ValueError):
    """A caller violated an API precondition."""


_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32

# Test hook: when true, matmul backward is deliberately wrong so the
# gradient-check command can demonstrate a failing exit path.
_corrupt_matmul_backward = False


def set_precision(name: str) -> None:
    global _dtype
    if name not in _PRECISIONS:
        raise ContractError(f"unknown precision {name!r}, expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def current_dtype() -> np.dtype:
    return np.dtype(_dtype)


@contextmanager
def precision(name: str):
    """Temporarily switch the global float width."""
    global _dtype
    saved = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = saved


_env_precision = os.environ.get("EXCITOR_PRECISION")
if _env_precision:
    set_precision(_env_precision)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording; forwards inside run gradient-free."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind == "f" and arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = "param" if isinstance(self, Parameter) else "tensor"
        return f"<{tag} shape={self.data.shape} dtype={self.data.dtype} grad={self.requires_grad}>"

    def detach(self) -> "Tensor":
        return _raw(self.data, ())

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.data.shape}")
        return float(self.data.reshape(()))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def backward(self) -> None:
        """Reverse-accumulate from a scalar output, then drop the tape."""
        if self.data.size != 1:
            raise ShapeError(f"backward() starts from a scalar, shape is {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # interior node: free its gradient and its tape edges
                node.grad = None
                node._parents = ()
                node._backward = None

    # arithmetic sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise ContractError("tensor division only supports scalar divisors")

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """Leaf tensor owned by a model. Frozen parameters take part in the
    forward pass but receive no gradient and are skipped by optimizers."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True


def _raw(data: np.ndarray, parents: tuple) -> Tensor:
    """Wrap an op result without copying or recasting."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape the operand had before broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} @ {b.shape}") from e
    out = _raw(data, (a, b))
    if out.requires_grad:
        def bwd(dout):
            if _corrupt_matmul_backward:
                dout = dout * 1.01
            if a.requires_grad:
                _accum(a, _unbroadcast(dout @ _swap_last(b.data), a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(_swap_last(a.data) @ dout, b.shape))
        out._backward = bwd
    return out


def flat_matmul(x: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of x with a 2-D weight as one flat GEMM.
    Equivalent to matmul for stacked inputs, but avoids per-slice calls."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2:
        raise ShapeError(f"flat_matmul weight must be 2-D, got {w.shape}")
    if x.ndim == 2:
        return matmul(x, w)
    lead = x.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64))
    flat = reshape(x, (rows, x.shape[-1]))
    return reshape(matmul(flat, w), lead + (w.shape[1],))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _raw(a.data + b.data, (a, b))
    if out.requires_grad:
        def bwd(dout):
            if a.requires_grad:
                _accum(a, _unbroadcast(dout, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(dout, b.shape))
        out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _raw(a.data * b.data, (a, b))
    if out.requires_grad:
        def bwd(dout):
            if a.requires_grad:
                _accum(a, _unbroadcast(dout * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(dout * a.data, b.shape))
        out._backward = bwd
    return out


def scale(t: Tensor, s: float) -> Tensor:
    t = _as_tensor(t)
    out = _raw(t.data * t.data.dtype.type(s), (t,))
    if out.requires_grad:
        def bwd(dout):
            _accum(t, dout * t.data.dtype.type(s))
        out._backward = bwd
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    sig = _sigmoid(t.data)
    out = _raw(t.data * sig, (t,))
    if out.requires_grad:
        def bwd(dout):
            _accum(t, dout * sig * (1.0 + t.data * (1.0 - sig)))
        out._backward = bwd
    return out


def tanh(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    y = np.tanh(t.data)
    out = _raw(y, (t,))
    if out.requires_grad:
        def bwd(dout):
            _accum(t, dout * (1.0 - y * y))
        out._backward = bwd
    return out


def softmax_rows(t: Tensor) -> Tensor:
    """Softmax along the last axis. -inf entries get exactly zero weight;
    a row with no finite entry is an error rather than a NaN factory."""
    t = _as_tensor(t)
    m = np.max(t.data, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateRowError("softmax: a row has no finite entries")
    e = np.exp(t.data - m)
    y = e / np.sum(e, axis=-1, keepdims=True)
    out = _raw(y, (t,))
    if out.requires_grad:
        def bwd(dout):
            inner = np.sum(dout * y, axis=-1, keepdims=True)
            _accum(t, y * (dout - inner))
        out._backward = bwd
    return out


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalization over the last axis, elementwise gain."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 1 or weight.shape[0] != x.shape[-1]:
        raise ShapeError(f"rmsnorm gain {weight.shape} does not match feature dim of {x.shape}")
    c = x.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + x.data.dtype.type(eps))
    y = x.data * inv * weight.data
    out = _raw(y, (x, weight))
    if out.requires_grad:
        def bwd(dout):
            if x.requires_grad:
                u = dout * weight.data
                proj = np.sum(u * x.data, axis=-1, keepdims=True)
                _accum(x, inv * u - x.data * (inv**3) * (proj / c))
            if weight.requires_grad:
                g = dout * x.data * inv
                _accum(weight, g.reshape(-1, c).sum(axis=0))
        out._backward = bwd
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose target != ignore_index."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"targets {targets.shape} do not match logits rows {logits.shape}")
    vocab = logits.shape[1]
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyBatchError("cross_entropy: every target is ignored")
    tv = targets[valid]
    if tv.min() < 0 or tv.max() >= vocab:
        raise VocabularyError(f"target ids outside [0, {vocab})")
    m = np.max(logits.data, axis=1, keepdims=True)
    shifted = logits.data - m
    e = np.exp(shifted)
    sum_e = np.sum(e, axis=1, keepdims=True)
    lse = np.log(sum_e)[:, 0] + m[:, 0]
    rows = np.arange(logits.shape[0])
    picked = logits.data[rows[valid], tv]
    loss = (lse[valid] - picked).sum() / n_valid
    out = _raw(np.asarray(loss, dtype=logits.data.dtype), (logits,))
    if out.requires_grad:
        def bwd(dout):
            p = e / sum_e
            p[rows[valid], tv] -= 1.0
            p[~valid] = 0.0
            _accum(logits, p * (dout / n_valid))
        out._backward = bwd
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError(f"token ids must be integers, got dtype {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabularyError(f"token id outside [0, {vocab})")
    out = _raw(table.data[ids], (table,))
    if out.requires_grad:
        def bwd(dout):
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), dout.reshape(-1, table.shape[1]))
            _accum(table, g)
        out._backward = bwd
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shapes disagree: {[p.shape for p in parts]}") from e
    out = _raw(data, tuple(parts))
    if out.requires_grad:
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        def bwd(dout):
            for p, piece in zip(parts, np.split(dout, splits, axis=axis)):
                if p.requires_grad:
                    _accum(p, piece)
        out._backward = bwd
    return out


def transpose(t: Tensor, axes=None) -> Tensor:
    t = _as_tensor(t)
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(axes)
    out = _raw(np.transpose(t.data, axes), (t,))
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        def bwd(dout):
            _accum(t, np.transpose(dout, inverse))
        out._backward = bwd
    return out


def swap_last2(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    if t.ndim < 2:
        raise ShapeError(f"swap_last2 needs rank >= 2, got {t.shape}")
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return transpose(t, axes)


def reshape(t: Tensor, shape) -> Tensor:
    t = _as_tensor(t)
    try:
        data = t.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {t.shape} to {shape}") from e
    out = _raw(data, (t,))
    if out.requires_grad:
        def bwd(dout):
            _accum(t, dout.reshape(t.shape))
        out._backward = bwd
    return out


def expand(t: Tensor, shape) -> Tensor:
    """Broadcast to a larger shape; gradient sums back over expanded axes."""
    t = _as_tensor(t)
    try:
        data = np.broadcast_to(t.data, shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {t.shape} to {shape}") from e
    out = _raw(data, (t,))
    if out.requires_grad:
        def bwd(dout):
            _accum(t, _unbroadcast(dout, t.shape))
        out._backward = bwd
    return out


def masked_fill(t: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is true with a constant."""
    t = _as_tensor(t)
    mask = np.asarray(mask, dtype=bool)
    try:
        data = np.where(mask, t.data.dtype.type(value), t.data)
    except ValueError as e:
        raise ShapeError(f"mask {mask.shape} does not broadcast over {t.shape}") from e
    out = _raw(data, (t,))
    if out.requires_grad:
        def bwd(dout):
            _accum(t, _unbroadcast(np.where(mask, 0.0, dout), t.shape))
        out._backward = bwd
    return out


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    data = np.sum(t.data, axis=axis, keepdims=keepdims)
    out = _raw(np.asarray(data, dtype=t.data.dtype), (t,))
    if out.requires_grad:
        def bwd(dout):
            g = dout
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(t, np.broadcast_to(g, t.shape))
        out._backward = bwd
    return out


def rope_rotate(t: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position mix over (even, odd) channel pairs of the last axis.

    cos/sin carry one angle table per position, shape (seq, last_dim // 2),
    broadcast over any leading axes of t.
    """
    t = _as_tensor(t)
    hd = t.shape[-1]
    if hd % 2 != 0:
        raise ShapeError(f"rotary needs an even channel count, got {t.shape}")
    if cos.shape[-1] != hd // 2 or cos.shape != sin.shape:
        raise ShapeError(f"angle tables {cos.shape}/{sin.shape} do not match channels {hd}")
    xe = t.data[..., 0::2]
    xo = t.data[..., 1::2]
    data = np.empty_like(t.data)
    data[..., 0::2] = xe * cos - xo * sin
    data[..., 1::2] = xe * sin + xo * cos
    out = _raw(data, (t,))
    if out.requires_grad:
        def bwd(dout):
            de = dout[..., 0::2]
            do = dout[..., 1::2]
            g = np.empty_like(dout)
            g[..., 0::2] = de * cos + do * sin
            g[..., 1::2] = -de * sin + do * cos
            _accum(t, g)
        out._backward = bwd
    return out


def top_p_sample(probs: np.ndarray, top_p: float, rng) -> int:
    """Nucleus sampling over one probability row: keep the smallest
    descending-probability prefix whose mass reaches top_p, renormalize,
    draw one index."""
    if not 0.0 < top_p <= 1.0:
        raise ContractError(f"top_p must be in (0, 1], got {top_p}")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ShapeError(f"sampling expects a 1-D row, got {probs.shape}")
    if probs.size == 0 or np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ContractError("sampling needs a finite nonnegative probability row")
    total = probs.sum()
    if total <= 0:
        raise ContractError("sampling needs positive total mass")
    probs = probs / total
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, top_p, side="left")) + 1
    k = min(k, probs.size)
    keep = order[:k]
    w = probs[keep]
    w = w / w.sum()
    u = float(rng.uniform())
    pick = int(np.searchsorted(np.cumsum(w), u, side="right"))
    return int(keep[min(pick, k - 1)])
