"""Small dense tensor library with reverse-mode automatic differentiation.

Design notes:

* data are numpy arrays, float32 by default and row-major;
* there is no implicit broadcasting: operands of elementwise ops must have
  identical shapes, and tiling is spelled out with :func:`expand`;
* ``backward`` accumulates into ``.grad`` of every leaf that requires grad,
  so call :meth:`Tensor.zero_grad` (or set ``grad = None``) between steps.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True


class ShapeMismatch(ValueError):
    def __init__(self, op: str, a, b):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.shapes = (tuple(a), tuple(b))


class NonScalarLoss(ValueError):
    pass


class ChecksumMismatch(ValueError):
    pass


# when a list, piecewise-linear ops append their active-branch masks to it
_kink_trace: list | None = None


def _record_branch(mask: np.ndarray):
    if _kink_trace is not None:
        _kink_trace.append(mask)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype or DTYPE)
        # ascontiguousarray would turn 0-d scalars into shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; all of these are strict-shape ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(grads: dict, t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def backward(loss: Tensor):
    """Fill ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
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
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
        else:
            node._backward(g, grads)


# ---------------------------------------------------------------------------
# elementwise


def _same(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeMismatch(op, a.shape, b.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("add", a, b)

    def bw(g, grads):
        _acc(grads, a, g)
        _acc(grads, b, g)
    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("sub", a, b)

    def bw(g, grads):
        _acc(grads, a, g)
        _acc(grads, b, -g)
    return Tensor._make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("mul", a, b)

    def bw(g, grads):
        _acc(grads, a, g * b.data)
        _acc(grads, b, g * a.data)
    return Tensor._make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("div", a, b)
    out = a.data / b.data

    def bw(g, grads):
        _acc(grads, a, g / b.data)
        _acc(grads, b, -g * out / b.data)
    return Tensor._make(out, (a, b), bw, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g, grads):
        _acc(grads, a, g * c)
    return Tensor._make(a.data * a.data.dtype.type(c), (a,), bw, "scale")


def add_const(a, c: float) -> Tensor:
    a = as_tensor(a)

    def bw(g, grads):
        _acc(grads, a, g)
    return Tensor._make(a.data + a.data.dtype.type(c), (a,), bw, "add_const")


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g, grads):
        _acc(grads, a, 2.0 * g * a.data)
    return Tensor._make(a.data * a.data, (a,), bw, "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g, grads):
        _acc(grads, a, g * 0.5 / out)
    return Tensor._make(out, (a,), bw, "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    _record_branch(pos)

    def bw(g, grads):
        _acc(grads, a, g * pos)
    return Tensor._make(a.data * pos, (a,), bw, "relu")


def dropout(a, rate: float, rng) -> Tensor:
    """Inverted dropout: zero each entry with probability ``rate``, rescale survivors."""
    a = as_tensor(a)
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / np.float32(1.0 - rate)
    keep = keep.astype(a.data.dtype)

    def bw(g, grads):
        _acc(grads, a, g * keep)
    return Tensor._make(a.data * keep, (a,), bw, "dropout")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g, grads):
        _acc(grads, a, g * out * (1.0 - out))
    return Tensor._make(out.astype(a.data.dtype), (a,), bw, "sigmoid")


def maximum(a, c: float) -> Tensor:
    """Elementwise max against a constant; the subgradient at a tie is 0."""
    a = as_tensor(a)
    above = a.data > c
    _record_branch(above)

    def bw(g, grads):
        _acc(grads, a, g * above)
    return Tensor._make(np.where(above, a.data, a.data.dtype.type(c)), (a,), bw, "maximum")


def masked_fill(a, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value`` (gradient 0 there)."""
    a = as_tensor(a)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.shape:
        raise ShapeMismatch("masked_fill", a.shape, keep.shape)

    def bw(g, grads):
        _acc(grads, a, np.where(keep, g, 0).astype(g.dtype))
    return Tensor._make(np.where(keep, a.data, a.data.dtype.type(value)), (a,), bw, "masked_fill")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def bw(g, grads):
        _acc(grads, a, g.reshape(old))
    return Tensor._make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g, grads):
        _acc(grads, a, np.ascontiguousarray(g.transpose(inv)))
    return Tensor._make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw, "transpose")


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def expand(a, shape) -> Tensor:
    """Explicit tiling of size-1 (or missing leading) axes up to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatch("expand", a.shape, shape) from None
    lead = len(shape) - a.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1)

    def bw(g, grads):
        r = g.sum(axis=axes, keepdims=True) if axes else g
        _acc(grads, a, r.reshape(a.shape))
    return Tensor._make(np.ascontiguousarray(out), (a,), bw, "expand")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeMismatch("concat", ts[0].shape, t.shape)
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g, grads):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _acc(grads, t, np.ascontiguousarray(g[tuple(sl)]))
    return Tensor._make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, slice)) for p in parts)

    def bw(g, grads):
        full = np.zeros_like(a.data, dtype=g.dtype)
        if basic:
            full[idx] += g   # basic indexing cannot repeat an element
        else:
            np.add.at(full, idx, g)
        _acc(grads, a, full)
    return Tensor._make(np.ascontiguousarray(a.data[idx]), (a,), bw, "getitem")


def embed(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatch("embed", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table of {table.shape[0]} rows")

    def bw(g, grads):
        full = np.zeros_like(table.data, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _acc(grads, table, full)
    return Tensor._make(table.data[ids], (table,), bw, "embed")


# ---------------------------------------------------------------------------
# reductions and linear algebra


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, grads):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _acc(grads, a, np.broadcast_to(gg, a.shape).astype(g.dtype, copy=True))
    return Tensor._make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    def bw(g, grads):
        if a.requires_grad:
            _acc(grads, a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _acc(grads, b, np.swapaxes(a.data, -1, -2) @ g)
    return Tensor._make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w (+ b)`` for x of shape (..., d_in); leading axes are flattened."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch("linear", x.shape, w.shape)
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add_bias(y, b)
    return reshape(y, lead + (w.shape[1],))


def add_bias(x, b) -> Tensor:
    """Add a vector bias along the last axis of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeMismatch("add_bias", x.shape, b.shape)

    def bw(g, grads):
        _acc(grads, x, g)
        if b.requires_grad:
            _acc(grads, b, g.reshape(-1, b.shape[0]).sum(axis=0))
    return Tensor._make(x.data + b.data, (x, b), bw, "add_bias")


def softmax(a) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g, grads):
        _acc(grads, a, out * (g - (g * out).sum(axis=-1, keepdims=True)))
    return Tensor._make(out, (a,), bw, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    z = a.data - m
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g, grads):
        p = np.exp(out)
        _acc(grads, a, g - p * g.sum(axis=-1, keepdims=True))
    return Tensor._make(out, (a,), bw, "log_softmax")


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    a = as_tensor(a)
    d = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = None if gamma is None else as_tensor(gamma)
    bt = None if beta is None else as_tensor(beta)
    for p in (gm, bt):
        if p is not None and p.shape != (d,):
            raise ShapeMismatch("layer_norm", a.shape, p.shape)
    out = xhat if gm is None else xhat * gm.data
    if bt is not None:
        out = out + bt.data

    def bw(g, grads):
        gx = g if gm is None else g * gm.data
        if a.requires_grad:
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _acc(grads, a, dx)
        if gm is not None and gm.requires_grad:
            _acc(grads, gm, (g * xhat).reshape(-1, d).sum(axis=0))
        if bt is not None and bt.requires_grad:
            _acc(grads, bt, g.reshape(-1, d).sum(axis=0))
    parents = tuple(p for p in (a, gm, bt) if p is not None)
    return Tensor._make(out, parents, bw, "layer_norm")


def cross_entropy(logits, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    ``logits`` is (n, V); positions whose target equals ``ignore_index`` do not
    contribute to the sum or the count.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeMismatch("cross_entropy", logits.shape, targets.shape)
    keep = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(keep.sum())
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(keep)[0]
    nll = -logp[rows, targets[rows]]
    value = nll.sum(dtype=np.float64) / max(count, 1)

    def bw(g, grads):
        p = np.exp(logp)
        p[rows, targets[rows]] -= 1.0
        p[~keep] = 0.0
        _acc(grads, logits, (p * (g / max(count, 1))).astype(logits.data.dtype))
    return Tensor._make(np.asarray(value, dtype=logits.data.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_err: float
    excluded: int      # coordinates whose +-eps probes straddle a ReLU/max kink
    checked: int


def _branches(f, x):
    global _kink_trace
    _kink_trace = []
    try:
        value = float(f(x).data.sum(dtype=np.float64))
        return value, _kink_trace
    finally:
        _kink_trace = None


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def grad_check_report(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> GradCheckResult:
    """Compare autodiff with central differences, coordinate by coordinate.

    ``x`` is evaluated in float64 during the check (other leaves keep their
    dtype, which numpy promotes on contact), and restored afterwards.
    Relative error is |a - n| / (|a| + |n| + 1e-8). A coordinate is excluded
    when the two probes land on different sides of a ReLU or max kink, where
    the central difference does not estimate the (sub)gradient.
    """
    orig = x.data
    orig_grad = x.grad
    orig_flag = x.requires_grad
    try:
        x.data = orig.astype(np.float64)
        x.requires_grad = True
        x.grad = None
        out = f(x)
        backward(out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.astype(np.float64)
        flat = x.data.reshape(-1)
        errs, excluded = [], 0
        with no_grad():
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                fp, bp = _branches(f, x)
                flat[i] = keep - eps
                fm, bm = _branches(f, x)
                flat[i] = keep
                if not _same_branches(bp, bm):
                    excluded += 1
                    continue
                num = (fp - fm) / (2 * eps)
                a = analytic.reshape(-1)[i]
                errs.append(abs(a - num) / (abs(a) + abs(num) + 1e-8))
        return GradCheckResult(max(errs, default=0.0), excluded, len(errs))
    finally:
        x.data = orig
        x.grad = orig_grad
        x.requires_grad = orig_flag


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between autodiff and central differences (see grad_check_report)."""
    return grad_check_report(f, x, eps).max_rel_err


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Minimal parameter container: attributes that are Tensors, Modules or lists thereof."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in params.items():
            arr = np.asarray(state[n], dtype=p.data.dtype)
            if arr.shape != p.shape:
                raise ShapeMismatch(f"load {n}", p.shape, arr.shape)
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param(rng: np.random.Generator, shape, std: float | None = None, zeros: bool = False,
          ones: bool = False) -> Tensor:
    if zeros:
        arr = np.zeros(shape)
    elif ones:
        arr = np.ones(shape)
    else:
        if std is None:
            std = 1.0 / np.sqrt(shape[0])
        arr = rng.normal(0.0, std, size=shape)
    return Tensor(arr.astype(DTYPE), requires_grad=True)


# ---------------------------------------------------------------------------
# tensor container files: magic, version, manifest length, JSON manifest, payload

MAGIC = b"NDGT"
FORMAT_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"format_version": FORMAT_VERSION, "meta": meta or {},
                           "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    version, mlen = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    manifest = json.loads(blob[16:16 + mlen])
    base = 16 + mlen
    out = {}
    for e in manifest["tensors"]:
        raw = blob[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise ChecksumMismatch(f"{path}: checksum mismatch for {e['name']}")
        out[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(DTYPE)
    return out, manifest["meta"]


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays)))
