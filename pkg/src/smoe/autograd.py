"""Dense-tensor math on numpy with a reverse-mode gradient tape.

Training runs in float32; oracle and identity tests rerun everything in
float64. Tensors are treated as immutable once built: every operation
returns a fresh Tensor and never writes into its inputs. While a GradTape
is active, each primitive appends a record (inputs, outputs, backward
closure); GradTape.backward replays the records in reverse order and
accumulates gradients per tensor identity.

Non-finite policy: exported operations fail fast with the location of the
first bad value instead of letting NaN/Inf propagate. -inf is permitted
only as a mask sentinel in *inputs* to softmax/logsumexp.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NumericError(RuntimeError):
    """A non-finite value appeared where a finite one is required."""


def check_finite(arr: np.ndarray, where: str) -> None:
    """Raise NumericError naming the first offending flat index."""
    if np.isfinite(arr).all():
        return
    flat = np.ravel(arr)
    bad = int(np.flatnonzero(~np.isfinite(flat))[0])
    raise NumericError(f"{where}: non-finite value {flat[bad]!r} at flat index {bad}")


# -----------------------------------------------------------------------------
# Tensor and tape
# -----------------------------------------------------------------------------


class Tensor:
    """Dense n-d array with a float32/float64 precision tag."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar; scalars are wrapped at the operand's dtype
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != dtype:
            raise TypeError(f"mixed dtypes {x.dtype} vs {dtype}; cast explicitly")
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Record:
    __slots__ = ("outputs", "inputs", "fn")

    def __init__(self, outputs, inputs, fn):
        self.outputs = outputs
        self.inputs = inputs
        self.fn = fn


_ACTIVE_TAPE: "GradTape | None" = None


def record(outputs: tuple, inputs: tuple, fn) -> None:
    """Append a primitive application to the active tape, if any.

    `fn` maps a tuple of output gradients (entries may be None) to a tuple
    of input gradients aligned with `inputs` (entries may be None). Used by
    every primitive here and by custom fused ops elsewhere.
    """
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._records.append(_Record(outputs, inputs, fn))


class Gradients:
    """Mapping from tensor identity to its accumulated gradient array."""

    def __init__(self, by_id: dict):
        self._by_id = by_id

    def wrt(self, t: Tensor) -> np.ndarray:
        """Gradient for `t`; zeros if `t` is unreachable from the loss."""
        g = self._by_id.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g


class GradTape:
    """Records primitive applications in execution (= topological) order.

    Confined to one logical thread. backward() may be called once; call
    reset() to reuse the tape for a new step.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._used = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a GradTape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def reset(self) -> None:
        self._records.clear()
        self._used = False

    def backward(self, loss: Tensor) -> Gradients:
        """Reverse-replay the tape from a scalar loss; returns Gradients."""
        if self._used:
            raise RuntimeError("backward already called on this tape; reset() first")
        self._used = True
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")

        by_id: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            out_grads = tuple(by_id.get(id(o)) for o in rec.outputs)
            if all(g is None for g in out_grads):
                continue
            in_grads = rec.fn(out_grads)
            for t, g in zip(rec.inputs, in_grads):
                if g is None:
                    continue
                if g.shape != t.data.shape:
                    raise AssertionError(
                        f"gradient shape {g.shape} != tensor shape {t.data.shape}"
                    )
                acc = by_id.get(id(t))
                by_id[id(t)] = g if acc is None else acc + g
        return Gradients(by_id)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -----------------------------------------------------------------------------
# Primitives
# -----------------------------------------------------------------------------


def constant(x, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    record((out,), (a, b), lambda gs: (
        _unbroadcast(gs[0], a.data.shape),
        _unbroadcast(gs[0], b.data.shape),
    ))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    record((out,), (a, b), lambda gs: (
        _unbroadcast(gs[0], a.data.shape),
        _unbroadcast(-gs[0], b.data.shape),
    ))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    record((out,), (a, b), lambda gs: (
        _unbroadcast(gs[0] * bd, ad.shape),
        _unbroadcast(gs[0] * ad, bd.shape),
    ))
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data
    record((out,), (a, b), lambda gs: (
        _unbroadcast(gs[0] / bd, ad.shape),
        _unbroadcast(-gs[0] * ad / (bd * bd), bd.shape),
    ))
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    record((out,), (a,), lambda gs: (-gs[0],))
    return out


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a scalar (non-tensor) exponent."""
    p = float(p)
    out = Tensor(a.data ** p)
    ad = a.data
    record((out,), (a,), lambda gs: (gs[0] * p * ad ** (p - 1.0),))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    od = out.data
    record((out,), (a,), lambda gs: (gs[0] * od,))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    ad = a.data
    record((out,), (a,), lambda gs: (gs[0] / ad,))
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    od = out.data
    record((out,), (a,), lambda gs: (gs[0] * (1.0 - od * od),))
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, stable for large |x|; sigma(x)+sigma(-x) == 1."""
    x = a.data
    out_d = np.empty_like(x)
    pos = x >= 0
    out_d[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_d[~pos] = ex / (1.0 + ex)
    out = Tensor(out_d)
    check_finite(out_d, "sigmoid")
    record((out,), (a,), lambda gs: (gs[0] * out_d * (1.0 - out_d),))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Row-major matrix product, batched over leading extents."""
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    check_finite(out.data, "matmul")
    ad, bd = a.data, b.data

    def bwd(gs):
        g = gs[0]
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    record((out,), (a, b), bwd)
    return out


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def bwd(gs):
        g = gs[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    record((out,), (a,), bwd)
    return out


def mean_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    shape = a.data.shape
    n = a.data.size / out.data.size

    def bwd(gs):
        g = gs[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    record((out,), (a,), bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape
    record((out,), (a,), lambda gs: (gs[0].reshape(orig),))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)
    record((out,), (a,), lambda gs: (np.transpose(gs[0], inv),))
    return out


def getitem(a: Tensor, idx) -> Tensor:
    """Slice/index; backward scatter-adds into the source shape."""
    out = Tensor(a.data[idx])
    shape, dtype = a.data.shape, a.data.dtype

    def bwd(gs):
        g = np.zeros(shape, dtype=dtype)
        np.add.at(g, idx, gs[0])
        return (g,)

    record((out,), (a,), bwd)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    """Join tensors along `axis`; backward splits the gradient back."""
    tensors = tuple(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(gs):
        parts = np.split(gs[0], np.cumsum(sizes[:-1]), axis=axis)
        return tuple(np.ascontiguousarray(p) for p in parts)

    record((out,), tensors, bwd)
    return out


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows: table (V, D), ids int (...,) -> (..., D)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"row index out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    out = Tensor(table.data[ids])
    shape, dtype = table.data.shape, table.data.dtype

    def bwd(gs):
        g = np.zeros(shape, dtype=dtype)
        np.add.at(g, ids, gs[0])
        return (g,)

    record((out,), (table,), bwd)
    return out


# -----------------------------------------------------------------------------
# Exported math: softmax / logsumexp / cross-entropy / finite differences
# -----------------------------------------------------------------------------


def stable_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along `axis`; rows sum to 1.

    -inf entries are mask sentinels and get exactly zero weight. NaN input
    and fully masked rows are errors.
    """
    x = logits.data
    if x.shape[axis] < 1:
        raise ValueError(f"softmax axis has extent 0 in shape {x.shape}")
    if np.isnan(x).any():
        check_finite(np.where(np.isneginf(x), 0.0, x), "stable_softmax input")
    m = np.max(x, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise NumericError("stable_softmax: a row is fully masked (all -inf)")
    e = np.exp(x - m)
    den = e.sum(axis=axis, keepdims=True)
    out = Tensor(e / den)
    check_finite(out.data, "stable_softmax output")
    od = out.data

    def bwd(gs):
        g = gs[0]
        return (od * (g - (g * od).sum(axis=axis, keepdims=True)),)

    record((out,), (logits,), bwd)
    return out


def logsumexp(logits: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted log(sum(exp)) along `axis`; the axis disappears."""
    x = logits.data
    if x.shape[axis] < 1:
        raise ValueError(f"logsumexp axis has extent 0 in shape {x.shape}")
    if np.isnan(x).any():
        check_finite(np.where(np.isneginf(x), 0.0, x), "logsumexp input")
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    lse_keep = m + np.log(e.sum(axis=axis, keepdims=True))
    out = Tensor(np.squeeze(lse_keep, axis=axis))
    check_finite(out.data, "logsumexp output")
    soft = e / e.sum(axis=axis, keepdims=True)

    def bwd(gs):
        return (np.expand_dims(gs[0], axis) * soft,)

    record((out,), (logits,), bwd)
    return out


def cross_entropy_from_logits(
    logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None
) -> Tensor:
    """Mean negative log-likelihood in nats over non-masked positions.

    logits (..., V), targets int (...,); mask, if given, weights positions
    (0 drops them) and the mean divides by mask.sum().
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    lse = logsumexp(logits, axis=-1)
    grid = np.indices(targets.shape)
    picked = getitem(logits, (*grid, targets))
    nll = sub(lse, picked)
    if mask is None:
        loss = mean_(nll)
    else:
        mask = np.asarray(mask, dtype=logits.dtype)
        total = float(mask.sum())
        if total == 0:
            raise ValueError("cross_entropy_from_logits: mask drops every position")
        loss = mul(sum_(mul(nll, Tensor(mask))), constant(1.0 / total, logits.dtype))
    check_finite(loss.data, "cross_entropy_from_logits")
    return loss


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x (float64), step h.

    The independent oracle for every backward implementation here; slow by
    design and never used on the training path.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_diff_grad: non-finite f at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / den))


def normwise_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max |a-b| over the larger of the two sup norms.

    The right yardstick for signed sums: an output coordinate that
    cancels to 1e-5 while its neighbours are O(1) accumulates rounding
    at the tensor scale, so elementwise division would report noise as
    error.  Use relative_error for positive quantities (gates, masses)
    where per-element comparison is meaningful.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    den = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b)) / den)
