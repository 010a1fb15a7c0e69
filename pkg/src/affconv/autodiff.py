"""Reverse-mode automatic differentiation over dense 1-D/2-D arrays.

Operations executed while a Tape is active are recorded in execution order
(which is already a topological order); `backward` replays the records once in
reverse.  Tensors are thin wrappers around numpy arrays; leaves owned by a
Param route their adjoints into Param.grad.

Segment sums (the message-passing reduction and the sparse matrix product)
accumulate addends in lexicographic value order within each segment.  That
makes the result a function of the addend multiset only, so aggregation is
exactly invariant under vertex relabeling, at the price of one extra sort.
"""

from __future__ import annotations

import threading

import numpy as np

_DTYPE = np.float64
_DEBUG_FINITE = False


def set_default_dtype(dtype) -> None:
    """float64 (default, required by the gradient checks) or float32."""
    global _DTYPE
    if dtype not in (np.float64, np.float32):
        raise ValueError("dtype must be float64 or float32")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


def set_debug_finite_checks(enabled: bool) -> None:
    """When on, every recorded op asserts its output is free of NaN/Inf."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class ShapeMismatch(ValueError):
    pass


class EmptySegment(ValueError):
    pass


class NotScalarLoss(ValueError):
    pass


class DetachedNode(ValueError):
    pass


class TapeConsumed(RuntimeError):
    pass


class Tensor:
    __slots__ = ("values", "param")

    def __init__(self, values, dtype=None):
        self.values = np.asarray(values, dtype=dtype or _DTYPE)
        self.param = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatch("item() needs a single-element tensor")
        return float(self.values.reshape(()))

    def assert_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("tensor contains NaN or Inf")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.values.shape})"


def const(values, dtype=None) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(values, dtype=dtype)


class Param:
    """A leaf tensor with an accumulated gradient of the same shape."""

    __slots__ = ("tensor", "grad", "name", "role")

    def __init__(self, values, name: str = "", role: str = "weight"):
        self.tensor = Tensor(values)
        self.tensor.param = self
        self.grad = np.zeros_like(self.tensor.values)
        self.name = name
        self.role = role

    @property
    def value(self) -> np.ndarray:
        return self.tensor.values

    @value.setter
    def value(self, arr):
        arr = np.asarray(arr, dtype=self.tensor.values.dtype)
        if arr.shape != self.tensor.values.shape:
            raise ShapeMismatch("assigned value has the wrong shape")
        self.tensor.values = arr

    @property
    def size(self) -> int:
        return self.tensor.values.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.tensor.values)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.tensor.values.shape})"


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Tapes are single-threaded; independent tapes may run on separate threads
    (the active-tape stack is thread-local)."""

    def __init__(self):
        self._records = []
        self._members = set()
        self._params = {}
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def _add(self, out: Tensor, inputs, back) -> None:
        if self._consumed:
            raise TapeConsumed("tape already differentiated; record a new one")
        self._records.append((out, inputs, back))
        self._members.add(id(out))
        for t in inputs:
            self._members.add(id(t))
            if t.param is not None:
                self._params[id(t.param)] = t.param


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out: Tensor, inputs, back) -> Tensor:
    if _DEBUG_FINITE:
        out.assert_finite()
    tape = _active_tape()
    if tape is not None:
        tape._add(out, inputs, back)
    return out


def backward(tape: Tape, loss: Tensor, accumulate: bool = True) -> dict:
    """Chain-rule gradients of a scalar loss; accumulates into Param.grad
    unless accumulate=False (parallel workers collect the returned dict and
    reduce in a fixed order instead).

    A tape can be differentiated once; a second call raises TapeConsumed.
    Returns {Param: gradient array} for every parameter touched by the tape.
    """
    if loss.values.size != 1:
        raise NotScalarLoss("loss must be a single scalar")
    if id(loss) not in tape._members:
        raise DetachedNode("loss was not recorded on this tape")
    if tape._consumed:
        raise TapeConsumed("backward was already called on this tape")
    tape._consumed = True
    adjoint = {id(loss): np.ones_like(loss.values)}
    for out, inputs, back in reversed(tape._records):
        g = adjoint.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, back(g)):
            if gi is None:
                continue
            cur = adjoint.get(id(t))
            adjoint[id(t)] = gi if cur is None else cur + gi
    grads = {}
    for p in tape._params.values():
        g = adjoint.get(id(p.tensor))
        if g is not None:
            if accumulate:
                p.grad = p.grad + g
            grads[p] = g
    return grads


def _check_2d(x: Tensor, who: str):
    if x.values.ndim != 2:
        raise ShapeMismatch(f"{who} expects a 2-D tensor, got shape {x.shape}")


def _same_shape(a: Tensor, b: Tensor, who: str):
    if a.values.shape != b.values.shape:
        raise ShapeMismatch(f"{who}: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.values + b.values)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.values - b.values)
    return _record(out, (a, b), lambda g: (g, -g))


def scalar_mul(c: float, x: Tensor) -> Tensor:
    c = float(c)
    out = Tensor(c * x.values)
    return _record(out, (x,), lambda g: (c * g,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    out = Tensor(a.values * b.values)
    av, bv = a.values, b.values
    return _record(out, (a, b), lambda g: (g * bv, g * av))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values)
    av, bv = a.values, b.values
    return _record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.values)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.values))
    xv = x.values
    return _record(out, (x,), lambda g: (g / xv,))


def abs_(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.values))
    s = np.sign(x.values)
    return _record(out, (x,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    out = Tensor(np.where(mask, x.values, 0.0))
    return _record(out, (x,), lambda g: (g * mask,))


def elu(x: Tensor) -> Tensor:
    pos = x.values > 0
    neg_part = np.expm1(np.minimum(x.values, 0.0))
    y = np.where(pos, x.values, neg_part)
    out = Tensor(y)
    slope = np.where(pos, 1.0, neg_part + 1.0)
    return _record(out, (x,), lambda g: (g * slope,))


def row_softmax(x: Tensor) -> Tensor:
    _check_2d(x, "row_softmax")
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)
    return _record(out, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def dropout(x: Tensor, rate: float, training: bool, key=(0, 0, 0)) -> Tensor:
    """Inverted dropout with a counter-based RNG keyed by (seed, layer, step)."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))
    keep = (rng.random(x.values.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.values * keep)
    return _record(out, (x,), lambda g: (g * keep,))


# ------------------------------------------------------------- row utilities

def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    _check_2d(x, "add_rowvec")
    if v.values.shape != (x.values.shape[1],):
        raise ShapeMismatch("add_rowvec: vector does not match columns")
    out = Tensor(x.values + v.values)
    return _record(out, (x, v), lambda g: (g, g.sum(axis=0)))


def sub_rowvec(x: Tensor, v: Tensor) -> Tensor:
    _check_2d(x, "sub_rowvec")
    if v.values.shape != (x.values.shape[1],):
        raise ShapeMismatch("sub_rowvec: vector does not match columns")
    out = Tensor(x.values - v.values)
    return _record(out, (x, v), lambda g: (g, -g.sum(axis=0)))


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    _check_2d(x, "mul_rowvec")
    if v.values.shape != (x.values.shape[1],):
        raise ShapeMismatch("mul_rowvec: vector does not match columns")
    out = Tensor(x.values * v.values)
    xv, vv = x.values, v.values
    return _record(out, (x, v), lambda g: (g * vv, (g * xv).sum(axis=0)))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row k of x by scalar s[k]; gradients flow to both arguments."""
    _check_2d(x, "scale_rows")
    if s.values.shape != (x.values.shape[0],):
        raise ShapeMismatch("scale_rows: one scalar per row required")
    out = Tensor(x.values * s.values[:, None])
    xv, sv = x.values, s.values
    return _record(out, (x, s), lambda g: (g * sv[:, None], (g * xv).sum(axis=1)))


def row_sum(x: Tensor) -> Tensor:
    _check_2d(x, "row_sum")
    out = Tensor(x.values.sum(axis=1))
    cols = x.values.shape[1]
    return _record(out, (x,), lambda g: (np.repeat(g[:, None], cols, axis=1),))


def select_col(x: Tensor, j: int) -> Tensor:
    _check_2d(x, "select_col")
    out = Tensor(x.values[:, j].copy())
    shape = x.values.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, j] = g
        return (gx,)

    return _record(out, (x,), back)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _check_2d(x, "slice_cols")
    out = Tensor(x.values[:, start:stop].copy())
    shape = x.values.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _record(out, (x,), back)


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    for p in parts:
        _check_2d(p, "concat_rows")
    out = Tensor(np.concatenate([p.values for p in parts], axis=0))
    sizes = [p.values.shape[0] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=0)))


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    for p in parts:
        _check_2d(p, "concat_cols")
    out = Tensor(np.concatenate([p.values for p in parts], axis=1))
    sizes = [p.values.shape[1] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=1)))


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.values.reshape(shape))
    old = x.values.shape
    return _record(out, (x,), lambda g: (g.reshape(old),))


def gather_rows(x: Tensor, index) -> Tensor:
    _check_2d(x, "gather_rows")
    idx = np.asarray(index, dtype=np.int64)
    out = Tensor(x.values[idx])
    shape = x.values.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.values.sum())
    shape = x.values.shape
    return _record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.values.size
    out = Tensor(x.values.mean())
    shape = x.values.shape
    return _record(out, (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def tensor_scalar_mul(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a learnable scalar held in a single-element tensor."""
    if s.values.size != 1:
        raise ShapeMismatch("tensor_scalar_mul: scalar tensor required")
    sv = s.values.reshape(())
    out = Tensor(x.values * sv)
    xv = x.values
    s_shape = s.values.shape
    return _record(out, (x, s),
                   lambda g: (g * sv, np.array((g * xv).sum()).reshape(s_shape)))


# ----------------------------------------------------------- segment reduce

def _canonical_order(values: np.ndarray, segments: np.ndarray) -> np.ndarray:
    # primary key: segment id; then row values column by column, so the
    # accumulation order depends on the addend multiset only
    keys = tuple(values[:, c] for c in range(values.shape[1] - 1, -1, -1))
    return np.lexsort(keys + (segments,))


def _sorted_segment_sum(values: np.ndarray, segments: np.ndarray,
                        num_segments: int) -> np.ndarray:
    out = np.zeros((num_segments, values.shape[1]), dtype=values.dtype)
    if values.shape[0] == 0:
        return out
    order = _canonical_order(values, segments)
    vs = values[order]
    ss = segments[order]
    starts = np.flatnonzero(np.concatenate(([True], ss[1:] != ss[:-1])))
    out[ss[starts]] = np.add.reduceat(vs, starts, axis=0)
    return out


def segment_reduce(x: Tensor, segments, num_segments: int, mode: str = "sum",
                   strict: bool = False) -> Tensor:
    """Reduce rows of x into num_segments buckets given per-row segment ids.

    mean divides by the segment cardinality; max routes the gradient to the
    first (lowest row index) argmax.  Empty segments produce zero rows, or
    raise EmptySegment for mean/max when strict.
    """
    _check_2d(x, "segment_reduce")
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (x.values.shape[0],):
        raise ShapeMismatch("segment_reduce: one segment id per row")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ShapeMismatch("segment id out of range")
    counts = np.bincount(seg, minlength=num_segments)
    if mode == "sum":
        out = Tensor(_sorted_segment_sum(x.values, seg, num_segments))
        return _record(out, (x,), lambda g: (g[seg],))
    if mode == "mean":
        if strict and np.any(counts == 0):
            raise EmptySegment("mean over an empty segment")
        denom = np.maximum(counts, 1).astype(x.values.dtype)
        out = Tensor(_sorted_segment_sum(x.values, seg, num_segments)
                     / denom[:, None])
        return _record(out, (x,), lambda g: (g[seg] / denom[seg][:, None],))
    if mode == "max":
        if strict and np.any(counts == 0):
            raise EmptySegment("max over an empty segment")
        cols = x.values.shape[1]
        peak = np.full((num_segments, cols), -np.inf, dtype=x.values.dtype)
        np.maximum.at(peak, seg, x.values)
        result = np.where(counts[:, None] > 0, peak, 0.0)
        # first-row-wins argmax per (segment, column) for the backward pass
        winner = np.full((num_segments, cols), x.values.shape[0], dtype=np.int64)
        hit_r, hit_c = np.nonzero(x.values == peak[seg])
        np.minimum.at(winner, (seg[hit_r], hit_c), hit_r)
        out = Tensor(result)
        shape = x.values.shape

        def back(g):
            gx = np.zeros(shape, dtype=g.dtype)
            valid = winner < shape[0]
            seg_ids, col_ids = np.nonzero(valid)
            gx[winner[seg_ids, col_ids], col_ids] += g[seg_ids, col_ids]
            return (gx,)

        return _record(out, (x,), back)
    raise ValueError(f"unknown segment_reduce mode {mode!r}")


def sparse_matmul(sm, x: Tensor) -> Tensor:
    """SparseMatrix @ dense tensor with order-canonical accumulation."""
    _check_2d(x, "sparse_matmul")
    if x.values.shape[0] != sm.cols:
        raise ShapeMismatch(f"sparse_matmul: {sm.rows}x{sm.cols} @ {x.shape}")
    addends = sm.data[:, None] * x.values[sm.col_idx]
    out = Tensor(_sorted_segment_sum(addends, sm.row_idx, sm.rows))
    shape = x.values.shape

    def back(g):
        contrib = sm.data[:, None] * g[sm.row_idx]
        return (_sorted_segment_sum(contrib, sm.col_idx, sm.cols).astype(
            g.dtype, copy=False),)

    return _record(out, (x,), back)


# -------------------------------------------------------------- grad checks

class GradCheckReport:
    """Central-difference comparison for every coordinate of every Param."""

    def __init__(self, tol: float):
        self.tol = tol
        self.entries = []  # (param name, max relative error)

    def add(self, name: str, max_rel: float):
        self.entries.append((name, max_rel))

    @property
    def max_rel_error(self) -> float:
        return max((e[1] for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def failures(self):
        return [e for e in self.entries if e[1] >= self.tol]

    def __repr__(self):
        return (f"GradCheckReport(max_rel={self.max_rel_error:.3e}, "
                f"tol={self.tol:.1e}, passed={self.passed})")


def grad_check(f, params, eps: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare backward() against (f(p+eps) - f(p-eps)) / (2 eps) per coordinate.

    f is a zero-argument callable returning a scalar Tensor; it must be
    deterministic (disable dropout).  Relative error uses the
    max(1, |analytic|, |numeric|) denominator.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    tape = Tape()
    with tape:
        loss = f()
    backward(tape, loss)
    analytic = {id(p): p.grad.copy() for p in params}
    report = GradCheckReport(tol)
    for p in params:
        flat = p.value.reshape(-1)
        a_flat = analytic[id(p)].reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + eps
            f_plus = f().item()
            flat[k] = saved - eps
            f_minus = f().item()
            flat[k] = saved
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1.0, abs(a_flat[k]), abs(numeric))
            worst = max(worst, abs(a_flat[k] - numeric) / denom)
        report.add(p.name or f"param{id(p)}", worst)
    return report
