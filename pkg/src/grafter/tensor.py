"""Dense 2-D float64 tensors with tape-based reverse-mode differentiation.

The operation set is deliberately closed: exactly what the fine-tuning engine
needs, each op carrying its own backward rule. A tape records ops in execution
order (define-by-run), which is already a topological order, so the backward
pass is a single reverse walk. Gradient buffers are never mutated in place;
accumulation always allocates, which keeps shared upstream grads safe.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, StateError

Array = np.ndarray

_local = threading.local()


def _stack() -> list["Tape"]:
    try:
        return _local.tapes
    except AttributeError:
        _local.tapes = []
        return _local.tapes


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered op records for one forward pass.

    Single-use: ``backward()`` marks the tape spent and any further record or
    backward raises ``StateError`` until ``reset()``. Tapes are confined to the
    thread that created them (the active-tape stack is thread-local).
    """

    __slots__ = ("_records", "_spent")

    def __init__(self) -> None:
        self._records: list[tuple[str, "Tensor", Callable[[Array], None]]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        if popped is not self:
            raise StateError("tape stack corrupted: exited a tape that is not innermost")

    def __len__(self) -> int:
        return len(self._records)

    def record(self, name: str, output: "Tensor", rule: Callable[[Array], None]) -> None:
        if self._spent:
            raise StateError("tape already consumed by backward(); call reset() first")
        self._records.append((name, output, rule))

    def reset(self) -> None:
        self._records.clear()
        self._spent = False

    def backward(self, loss: "Tensor") -> None:
        """Accumulate dL/dx into ``.grad`` of every recorded tensor below ``loss``."""
        if loss.shape != (1, 1):
            raise ContractError(f"backward() needs a 1x1 loss tensor, got shape {loss.shape}")
        if self._spent:
            raise StateError("backward() already ran on this tape; call reset() first")
        if not self._records:
            raise ContractError("backward() on an empty tape")
        self._spent = True
        loss.grad = np.ones((1, 1))
        for _, out, rule in reversed(self._records):
            if out.grad is not None:
                rule(out.grad)


class Tensor:
    """A rows x cols float64 matrix with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)  # copy: a tensor owns its buffer
        if arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Array | None = None

    @classmethod
    def _wrap(cls, arr: Array, requires_grad: bool, op: str) -> "Tensor":
        # internal fast path for freshly computed op outputs (no copy)
        if not np.isfinite(arr).all():
            raise NumericError(f"{op} produced non-finite values")
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @classmethod
    def zeros(cls, rows: int, cols: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros((rows, cols)), requires_grad=requires_grad)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def _accumulate(self, g: Array) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, factor: float) -> "Tensor":
        return scale(self, factor)

    __rmul__ = __mul__

    def scale(self, factor: float) -> "Tensor":
        return scale(self, factor)

    def relu(self) -> "Tensor":
        return relu(self)

    def row_softmax(self, active: Array | None = None) -> "Tensor":
        return row_softmax(self, active)

    def row(self, i: int) -> "Tensor":
        return row_slice(self, i)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def mean(self) -> "Tensor":
        return reduce_mean(self)

    def sq_frobenius(self) -> "Tensor":
        return sq_frobenius(self)


def _record(name: str, out: Tensor, rule: Callable[[Array], None]) -> None:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(name, out, rule)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.data @ b.data, a.requires_grad or b.requires_grad, "matmul")

    def rule(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    _record("matmul", out, rule)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor._wrap(a.data + b.data, a.requires_grad or b.requires_grad, "add")

    def rule(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    _record("add", out, rule)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor._wrap(a.data - b.data, a.requires_grad or b.requires_grad, "sub")

    def rule(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    _record("sub", out, rule)
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    if not np.isfinite(factor):
        raise NumericError("scale: factor is non-finite")
    out = Tensor._wrap(x.data * factor, x.requires_grad, "scale")

    def rule(g: Array) -> None:
        x._accumulate(g * factor)

    _record("scale", out, rule)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1 x n bias row to every row of an m x n tensor."""
    if b.rows != 1 or b.cols != x.cols:
        raise DimensionError(f"add_bias: bias {b.shape} does not broadcast over {x.shape}")
    out = Tensor._wrap(x.data + b.data, x.requires_grad or b.requires_grad, "add_bias")

    def rule(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0, keepdims=True))

    _record("add_bias", out, rule)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(x.data, 0.0), x.requires_grad, "relu")

    def rule(g: Array) -> None:
        x._accumulate(g * (x.data > 0.0))

    _record("relu", out, rule)
    return out


def _softmax_rows(logits: Array) -> Array:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(x: Tensor, active: Array | None = None) -> Tensor:
    """Row-wise softmax; with ``active`` (bool mask), a masked softmax whose
    inactive entries are exactly zero and receive no gradient."""
    if active is None:
        y = _softmax_rows(x.data)
    else:
        mask = np.asarray(active, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"row_softmax: mask {mask.shape} does not match {x.shape}")
        if not mask.any(axis=1).all():
            raise ContractError("row_softmax: a row has no active entries")
        y = _softmax_rows(np.where(mask, x.data, -np.inf))
    out = Tensor._wrap(y, x.requires_grad, "row_softmax")

    def rule(g: Array) -> None:
        inner = (g * y).sum(axis=1, keepdims=True)
        x._accumulate(y * (g - inner))

    _record("row_softmax", out, rule)
    return out


def row_slice(x: Tensor, i: int) -> Tensor:
    if not 0 <= i < x.rows:
        raise ContractError(f"row index {i} out of range for {x.rows} rows")
    out = Tensor._wrap(x.data[i : i + 1].copy(), x.requires_grad, "row")

    def rule(g: Array) -> None:
        buf = np.zeros_like(x.data)
        buf[i] = g[0]
        x._accumulate(buf)

    _record("row", out, rule)
    return out


def concat_cols(cols: Sequence[Tensor]) -> Tensor:
    """Stack single-column tensors side by side into an m x k tensor."""
    if not cols:
        raise ContractError("concat_cols: empty input")
    m = cols[0].rows
    for c in cols:
        if c.cols != 1 or c.rows != m:
            raise DimensionError(f"concat_cols: expected {m}x1 columns, got {c.shape}")
    out = Tensor._wrap(
        np.hstack([c.data for c in cols]),
        any(c.requires_grad for c in cols),
        "concat_cols",
    )

    def rule(g: Array) -> None:
        for j, c in enumerate(cols):
            if c.requires_grad:
                c._accumulate(g[:, j : j + 1].copy())

    _record("concat_cols", out, rule)
    return out


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.array([[x.data.sum()]]), x.requires_grad, "sum")

    def rule(g: Array) -> None:
        x._accumulate(np.full_like(x.data, g[0, 0]))

    _record("sum", out, rule)
    return out


def reduce_mean(x: Tensor) -> Tensor:
    size = x.data.size
    out = Tensor._wrap(np.array([[x.data.sum() / size]]), x.requires_grad, "mean")

    def rule(g: Array) -> None:
        x._accumulate(np.full_like(x.data, g[0, 0] / size))

    _record("mean", out, rule)
    return out


def sq_frobenius(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.array([[(x.data * x.data).sum()]]), x.requires_grad, "sq_frobenius")

    def rule(g: Array) -> None:
        x._accumulate((2.0 * g[0, 0]) * x.data)

    _record("sq_frobenius", out, rule)
    return out


def weighted_sum(
    items: Sequence[Tensor],
    weights: Tensor,
    cols: Sequence[int] | None = None,
    counter=None,
) -> Tensor:
    """Sum ``items[j] * weights[0, cols[j]]``. All given items participate;
    callers filter gated-out items themselves. ``counter.compose_terms`` is
    bumped by the number of participating items when a counter is passed."""
    if not items:
        raise ContractError("weighted_sum: no items to combine")
    if weights.rows != 1:
        raise DimensionError(f"weighted_sum: weights must be a row, got {weights.shape}")
    idx = list(range(len(items))) if cols is None else [int(c) for c in cols]
    if len(idx) != len(items):
        raise ContractError(f"weighted_sum: {len(items)} items but {len(idx)} weight columns")
    if any(not 0 <= c < weights.cols for c in idx):
        raise ContractError(f"weighted_sum: weight column out of range for {weights.shape}")
    base = items[0].shape
    for it in items:
        if it.shape != base:
            raise DimensionError(f"weighted_sum: item shapes {base} and {it.shape} differ")
    w = weights.data[0]
    acc = np.zeros(base)
    for j, it in enumerate(items):
        acc += w[idx[j]] * it.data
    if counter is not None:
        counter.compose_terms += len(items)
    rg = weights.requires_grad or any(it.requires_grad for it in items)
    out = Tensor._wrap(acc, rg, "weighted_sum")

    def rule(g: Array) -> None:
        if weights.requires_grad:
            gw = np.zeros((1, weights.cols))
            for j, it in enumerate(items):
                gw[0, idx[j]] += (g * it.data).sum()
            weights._accumulate(gw)
        for j, it in enumerate(items):
            if it.requires_grad:
                it._accumulate(w[idx[j]] * g)

    _record("weighted_sum", out, rule)
    return out


def segment_mean(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Mean of the rows of each segment; segment ids must be sorted and every
    segment in [0, num_segments) must be non-empty."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (x.rows,):
        raise DimensionError(f"segment_mean: {ids.shape[0] if ids.ndim else 0} ids for {x.rows} rows")
    if ids.size and ((ids < 0).any() or (ids >= num_segments).any()):
        raise ContractError("segment_mean: segment id out of range")
    if ids.size and (np.diff(ids) < 0).any():
        raise ContractError("segment_mean: segment ids must be sorted")
    counts = np.bincount(ids, minlength=num_segments)
    if (counts == 0).any():
        raise ContractError("segment_mean: empty segment")
    sums = np.zeros((num_segments, x.cols))
    np.add.at(sums, ids, x.data)
    out = Tensor._wrap(sums / counts[:, None], x.requires_grad, "segment_mean")

    def rule(g: Array) -> None:
        x._accumulate(g[ids] / counts[ids][:, None])

    _record("segment_mean", out, rule)
    return out


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def masked_bce_mean(logits: Tensor, targets, valid) -> Tensor:
    """Mean binary cross-entropy with logits over valid entries only.

    Masked-out entries never participate in the sum, so their target values
    (junk, even NaN) cannot change the loss or the gradient by a single bit.
    """
    y = np.asarray(targets, dtype=np.float64)
    m = np.asarray(valid, dtype=bool)
    if y.shape != logits.shape or m.shape != logits.shape:
        raise DimensionError(
            f"masked_bce_mean: logits {logits.shape}, targets {y.shape}, mask {m.shape} disagree"
        )
    n_valid = int(m.sum())
    if n_valid == 0:
        raise ContractError("masked_bce_mean: every label in the batch is masked out")
    x = logits.data[m]
    t = y[m]
    if not np.isfinite(t).all():
        raise NumericError("masked_bce_mean: non-finite target at a valid position")
    if ((t != 0.0) & (t != 1.0)).any():
        raise ContractError("masked_bce_mean: valid targets must be 0 or 1")
    # stable form: max(x,0) - x*t + log(1 + exp(-|x|))
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor._wrap(np.array([[per.sum() / n_valid]]), logits.requires_grad, "masked_bce_mean")

    def rule(g: Array) -> None:
        gx = np.zeros_like(logits.data)
        gx[m] = (_sigmoid(x) - t) * (g[0, 0] / n_valid)
        logits._accumulate(gx)

    _record("masked_bce_mean", out, rule)
    return out
