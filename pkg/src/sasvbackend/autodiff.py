"""Minimal reverse-mode autodiff over dense float64 matrices.

Everything is a 2-D matrix: vectors are 1 x n rows, scalars are 1 x 1.
Operations record backward closures on a ``Tape``; ``Tape.backward`` replays
them in reverse execution order, which makes repeated backward passes over
the same forward computation bitwise identical.

Not a general autodiff library: no broadcasting, no views, no higher-order
gradients. Matrices are immutable values as far as the ops are concerned and
are safe to share across threads for read-only scoring.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateMaskError(ValueError):
    """A masked softmax was asked to normalize over zero unmasked entries."""


class TrackingError(RuntimeError):
    """backward() was called on a value that is not on the tape."""


def _as_matrix(value) -> np.ndarray:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected scalar, vector or matrix, got ndim={a.ndim}")
    return np.ascontiguousarray(a)


class Tensor:
    """A float64 matrix, optionally tracked on a tape.

    ``grad`` is populated by ``Tape.backward`` and mirrors ``value``'s shape.
    """

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape: "Tape | None" = None):
        self.value = _as_matrix(value)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() requires a 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def detach(self) -> "Tensor":
        """Untracked view sharing the same underlying array."""
        t = Tensor.__new__(Tensor)
        t.value = self.value
        t.grad = None
        t.tape = None
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, tracked={self.tape is not None})"


class Tape:
    """Execution-ordered record of tracked operations plus registered parameters."""

    def __init__(self):
        self._records: list[tuple[Tensor, callable]] = []
        self._params: list[Tensor] = []

    def parameter(self, value) -> Tensor:
        """Create a tracked parameter whose gradient is accumulated by backward()."""
        t = Tensor(value, tape=self)
        self._params.append(t)
        return t

    @property
    def parameters(self) -> list[Tensor]:
        return list(self._params)

    def _record(self, out: Tensor, backward_fn) -> None:
        self._records.append((out, backward_fn))

    def clear(self) -> None:
        """Drop recorded operations but keep registered parameters."""
        self._records.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into each registered parameter's .grad.

        Gradients are reset first, then accumulated in reverse execution
        order, so two backward passes over the same forward computation give
        bitwise-identical results. Parameters untouched by the computation
        end up with all-zero gradient buffers.
        """
        if loss.tape is not self:
            raise TrackingError("loss is not tracked on this tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must be 1x1, got {loss.shape}")
        for p in self._params:
            p.grad = np.zeros_like(p.value)
        for out, _ in self._records:
            out.grad = None
        loss.grad = np.ones((1, 1))
        for out, backward_fn in reversed(self._records):
            if out.grad is None:
                continue  # nothing downstream consumed this value
            backward_fn(out.grad)


def _result_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TrackingError("operands are tracked on different tapes")
            tape = t.tape
    return tape


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.tape is None:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _make(value: np.ndarray, tape: Tape | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.tape = tape
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    tape = _result_tape(a, b)
    out = _make(a.value + b.value, tape)
    if tape is not None:
        def backward(g):
            _accumulate(a, g)
            _accumulate(b, g)
        tape._record(out, backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    tape = _result_tape(a, b)
    out = _make(a.value - b.value, tape)
    if tape is not None:
        def backward(g):
            _accumulate(a, g)
            _accumulate(b, -g)
        tape._record(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _require_same_shape(a, b, "mul")
    tape = _result_tape(a, b)
    out = _make(a.value * b.value, tape)
    if tape is not None:
        av, bv = a.value, b.value
        def backward(g):
            _accumulate(a, g * bv)
            _accumulate(b, g * av)
        tape._record(out, backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient of same-shape tensors; b must be nonzero."""
    _require_same_shape(a, b, "div")
    tape = _result_tape(a, b)
    out = _make(a.value / b.value, tape)
    if tape is not None:
        av, bv = a.value, b.value
        def backward(g):
            _accumulate(a, g / bv)
            _accumulate(b, -g * av / (bv * bv))
        tape._record(out, backward)
    return out


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * a + shift with python-float constants."""
    tape = _result_tape(a)
    out = _make(scale * a.value + shift, tape)
    if tape is not None:
        def backward(g):
            _accumulate(a, scale * g)
        tape._record(out, backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    tape = _result_tape(a, b)
    out = _make(a.value @ b.value, tape)
    if tape is not None:
        av, bv = a.value, b.value
        def backward(g):
            _accumulate(a, g @ bv.T)
            _accumulate(b, av.T @ g)
        tape._record(out, backward)
    return out


def transpose(a: Tensor) -> Tensor:
    tape = _result_tape(a)
    out = _make(np.ascontiguousarray(a.value.T), tape)
    if tape is not None:
        def backward(g):
            _accumulate(a, np.ascontiguousarray(g.T))
        tape._record(out, backward)
    return out


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a 1 x cols bias row to every row of a."""
    if bias.shape != (1, a.cols):
        raise ShapeError(f"add_bias: bias {bias.shape} does not match columns of {a.shape}")
    tape = _result_tape(a, bias)
    out = _make(a.value + bias.value, tape)
    if tape is not None:
        def backward(g):
            _accumulate(a, g)
            _accumulate(bias, g.sum(axis=0, keepdims=True))
        tape._record(out, backward)
    return out


def tanh(a: Tensor) -> Tensor:
    tape = _result_tape(a)
    y = np.tanh(a.value)
    out = _make(y, tape)
    if tape is not None:
        def backward(g):
            _accumulate(a, g * (1.0 - y * y))
        tape._record(out, backward)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows; stable for |x| well past 700
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise logistic function 1 / (1 + exp(-x))."""
    tape = _result_tape(a)
    y = _stable_sigmoid(a.value)
    out = _make(y, tape)
    if tape is not None:
        def backward(g):
            _accumulate(a, g * y * (1.0 - y))
        tape._record(out, backward)
    return out


def log(a: Tensor) -> Tensor:
    tape = _result_tape(a)
    out = _make(np.log(a.value), tape)
    if tape is not None:
        av = a.value
        def backward(g):
            _accumulate(a, g / av)
        tape._record(out, backward)
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient passes only where unclipped."""
    tape = _result_tape(a)
    out = _make(np.clip(a.value, lo, hi), tape)
    if tape is not None:
        inside = (a.value >= lo) & (a.value <= hi)
        def backward(g):
            _accumulate(a, g * inside)
        tape._record(out, backward)
    return out


def norm(a: Tensor) -> Tensor:
    """Frobenius norm as a 1x1 tensor. Zero input is rejected."""
    tape = _result_tape(a)
    n = math.sqrt(float(np.sum(a.value * a.value)))
    if n == 0.0:
        raise ValueError("norm of a zero tensor is not differentiable")
    out = _make(np.array([[n]]), tape)
    if tape is not None:
        av = a.value
        def backward(g):
            _accumulate(a, (g[0, 0] / n) * av)
        tape._record(out, backward)
    return out


def zero_rows(a: Tensor, row_mask) -> Tensor:
    """Zero out the rows where row_mask is True; gradient is blocked there."""
    mask = np.asarray(row_mask, dtype=bool)
    if mask.shape != (a.rows,):
        raise ShapeError(f"zero_rows: mask length {mask.shape} does not match {a.rows} rows")
    tape = _result_tape(a)
    v = a.value.copy()
    v[mask, :] = 0.0
    out = _make(v, tape)
    if tape is not None:
        def backward(g):
            gz = g.copy()
            gz[mask, :] = 0.0
            _accumulate(a, gz)
        tape._record(out, backward)
    return out


def softmax_masked(logits: Tensor, mask=None) -> Tensor:
    """Row-wise softmax that gives exactly zero weight to masked columns.

    ``mask`` is a boolean vector over columns (True = excluded), shared by
    all rows; ``None`` means nothing is masked. Stabilized by subtracting the
    per-row maximum over unmasked entries. The 1 x n case is the plain
    masked-softmax over a vector of logits.
    """
    if mask is None:
        mask = np.zeros(logits.cols, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    if mask.shape != (logits.cols,):
        raise ShapeError(
            f"softmax_masked: mask length {mask.shape} does not match {logits.cols} columns"
        )
    if mask.all():
        raise DegenerateMaskError("softmax_masked: every entry is masked")
    tape = _result_tape(logits)
    x = logits.value
    keep = ~mask
    m = x[:, keep].max(axis=1, keepdims=True)
    w = np.zeros_like(x)
    w[:, keep] = np.exp(x[:, keep] - m)
    y = w / w.sum(axis=1, keepdims=True)
    out = _make(y, tape)
    if tape is not None:
        def backward(g):
            # per-row softmax jacobian; masked columns carry y == 0
            inner = (g * y).sum(axis=1, keepdims=True)
            _accumulate(logits, y * (g - inner))
        tape._record(out, backward)
    return out


def fold_sum(tensors: list[Tensor]) -> Tensor:
    """Sum a non-empty list of same-shape tensors in fixed index order."""
    if not tensors:
        raise ValueError("fold_sum of an empty list")
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return total
