"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (encoder, heads, losses) is expressed through the
small op set in this module, so a single gradient-checking harness covers
the whole computation graph. Design constraints:

* float64 only: the artifact exists to verify formulas, and the gradient
  tolerances used throughout assume double precision;
* every constructed value is validated finite (NaN/Inf is an error at the
  op that produced it, not three modules later);
* the tape is built during the forward pass and torn down by ``backward``,
  so a tensor graph is single-use;
* a value consumed by several downstream ops accumulates (sums) all of
  its gradient contributions.

Tensors are immutable once built except for two sanctioned cases: their
gradient buffer, which belongs to the one tape they participate in, and
in-place value updates applied to leaf parameters *between* tapes (the
optimizer and the momentum twin do this).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12


class NonFiniteError(ValueError):
    """A tensor value came out NaN or infinite."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class DegenerateRowError(ValueError):
    """A row with (near-)zero norm reached a normalization op."""


class Tensor:
    """A dense row-major float64 array, optionally participating in the tape.

    ``grad_enabled`` tensors record how they were produced; calling
    ``backward`` on a scalar result populates ``grad`` on every enabled
    ancestor. Tensors built from raw data are leaves.
    """

    __slots__ = ("data", "grad", "grad_enabled", "_parents", "_backward", "_op")

    def __init__(self, data, grad_enabled: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "constructor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.grad_enabled = grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A tape-free view of this tensor's current value."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.grad_enabled = False
        out._parents = ()
        out._backward = None
        out._op = "leaf"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar into enabled leaves.

        The traversal visits each tape node exactly once and frees the
        graph afterwards; intermediate results cannot be backpropagated
        twice.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # The tape is single-use: drop the graph so ops cannot re-run and
        # intermediate buffers can be collected.
        for node in topo:
            node._parents = ()
            node._backward = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, grad_enabled={self.grad_enabled}, op={self._op})"


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _from_op(
    arr: np.ndarray,
    op: str,
    parents: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    _check_finite(arr, op)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out._op = op
    if any(p.grad_enabled for p in parents):
        out.grad_enabled = True
        out._parents = parents
        out._backward = backward
    else:
        out.grad_enabled = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.grad_enabled:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _from_op(a.data @ b.data, "matmul", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got {a.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.T)

    return _from_op(a.data.T.copy(), "transpose", (a,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D ``b`` as a per-row bias."""
    bias = a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]
    if not bias and a.shape != b.shape:
        raise ShapeError(f"add shapes disagree: {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g.sum(axis=0) if bias else g)

    return _from_op(a.data + b.data, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors (masking, weighting)."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes disagree: {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _from_op(a.data * b.data, "mul", (a, b), backward)


def scale_by_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * s)

    return _from_op(a.data * s, "scale_by_scalar", (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * mask)

    return _from_op(np.where(mask, a.data, 0.0), "relu", (a,), backward)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - spec'd op name
    """Sum of all entries, as a scalar tensor."""

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.full_like(a.data, float(g)))

    return _from_op(np.asarray(a.data.sum()), "sum", (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.full_like(a.data, float(g) / n))

    return _from_op(np.asarray(a.data.mean()), "mean", (a,), backward)


def select_rows(a: Tensor, indices) -> Tensor:
    """Gather rows by index; duplicate indices are allowed."""
    if a.data.ndim != 2:
        raise ShapeError(f"select_rows needs a 2-D operand, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("select_rows indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for shape {a.shape}")

    def backward(g: np.ndarray) -> None:
        if a.grad_enabled:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _from_op(a.data[idx].copy(), "select_rows", (a,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors vertically."""
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    cols = parts[0].shape[1] if parts[0].data.ndim == 2 else None
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != cols:
            raise ShapeError("concat_rows parts must be 2-D with equal column counts")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi])

    return _from_op(np.concatenate([p.data for p in parts], axis=0), "concat_rows", tuple(parts), backward)


def row_l2_normalize(a: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm.

    A row with norm below ``NORM_EPS`` is a hard error: silently clamping
    would hide a collapsed feature extractor from every downstream check.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"row_l2_normalize needs a 2-D operand, got {a.shape}")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if not np.all(np.isfinite(norms)):
        raise NonFiniteError("row norm overflowed in row_l2_normalize")
    if np.any(norms < NORM_EPS):
        row = int(np.argmin(norms))
        raise DegenerateRowError(f"row {row} has norm {norms[row, 0]:.3e} < {NORM_EPS}")
    out = a.data / norms

    def backward(g: np.ndarray) -> None:
        # Projection onto the tangent of the unit sphere, scaled by 1/norm.
        inner = (g * out).sum(axis=1, keepdims=True)
        _accumulate(a, (g - out * inner) / norms)

    return _from_op(out, "row_l2_normalize", (a,), backward)


def log_softmax_row(a: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilized by max subtraction."""
    if a.data.ndim != 2:
        raise ShapeError(f"log_softmax_row needs a 2-D operand, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g - np.exp(out) * g.sum(axis=1, keepdims=True))

    return _from_op(out, "log_softmax_row", (a,), backward)
