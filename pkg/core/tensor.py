"""
Tensor Autodiff Module

Dense rank-1 / rank-2 tensors over float64 numpy arrays with reverse-mode
automatic differentiation, plus a central finite-difference gradient checker.

Features:
- Tape-recorded forward ops (each result remembers its op kind, inputs and
  the values its backward pass needs)
- Backward visits every recorded node exactly once, in reverse creation order
- Thread-local ``no_grad`` switch so evaluation threads never build tapes
- Numerically stabilised softmax cross-entropy, sigmoid and layer norm
- ``grad_check`` / ``grad_check_params`` for per-coordinate relative errors
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-5

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class ShapeError(DimensionError):
    """Raised when a scalar was required but a larger tensor was given."""


class OpKind(str, Enum):
    """Kinds of recorded tape operations."""
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    SCALE = "scale"
    DOT = "dot"
    OUTER = "outer"
    MATVEC = "matvec"
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    CONCAT = "concat"
    STACK = "stack"
    SLICE = "slice"
    ROW = "row"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    RELU = "relu"
    SUM = "sum"
    SUM_ROWS = "sum_rows"
    MEAN_ROWS = "mean_rows"
    MAX_ROWS = "max_rows"
    LAYERNORM = "layernorm"
    SOFTMAX_XENT = "softmax_xent"


_ids = itertools.count()
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    """Whether ops on this thread record tape nodes."""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


@dataclass
class TapeNode:
    """One recorded op: kind, input tensor ids, cached forward values."""
    op_kind: OpKind
    input_ids: Tuple[int, ...]
    saved_values: Dict[str, np.ndarray] = field(default_factory=dict)


class Tensor:
    """
    Dense real tensor of rank 1 or 2.

    Scalars are represented as shape ``(1,)``. Data is read-only after
    construction; only ``grad`` is mutated (by ``backward``).
    """

    __slots__ = ("data", "requires_grad", "grad", "id", "node", "_inputs", "_backward_fn")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self._init(arr, requires_grad)

    def _init(self, arr: np.ndarray, requires_grad: bool) -> None:
        if arr.ndim not in (1, 2) or arr.size == 0:
            raise DimensionError(f"Tensors must be rank 1 or 2 with positive sizes, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)
        self.node: Optional[TapeNode] = None
        self._inputs: Tuple["Tensor", ...] = ()
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap a freshly computed array without copying."""
        out = cls.__new__(cls)
        out._init(arr, requires_grad)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def assign(self, values: np.ndarray) -> None:
        """Replace the data of a leaf parameter in place (same shape)."""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError(f"assign: expected shape {self.data.shape}, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _record(
    arr: np.ndarray,
    op: OpKind,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    saved: Optional[Dict[str, np.ndarray]] = None,
) -> Tensor:
    """Create an op result, attaching a tape node when any input needs grad."""
    needs_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs_grad)
    if needs_grad:
        out.node = TapeNode(op, tuple(t.id for t in inputs), saved or {})
        out._inputs = tuple(inputs)
        out._backward_fn = backward_fn
    return out


def _require_vector(x: Tensor, name: str) -> None:
    if x.data.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {x.shape}")


def _require_matrix(x: Tensor, name: str) -> None:
    if x.data.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {x.shape}")


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ============================ ELEMENTWISE OPS ============================

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _record(a.data + b.data, OpKind.ADD, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return _record(a.data - b.data, OpKind.SUB, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, OpKind.MUL, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    return _record(a.data * factor, OpKind.SCALE, (a,), lambda g: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, OpKind.TANH, (x,), lambda g: (g * (1.0 - y * y),), {"y": y})


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return _record(y, OpKind.SIGMOID, (x,), lambda g: (g * y * (1.0 - y),), {"y": y})


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float64)
    return _record(x.data * mask, OpKind.RELU, (x,), lambda g: (g * mask,), {"mask": mask})


# ============================ LINEAR ALGEBRA ============================

def dot(u: Tensor, v: Tensor) -> Tensor:
    _require_vector(u, "dot lhs")
    _require_same_shape(u, v, "dot")
    ud, vd = u.data, v.data
    return _record(np.array([ud @ vd]), OpKind.DOT, (u, v), lambda g: (g[0] * vd, g[0] * ud))


def outer(u: Tensor, v: Tensor) -> Tensor:
    """Binding operator: ``result[i][j] = u[i] * v[j]``."""
    _require_vector(u, "outer lhs")
    _require_vector(v, "outer rhs")
    if u.shape != v.shape:
        raise DimensionError(f"outer: vectors must share length d, got {u.shape[0]} and {v.shape[0]}")
    ud, vd = u.data, v.data
    return _record(np.outer(ud, vd), OpKind.OUTER, (u, v), lambda g: (g @ vd, g.T @ ud))


def matvec(m: Tensor, v: Tensor) -> Tensor:
    """Unbinding operator: ``M @ v``."""
    _require_matrix(m, "matvec matrix")
    _require_vector(v, "matvec vector")
    if m.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec: inner dimensions differ ({m.shape} @ {v.shape})")
    md, vd = m.data, v.data
    return _record(md @ vd, OpKind.MATVEC, (m, v), lambda g: (np.outer(g, vd), md.T @ g))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_matrix(a, "matmul lhs")
    _require_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data
    return _record(ad @ bd, OpKind.MATMUL, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    _require_matrix(a, "transpose")
    return _record(a.data.T.copy(), OpKind.TRANSPOSE, (a,), lambda g: (g.T,))


# ============================ STRUCTURAL OPS ============================

def concat(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat needs at least one vector")
    for p in parts:
        _require_vector(p, "concat part")
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> List[np.ndarray]:
        return [g[bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return _record(np.concatenate([p.data for p in parts]), OpKind.CONCAT, tuple(parts), backward)


def stack(rows: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into an ``n x d`` matrix."""
    if not rows:
        raise DimensionError("stack needs at least one vector")
    width = rows[0].shape
    for r in rows:
        _require_vector(r, "stack row")
        if r.shape != width:
            raise DimensionError(f"stack: row shapes differ ({width} vs {r.shape})")
    return _record(
        np.stack([r.data for r in rows]), OpKind.STACK, tuple(rows),
        lambda g: [g[i] for i in range(len(rows))],
    )


def slice_vector(x: Tensor, start: int, stop: int) -> Tensor:
    _require_vector(x, "slice")
    if not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for length {x.shape[0]}")
    n = x.shape[0]

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(n)
        full[start:stop] = g
        return (full,)

    return _record(x.data[start:stop].copy(), OpKind.SLICE, (x,), backward)


def row(table: Tensor, index: int) -> Tensor:
    """Embedding lookup; gradients scatter back into row ``index``."""
    _require_matrix(table, "row table")
    if not 0 <= index < table.shape[0]:
        raise IndexError(f"row {index} out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record(table.data[index].copy(), OpKind.ROW, (table,), backward)


# ============================ REDUCTIONS ============================

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.array([x.data.sum()]), OpKind.SUM, (x,), lambda g: (np.full(shape, g[0]),))


def sum_rows(m: Tensor) -> Tensor:
    _require_matrix(m, "sum_rows")
    n = m.shape[0]
    return _record(m.data.sum(axis=0), OpKind.SUM_ROWS, (m,), lambda g: (np.tile(g, (n, 1)),))


def mean_rows(m: Tensor) -> Tensor:
    _require_matrix(m, "mean_rows")
    n = m.shape[0]
    return _record(m.data.mean(axis=0), OpKind.MEAN_ROWS, (m,), lambda g: (np.tile(g / n, (n, 1)),))


def max_rows(m: Tensor) -> Tensor:
    """Column-wise max; ties route the gradient to the first maximal row."""
    _require_matrix(m, "max_rows")
    winners = np.argmax(m.data, axis=0)
    cols = np.arange(m.shape[1])
    shape = m.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(shape)
        full[winners, cols] = g
        return (full,)

    return _record(m.data[winners, cols], OpKind.MAX_ROWS, (m,), backward, {"winners": winners})


# ============================ NORMALISATION / LOSS ============================

def layernorm(
    x: Tensor,
    gain: Optional[Tensor] = None,
    shift: Optional[Tensor] = None,
    eps: float = LAYERNORM_EPS,
) -> Tensor:
    """Zero-mean, unit-variance normalisation followed by ``gain * x + shift``."""
    _require_vector(x, "layernorm")
    n = x.shape[0]
    if n < 2:
        raise DimensionError("layernorm needs a vector of length >= 2")
    g_data = gain.data if gain is not None else np.ones(n)
    s_data = shift.data if shift is not None else np.zeros(n)
    if g_data.shape != (n,) or s_data.shape != (n,):
        raise DimensionError(f"layernorm parameters must have length {n}")

    centered = x.data - x.data.mean()
    inv_std = 1.0 / np.sqrt((centered * centered).mean() + eps)
    xhat = centered * inv_std

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * g_data
        dx = inv_std * (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean())
        return dx, g * xhat, g

    if (gain is None) != (shift is None):
        raise DimensionError("layernorm takes both gain and shift or neither")
    if gain is not None and shift is not None:
        return _record(xhat * g_data + s_data, OpKind.LAYERNORM, (x, gain, shift), backward, {"xhat": xhat})
    return _record(xhat, OpKind.LAYERNORM, (x,), lambda g: backward(g)[:1], {"xhat": xhat})


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_xent(logits: Tensor, gold: int) -> Tensor:
    """Cross-entropy of ``softmax(logits)`` against class ``gold``."""
    _require_vector(logits, "softmax_xent logits")
    c = logits.shape[0]
    if c < 2:
        raise DimensionError("softmax_xent needs at least two classes")
    if not 0 <= gold < c:
        raise IndexError(f"gold class {gold} out of range [0, {c})")
    z = logits.data
    shifted = z - z.max()
    log_norm = np.log(np.exp(shifted).sum())
    probs = np.exp(shifted - log_norm)
    loss = log_norm - shifted[gold]

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        d = probs.copy()
        d[gold] -= 1.0
        return (g[0] * d,)

    return _record(np.array([loss]), OpKind.SOFTMAX_XENT, (logits,), backward, {"probs": probs})


# ============================ BACKWARD ============================

def _tape_of(loss: Tensor) -> List[Tensor]:
    """Every recorded tensor reachable from ``loss``, in creation order."""
    seen: Dict[int, Tensor] = {}
    pending = [loss]
    while pending:
        t = pending.pop()
        if t.id in seen:
            continue
        seen[t.id] = t
        pending.extend(t._inputs)
    return [seen[i] for i in sorted(seen)]


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` on every leaf tensor with ``requires_grad`` that the
    loss depends on. Gradients accumulate across calls until ``zero_grad``.

    Raises:
        ShapeError: if ``loss`` is not a single-element tensor
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for t in reversed(_tape_of(loss)):
        g = grads.pop(t.id, None)
        if g is None:
            continue
        if t._backward_fn is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for inp, ig in zip(t._inputs, t._backward_fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            grads[inp.id] = grads[inp.id] + ig if inp.id in grads else ig


# ============================ GRADIENT CHECKING ============================

class GradCheckReport(BaseModel):
    """Outcome of a central finite-difference comparison."""
    max_rel_error: float = Field(..., ge=0.0)
    tolerance: float = Field(..., gt=0.0)
    coordinates: int = Field(..., ge=0)
    worst_parameter: Optional[str] = None
    passed: bool

    def __bool__(self) -> bool:
        return self.passed


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """
    Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Each coordinate's error is ``|analytic - numeric| / max(1, |analytic|)``;
    the check passes iff the maximum error is ``<= tol``.
    """
    leaf = Tensor(x.data, requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    base = x.data.copy()
    numeric = np.zeros_like(base)
    with no_grad():
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            numeric[idx] = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2.0 * h)

    err = float(_rel_error(analytic, numeric).max())
    return GradCheckReport(max_rel_error=err, tolerance=tol, coordinates=base.size, passed=err <= tol)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Gradient check of a closure over named parameter tensors.

    Parameters are perturbed in place (their ``data`` is swapped and
    restored). ``max_coords_per_param`` samples coordinates deterministically
    to bound runtime on large tables.
    """
    for p in params.values():
        p.zero_grad()
    out = loss_fn()
    if out.data.size != 1:
        raise ShapeError(f"grad_check_params needs a scalar loss, got shape {out.shape}")
    backward(out)

    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, None, 0
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        original = p.data
        coords = list(np.ndindex(original.shape))
        if max_coords_per_param is not None and len(coords) > max_coords_per_param:
            picks = rng.choice(len(coords), size=max_coords_per_param, replace=False)
            coords = [coords[i] for i in sorted(picks)]
        try:
            with no_grad():
                for idx in coords:
                    plus = original.copy()
                    plus[idx] += h
                    p.data = plus
                    up = loss_fn().item()
                    minus = original.copy()
                    minus[idx] -= h
                    p.data = minus
                    down = loss_fn().item()
                    numeric = (up - down) / (2.0 * h)
                    err = float(_rel_error(np.array(analytic[idx]), np.array(numeric)))
                    checked += 1
                    if err > worst:
                        worst, worst_name = err, name
        finally:
            p.data = original
    for p in params.values():
        p.zero_grad()
    logger.debug(f"grad_check_params: {checked} coordinates, max rel err {worst:.3e} ({worst_name})")
    return GradCheckReport(
        max_rel_error=worst, tolerance=tol, coordinates=checked,
        worst_parameter=worst_name, passed=worst <= tol,
    )
