"""
Tensor Product Node Memory

Per-node ``d x d`` memories holding sums of ``filler (x) role`` bindings,
and the bind / unbind / accumulate algebra over them.

Rows of a memory index filler space and columns index role space, so
``retrieve(M, r) = M @ r`` returns every stored filler weighted by the inner
product of its role with ``r``. With orthonormal roles that weight is 0 or 1
and retrieval is exact; with random unit roles the leftover weights are the
crosstalk.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from core.tensor import (
    DimensionError,
    Tensor,
    add,
    matmul,
    matvec,
    outer,
    stack,
    transpose,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NodeMemory:
    """Value-semantics wrapper around one node's ``d x d`` memory matrix."""
    matrix: Tensor

    def __post_init__(self):
        shape = self.matrix.shape
        if len(shape) != 2 or shape[0] != shape[1]:
            raise DimensionError(f"Node memory must be square, got shape {shape}")

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def zeros(cls, d: int) -> "NodeMemory":
        return cls(Tensor(np.zeros((d, d))))


def _check_width(mem: NodeMemory, vec: Tensor, what: str) -> None:
    if vec.shape != (mem.d,):
        raise DimensionError(f"{what} must have length {mem.d}, got shape {vec.shape}")


def store(mem: NodeMemory, filler: Tensor, role: Tensor) -> NodeMemory:
    """Return ``mem + filler (x) role``; ``mem`` is left untouched."""
    _check_width(mem, filler, "filler")
    _check_width(mem, role, "role")
    return NodeMemory(add(mem.matrix, outer(filler, role)))


def bind_sum(fillers: Sequence[Tensor], roles: Sequence[Tensor]) -> Tensor:
    """``sum_k fillers[k] (x) roles[k]`` as a single matrix product."""
    if len(fillers) != len(roles) or not fillers:
        raise DimensionError(f"bind_sum needs equal, nonzero counts (got {len(fillers)} fillers, {len(roles)} roles)")
    return matmul(transpose(stack(fillers)), stack(roles))


def store_many(mem: NodeMemory, fillers: Sequence[Tensor], roles: Sequence[Tensor]) -> NodeMemory:
    if not fillers:
        return mem
    bound = bind_sum(fillers, roles)
    if bound.shape != mem.matrix.shape:
        raise DimensionError(f"bindings of shape {bound.shape} do not fit memory of width {mem.d}")
    return NodeMemory(add(mem.matrix, bound))


def retrieve(mem: NodeMemory, key: Tensor) -> Tensor:
    """Unbind: ``mem @ key``."""
    _check_width(mem, key, "key")
    return matvec(mem.matrix, key)


def memory_norm(mem: NodeMemory) -> float:
    """Frobenius norm."""
    return float(np.linalg.norm(mem.matrix.data))


# ============================ ROLE BASES ============================

class RoleMode(str, Enum):
    ORTHONORMAL_ONEHOT = "orthonormal-onehot"
    RANDOM_UNIT = "random-unit"


@dataclass
class RoleBasis:
    """Unit role vectors for a set of entities."""
    mode: RoleMode
    vectors: Dict[str, np.ndarray]

    @classmethod
    def create(
        cls,
        entities: Sequence[str],
        d: int,
        mode: RoleMode = RoleMode.ORTHONORMAL_ONEHOT,
        seed: int = 0,
        rng: Optional[np.random.Generator] = None,
    ) -> "RoleBasis":
        """
        One role per entity, in the given order.

        Random roles are drawn from ``rng`` when given (so a caller can keep
        one generator across several tables), else from ``seed``.
        """
        mode = RoleMode(mode)
        if mode is RoleMode.ORTHONORMAL_ONEHOT:
            if len(entities) > d:
                raise DimensionError(f"{len(entities)} one-hot roles do not fit in width {d}")
            identity = np.eye(d)
            vectors = {name: identity[i] for i, name in enumerate(entities)}
        else:
            rng = rng if rng is not None else np.random.default_rng(seed)
            vectors = {name: random_unit_vector(rng, d) for name in entities}
        return cls(mode, vectors)

    def role(self, name: str) -> Tensor:
        return Tensor(self.vectors[name])

    def table(self) -> np.ndarray:
        """Roles stacked as rows, in creation order."""
        return np.stack(list(self.vectors.values()))


def random_unit_vector(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


class CrosstalkStatistics(BaseModel):
    """Inner products between independent random unit roles."""
    d: int = Field(..., ge=1)
    samples: int = Field(..., ge=1)
    mean_abs: float = Field(..., ge=0.0, description="Mean |<r_i, r_j>|")
    rms: float = Field(..., ge=0.0, description="Root mean square <r_i, r_j>")

    @property
    def expected_rms(self) -> float:
        return 1.0 / np.sqrt(self.d)

    @property
    def expected_mean_abs(self) -> float:
        """Gaussian limit of the mean absolute inner product, ``sqrt(2 / (pi d))``."""
        return float(np.sqrt(2.0 / (np.pi * self.d)))


def crosstalk_statistics(d: int, samples: int = 10_000, seed: int = 0) -> CrosstalkStatistics:
    """Sample ``samples`` pairs of random unit roles and summarise their overlap."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(samples, d))
    b = rng.normal(size=(samples, d))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    products = np.einsum("ij,ij->i", a, b)
    return CrosstalkStatistics(
        d=d,
        samples=samples,
        mean_abs=float(np.abs(products).mean()),
        rms=float(np.sqrt((products ** 2).mean())),
    )


def retrieval_cosines(
    d: int,
    num_roles: int,
    trials: int,
    seed: int = 0,
) -> List[float]:
    """Mean cosine between retrieved and true fillers, per trial, for random unit roles."""
    rng = np.random.default_rng(seed)
    means: List[float] = []
    for _ in range(trials):
        roles = np.stack([random_unit_vector(rng, d) for _ in range(num_roles)])
        fillers = rng.normal(size=(num_roles, d))
        memory = fillers.T @ roles
        retrieved = memory @ roles.T
        cos = np.einsum("ij,ji->i", fillers, retrieved) / (
            np.linalg.norm(fillers, axis=1) * np.linalg.norm(retrieved, axis=0)
        )
        means.append(float(cos.mean()))
    return means
