"""
Spatial Relation Vocabulary

The nine relation labels (eight directions plus overlap), their integer grid
offsets, inverses and the sign-of-sum composition oracle.

A triple ``(A, r, B)`` reads "A is r of B", so ``offset(r) = pos(A) - pos(B)``.
"""

import string
from enum import Enum
from typing import Iterable, Tuple, Union

import numpy as np

ENTITY_ALPHABET = string.ascii_uppercase

Offset = Tuple[int, int]


class UnknownRelationError(ValueError):
    """Raised for a label outside the nine-relation vocabulary."""


class UnknownEntityError(ValueError):
    """Raised for an entity name that is not a single capital letter."""


class RelationLabel(str, Enum):
    """Direction of one entity relative to another."""
    ABOVE = "above"
    BELOW = "below"
    LEFT = "left"
    RIGHT = "right"
    UPPER_LEFT = "upper-left"
    UPPER_RIGHT = "upper-right"
    LOWER_LEFT = "lower-left"
    LOWER_RIGHT = "lower-right"
    OVERLAP = "overlap"

    @property
    def offset(self) -> Offset:
        return _OFFSETS[self]

    @property
    def inverse(self) -> "RelationLabel":
        dx, dy = self.offset
        return _BY_OFFSET[(-dx, -dy)]

    @property
    def index(self) -> int:
        """Row of this label in relation tables and class index for logits."""
        return LABELS.index(self)

    @classmethod
    def parse(cls, value: Union[str, "RelationLabel"]) -> "RelationLabel":
        try:
            return cls(value)
        except ValueError:
            raise UnknownRelationError(f"Unknown relation label: {value!r}") from None

    @classmethod
    def from_offset(cls, dx: float, dy: float) -> "RelationLabel":
        """Label of the signs of a (possibly multi-step) displacement."""
        return _BY_OFFSET[(int(np.sign(dx)), int(np.sign(dy)))]


_OFFSETS = {
    RelationLabel.ABOVE: (0, 1),
    RelationLabel.BELOW: (0, -1),
    RelationLabel.LEFT: (-1, 0),
    RelationLabel.RIGHT: (1, 0),
    RelationLabel.UPPER_LEFT: (-1, 1),
    RelationLabel.UPPER_RIGHT: (1, 1),
    RelationLabel.LOWER_LEFT: (-1, -1),
    RelationLabel.LOWER_RIGHT: (1, -1),
    RelationLabel.OVERLAP: (0, 0),
}
_BY_OFFSET = {offset: label for label, offset in _OFFSETS.items()}

LABELS: Tuple[RelationLabel, ...] = tuple(RelationLabel)
NUM_LABELS = len(LABELS)


def offset_sum(labels: Iterable[RelationLabel]) -> Offset:
    dx = dy = 0
    for label in labels:
        ox, oy = RelationLabel.parse(label).offset
        dx += ox
        dy += oy
    return dx, dy


def oracle_compose(labels: Iterable[RelationLabel]) -> RelationLabel:
    """
    Compose the relations along a path by summing their offsets.

    Raises:
        ValueError: if ``labels`` is empty
    """
    labels = list(labels)
    if not labels:
        raise ValueError("oracle_compose needs at least one relation")
    return RelationLabel.from_offset(*offset_sum(labels))


def entity_index(name: str) -> int:
    """Embedding row of a single-capital-letter entity."""
    if len(name) != 1 or name not in ENTITY_ALPHABET:
        raise UnknownEntityError(f"Entity must be a single capital letter, got {name!r}")
    return ENTITY_ALPHABET.index(name)
