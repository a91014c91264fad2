"""Token orderings over the patch grid and their schedule across blocks."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class Direction(str, enum.Enum):
    ROW_FORWARD = "RowForward"
    ROW_BACKWARD = "RowBackward"
    COL_FORWARD = "ColForward"
    COL_BACKWARD = "ColBackward"

    @property
    def short(self) -> str:
        return {"RowForward": "RF", "RowBackward": "RB", "ColForward": "CF", "ColBackward": "CB"}[self.value]

    @property
    def is_column(self) -> bool:
        return self in (Direction.COL_FORWARD, Direction.COL_BACKWARD)


RF, RB, CF, CB = Direction.ROW_FORWARD, Direction.ROW_BACKWARD, Direction.COL_FORWARD, Direction.COL_BACKWARD
ALL_DIRECTIONS = (RF, RB, CF, CB)


@dataclass(frozen=True)
class TraversalPath:
    kind: Direction
    grid: tuple[int, int]

    @property
    def length(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def scan_grid(self) -> tuple[int, int]:
        """Grid shape of the tokens when reshaped in visiting order (transposed for column scans)."""
        h, w = self.grid
        return (w, h) if self.kind.is_column else (h, w)


def grid_permutation(path: TraversalPath) -> np.ndarray:
    """``perm[t]`` is the row-major index of the patch visited at step ``t``."""
    h, w = path.grid
    if h <= 0 or w <= 0:
        raise ConfigError(f"grid must have positive extents, got {path.grid}")
    idx = np.arange(h * w)
    if path.kind is RF:
        return idx
    if path.kind is RB:
        return idx[::-1].copy()
    col = idx.reshape(h, w).T.reshape(-1)
    return col if path.kind is CF else col[::-1].copy()


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def apply_permutation(x: Tensor, perm: np.ndarray, axis: int = -2) -> Tensor:
    if x.shape[axis] != len(perm):
        raise DimensionError(f"permutation of length {len(perm)} applied to axis of length {x.shape[axis]}")
    return T.take(x, perm, axis)


def flip_sequence(x: Tensor, axis: int = -2) -> Tensor:
    """Reverse the token axis (``x[t] -> x[L-1-t]``)."""
    return x.flip(axis)


@dataclass(frozen=True)
class BlockDesign:
    directions: tuple[Direction, ...]
    alternating: bool = False
    shared_params: bool = False

    def __post_init__(self):
        if not self.directions:
            raise ConfigError("block design needs at least one direction")
        if self.alternating and self.shared_params:
            raise ConfigError("alternating designs use one direction per block; parameter sharing does not apply")

    @property
    def per_block(self) -> int:
        """Number of mLSTM layers evaluated in each block."""
        return 1 if self.alternating else len(self.directions)

    @property
    def param_sets(self) -> int:
        """Number of independent layer parameter sets per block."""
        return 1 if (self.alternating or self.shared_params) else len(self.directions)

    @classmethod
    def from_name(cls, name: str) -> "BlockDesign":
        try:
            return DESIGNS[name]
        except KeyError:
            raise ConfigError(f"unknown block design {name!r}; choose from {sorted(DESIGNS)}") from None

    @property
    def name(self) -> str:
        for k, v in DESIGNS.items():
            if v == self:
                return k
        return "custom"


DESIGNS = {
    "uni": BlockDesign((RF,)),
    "bi": BlockDesign((RF, RB)),
    "bi-shared": BlockDesign((RF, RB), shared_params=True),
    "alt-bi": BlockDesign((RF, RB), alternating=True),
    "quad": BlockDesign(ALL_DIRECTIONS),
    "quad-shared": BlockDesign(ALL_DIRECTIONS, shared_params=True),
    "alt-quad": BlockDesign(ALL_DIRECTIONS, alternating=True),
}


def assign_directions(design: BlockDesign, depth: int) -> list[list[Direction]]:
    """Directions evaluated by each block.

    Alternating designs give block ``i`` the single direction
    ``directions[i % len(directions)]``; other designs run every direction in
    every block.
    """
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    if not design.directions:
        raise ConfigError("block design needs at least one direction")
    if design.alternating:
        n = len(design.directions)
        return [[design.directions[i % n]] for i in range(depth)]
    return [list(design.directions) for _ in range(depth)]
