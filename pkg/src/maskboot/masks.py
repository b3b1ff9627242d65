"""Label-grid mask sets and the shared nearest-neighbor coordinate rule.

A MaskSet is stored as an integer label grid: pixel (i, j) belongs to the
binary mask of label ``grid[i, j]``. This representation makes the partition
property (pairwise disjoint, collectively exhaustive) hold by construction;
``is_partition`` re-derives it from the per-label binary masks as a check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def nn_source_index(dst_size: int, src_size: int) -> np.ndarray:
    """Map each target index to its nearest source index.

    Half-pixel centers: target index d has center (d + 0.5) * src/dst in
    source units; the nearest source center wins, with exact ties broken
    toward the smaller (top-left) source index.
    """
    d = np.arange(dst_size, dtype=np.float64)
    src = (d + 0.5) * (src_size / dst_size) - 0.5
    # ceil(x - 0.5) rounds halves down, i.e. toward the top-left pixel
    idx = np.ceil(src - 0.5).astype(np.int64)
    return np.clip(idx, 0, src_size - 1)


@dataclass(frozen=True)
class MaskSet:
    """A partition of a spatial grid into labeled binary masks."""

    grid: np.ndarray  # int labels, shape H x W

    def __post_init__(self):
        if self.grid.ndim != 2:
            raise ContractError(f"mask grid must be 2-D, got shape {self.grid.shape}")
        if not np.issubdtype(self.grid.dtype, np.integer):
            raise ContractError(f"mask grid must be integer-typed, got {self.grid.dtype}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape  # type: ignore[return-value]

    def labels(self) -> np.ndarray:
        """Sorted distinct labels present."""
        return np.unique(self.grid)

    def binary(self, label: int) -> np.ndarray:
        """Binary mask of one label (bool H x W)."""
        return self.grid == label

    def binary_masks(self) -> dict[int, np.ndarray]:
        return {int(lbl): self.grid == lbl for lbl in self.labels()}

    def is_partition(self) -> bool:
        """Check disjointness and coverage of the per-label binary masks."""
        total = np.zeros(self.grid.shape, dtype=np.int64)
        for m in self.binary_masks().values():
            total += m.astype(np.int64)
        return bool(np.all(total == 1))

    def __eq__(self, other) -> bool:
        return isinstance(other, MaskSet) and np.array_equal(self.grid, other.grid)
