import logging
from typing import Optional, Sequence

import numpy as np

from fiem.errors import ArgumentError, StateError

logger = logging.getLogger(__name__)


class MemoryTable:
    """Per-example statistic store with an incrementally maintained mean.

    The running mean is recomputed from the rows every `refresh_every`
    row updates (default n) to keep it coherent with the table.
    """

    def __init__(self, n: int, q: int, refresh_every: Optional[int] = None):
        if n < 1 or q < 1:
            raise ArgumentError(f"need n >= 1 and q >= 1, got n={n}, q={q}")
        self.n = n
        self.q = q
        self.refresh_every = refresh_every or n
        self.rows = np.zeros((n, q))
        self.running_mean = np.zeros(q)
        self.refresh_counter = 0
        self.initialized = False

    @classmethod
    def from_rows(cls, rows: np.ndarray, refresh_every: Optional[int] = None) -> "MemoryTable":
        rows = np.array(rows, dtype=float)
        if rows.ndim != 2:
            raise ArgumentError(f"rows must be a matrix, got shape {rows.shape}")
        table = cls(rows.shape[0], rows.shape[1], refresh_every)
        table.rows = rows
        table.running_mean = rows.mean(axis=0)
        table.initialized = True
        return table

    def require_initialized(self) -> None:
        if not self.initialized:
            raise StateError("memory table used before initialization")

    def update(self, indices: Sequence[int], new_rows: np.ndarray) -> None:
        """Replace rows at distinct `indices` and update the running mean."""
        self.require_initialized()
        idx = np.asarray(indices, dtype=int)
        new_rows = np.asarray(new_rows, dtype=float)
        if idx.size == 0:
            raise ArgumentError("memory update needs at least one index")
        if np.unique(idx).size != idx.size:
            raise ArgumentError("memory update indices must be distinct")
        if new_rows.shape != (idx.size, self.q):
            raise ArgumentError(
                f"new rows have shape {new_rows.shape}, expected ({idx.size}, {self.q})"
            )
        delta = (new_rows - self.rows[idx]).sum(axis=0) / self.n
        self.running_mean = self.running_mean + delta
        self.rows[idx] = new_rows
        self.refresh_counter += idx.size
        if self.refresh_counter >= self.refresh_every:
            self.refresh()

    def refresh(self) -> None:
        self.running_mean = self.rows.mean(axis=0)
        self.refresh_counter = 0

    def batch_mean(self, indices: Sequence[int]) -> np.ndarray:
        """Mean of the stored rows over `indices`, duplicates counted."""
        self.require_initialized()
        return self.rows[np.asarray(indices, dtype=int)].mean(axis=0)

    def coherence_error(self) -> float:
        """max |running_mean − mean(rows)|, relative to 1 + ‖mean(rows)‖∞."""
        exact = self.rows.mean(axis=0)
        scale = 1.0 + float(np.max(np.abs(exact)))
        return float(np.max(np.abs(self.running_mean - exact))) / scale

    def copy(self) -> "MemoryTable":
        other = MemoryTable(self.n, self.q, self.refresh_every)
        other.rows = self.rows.copy()
        other.running_mean = self.running_mean.copy()
        other.refresh_counter = self.refresh_counter
        other.initialized = self.initialized
        return other
