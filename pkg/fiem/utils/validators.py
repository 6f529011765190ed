from typing import Sequence, Tuple

import numpy as np


class StatisticValidator:
    """Checks sufficient-statistic vectors and probability weights."""

    def __init__(self, dimension: int):
        self.dimension = dimension

    def validate_statistic(self, values: np.ndarray) -> Tuple[bool, str]:
        """
        Validate a statistic vector.

        Returns:
            Tuple of (is_valid, reason)
        """
        if values.ndim != 1:
            return False, f"statistic must be a vector, got shape {values.shape}"
        if values.shape[0] != self.dimension:
            return (
                False,
                f"statistic has length {values.shape[0]}, expected {self.dimension}",
            )
        if not np.all(np.isfinite(values)):
            return False, "statistic contains non-finite entries"
        return True, "Valid statistic"


def validate_probability_vector(
    weights: Sequence[float], strictly_positive: bool = False, atol: float = 1e-12
) -> Tuple[bool, str]:
    """Check that `weights` is a probability vector."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        return False, "weights must be a non-empty vector"
    if not np.all(np.isfinite(w)):
        return False, "weights contain non-finite entries"
    if strictly_positive and np.any(w <= 0):
        return False, f"weights must be positive (min {w.min():.3e})"
    if np.any(w < 0):
        return False, f"weights must be non-negative (min {w.min():.3e})"
    total = float(w.sum())
    if abs(total - 1.0) > atol:
        return False, f"weights sum to {total!r}, expected 1"
    return True, "Valid weights"


def validate_correlation(value: float, name: str) -> Tuple[bool, str]:
    if not -1.0 < value < 1.0:
        return False, f"{name} must lie in (-1, 1), got {value}"
    return True, "Valid correlation"


def validate_open_unit(value: float, name: str) -> Tuple[bool, str]:
    if not 0.0 < value < 1.0:
        return False, f"{name} must lie in (0, 1), got {value}"
    return True, "Valid"
