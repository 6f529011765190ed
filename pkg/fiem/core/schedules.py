from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fiem.errors import ArgumentError
from fiem.utils.validators import validate_probability_vector


@dataclass(frozen=True)
class StepSchedule:
    """Deterministic positive step sizes γ₁, …, γ_{K_max}."""

    gammas: np.ndarray

    def __post_init__(self):
        gammas = np.asarray(self.gammas, dtype=float)
        if gammas.ndim != 1 or gammas.size == 0:
            raise ArgumentError("a schedule needs at least one step size")
        if not np.all(np.isfinite(gammas)) or np.any(gammas <= 0) or np.any(gammas > 1):
            raise ArgumentError("step sizes must lie in (0, 1]")
        object.__setattr__(self, "gammas", gammas)

    @classmethod
    def constant(cls, gamma: float, k_max: int) -> "StepSchedule":
        return cls(np.full(k_max, float(gamma)))

    @property
    def k_max(self) -> int:
        return int(self.gammas.size)

    def is_constant(self) -> bool:
        return bool(np.all(self.gammas == self.gammas[0]))

    def __len__(self) -> int:
        return self.k_max


@dataclass(frozen=True)
class TerminationRule:
    """Distribution of the random termination index K over {0, …, K_max−1}."""

    weights: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        is_valid, reason = validate_probability_vector(weights)
        if not is_valid:
            raise ArgumentError(reason)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, k_max: int) -> "TerminationRule":
        return cls(np.full(k_max, 1.0 / k_max))

    @classmethod
    def point_mass(cls, k_max: int, index: int) -> "TerminationRule":
        if not 0 <= index < k_max:
            raise ArgumentError(f"index {index} outside [0, {k_max})")
        weights = np.zeros(k_max)
        weights[index] = 1.0
        return cls(weights)

    @classmethod
    def from_weights(cls, weights: Sequence[float]) -> "TerminationRule":
        return cls(np.asarray(weights, dtype=float))

    @property
    def k_max(self) -> int:
        return int(self.weights.size)

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.k_max, p=self.weights))
