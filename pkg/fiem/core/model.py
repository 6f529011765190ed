"""Finite-sum model interface and model-generic quantities.

A model exposes per-example expected statistics s̄ᵢ(θ), the M-step map T and
an admissibility predicate on statistics. Objective, curvature matrix B(s)
and smoothness constants are optional capabilities.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Sequence, Tuple

import numpy as np

from fiem.errors import (
    ConfigurationError,
    DomainError,
    UnsupportedCapabilityError,
)
from fiem.utils.validators import StatisticValidator

logger = logging.getLogger(__name__)

# Statistics are plain float vectors of length q.
SuffStat = np.ndarray
# Parameters are opaque to generic code.
Parameter = Any


@dataclass(frozen=True)
class ModelConstants:
    """Curvature and smoothness constants of a model."""

    v_min: float
    v_max: float
    lipschitz_i: Tuple[float, ...]
    lipschitz_rms: float
    lipschitz_gradv: float

    def __post_init__(self):
        if not 0 < self.v_min <= self.v_max:
            raise ConfigurationError(
                f"need 0 < v_min <= v_max, got v_min={self.v_min}, v_max={self.v_max}"
            )
        if len(self.lipschitz_i) == 0:
            raise ConfigurationError("lipschitz_i must not be empty")
        if min(self.lipschitz_i) <= 0 or self.lipschitz_gradv <= 0:
            raise ConfigurationError("Lipschitz constants must be positive")
        mean_sq = float(np.mean(np.square(self.lipschitz_i)))
        if abs(self.lipschitz_rms**2 - mean_sq) > 1e-12 * mean_sq:
            raise ConfigurationError(
                f"lipschitz_rms^2={self.lipschitz_rms ** 2!r} does not match "
                f"mean(lipschitz_i^2)={mean_sq!r}"
            )

    @classmethod
    def from_lipschitz(
        cls,
        v_min: float,
        v_max: float,
        lipschitz_i: Sequence[float],
        lipschitz_gradv: float,
    ) -> "ModelConstants":
        values = tuple(float(x) for x in lipschitz_i)
        rms = float(np.sqrt(np.mean(np.square(values))))
        return cls(v_min, v_max, values, rms, float(lipschitz_gradv))

    @property
    def lipschitz_max(self) -> float:
        return float(max(self.lipschitz_i))

    def to_dict(self) -> dict:
        return {
            "v_min": self.v_min,
            "v_max": self.v_max,
            "L": self.lipschitz_rms,
            "L_max": self.lipschitz_max,
            "L_gradV": self.lipschitz_gradv,
        }


class FiniteSumModel(ABC):
    """A curved exponential family model written as a finite sum over n examples."""

    n: int
    q: int

    @abstractmethod
    def sbar_i(self, theta: Parameter, i: int) -> SuffStat:
        """Expected complete-data statistic of example i at θ."""

    @abstractmethod
    def tmap(self, s: SuffStat) -> Parameter:
        """M-step: the unique minimizer of the penalized surrogate at s."""

    @abstractmethod
    def admissible(self, s: SuffStat) -> Tuple[bool, str]:
        """
        Check whether s lies in the domain of the M-step map.

        Returns:
            Tuple of (is_valid, reason)
        """

    def sbar_batch(self, theta: Parameter, indices: Sequence[int]) -> np.ndarray:
        """Stack s̄ᵢ(θ) for i in indices as rows of a (len(indices), q) array."""
        rows = [np.asarray(self.sbar_i(theta, int(i)), dtype=float) for i in indices]
        for row in rows:
            if row.shape != (self.q,):
                raise ConfigurationError(
                    f"sbar_i returned shape {row.shape}, expected ({self.q},)"
                )
        return np.vstack(rows)

    def sbar_T_batch(self, s: SuffStat, indices: Sequence[int]) -> np.ndarray:
        """Rows s̄ᵢ∘T(s) for i in indices; models may override with a fused path."""
        return self.sbar_batch(self.tmap(s), indices)

    def initial_statistic(self) -> SuffStat:
        raise UnsupportedCapabilityError(
            f"{type(self).__name__} has no default starting statistic; pass s0"
        )

    def objective(self, theta: Parameter) -> float:
        raise UnsupportedCapabilityError(
            f"{type(self).__name__} does not expose an objective"
        )

    def b_matrix(self, s: SuffStat) -> np.ndarray:
        raise UnsupportedCapabilityError(
            f"{type(self).__name__} does not expose B(s)"
        )

    def constants(self) -> ModelConstants:
        raise UnsupportedCapabilityError(
            f"{type(self).__name__} does not expose smoothness constants; "
            "supply them explicitly"
        )

    def check_statistic(self, s: SuffStat, check_domain: bool = True) -> SuffStat:
        """Validate shape/finiteness and, unless `check_domain` is off, admissibility."""
        s = np.asarray(s, dtype=float)
        is_valid, reason = StatisticValidator(self.q).validate_statistic(s)
        if not is_valid:
            raise ConfigurationError(reason)
        if not check_domain:
            return s
        ok, reason = self.admissible(s)
        if not ok:
            raise DomainError(reason)
        return s


def sbar(model: FiniteSumModel, theta: Parameter) -> SuffStat:
    """n⁻¹ Σᵢ s̄ᵢ(θ)."""
    rows = model.sbar_batch(theta, np.arange(model.n))
    if rows.shape != (model.n, model.q):
        raise ConfigurationError(
            f"sbar rows have shape {rows.shape}, expected ({model.n}, {model.q})"
        )
    return rows.mean(axis=0)


def sbar_T(model: FiniteSumModel, s: SuffStat) -> SuffStat:
    """s̄∘T(s), using the model's fused per-example path."""
    rows = model.sbar_T_batch(s, np.arange(model.n))
    return rows.mean(axis=0)


def mean_field(model: FiniteSumModel, s: SuffStat) -> SuffStat:
    """h(s) = s̄∘T(s) − s."""
    s = model.check_statistic(s)
    return sbar_T(model, s) - s


def objective_V(model: FiniteSumModel, s: SuffStat) -> float:
    """V(s) = F∘T(s)."""
    s = model.check_statistic(s)
    return float(model.objective(model.tmap(s)))


def finite_difference_gradient(
    func: Callable[[np.ndarray], float], x: np.ndarray, rel_step: float = 1e-5
) -> np.ndarray:
    """Central differences with step rel_step·(1+|xⱼ|) per coordinate."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for j in range(x.size):
        step = rel_step * (1.0 + abs(x[j]))
        forward = x.copy()
        backward = x.copy()
        forward[j] += step
        backward[j] -= step
        grad[j] = (func(forward) - func(backward)) / (forward[j] - backward[j])
    return grad


def gradV_identity_check(model: FiniteSumModel, s: SuffStat) -> float:
    """‖∇(F∘T)(s) + B(s)h(s)‖ with ∇ evaluated by central differences."""
    s = model.check_statistic(s)
    b = model.b_matrix(s)
    grad = finite_difference_gradient(lambda x: objective_V(model, x), s)
    residual = grad + b @ mean_field(model, s)
    return float(np.linalg.norm(residual))


def vdot(model: FiniteSumModel, s: SuffStat) -> np.ndarray:
    """V̇(s) = −B(s)h(s)."""
    return -model.b_matrix(s) @ mean_field(model, s)


__all__ = [
    "FiniteSumModel",
    "ModelConstants",
    "Parameter",
    "SuffStat",
    "finite_difference_gradient",
    "gradV_identity_check",
    "mean_field",
    "objective_V",
    "sbar",
    "sbar_T",
    "vdot",
]
