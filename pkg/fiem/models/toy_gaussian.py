"""Gaussian linear latent model with closed forms.

    Zᵢ ~ N(Xθ, I_p),   Yᵢ | Zᵢ ~ N(A Zᵢ, I_y),   penalty υ/2 ‖θ‖².

The E-step statistic is the conditional mean of Xᵀ Zᵢ, so every map is
affine: s̄ᵢ∘T(s) = Π₁Yᵢ + Π₂s with T(s) = (υI + XᵀX)⁻¹ s.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from fiem.core.algorithms import opt_fiem_lambda, sa_update
from fiem.core.memory import MemoryTable
from fiem.core.model import FiniteSumModel, ModelConstants
from fiem.errors import ArgumentError, ConfigurationError, DegenerateVarianceError
from fiem.utils.rng import StreamFactory
from fiem.utils.validators import validate_correlation

logger = logging.getLogger(__name__)


@dataclass
class ToyModelSpec:
    A: np.ndarray
    X: np.ndarray
    upsilon: float
    observations: np.ndarray
    theta_true: Optional[np.ndarray] = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        if self.theta_true is not None:
            self.theta_true = np.asarray(self.theta_true, dtype=float)
        y_dim, p_dim = self.A.shape
        if self.X.shape[0] != p_dim:
            raise ConfigurationError(
                f"A is {self.A.shape} but X has {self.X.shape[0]} rows, expected {p_dim}"
            )
        if self.observations.shape[1] != y_dim:
            raise ConfigurationError(
                f"observations have {self.observations.shape[1]} columns, expected {y_dim}"
            )
        if self.upsilon < 0:
            raise ConfigurationError(f"upsilon must be >= 0, got {self.upsilon}")
        if self.upsilon == 0:
            q_dim = self.X.shape[1]
            if np.linalg.matrix_rank(self.X) != min(q_dim, y_dim):
                raise ConfigurationError("upsilon = 0 needs rank(X) = min(q, y)")
            if np.linalg.matrix_rank(self.A @ self.X) != min(p_dim, y_dim):
                raise ConfigurationError("upsilon = 0 needs rank(AX) = min(p, y)")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.A.shape[0], self.A.shape[1], self.X.shape[1]

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def y_bar(self) -> np.ndarray:
        return self.observations.mean(axis=0)

    def to_dict(self) -> dict:
        doc = {
            "A": self.A.tolist(),
            "X": self.X.tolist(),
            "upsilon": self.upsilon,
            "observations": self.observations.tolist(),
        }
        if self.theta_true is not None:
            doc["theta_true"] = self.theta_true.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ToyModelSpec":
        unknown = set(doc) - {"A", "X", "upsilon", "observations", "theta_true"}
        if unknown:
            raise ConfigurationError(f"unknown toy spec keys: {sorted(unknown)}")
        return cls(
            A=np.array(doc["A"]),
            X=np.array(doc["X"]),
            upsilon=float(doc["upsilon"]),
            observations=np.array(doc["observations"]),
            theta_true=None if doc.get("theta_true") is None else np.array(doc["theta_true"]),
        )

    def to_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def from_json(cls, path: str) -> "ToyModelSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def observations_to_csv(self, path: str) -> None:
        pd.DataFrame(self.observations).to_csv(path, header=False, index=False)


def ar1_matrix(rng: np.random.Generator, rows: int, cols: int, rho: float) -> np.ndarray:
    """Columns of a stationary AR(1) process with coefficient rho."""
    scale = math.sqrt(1.0 - rho**2)
    out = np.empty((rows, cols))
    out[:, 0] = scale * rng.standard_normal(rows)
    for j in range(1, cols):
        out[:, j] = rho * out[:, j - 1] + scale * rng.standard_normal(rows)
    return out


def generate_toy(
    seed: int,
    n: int,
    y_dim: int = 15,
    p_dim: int = 10,
    q_dim: int = 20,
    rho: float = 0.8,
    rho_tilde: float = 0.9,
    sparsity: float = 0.4,
    value_range: Sequence[float] = (-5.0, 5.0),
    upsilon: float = 0.1,
) -> ToyModelSpec:
    """Draw A, X, a sparse θ_true and n observations from the marginal model."""
    for value, name in ((rho, "rho"), (rho_tilde, "rho_tilde")):
        is_valid, reason = validate_correlation(value, name)
        if not is_valid:
            raise ArgumentError(reason)
    if n < 1:
        raise ArgumentError(f"n must be >= 1, got {n}")
    if not 0.0 <= sparsity <= 1.0:
        raise ArgumentError(f"sparsity must lie in [0, 1], got {sparsity}")
    low, high = (float(v) for v in value_range)
    if not low < high:
        raise ArgumentError(f"empty value range [{low}, {high}]")

    rng = StreamFactory(seed).stream("data")
    A = ar1_matrix(rng, y_dim, p_dim, rho)
    X = ar1_matrix(rng, p_dim, q_dim, rho_tilde)

    theta_true = rng.uniform(low, high, size=q_dim)
    n_zero = int(math.floor(sparsity * q_dim))
    theta_true[rng.choice(q_dim, size=n_zero, replace=False)] = 0.0

    # Hierarchical draw: Z ~ N(Xθ, I), Y = AZ + ε has law N(AXθ, I + AAᵀ).
    Z = X @ theta_true + rng.standard_normal((n, p_dim))
    Y = Z @ A.T + rng.standard_normal((n, y_dim))
    logger.info("Generated toy data: n=%d, dims=(%d, %d, %d)", n, y_dim, p_dim, q_dim)
    return ToyModelSpec(A=A, X=X, upsilon=upsilon, observations=Y, theta_true=theta_true)


def theta_star(spec: ToyModelSpec) -> np.ndarray:
    """Penalized maximum-likelihood estimate.

    Raises:
        numpy.linalg.LinAlgError: the normal equations are singular.
    """
    y_dim = spec.A.shape[0]
    W = spec.A @ spec.X
    gamma = np.eye(y_dim) + spec.A @ spec.A.T
    gamma_inv_w = linalg.solve(gamma, W, assume_a="pos")
    hessian = spec.upsilon * np.eye(W.shape[1]) + W.T @ gamma_inv_w
    rhs = gamma_inv_w.T @ spec.y_bar
    return linalg.solve(hessian, rhs, assume_a="sym")


class ToyGaussianModel(FiniteSumModel):
    def __init__(self, spec: ToyModelSpec):
        self.spec = spec
        y_dim, p_dim, q_dim = spec.dims
        A, X, Y = spec.A, spec.X, spec.observations
        self.n = spec.n
        self.q = q_dim

        self._m_factor = linalg.cho_factor(np.eye(p_dim) + A.T @ A)
        self._g_factor = linalg.cho_factor(spec.upsilon * np.eye(q_dim) + X.T @ X)
        self._gamma_factor = linalg.cho_factor(np.eye(y_dim) + A @ A.T)

        kernel = X.T @ linalg.cho_solve(self._m_factor, X)
        tmat = linalg.cho_solve(self._g_factor, np.eye(q_dim))
        self.kernel = (kernel + kernel.T) / 2
        self.tmat = (tmat + tmat.T) / 2
        self.pi1 = X.T @ linalg.cho_solve(self._m_factor, A.T)
        self.pi2 = self.kernel @ self.tmat
        self._py = Y @ self.pi1.T

        self._ax = A @ X
        self._gamma_inv_ybar = linalg.cho_solve(self._gamma_factor, spec.y_bar)
        gamma_inv_y = linalg.cho_solve(self._gamma_factor, Y.T).T
        self._quad_y = float(np.sum(Y * gamma_inv_y) / self.n)
        self._logdet_gamma = 2.0 * float(np.sum(np.log(np.diag(self._gamma_factor[0]))))
        logger.debug("Toy model ready: n=%d, q=%d", self.n, self.q)

    # FiniteSumModel interface

    def sbar_i(self, theta: np.ndarray, i: int) -> np.ndarray:
        return self._py[i] + self.kernel @ theta

    def sbar_batch(self, theta: np.ndarray, indices: Sequence[int]) -> np.ndarray:
        return self._py[np.asarray(indices, dtype=int)] + self.kernel @ theta

    def sbar_T_batch(self, s: np.ndarray, indices: Sequence[int]) -> np.ndarray:
        return self._py[np.asarray(indices, dtype=int)] + self.pi2 @ s

    def tmap(self, s: np.ndarray) -> np.ndarray:
        return self.tmat @ s

    def admissible(self, s: np.ndarray) -> Tuple[bool, str]:
        return True, "Valid statistic"

    def initial_statistic(self) -> np.ndarray:
        """s̄(0)."""
        return self._py.mean(axis=0)

    def objective(self, theta: np.ndarray) -> float:
        """Normalized negative penalized log-likelihood F(θ)."""
        mean = self._ax @ theta
        gamma_inv_mean = linalg.cho_solve(self._gamma_factor, mean)
        quad = self._quad_y - 2.0 * float(mean @ self._gamma_inv_ybar) + float(mean @ gamma_inv_mean)
        y_dim = self.spec.A.shape[0]
        return (
            0.5 * quad
            + 0.5 * self._logdet_gamma
            + 0.5 * y_dim * math.log(2 * math.pi)
            + 0.5 * self.spec.upsilon * float(theta @ theta)
        )

    def b_matrix(self, s: np.ndarray) -> np.ndarray:
        return self.tmat.copy()

    def constants(self) -> ModelConstants:
        xtx_eigs = linalg.eigvalsh(self.spec.X.T @ self.spec.X)
        upsilon = self.spec.upsilon
        v_min = 1.0 / (upsilon + float(xtx_eigs.max()))
        v_max = 1.0 / (upsilon + float(xtx_eigs.min()))
        lipschitz = float(np.linalg.norm(self.pi2, 2))
        return ModelConstants.from_lipschitz(
            v_min, v_max, [lipschitz] * self.n, self.lipschitz_gradv()
        )

    # Closed forms

    def gradv_matrix(self) -> np.ndarray:
        """Tmat(Π₂ − I), the Jacobian of V̇."""
        return self.tmat @ (self.pi2 - np.eye(self.q))

    def lipschitz_gradv(self) -> float:
        """max |eig(Tmat(Π₂ − I))|."""
        m = self.gradv_matrix()
        scale = float(np.max(np.abs(m)))
        if np.allclose(m, m.T, rtol=0.0, atol=1e-12 * scale):
            eigs = linalg.eigvalsh((m + m.T) / 2)
        else:
            eigs = linalg.eigvals(m)
        return float(np.max(np.abs(eigs)))

    def lipschitz_gradv_power_iteration(self, max_iter: int = 100000, tol: float = 1e-14) -> float:
        """Spectral radius of Tmat(Π₂ − I) by power iteration on its square."""
        m = self.gradv_matrix()
        x = np.linspace(1.0, 2.0, self.q)
        x /= np.linalg.norm(x)
        estimate = 0.0
        for _ in range(max_iter):
            y = m @ (m @ x)
            new_estimate = float(x @ y)
            x = y / np.linalg.norm(y)
            if abs(new_estimate - estimate) <= tol * abs(new_estimate):
                estimate = new_estimate
                break
            estimate = new_estimate
        return math.sqrt(abs(estimate))

    def em_step_closed(self, s: np.ndarray) -> np.ndarray:
        """Π₁Ȳ + Π₂s."""
        return self.pi1 @ self.spec.y_bar + self.pi2 @ s

    def fixed_point(self) -> np.ndarray:
        """s★ solving (I − Π₂)s★ = Π₁Ȳ."""
        return linalg.solve(np.eye(self.q) - self.pi2, self.pi1 @ self.spec.y_bar)

    def step(
        self,
        s: np.ndarray,
        memory: MemoryTable,
        i: int,
        j: int,
        gamma: float,
        lam: Optional[float] = 1.0,
    ) -> Tuple[np.ndarray, float]:
        """One single-draw iteration: Online EM (λ=0), FIEM (λ=1), opt-FIEM (λ=None).

        The memory table is updated in place at example i.
        """
        memory.update([i], (self._py[i] + self.pi2 @ s)[None, :])
        if lam is None:
            try:
                lam = opt_fiem_lambda(self, s, memory)
            except DegenerateVarianceError:
                lam = 1.0
        oracle = self._py[j] + self.pi2 @ s
        control = memory.running_mean - memory.rows[j]
        return sa_update(s, oracle, control, lam, gamma), lam
