"""Gaussian mixture with a shared covariance matrix.

Statistic layout for g components in dimension p: s = (s⁽¹⁾, s⁽²⁾) with
s⁽¹⁾ ∈ ℝ^g the component masses and s⁽²⁾ made of g blocks of length p,
block ℓ holding the posterior-weighted sum of observations. The constant
p·log(2π)/2 is left out of every log-density.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import logsumexp

from fiem.core.algorithms import DOMAIN_POLICIES, em_step, fiem_step, iem_step, online_em_step
from fiem.core.memory import MemoryTable
from fiem.core.model import FiniteSumModel, sbar
from fiem.errors import (
    ArgumentError,
    ConfigurationError,
    DomainError,
    EmptyComponentError,
    ParameterError,
)
from fiem.utils.rng import StreamFactory

logger = logging.getLogger(__name__)

MASS_FLOOR = 1e-12
NEGATIVE_MASS_TOL = 1e-10
TOTAL_MASS_TOL = 1e-8
COVARIANCE_EIG_TOL = 1e-10
WEIGHT_SUM_TOL = 1e-10

_CHUNK = 4096


@dataclass
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        g, p = self.means.shape
        if self.weights.shape != (g,) or self.covariance.shape != (p, p):
            raise ConfigurationError(
                f"inconsistent shapes: weights {self.weights.shape}, means {self.means.shape}, "
                f"covariance {self.covariance.shape}"
            )

    @property
    def g(self) -> int:
        return self.means.shape[0]

    @property
    def p(self) -> int:
        return self.means.shape[1]

    def validate(self) -> Tuple[bool, str]:
        """
        Check membership in the parameter set.

        Returns:
            Tuple of (is_valid, reason)
        """
        if np.any(self.weights < 0):
            return False, f"negative weight {self.weights.min():.3e}"
        if abs(self.weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            return False, f"weights sum to {self.weights.sum()!r}"
        if not np.allclose(self.covariance, self.covariance.T, rtol=0, atol=1e-12):
            return False, "covariance is not symmetric"
        min_eig = float(linalg.eigvalsh(self.covariance)[0])
        if min_eig <= 0:
            return False, f"covariance smallest eigenvalue {min_eig:.3e} is not positive"
        return True, "Valid parameters"

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.weights, self.means.ravel(), self.covariance.ravel()])

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariance": self.covariance.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GmmParams":
        unknown = set(doc) - {"weights", "means", "covariance"}
        if unknown:
            raise ConfigurationError(f"unknown parameter keys: {sorted(unknown)}")
        return cls(np.array(doc["weights"]), np.array(doc["means"]), np.array(doc["covariance"]))


class GmmDataset:
    """Observations with their cached second moment Σ★ = n⁻¹ Σ yᵢyᵢᵀ."""

    def __init__(self, observations: np.ndarray):
        obs = np.atleast_2d(np.asarray(observations, dtype=float))
        if not np.all(np.isfinite(obs)):
            raise ConfigurationError("observations contain non-finite values")
        self.observations = obs
        self.n, self.p = obs.shape
        moment = obs.T @ obs / self.n
        self.second_moment = (moment + moment.T) / 2

    @classmethod
    def from_csv(cls, path: str) -> "GmmDataset":
        frame = pd.read_csv(path, header=None, dtype=float)
        return cls(frame.to_numpy())

    def to_csv(self, path: str) -> None:
        pd.DataFrame(self.observations).to_csv(path, header=False, index=False)


# ---------------------------------------------------------------------------
# Densities and posteriors
# ---------------------------------------------------------------------------


def _cholesky(covariance: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(covariance, lower=True)
    except linalg.LinAlgError as err:
        raise ParameterError(f"covariance is not positive definite: {err}") from err


def log_joint(theta: GmmParams, observations: np.ndarray) -> np.ndarray:
    """log αₗ + log N_p(μₗ, Σ)[yᵢ] (without the 2π term), shape (n, g)."""
    chol = _cholesky(theta.covariance)
    half_logdet = float(np.sum(np.log(np.diag(chol))))
    with np.errstate(divide="ignore"):
        log_weights = np.log(theta.weights)
    white_means = linalg.solve_triangular(chol, theta.means.T, lower=True).T
    out = np.empty((observations.shape[0], theta.g))
    for start in range(0, observations.shape[0], _CHUNK):
        block = observations[start : start + _CHUNK]
        white = linalg.solve_triangular(chol, block.T, lower=True).T
        diff = white[:, None, :] - white_means[None, :, :]
        out[start : start + _CHUNK] = log_weights - half_logdet - 0.5 * np.sum(diff * diff, axis=2)
    return out


def posteriors(theta: GmmParams, observations: np.ndarray) -> np.ndarray:
    """Responsibilities ρᵢ for every row, computed in the log domain."""
    joint = log_joint(theta, observations)
    return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))


def gmm_loglik(theta: GmmParams, dataset: GmmDataset) -> float:
    """Normalized log-likelihood −F(θ)."""
    return float(np.mean(logsumexp(log_joint(theta, dataset.observations), axis=1)))


def gmm_tmap(s: np.ndarray, second_moment: np.ndarray, g: int) -> GmmParams:
    """M-step. Raises EmptyComponentError or DomainError outside the domain."""
    p = second_moment.shape[0]
    mass = s[:g]
    blocks = s[g:].reshape(g, p)
    if mass.min() < MASS_FLOOR:
        ell = int(np.argmin(mass))
        raise EmptyComponentError(f"component {ell} has mass {mass[ell]:.3e} below {MASS_FLOOR}")
    means = blocks / mass[:, None]
    covariance = second_moment - (means.T * mass) @ means
    covariance = (covariance + covariance.T) / 2
    eigenvalues = linalg.eigvalsh(covariance)
    min_eig = float(eigenvalues[0])
    if min_eig <= -COVARIANCE_EIG_TOL:
        raise DomainError(f"covariance smallest eigenvalue {min_eig:.3e} is negative")
    floor = COVARIANCE_EIG_TOL * max(1.0, float(eigenvalues[-1]))
    if min_eig < floor:
        # Rounding-level eigenvalues are lifted so Cholesky stays defined.
        logger.warning("covariance smallest eigenvalue %.3e lifted to %.3e", min_eig, floor)
        covariance = covariance + (floor - min_eig) * np.eye(p)
    return GmmParams(mass / mass.sum(), means, covariance)


def domain_proxies(s: np.ndarray, g: int) -> Tuple[bool, str]:
    """
    Check the testable domain conditions on a statistic.

    Returns:
        Tuple of (is_valid, reason)
    """
    mass = s[:g]
    if mass.min() < -NEGATIVE_MASS_TOL:
        return False, f"component mass {mass.min():.3e} is negative"
    total = float(mass.sum())
    if abs(total - 1.0) > TOTAL_MASS_TOL:
        return False, f"total mass {total!r} differs from 1"
    return True, "Valid statistic"


class GmmModel(FiniteSumModel):
    def __init__(self, dataset: GmmDataset, g: int, theta0: Optional[GmmParams] = None):
        if g < 1:
            raise ArgumentError(f"g must be >= 1, got {g}")
        self.dataset = dataset
        self.g = g
        self.p = dataset.p
        self.n = dataset.n
        self.q = g + g * dataset.p
        self.theta0 = theta0

    def split(self, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return s[: self.g], s[self.g :].reshape(self.g, self.p)

    def posterior(self, theta: GmmParams, i: int) -> np.ndarray:
        return posteriors(theta, self.dataset.observations[i : i + 1])[0]

    def sbar_batch(self, theta: GmmParams, indices: Sequence[int]) -> np.ndarray:
        y = self.dataset.observations[np.asarray(indices, dtype=int)]
        rho = posteriors(theta, y)
        blocks = (rho[:, :, None] * y[:, None, :]).reshape(y.shape[0], self.g * self.p)
        return np.hstack([rho, blocks])

    def sbar_i(self, theta: GmmParams, i: int) -> np.ndarray:
        return self.sbar_batch(theta, [i])[0]

    def dense_sbar_i(self, theta: GmmParams, i: int) -> np.ndarray:
        """Reference s̄ᵢ(θ) = A_{yᵢ}ρᵢ with A_y = [I_g ; I_g ⊗ y] materialized."""
        y = self.dataset.observations[i]
        design = np.vstack([np.eye(self.g), np.kron(np.eye(self.g), y[:, None])])
        return design @ self.posterior(theta, i)

    def tmap(self, s: np.ndarray) -> GmmParams:
        return gmm_tmap(s, self.dataset.second_moment, self.g)

    def admissible(self, s: np.ndarray) -> Tuple[bool, str]:
        return domain_proxies(s, self.g)

    def objective(self, theta: GmmParams) -> float:
        return -gmm_loglik(theta, self.dataset)

    def initial_statistic(self) -> np.ndarray:
        if self.theta0 is None:
            raise ConfigurationError("GmmModel built without theta0; pass s0 explicitly")
        return sbar(self, self.theta0)

    def loglik_of_statistic(self, s: np.ndarray) -> float:
        return gmm_loglik(self.tmap(s), self.dataset)


# ---------------------------------------------------------------------------
# Mini-batch recursions with the domain policy applied
# ---------------------------------------------------------------------------


def _strict(policy: str) -> bool:
    if policy not in DOMAIN_POLICIES:
        raise ArgumentError(f"unknown domain policy '{policy}'")
    return policy == "abort"


def enforce_domain(model: GmmModel, s: np.ndarray, policy: str = "warn") -> bool:
    """Apply the warn | abort policy to a freshly updated statistic."""
    strict = _strict(policy)
    ok, reason = model.admissible(s)
    if ok:
        return True
    if strict:
        raise DomainError(reason)
    logger.warning("domain proxy violated: %s", reason)
    return False


def gmm_em_epoch(model: GmmModel, s: np.ndarray) -> np.ndarray:
    return em_step(model, s)


def gmm_iem_step(
    model: GmmModel,
    s: np.ndarray,
    memory: MemoryTable,
    batch: Sequence[int],
    gamma: float,
    policy: str = "warn",
) -> Tuple[np.ndarray, MemoryTable]:
    s_new, memory = iem_step(model, s, memory, batch, gamma, _strict(policy))
    enforce_domain(model, s_new, policy)
    return s_new, memory


def gmm_onlineem_step(
    model: GmmModel, s: np.ndarray, batch: Sequence[int], gamma: float, policy: str = "warn"
) -> np.ndarray:
    s_new = online_em_step(model, s, batch, gamma, _strict(policy))
    enforce_domain(model, s_new, policy)
    return s_new


def gmm_fiem_step(
    model: GmmModel,
    s: np.ndarray,
    memory: MemoryTable,
    batch_i: Sequence[int],
    batch_j: Sequence[int],
    gamma: float,
    policy: str = "warn",
) -> Tuple[np.ndarray, MemoryTable]:
    s_new, memory = fiem_step(model, s, memory, batch_i, batch_j, gamma, _strict(policy))
    enforce_domain(model, s_new, policy)
    return s_new, memory


# ---------------------------------------------------------------------------
# Data: synthetic draws, preprocessing, initialization
# ---------------------------------------------------------------------------


def generate_gmm_synthetic(
    seed: int, n: int, g: int, p: int, separation: float = 3.0
) -> Tuple[GmmDataset, GmmParams]:
    if g < 1 or p < 1:
        raise ArgumentError(f"g and p must be >= 1, got g={g}, p={p}")
    if n < g:
        raise ArgumentError(f"need at least g={g} observations, got n={n}")
    if separation < 0:
        raise ArgumentError(f"separation must be >= 0, got {separation}")
    rng = StreamFactory(seed).stream("data")
    weights = 0.5 / g + 0.5 * rng.dirichlet(np.ones(g))
    directions = rng.standard_normal((g, p))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    rotation, _ = np.linalg.qr(rng.standard_normal((p, p)))
    covariance = (rotation * rng.uniform(0.5, 1.5, size=p)) @ rotation.T
    covariance = (covariance + covariance.T) / 2
    labels = rng.choice(g, size=n, p=weights)
    chol = np.linalg.cholesky(covariance)
    observations = means[labels] + rng.standard_normal((n, p)) @ chol.T
    logger.info("Generated synthetic GMM data: n=%d, g=%d, p=%d", n, g, p)
    return GmmDataset(observations), GmmParams(weights, means, covariance)


def preprocess(raw: np.ndarray, p_target: int) -> Tuple[GmmDataset, Dict[str, float]]:
    """Drop constant features, standardize, and project on the top principal axes."""
    data = np.atleast_2d(np.asarray(raw, dtype=float))
    keep = np.ptp(data, axis=0) > 0
    dropped = int(data.shape[1] - keep.sum())
    data = data[:, keep]
    d = data.shape[1]
    if not 1 <= p_target <= d:
        raise ArgumentError(f"p_target={p_target} must lie in [1, {d}] (non-constant features)")
    data = (data - data.mean(axis=0)) / data.std(axis=0)
    covariance = data.T @ data / data.shape[0]
    eigvals, eigvecs = linalg.eigh((covariance + covariance.T) / 2)
    order = np.argsort(eigvals)[::-1][:p_target]
    axes = eigvecs[:, order]
    # Fix the sign of each axis so its largest entry is positive.
    signs = np.sign(axes[np.argmax(np.abs(axes), axis=0), np.arange(p_target)])
    axes = axes * np.where(signs == 0, 1.0, signs)
    info = {
        "dropped_features": dropped,
        "kept_features": d,
        "explained_variance": float(eigvals[order].sum()),
        "total_variance": float(eigvals.sum()),
    }
    logger.info(
        "Preprocessed data: dropped %d constant features, kept %d, projected on %d axes",
        dropped,
        d,
        p_target,
    )
    return GmmDataset(data @ axes), info


def initial_parameters(
    dataset: GmmDataset, g: int, rng: np.random.Generator, perturbation: float = 0.1
) -> GmmParams:
    """k-means++-style seeding from data points plus the pooled covariance."""
    y = dataset.observations
    n = dataset.n
    if n < g:
        raise ArgumentError(f"need at least g={g} observations, got n={n}")
    chosen = [int(rng.integers(n))]
    dist2 = np.sum((y - y[chosen[0]]) ** 2, axis=1)
    for _ in range(1, g):
        total = dist2.sum()
        probs = dist2 / total if total > 0 else np.full(n, 1.0 / n)
        idx = int(rng.choice(n, p=probs))
        chosen.append(idx)
        dist2 = np.minimum(dist2, np.sum((y - y[idx]) ** 2, axis=1))
    scale = y.std(axis=0)
    centers = y[chosen] + perturbation * scale * rng.standard_normal((g, dataset.p))

    labels = np.argmin(
        np.sum((y[:, None, :] - centers[None, :, :]) ** 2, axis=2), axis=1
    )
    resid = y - centers[labels]
    covariance = resid.T @ resid / n
    covariance = (covariance + covariance.T) / 2
    floor = 1e-6 * max(float(np.trace(covariance)) / dataset.p, 1e-12)
    if linalg.eigvalsh(covariance)[0] < floor:
        covariance = covariance + floor * np.eye(dataset.p)
    return GmmParams(np.full(g, 1.0 / g), centers, covariance)


def epochs_to_accuracy(
    loglik_by_epoch: Sequence[float], reference: float, bands: Sequence[float]
) -> Dict[float, Optional[int]]:
    """First epoch whose log-likelihood is within each relative band of `reference`."""
    values = np.asarray(loglik_by_epoch, dtype=float)
    gaps = np.abs(values - reference) / abs(reference)
    out: Dict[float, Optional[int]] = {}
    for band in bands:
        hits = np.nonzero(gaps <= band)[0]
        out[float(band)] = int(hits[0]) if hits.size else None
    return out


def mixture_weights(statistics: Dict[int, np.ndarray], g: int) -> List[Tuple[int, np.ndarray]]:
    """(iteration, weights) pairs from stored statistics."""
    return [(k, s[:g] / s[:g].sum()) for k, s in sorted(statistics.items())]
