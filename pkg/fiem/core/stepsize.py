"""Step-size planners and bound calculators for FIEM.

Planners turn model constants (v_min, L, L_V̇), the sample size n and an
iteration budget K_max into a schedule, a termination distribution and the
constant of the resulting bound on E‖h(Ŝᴷ)‖². All scalar equations are
monotone on a known bracket and are solved by bisection.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import bisect

from fiem.core.model import ModelConstants
from fiem.core.schedules import StepSchedule, TerminationRule
from fiem.errors import ArgumentError, InfeasibleError
from fiem.utils.validators import validate_open_unit, validate_probability_vector

logger = logging.getLogger(__name__)

STRATEGIES = ("case1", "case2", "nonuniform", "karimi")

_RTOL = 4 * np.finfo(float).eps
_XTOL = 1e-300
_MAXITER = 2000


@dataclass(frozen=True)
class PlannerInputs:
    n: int
    k_max: int
    v_min: float
    l_rms: float
    l_gradv: float
    mu: float = 0.25
    lam: float = 0.5
    delta_v: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise ArgumentError(f"n must be >= 2, got {self.n}")
        if self.k_max < 1:
            raise ArgumentError(f"k_max must be >= 1, got {self.k_max}")
        for name in ("v_min", "l_rms", "l_gradv"):
            value = getattr(self, name)
            if not value > 0 or not math.isfinite(value):
                raise ArgumentError(f"{name} must be positive, got {value}")
        for name, value in (("mu", self.mu), ("lambda", self.lam)):
            is_valid, reason = validate_open_unit(value, name)
            if not is_valid:
                raise ArgumentError(reason)
        if self.delta_v < 0:
            raise ArgumentError(f"delta_v must be non-negative, got {self.delta_v}")

    @classmethod
    def from_constants(
        cls,
        constants: ModelConstants,
        n: int,
        k_max: int,
        mu: float = 0.25,
        lam: float = 0.5,
        delta_v: float = 1.0,
    ) -> "PlannerInputs":
        return cls(
            n=n,
            k_max=k_max,
            v_min=constants.v_min,
            l_rms=constants.lipschitz_rms,
            l_gradv=constants.lipschitz_gradv,
            mu=mu,
            lam=lam,
            delta_v=delta_v,
        )

    def with_mu(self, mu: float) -> "PlannerInputs":
        return PlannerInputs(
            self.n, self.k_max, self.v_min, self.l_rms, self.l_gradv, mu, self.lam, self.delta_v
        )


@dataclass
class StepSizePlan:
    strategy: str
    n: int
    k_max: int
    mu: Optional[float]
    lam: Optional[float]
    C: Optional[float]
    gammas: np.ndarray
    weights: np.ndarray
    bound_constant: float
    bound_value: float
    feasible: bool = True
    violated_condition: Optional[str] = None
    extras: Dict[str, float] = field(default_factory=dict)

    @property
    def gamma(self) -> float:
        """First step size (the step size of constant schedules)."""
        return float(self.gammas[0])

    def schedule(self) -> StepSchedule:
        return StepSchedule(self.gammas)

    def termination(self) -> TerminationRule:
        return TerminationRule(self.weights)

    def require_feasible(self) -> "StepSizePlan":
        if not self.feasible:
            raise InfeasibleError(self.violated_condition or "unknown condition")
        return self

    def to_dict(self) -> dict:
        constant = bool(np.all(self.gammas == self.gammas[0]))
        doc = {
            "strategy": self.strategy,
            "n": self.n,
            "k_max": self.k_max,
            "mu": self.mu,
            "lambda": self.lam,
            "C": self.C,
            "gamma": self.gamma if constant else [float(g) for g in self.gammas],
            "bound_constant": self.bound_constant,
            "bound_value": self.bound_value,
            "feasible": self.feasible,
        }
        if not np.allclose(self.weights, self.weights[0], rtol=0, atol=0):
            doc["weights"] = [float(w) for w in self.weights]
        if self.violated_condition is not None:
            doc["violated_condition"] = self.violated_condition
        doc.update(self.extras)
        return doc


@dataclass(frozen=True)
class DescentCoefficients:
    alphas: np.ndarray
    deltas: np.ndarray
    lambdas_big: np.ndarray
    betas: np.ndarray


# ---------------------------------------------------------------------------
# Scalar helpers
# ---------------------------------------------------------------------------


def f_n(C: float, lam: float, n: int) -> float:
    """n^{-2/3} + C/(λ − C n^{-1/3}) · (1/n + 1/(1−λ))."""
    if C < 0:
        raise ArgumentError(f"C must be non-negative, got {C}")
    if not C * n ** (-1.0 / 3.0) < lam:
        raise InfeasibleError(
            f"n^(-1/3) < lambda/C fails: n={n}, lambda={lam}, C={C}"
        )
    return n ** (-2.0 / 3.0) + C / (lam - C * n ** (-1.0 / 3.0)) * (1.0 / n + 1.0 / (1.0 - lam))


def f_tilde(C: float, lam: float, n: int, k_max: int) -> float:
    """(n K_max)^{-1/3} + C(1/n + 1/(1−λ))."""
    if C < 0:
        raise ArgumentError(f"C must be non-negative, got {C}")
    return (n * k_max) ** (-1.0 / 3.0) + C * (1.0 / n + 1.0 / (1.0 - lam))


def _bisect(func: Callable[[float], float], lo: float, hi: float) -> float:
    return float(bisect(func, lo, hi, xtol=_XTOL, rtol=_RTOL, maxiter=_MAXITER))


def _upper_bracket_below(
    func: Callable[[float], float], limit: float, what: str
) -> float:
    """Largest probe limit·(1 − 2^-m) where an increasing func is positive."""
    for m in range(1, 60):
        hi = limit * (1.0 - 2.0**-m)
        if hi <= 0:
            continue
        if func(hi) > 0:
            return hi
    raise InfeasibleError(f"no root of {what} below {limit}")


def _solve_case1_C(target: float, lam: float, n: int) -> float:
    """Root of √C f_n(C, λ) = target on (0, λ n^{1/3})."""
    if not target > 0:
        raise ArgumentError(f"target must be positive, got {target}")
    residual = lambda C: math.sqrt(C) * f_n(C, lam, n) - target  # noqa: E731
    hi = _upper_bracket_below(residual, lam * n ** (1.0 / 3.0), "sqrt(C) f_n(C) = target")
    return _bisect(residual, 0.0, hi)


def _case1_target(inputs: PlannerInputs, scale: float) -> float:
    return scale * inputs.v_min * inputs.l_rms / inputs.l_gradv


# ---------------------------------------------------------------------------
# n^{2/3} strategy
# ---------------------------------------------------------------------------


def solve_C_case1(inputs: PlannerInputs) -> float:
    return _solve_case1_C(_case1_target(inputs, 2 * inputs.mu), inputs.lam, inputs.n)


def gamma_case1(inputs: PlannerInputs, C: float) -> float:
    return math.sqrt(C) / (inputs.n ** (2.0 / 3.0) * inputs.l_rms)


def bound_case1(inputs: PlannerInputs, C: float, delta_v: Optional[float] = None):
    """Return (ℬ, (n^{2/3}/K_max)·ℬ·ΔV)."""
    delta_v = inputs.delta_v if delta_v is None else delta_v
    mu = inputs.mu
    constant = inputs.l_gradv * f_n(C, inputs.lam, inputs.n) / (
        2 * mu * (1 - mu) * inputs.v_min**2
    )
    return constant, inputs.n ** (2.0 / 3.0) / inputs.k_max * constant * delta_v


def _case1_feasibility(inputs: PlannerInputs, C: float):
    if inputs.n > (C / inputs.lam) ** 3:
        return True, None
    return False, f"n > (C/lambda)^3 fails: n={inputs.n}, C={C}, lambda={inputs.lam}"


def plan_case1(inputs: PlannerInputs) -> StepSizePlan:
    C = solve_C_case1(inputs)
    gamma = gamma_case1(inputs, C)
    constant, value = bound_case1(inputs, C)
    feasible, condition = _case1_feasibility(inputs, C)
    logger.info("case1 plan: C=%.6g gamma=%.6g bound=%.6g", C, gamma, value)
    return StepSizePlan(
        strategy="case1",
        n=inputs.n,
        k_max=inputs.k_max,
        mu=inputs.mu,
        lam=inputs.lam,
        C=C,
        gammas=np.full(inputs.k_max, gamma),
        weights=np.full(inputs.k_max, 1.0 / inputs.k_max),
        bound_constant=constant,
        bound_value=value,
        feasible=feasible,
        violated_condition=condition,
    )


def asymptotic_case1(inputs: PlannerInputs) -> StepSizePlan:
    """Plan with C = 0.25 (v_min L/L_V̇)^{2/3} and the large-n bound."""
    v, L, Lv = inputs.v_min, inputs.l_rms, inputs.l_gradv
    C = 0.25 * (v * L / Lv) ** (2.0 / 3.0)
    gamma = gamma_case1(inputs, C)
    constant = 8.0 / 3.0 * (L / v) * (Lv / (L * v)) ** (1.0 / 3.0)
    value = inputs.n ** (2.0 / 3.0) / inputs.k_max * constant * inputs.delta_v
    feasible, condition = _case1_feasibility(inputs, C)
    return StepSizePlan(
        strategy="case1",
        n=inputs.n,
        k_max=inputs.k_max,
        mu=None,
        lam=inputs.lam,
        C=C,
        gammas=np.full(inputs.k_max, gamma),
        weights=np.full(inputs.k_max, 1.0 / inputs.k_max),
        bound_constant=constant,
        bound_value=value,
        feasible=feasible,
        violated_condition=condition,
        extras={"asymptotic": True},
    )


def solve_C_equal_lambda(inputs: PlannerInputs) -> float:
    """Root of √C f_n(C, C) = 2μ v_min L/L_V̇ on (0, 1)."""
    target = _case1_target(inputs, 2 * inputs.mu)
    residual = lambda C: math.sqrt(C) * f_n(C, C, inputs.n) - target  # noqa: E731
    hi = _upper_bracket_below(residual, 1.0, "sqrt(C) f_n(C, C) = target")
    return _bisect(residual, 0.0, hi)


def c_plus(inputs: PlannerInputs) -> float:
    """Closed-form upper bound of the λ = C solution."""
    a = 2 * inputs.mu * inputs.v_min * inputs.l_rms / inputs.l_gradv
    return (math.sqrt(1 + 4 * a * a) - 1) / (2 * a)


# ---------------------------------------------------------------------------
# √n strategy
# ---------------------------------------------------------------------------


def solve_case2(inputs: PlannerInputs, strict: bool = True) -> StepSizePlan:
    """Solve √C f̃_n(C, λ) = 2μ v_min L/L_V̇ and build the constant plan.

    With strict=False an infeasible plan is returned flagged instead of raising.
    """
    n, k_max, lam = inputs.n, inputs.k_max, inputs.lam
    target = _case1_target(inputs, 2 * inputs.mu)
    residual = lambda C: math.sqrt(C) * f_tilde(C, lam, n, k_max) - target  # noqa: E731
    hi = 1.0
    while residual(hi) <= 0:
        hi *= 2.0
        if hi > 1e300:
            raise InfeasibleError("no root of sqrt(C) f_tilde(C) = target")
    C = _bisect(residual, 0.0, hi)
    return _case2_plan(inputs, C, lam, strict)


def _case2_plan(inputs: PlannerInputs, C: float, lam: float, strict: bool) -> StepSizePlan:
    n, k_max, mu = inputs.n, inputs.k_max, inputs.mu
    gamma = math.sqrt(C) / (n ** (1.0 / 3.0) * k_max ** (1.0 / 3.0) * inputs.l_rms)
    constant = inputs.l_gradv * f_tilde(C, lam, n, k_max) / (2 * mu * (1 - mu) * inputs.v_min**2)
    value = n ** (1.0 / 3.0) / k_max ** (2.0 / 3.0) * constant * inputs.delta_v
    feasible = n ** (1.0 / 3.0) * k_max ** (-2.0 / 3.0) <= lam / C
    condition = None
    if not feasible:
        condition = (
            f"n^(1/3) K_max^(-2/3) <= lambda/C fails: n={n}, K_max={k_max}, "
            f"lambda={lam}, C={C}"
        )
        if strict:
            raise InfeasibleError(condition)
    logger.info("case2 plan: C=%.6g gamma=%.6g bound=%.6g", C, gamma, value)
    return StepSizePlan(
        strategy="case2",
        n=n,
        k_max=k_max,
        mu=mu,
        lam=lam,
        C=C,
        gammas=np.full(k_max, gamma),
        weights=np.full(k_max, 1.0 / k_max),
        bound_constant=constant,
        bound_value=value,
        feasible=feasible,
        violated_condition=condition,
    )


def lambda_star(v_min: float, l_rms: float, l_gradv: float, tau: float) -> float:
    """Unique λ ∈ (0,1) with (v_min L)² τ³ (1−λ)² = (2 L_V̇)² λ³."""
    if tau <= 0:
        raise ArgumentError(f"tau must be positive, got {tau}")
    a = (v_min * l_rms) ** 2 * tau**3
    b = (2 * l_gradv) ** 2
    return _bisect(lambda lam: a * (1 - lam) ** 2 - b * lam**3, 0.0, 1.0)


def case2_asymptotic_bound(inputs: PlannerInputs, tau: float) -> StepSizePlan:
    """Case-2 plan at (C, λ) = (λ★τ, λ★) with the large-K_max bound."""
    v, L, Lv = inputs.v_min, inputs.l_rms, inputs.l_gradv
    lam = lambda_star(v, L, Lv, tau)
    plan = _case2_plan(inputs, lam * tau, lam, strict=False)
    constant = 4.0 / 3.0 * (2 * L**2 * Lv / v**4) ** (1.0 / 3.0) * (1 - lam) ** (-1.0 / 3.0)
    plan.bound_constant = constant
    plan.bound_value = (
        inputs.n ** (1.0 / 3.0) / inputs.k_max ** (2.0 / 3.0) * constant * inputs.delta_v
    )
    plan.extras = {"asymptotic": True, "tau": tau}
    return plan


def recommend(epsilon: float, n: int) -> str:
    """Pick the cheaper strategy for accuracy ε = n^{-e}: case2 iff e < 1/3."""
    if not 0 < epsilon < 1:
        raise ArgumentError(f"epsilon must lie in (0, 1), got {epsilon}")
    if n < 2:
        raise ArgumentError(f"n must be >= 2, got {n}")
    exponent = -math.log(epsilon) / math.log(n)
    return "case2" if exponent < 1.0 / 3.0 else "case1"


# ---------------------------------------------------------------------------
# Baseline and non-uniform termination
# ---------------------------------------------------------------------------


def karimi_plan(inputs: PlannerInputs, lipschitz: Sequence[float]) -> StepSizePlan:
    if len(lipschitz) == 0:
        raise ArgumentError("per-example Lipschitz list must not be empty")
    v, n, k_max = inputs.v_min, inputs.n, inputs.k_max
    l_max = max(inputs.l_gradv, max(float(x) for x in lipschitz))
    c = max(6.0, 1.0 + 4.0 * v)
    gamma = v * n ** (-2.0 / 3.0) / (c * l_max)
    constant = c**2 * l_max / v**2
    value = n ** (2.0 / 3.0) / k_max * inputs.delta_v * constant
    return StepSizePlan(
        strategy="karimi",
        n=n,
        k_max=k_max,
        mu=None,
        lam=None,
        C=None,
        gammas=np.full(k_max, gamma),
        weights=np.full(k_max, 1.0 / k_max),
        bound_constant=constant,
        bound_value=value,
    )


def nonuniform_F(x: float, inputs: PlannerInputs, fn: float) -> float:
    """L_V̇/(2L² n^{2/3}) · x · (2 v_min L/L_V̇ − x f_n)."""
    L, Lv = inputs.l_rms, inputs.l_gradv
    return Lv / (2 * L**2 * inputs.n ** (2.0 / 3.0)) * x * (2 * inputs.v_min * L / Lv - x * fn)


def nonuniform_F_inverse(y: float, inputs: PlannerInputs, fn: float) -> float:
    """Inverse of F on (0, x★], x★ = v_min L/(L_V̇ f_n)."""
    x_star = inputs.v_min * inputs.l_rms / (inputs.l_gradv * fn)
    y_max = nonuniform_F(x_star, inputs, fn)
    if not 0 < y <= y_max * (1 + 1e-12):
        raise ArgumentError(f"y={y} outside (0, {y_max}]")
    if y >= y_max:
        return x_star
    return _bisect(lambda x: nonuniform_F(x, inputs, fn) - y, 0.0, x_star)


def nonuniform_plan(inputs: PlannerInputs, weights: Sequence[float]) -> StepSizePlan:
    p = np.asarray(weights, dtype=float)
    if p.size != inputs.k_max:
        raise ArgumentError(f"expected {inputs.k_max} weights, got {p.size}")
    is_valid, reason = validate_probability_vector(p, strictly_positive=True)
    if not is_valid:
        raise ArgumentError(reason)
    n, v, L, Lv = inputs.n, inputs.v_min, inputs.l_rms, inputs.l_gradv
    C = _solve_case1_C(_case1_target(inputs, 1.0), inputs.lam, n)
    fn = f_n(C, inputs.lam, n)
    y_max = v**2 / (2 * Lv * fn * n ** (2.0 / 3.0))
    p_max = float(p.max())
    ratios = p / p_max
    scale = n ** (2.0 / 3.0) * L
    gamma_of: Dict[float, float] = {}
    for r in np.unique(ratios):
        if r == 1.0:
            x = math.sqrt(C)
        else:
            x = _bisect(lambda t: nonuniform_F(t, inputs, fn) - r * y_max, 0.0, math.sqrt(C))
        gamma_of[float(r)] = x / scale
    gammas = np.array([gamma_of[float(r)] for r in ratios])
    constant = 2 * Lv * fn / v**2
    value = n ** (2.0 / 3.0) * p_max * constant * inputs.delta_v
    feasible, condition = _case1_feasibility(inputs, C)
    return StepSizePlan(
        strategy="nonuniform",
        n=n,
        k_max=inputs.k_max,
        mu=None,
        lam=inputs.lam,
        C=C,
        gammas=gammas,
        weights=p,
        bound_constant=constant,
        bound_value=value,
        feasible=feasible,
        violated_condition=condition,
    )


# ---------------------------------------------------------------------------
# Descent-inequality coefficients
# ---------------------------------------------------------------------------


def default_betas(k_max: int, n: int, lam: float) -> np.ndarray:
    return np.full(k_max, (1.0 - lam) / n)


def descent_coeffs(
    schedule: Sequence[float],
    n: int,
    constants: ModelConstants,
    betas: Optional[Sequence[float]] = None,
    lam: float = 0.5,
) -> DescentCoefficients:
    """α_k, δ_k and Λ_k for k = 0..K_max−1, by a backward recursion.

    schedule[k] is γ_{k+1} and betas[k] is β_{k+1}.
    """
    g = np.asarray(getattr(schedule, "gammas", schedule), dtype=float)
    k_max = g.size
    beta = default_betas(k_max, n, lam) if betas is None else np.asarray(betas, dtype=float)
    if beta.size != k_max:
        raise ArgumentError(f"expected {k_max} betas, got {beta.size}")
    if np.any(beta <= 0):
        raise ArgumentError("betas must be positive")
    v = constants.v_min
    L2 = constants.lipschitz_rms**2
    Lv = constants.lipschitz_gradv

    tail = np.zeros(k_max)
    for k in range(k_max - 2, -1, -1):
        rho = 1.0 - 1.0 / n + beta[k + 1] + g[k + 1] ** 2 * L2
        tail[k] = g[k + 1] ** 2 + rho * tail[k + 1]
    lambdas_big = (1.0 + 1.0 / beta) * tail
    lambdas_big[-1] = 0.0
    alphas = g * v - g**2 * (1.0 + lambdas_big * L2) * Lv / 2.0
    deltas = g**2 * (1.0 + lambdas_big * beta * L2 / (1.0 + beta)) * Lv / 2.0
    return DescentCoefficients(alphas, deltas, lambdas_big, beta)


# ---------------------------------------------------------------------------
# Dispatch and scans
# ---------------------------------------------------------------------------


def make_plan(
    strategy: str,
    inputs: PlannerInputs,
    weights: Optional[Sequence[float]] = None,
    lipschitz: Optional[Sequence[float]] = None,
    epsilon: Optional[float] = None,
    strict: bool = False,
) -> StepSizePlan:
    """Build a plan by strategy name; "auto" picks case1/case2 from epsilon."""
    if strategy == "auto":
        if epsilon is None:
            raise ArgumentError("strategy 'auto' needs an accuracy epsilon")
        strategy = recommend(epsilon, inputs.n)
        logger.info("auto strategy selected %s for epsilon=%g", strategy, epsilon)
    if strategy == "case1":
        plan = plan_case1(inputs)
    elif strategy == "case2":
        plan = solve_case2(inputs, strict=False)
    elif strategy == "nonuniform":
        if weights is None:
            raise ArgumentError("strategy 'nonuniform' needs termination weights")
        plan = nonuniform_plan(inputs, weights)
    elif strategy == "karimi":
        plan = karimi_plan(inputs, lipschitz if lipschitz is not None else [inputs.l_rms])
    else:
        raise ArgumentError(f"unknown strategy '{strategy}', expected one of {STRATEGIES} or 'auto'")
    if strict:
        plan.require_feasible()
    return plan


def scan_mu(
    inputs: PlannerInputs,
    mus: Sequence[float],
    strategy: str = "case1",
    lipschitz: Optional[Sequence[float]] = None,
) -> List[dict]:
    """Rows (mu, C, gamma, bound_constant, bound_value) over a grid of μ."""
    rows = []
    for mu in mus:
        plan = make_plan(strategy, inputs.with_mu(float(mu)), lipschitz=lipschitz)
        rows.append(
            {
                "mu": float(mu),
                "C": plan.C,
                "gamma": plan.gamma,
                "bound_constant": plan.bound_constant,
                "bound_value": plan.bound_value,
                "feasible": plan.feasible,
            }
        )
    return rows
