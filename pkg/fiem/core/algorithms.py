"""EM, incremental EM, Online EM, FIEM, opt-FIEM and the hybrid h-FIEM.

Every stochastic method is a stochastic-approximation recursion in the
space of sufficient statistics,

    Ŝ^{k+1} = Ŝᵏ + γ_{k+1} (oracle − Ŝᵏ + λ·control),

with the oracle averaged over a mini-batch. The single step functions are
exposed for direct use; `run` and `h_fiem_run` drive full paths with
seeded index streams and record diagnostics.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from fiem.core.memory import MemoryTable
from fiem.core.model import FiniteSumModel, Parameter, SuffStat, sbar_T
from fiem.core.schedules import StepSchedule, TerminationRule
from fiem.errors import (
    ArgumentError,
    ConfigurationError,
    DegenerateVarianceError,
    DomainError,
)
from fiem.utils.rng import StreamFactory, sample_batch

logger = logging.getLogger(__name__)

ALGORITHMS = ("em", "iem", "online-em", "fiem", "opt-fiem")
MEMORY_ALGORITHMS = ("iem", "fiem", "opt-fiem")
DOMAIN_POLICIES = ("warn", "abort")

# Relative threshold below which the control-variate variance is treated as zero.
DEGENERATE_VARIANCE_TOL = 1e-14

STATE_METRICS = ("h_sq", "objective", "theta_error", "vdot_sq")
TRANSITION_METRICS = ("e2", "step_sq", "fluctuation", "lambda_star")


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not math.isfinite(gamma) or gamma < 0 or gamma > 1:
        raise ArgumentError(f"step size must lie in [0, 1], got {gamma}")
    return gamma


def _check_batch(model: FiniteSumModel, batch: Sequence[int], name: str = "batch") -> np.ndarray:
    idx = np.asarray(batch, dtype=int).reshape(-1)
    if idx.size == 0:
        raise ArgumentError(f"{name} must not be empty")
    if idx.min() < 0 or idx.max() >= model.n:
        raise ArgumentError(f"{name} indices must lie in [0, {model.n})")
    return idx


def sa_update(
    s: SuffStat,
    oracle: np.ndarray,
    control: Optional[np.ndarray],
    lam: float,
    gamma: float,
) -> SuffStat:
    """s + γ(oracle − s + λ·control); the control term is skipped when λ = 0."""
    direction = oracle - s
    if control is not None and lam != 0.0:
        direction = direction + lam * control
    return s + gamma * direction


def em_step(model: FiniteSumModel, s: SuffStat, check_domain: bool = True) -> SuffStat:
    """One EM iteration in the statistic space: s̄∘T(s)."""
    s = model.check_statistic(s, check_domain)
    return sbar_T(model, s)


def online_em_step(
    model: FiniteSumModel,
    s: SuffStat,
    batch: Sequence[int],
    gamma: float,
    check_domain: bool = True,
) -> SuffStat:
    idx = _check_batch(model, batch)
    gamma = _check_gamma(gamma)
    s = model.check_statistic(s, check_domain)
    oracle = model.sbar_T_batch(s, idx).mean(axis=0)
    return sa_update(s, oracle, None, 0.0, gamma)


def refresh_memory(
    model: FiniteSumModel, s: SuffStat, memory: MemoryTable, batch: Sequence[int]
) -> None:
    """Store s̄ᵢ∘T(s) for the distinct indices of `batch`."""
    distinct = np.unique(np.asarray(batch, dtype=int))
    memory.update(distinct, model.sbar_T_batch(s, distinct))


def init_memory(model: FiniteSumModel, s: SuffStat, check_domain: bool = True) -> MemoryTable:
    """Memory table with rows s̄ᵢ∘T(s) for every example."""
    s = model.check_statistic(s, check_domain)
    return MemoryTable.from_rows(model.sbar_T_batch(s, np.arange(model.n)))


def iem_step(
    model: FiniteSumModel,
    s: SuffStat,
    memory: MemoryTable,
    batch: Sequence[int],
    gamma: float,
    check_domain: bool = True,
) -> Tuple[SuffStat, MemoryTable]:
    memory.require_initialized()
    idx = _check_batch(model, batch)
    gamma = _check_gamma(gamma)
    s = model.check_statistic(s, check_domain)
    refresh_memory(model, s, memory, idx)
    return (1.0 - gamma) * s + gamma * memory.running_mean, memory


def _control_variate_step(
    model: FiniteSumModel,
    s: SuffStat,
    memory: MemoryTable,
    batch_i: np.ndarray,
    batch_j: np.ndarray,
    gamma: float,
    lam: Optional[float],
) -> Tuple[SuffStat, float]:
    refresh_memory(model, s, memory, batch_i)
    if lam is None:
        try:
            lam = opt_fiem_lambda(model, s, memory)
        except DegenerateVarianceError as err:
            logger.debug("%s; using lambda=1", err)
            lam = 1.0
    oracle = model.sbar_T_batch(s, batch_j).mean(axis=0)
    control = memory.running_mean - memory.batch_mean(batch_j)
    return sa_update(s, oracle, control, lam, gamma), lam


def fiem_step(
    model: FiniteSumModel,
    s: SuffStat,
    memory: MemoryTable,
    batch_i: Sequence[int],
    batch_j: Sequence[int],
    gamma: float,
    check_domain: bool = True,
) -> Tuple[SuffStat, MemoryTable]:
    memory.require_initialized()
    idx_i = _check_batch(model, batch_i, "batch_I")
    idx_j = _check_batch(model, batch_j, "batch_J")
    gamma = _check_gamma(gamma)
    s = model.check_statistic(s, check_domain)
    s_new, _ = _control_variate_step(model, s, memory, idx_i, idx_j, gamma, 1.0)
    return s_new, memory


def opt_fiem_lambda(model: FiniteSumModel, s: SuffStat, memory: MemoryTable) -> float:
    """Control-variate coefficient minimizing the conditional variance over J.

    Raises:
        DegenerateVarianceError: the stored rows have (numerically) no spread.
    """
    memory.require_initialized()
    oracles = model.sbar_T_batch(s, np.arange(model.n))
    centered = memory.running_mean - memory.rows
    numerator = float(np.mean(np.sum(oracles * centered, axis=1)))
    denominator = float(np.mean(np.sum(centered * centered, axis=1)))
    threshold = DEGENERATE_VARIANCE_TOL * (1.0 + float(memory.running_mean @ memory.running_mean))
    if denominator < threshold:
        raise DegenerateVarianceError(
            f"control-variate variance {denominator:.3e} below {threshold:.3e}"
        )
    return -numerator / denominator


def opt_fiem_step(
    model: FiniteSumModel,
    s: SuffStat,
    memory: MemoryTable,
    batch_i: Sequence[int],
    batch_j: Sequence[int],
    gamma: float,
    lam: Optional[float] = None,
    check_domain: bool = True,
) -> Tuple[SuffStat, MemoryTable, float]:
    """FIEM step with the control variate scaled by λ (optimal λ* when not forced)."""
    memory.require_initialized()
    idx_i = _check_batch(model, batch_i, "batch_I")
    idx_j = _check_batch(model, batch_j, "batch_J")
    gamma = _check_gamma(gamma)
    s = model.check_statistic(s, check_domain)
    s_new, lam_used = _control_variate_step(model, s, memory, idx_i, idx_j, gamma, lam)
    return s_new, memory, lam_used


# ---------------------------------------------------------------------------
# Epoch accounting
# ---------------------------------------------------------------------------


def examples_per_iteration(algorithm: str, n: int, batch_size: int) -> int:
    if algorithm == "em":
        return n
    if algorithm in ("iem", "online-em"):
        return batch_size
    if algorithm in ("fiem", "opt-fiem"):
        return 2 * batch_size
    raise ArgumentError(f"unknown algorithm '{algorithm}'")


def iterations_per_epoch(algorithm: str, n: int, batch_size: int) -> int:
    """Iterations needed to process n examples (rounded up)."""
    return max(1, math.ceil(n / examples_per_iteration(algorithm, n, batch_size)))


def epoch_boundaries(
    algorithm: str, n: int, batch_size: int, epochs: int, kswitch: int = 0
) -> np.ndarray:
    """Iteration index reached at the end of each epoch 0..epochs.

    For "h-fiem" the first `kswitch` epochs are Online EM epochs.
    """
    if epochs < 0 or kswitch < 0:
        raise ArgumentError("epochs and kswitch must be non-negative")
    if algorithm == "h-fiem":
        online = iterations_per_epoch("online-em", n, batch_size)
        fiem = iterations_per_epoch("fiem", n, batch_size)
        per_epoch = [online if e < kswitch else fiem for e in range(epochs)]
    else:
        per_epoch = [iterations_per_epoch(algorithm, n, batch_size)] * epochs
    return np.concatenate([[0], np.cumsum(per_epoch, dtype=int)]).astype(int)


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------


@dataclass
class RunOptions:
    """Knobs of a path run. O(n) diagnostics are off unless requested."""

    batch_size: int = 1
    s0: Optional[np.ndarray] = None
    forced_lambda: Optional[float] = None
    track_h: bool = True
    compute_e2: bool = False
    track_objective: bool = False
    track_vdot: bool = False
    theta_ref: Optional[np.ndarray] = None
    # Iteration indices at which O(n) diagnostics are evaluated; None means all.
    checkpoints: Optional[Sequence[int]] = None
    keep_statistics: bool = False
    domain_policy: str = "warn"
    online_replace: bool = False
    replica: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.domain_policy not in DOMAIN_POLICIES:
            raise ConfigurationError(
                f"domain_policy must be one of {DOMAIN_POLICIES}, got {self.domain_policy!r}"
            )


@dataclass
class RunDiagnostics:
    """Per-iteration records of one path.

    State metrics are indexed by k = 0..K_max (index K_max is the final
    state); transition metrics by k = 0..K_max−1. NaN marks a value that
    was not requested or not defined for the algorithm.
    """

    algorithm: str
    k_max: int
    terminal_index: int
    gammas: np.ndarray
    h_sq: np.ndarray
    objective: np.ndarray
    theta_error: np.ndarray
    vdot_sq: np.ndarray
    e2: np.ndarray
    step_sq: np.ndarray
    lambda_star: np.ndarray
    examples_processed: np.ndarray
    final_statistic: np.ndarray
    initial_statistic: np.ndarray
    statistics: Dict[int, np.ndarray] = field(default_factory=dict)
    domain_violations: int = 0
    switch_iteration: Optional[int] = None
    replica: int = 0

    @property
    def iterations(self) -> int:
        return int(self.step_sq.size)

    @property
    def fluctuation(self) -> np.ndarray:
        """γ⁻²‖Ŝ^{k+1} − Ŝᵏ‖²."""
        return self.step_sq / self.gammas**2

    def metric(self, name: str) -> np.ndarray:
        if name in STATE_METRICS + TRANSITION_METRICS:
            return getattr(self, name)
        raise KeyError(f"Unknown metric '{name}'")

    def records(
        self, checkpoints: Optional[Sequence[int]] = None, metrics: Optional[Sequence[str]] = None
    ) -> Iterator[dict]:
        """Long-format rows (algorithm, replica, k, metric, value), NaNs skipped."""
        names = metrics or STATE_METRICS + TRANSITION_METRICS
        for name in names:
            values = self.metric(name)
            ks = range(values.size) if checkpoints is None else checkpoints
            for k in ks:
                if 0 <= k < values.size and not np.isnan(values[k]):
                    yield {
                        "algorithm": self.algorithm,
                        "replica": self.replica,
                        "k": int(k),
                        "metric": name,
                        "value": float(values[k]),
                    }


def _parameter_vector(theta: Parameter) -> np.ndarray:
    as_vector = getattr(theta, "as_vector", None)
    if callable(as_vector):
        return as_vector()
    return np.asarray(theta, dtype=float)


class _PathEngine:
    """Mutable state of one path: statistic, memory, streams and records."""

    def __init__(
        self,
        model: FiniteSumModel,
        schedule: StepSchedule,
        options: RunOptions,
        streams: StreamFactory,
    ):
        self.model = model
        self.gammas = schedule.gammas
        self.options = options
        k_max = schedule.k_max
        self.k_max = k_max
        self.rng_i = streams.stream("indices-I")
        self.rng_j = streams.stream("indices-J")
        self.due = None if options.checkpoints is None else set(int(k) for k in options.checkpoints)
        self.memory: Optional[MemoryTable] = None

        if options.s0 is not None:
            s0 = np.array(options.s0, dtype=float)
        else:
            s0 = np.asarray(model.initial_statistic(), dtype=float)
        self.strict = options.domain_policy == "abort"
        self.s = model.check_statistic(s0, self.strict)
        if not self.strict:
            ok, reason = model.admissible(self.s)
            if not ok:
                logger.warning("starting statistic violates the domain proxy: %s", reason)
        self.s0 = self.s.copy()

        nan_state = lambda: np.full(k_max + 1, np.nan)  # noqa: E731
        nan_step = lambda: np.full(k_max, np.nan)  # noqa: E731
        self.h_sq = nan_state()
        self.objective = nan_state()
        self.theta_error = nan_state()
        self.vdot_sq = nan_state()
        self.e2 = nan_step()
        self.step_sq = nan_step()
        self.lambda_star = nan_step()
        self.examples = np.zeros(k_max + 1, dtype=np.int64)
        self.statistics: Dict[int, np.ndarray] = {}
        self.violations = 0

    def is_due(self, k: int) -> bool:
        return self.due is None or k in self.due

    def record_state(self, k: int) -> Optional[np.ndarray]:
        """Record state diagnostics at Ŝᵏ; returns s̄∘T(Ŝᵏ) when it was computed."""
        if not self.is_due(k):
            return None
        opts = self.options
        model = self.model
        s = self.s
        oracle_full = None
        if opts.track_h or opts.compute_e2 or opts.track_vdot:
            oracle_full = sbar_T(model, s)
            h = oracle_full - s
            self.h_sq[k] = float(h @ h)
            if opts.track_vdot:
                v = model.b_matrix(s) @ h
                self.vdot_sq[k] = float(v @ v)
        if opts.track_objective or opts.theta_ref is not None:
            theta = model.tmap(s)
            if opts.track_objective:
                self.objective[k] = float(model.objective(theta))
            if opts.theta_ref is not None:
                diff = _parameter_vector(theta) - np.asarray(opts.theta_ref, dtype=float)
                self.theta_error[k] = float(np.linalg.norm(diff))
        if opts.keep_statistics:
            self.statistics[k] = s.copy()
        return oracle_full

    def start_memory(self) -> None:
        self.memory = init_memory(self.model, self.s, self.strict)

    def step(self, algorithm: str, k: int) -> None:
        model = self.model
        opts = self.options
        gamma = float(self.gammas[k])
        b = opts.batch_size
        s = self.s
        oracle_full = self.record_state(k)

        if algorithm == "em":
            s_new = oracle_full if oracle_full is not None else sbar_T(model, s)
            if oracle_full is not None and opts.compute_e2:
                self.e2[k] = 0.0
        elif algorithm == "online-em":
            batch = sample_batch(self.rng_j, model.n, b, replace=opts.online_replace)
            s_new = online_em_step(model, s, batch, gamma, self.strict)
        elif algorithm == "iem":
            batch = sample_batch(self.rng_i, model.n, b, replace=True)
            s_new, _ = iem_step(model, s, self.memory, batch, gamma, self.strict)
        else:
            batch_i = sample_batch(self.rng_i, model.n, b, replace=True)
            batch_j = sample_batch(self.rng_j, model.n, b, replace=True)
            if algorithm == "fiem":
                s_new, _ = fiem_step(model, s, self.memory, batch_i, batch_j, gamma, self.strict)
            else:
                s_new, _, lam = opt_fiem_step(
                    model,
                    s,
                    self.memory,
                    batch_i,
                    batch_j,
                    gamma,
                    opts.forced_lambda,
                    self.strict,
                )
                self.lambda_star[k] = lam

        if algorithm in MEMORY_ALGORITHMS and opts.compute_e2 and oracle_full is not None:
            gap = self.memory.running_mean - oracle_full
            self.e2[k] = float(gap @ gap)

        delta = s_new - s
        self.step_sq[k] = float(delta @ delta)
        self.examples[k + 1] = self.examples[k] + examples_per_iteration(algorithm, model.n, b)
        self._check_domain(s_new, k)
        self.s = s_new

    def _check_domain(self, s_new: np.ndarray, k: int) -> None:
        ok, reason = self.model.admissible(s_new)
        if ok:
            return
        if self.options.domain_policy == "abort":
            raise DomainError(reason, iteration=k + 1)
        self.violations += 1
        logger.warning("domain proxy violated at iteration %d: %s", k + 1, reason)

    def finish(self, algorithm: str, terminal_index: int, switch: Optional[int] = None) -> RunDiagnostics:
        self.record_state(self.k_max)
        return RunDiagnostics(
            algorithm=algorithm,
            k_max=self.k_max,
            terminal_index=terminal_index,
            gammas=self.gammas.copy(),
            h_sq=self.h_sq,
            objective=self.objective,
            theta_error=self.theta_error,
            vdot_sq=self.vdot_sq,
            e2=self.e2,
            step_sq=self.step_sq,
            lambda_star=self.lambda_star,
            examples_processed=self.examples,
            final_statistic=self.s.copy(),
            initial_statistic=self.s0,
            statistics=self.statistics,
            domain_violations=self.violations,
            switch_iteration=switch,
            replica=self.options.replica,
        )


def _prepare(
    model: FiniteSumModel,
    schedule: StepSchedule,
    termination: TerminationRule,
    seed: int,
    options: RunOptions,
) -> Tuple[_PathEngine, int]:
    if termination.k_max != schedule.k_max:
        raise ConfigurationError(
            f"termination covers {termination.k_max} iterations, schedule {schedule.k_max}"
        )
    streams = StreamFactory(seed, options.replica)
    terminal_index = termination.sample(streams.stream("termination"))
    return _PathEngine(model, schedule, options, streams), terminal_index


def run(
    algorithm: str,
    model: FiniteSumModel,
    schedule: StepSchedule,
    termination: TerminationRule,
    seed: int,
    options: Optional[RunOptions] = None,
) -> RunDiagnostics:
    """Run K_max iterations of `algorithm` from options.s0 (or the model's start).

    Online EM draws its batch from the "indices-J" stream and FIEM-type
    methods draw I from "indices-I" and J from "indices-J", so runs sharing
    a seed see the same oracle indices.
    """
    if algorithm not in ALGORITHMS:
        raise ArgumentError(f"unknown algorithm '{algorithm}', expected one of {ALGORITHMS}")
    options = options or RunOptions()
    engine, terminal_index = _prepare(model, schedule, termination, seed, options)
    if algorithm in MEMORY_ALGORITHMS:
        engine.start_memory()
    k = 0
    try:
        for k in range(schedule.k_max):
            engine.step(algorithm, k)
    except DomainError as err:
        if err.iteration is not None:
            raise
        raise err.at_iteration(k) from err
    logger.debug("%s finished %d iterations (replica %d)", algorithm, schedule.k_max, options.replica)
    return engine.finish(algorithm, terminal_index)


def h_fiem_run(
    model: FiniteSumModel,
    schedule: StepSchedule,
    kswitch_epochs: int,
    termination: TerminationRule,
    seed: int,
    options: Optional[RunOptions] = None,
) -> RunDiagnostics:
    """Online EM for `kswitch_epochs` epochs, then FIEM.

    The memory table is built at the switch point from the current
    statistic. A switch beyond K_max gives a pure Online EM path.
    """
    if kswitch_epochs < 0:
        raise ArgumentError(f"kswitch_epochs must be >= 0, got {kswitch_epochs}")
    options = options or RunOptions()
    engine, terminal_index = _prepare(model, schedule, termination, seed, options)
    switch = kswitch_epochs * iterations_per_epoch("online-em", model.n, options.batch_size)
    switch = min(switch, schedule.k_max)
    k = 0
    try:
        for k in range(schedule.k_max):
            if k == switch:
                logger.debug("h-fiem switching to FIEM at iteration %d", k)
                engine.start_memory()
            engine.step("online-em" if k < switch else "fiem", k)
    except DomainError as err:
        if err.iteration is not None:
            raise
        raise err.at_iteration(k) from err
    return engine.finish("h-fiem", terminal_index, switch=switch)


def run_many(
    algorithms: Sequence[str],
    model: FiniteSumModel,
    schedule: StepSchedule,
    termination: TerminationRule,
    seed: int,
    options: Optional[RunOptions] = None,
    kswitch_epochs: int = 0,
) -> List[RunDiagnostics]:
    """Run several algorithms on shared streams (same seed and replica)."""
    results = []
    for algorithm in algorithms:
        if algorithm == "h-fiem":
            results.append(h_fiem_run(model, schedule, kswitch_epochs, termination, seed, options))
        else:
            results.append(run(algorithm, model, schedule, termination, seed, options))
    return results
