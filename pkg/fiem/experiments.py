"""Seeded, replicated Monte Carlo harness.

`ExperimentRunner` owns a model and fans replicas out with joblib. Replica
r of seed s draws from `StreamFactory(s, r)`, and every algorithm of a
replica shares those streams. Failed replicas are recorded, not raised.
"""

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from fiem.config.presets import (
    ACCURACY_BANDS,
    DEFAULT_GMM_SETTINGS,
    DEFAULT_TOY_SETTINGS,
    FLUCTUATION_WINDOW_FACTORS,
    TOY_CHECKPOINT_FACTORS,
)
from fiem.core.algorithms import (
    ALGORITHMS,
    RunDiagnostics,
    RunOptions,
    epoch_boundaries,
    h_fiem_run,
    run,
    run_many,
)
from fiem.core.model import FiniteSumModel, gradV_identity_check, mean_field, sbar, sbar_T, vdot
from fiem.core.schedules import StepSchedule, TerminationRule
from fiem.core.stepsize import (
    PlannerInputs,
    StepSizePlan,
    c_plus,
    f_n,
    make_plan,
    nonuniform_plan,
    plan_case1,
    solve_C_case1,
    solve_C_equal_lambda,
    descent_coeffs,
)
from fiem.errors import ConfigurationError, DomainError, ParameterError
from fiem.models.gmm import (
    GmmDataset,
    GmmModel,
    GmmParams,
    epochs_to_accuracy,
    generate_gmm_synthetic,
    initial_parameters,
    mixture_weights,
    preprocess,
)
from fiem.models.toy_gaussian import ToyGaussianModel, ToyModelSpec, generate_toy, theta_star
from fiem.parsers import load_dataset
from fiem.utils.path_utils import ensure_output_dir
from fiem.utils.rng import StreamFactory

logger = logging.getLogger(__name__)

RUN_ALGORITHMS = ALGORITHMS + ("h-fiem",)
SE_SIGMAS = 3.0


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


def _from_dict(cls, doc: Dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**doc)


def _check_algorithms(algorithms: Sequence[str]) -> None:
    if not algorithms:
        raise ConfigurationError("at least one algorithm is required")
    for algorithm in algorithms:
        if algorithm not in RUN_ALGORITHMS:
            raise ConfigurationError(
                f"unknown algorithm '{algorithm}', expected one of {RUN_ALGORITHMS}"
            )


@dataclass
class ExperimentConfig:
    """Toy-model Monte Carlo experiment."""

    model: Dict[str, Any] = field(default_factory=dict)
    algorithms: List[str] = field(default_factory=lambda: ["online-em", "fiem", "opt-fiem"])
    plan: Dict[str, Any] = field(
        default_factory=lambda: {"strategy": "case1", "mu": 0.25, "lambda": 0.5}
    )
    k_max: Optional[int] = None
    replicas: int = 100
    seed: int = 0
    batch_size: int = 1
    kswitch: int = 0
    compute_e2: bool = False
    compute_lambda_star: bool = True
    track_theta_error: bool = True
    track_loglik: bool = False
    full_diagnostics: bool = True
    checkpoints: Optional[List[int]] = None
    output: Optional[str] = None
    threads: int = 1

    def __post_init__(self):
        _check_algorithms(self.algorithms)
        if self.replicas < 1:
            raise ConfigurationError(f"replicas must be >= 1, got {self.replicas}")
        if self.k_max is not None and self.k_max < 1:
            raise ConfigurationError(f"k_max must be >= 1, got {self.k_max}")

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "ExperimentConfig":
        return _from_dict(cls, doc)


@dataclass
class GmmExperimentConfig:
    """GMM epoch-table experiment."""

    data: Optional[str] = None
    synthetic: Optional[Dict[str, Any]] = None
    preprocess: Optional[int] = None
    g: int = DEFAULT_GMM_SETTINGS["g"]
    algorithms: List[str] = field(default_factory=lambda: ["em", "iem", "online-em", "h-fiem"])
    gamma: float = DEFAULT_GMM_SETTINGS["gamma"]
    batch_size: int = DEFAULT_GMM_SETTINGS["batch_size"]
    kswitch: int = DEFAULT_GMM_SETTINGS["kswitch"]
    epochs: int = DEFAULT_GMM_SETTINGS["epochs"]
    replicas: int = 1
    seed: int = 0
    report_epochs: List[int] = field(
        default_factory=lambda: list(DEFAULT_GMM_SETTINGS["report_epochs"])
    )
    domain_policy: str = DEFAULT_GMM_SETTINGS["domain_policy"]
    reference_loglik: Optional[float] = None
    output: Optional[str] = None
    threads: int = 1

    def __post_init__(self):
        _check_algorithms(self.algorithms)
        if (self.data is None) == (self.synthetic is None):
            raise ConfigurationError("exactly one of 'data' and 'synthetic' is required")
        if self.replicas < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("replicas, epochs and batch_size must be >= 1")
        if self.domain_policy not in ("warn", "abort"):
            raise ConfigurationError(f"unknown domain policy '{self.domain_policy}'")

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "GmmExperimentConfig":
        return _from_dict(cls, doc)


# ---------------------------------------------------------------------------
# Replicas
# ---------------------------------------------------------------------------


@dataclass
class ReplicaSet:
    algorithms: List[str]
    diagnostics: Dict[str, List[RunDiagnostics]]
    failures: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failures

    def replicas_completed(self) -> int:
        first = self.algorithms[0]
        return len(self.diagnostics.get(first, []))


def _replica_job(
    model: FiniteSumModel,
    algorithms: Sequence[str],
    schedule: StepSchedule,
    termination: TerminationRule,
    seed: int,
    options: RunOptions,
    replica: int,
    kswitch: int,
) -> Dict[str, Any]:
    opts = replace(options, replica=replica)
    try:
        diags = run_many(algorithms, model, schedule, termination, seed, opts, kswitch)
        return {"replica": replica, "status": "success", "diagnostics": diags}
    except (DomainError, ParameterError) as err:
        return {
            "replica": replica,
            "status": "failed",
            "message": str(err),
            "iteration": getattr(err, "iteration", None),
        }


class ExperimentRunner:
    """Runs replicated paths of one model and turns them into reports."""

    def __init__(self, model: FiniteSumModel, n_jobs: int = 1):
        self.model = model
        self.n_jobs = n_jobs

    def run_replicas(
        self,
        algorithms: Sequence[str],
        schedule: StepSchedule,
        termination: TerminationRule,
        seed: int,
        replicas: int,
        options: Optional[RunOptions] = None,
        kswitch: int = 0,
    ) -> ReplicaSet:
        _check_algorithms(algorithms)
        options = options or RunOptions()
        logger.info(
            "Running %d replicas of %s (K_max=%d)", replicas, ", ".join(algorithms), schedule.k_max
        )
        results = Parallel(n_jobs=self.n_jobs)(
            delayed(_replica_job)(
                self.model, algorithms, schedule, termination, seed, options, r, kswitch
            )
            for r in range(replicas)
        )
        diagnostics: Dict[str, List[RunDiagnostics]] = {a: [] for a in algorithms}
        failures = []
        for result in results:
            if result["status"] != "success":
                logger.warning("Replica %d aborted: %s", result["replica"], result["message"])
                failures.append({k: v for k, v in result.items() if k != "status"})
                continue
            for algorithm, diag in zip(algorithms, result["diagnostics"]):
                diagnostics[algorithm].append(diag)
        return ReplicaSet(list(algorithms), diagnostics, failures)

    def verify_descent_inequality(
        self,
        schedule: StepSchedule,
        replicas: int,
        seed: int,
        betas: Optional[Sequence[float]] = None,
        lam: float = 0.5,
        s0: Optional[np.ndarray] = None,
    ) -> "DescentReport":
        """Monte Carlo check of Σα_k E‖h‖² + Σδ_k E‖S̃ − s̄∘T‖² ≤ ΔV along FIEM."""
        model = self.model
        constants = model.constants()
        start = model.initial_statistic() if s0 is None else s0
        coeffs = descent_coeffs(schedule.gammas, model.n, constants, betas, lam)
        options = RunOptions(s0=start, compute_e2=True, track_objective=True)
        result = self.run_replicas(
            ["fiem"], schedule, TerminationRule.uniform(schedule.k_max), seed, replicas, options
        )
        diags = result.diagnostics["fiem"]
        if not diags:
            raise DomainError("every replica aborted")
        lhs_r = np.array(
            [coeffs.alphas @ d.h_sq[:-1] + coeffs.deltas @ d.e2 for d in diags]
        )
        dv_r = np.array([d.objective[0] - d.objective[-1] for d in diags])
        return DescentReport.from_samples(lhs_r, dv_r)

    def verify_plan_bound(
        self, plan: StepSizePlan, replicas: int, seed: int, algorithm: str = "fiem"
    ) -> "BoundReport":
        """Check Ê₁ ≤ bound_value·ΔV̂ + 3 SE for a plan computed with ΔV = 1."""
        options = RunOptions(track_objective=True)
        result = self.run_replicas(
            [algorithm], plan.schedule(), plan.termination(), seed, replicas, options
        )
        diags = result.diagnostics[algorithm]
        estimate = estimate_E(diags)
        delta_v = float(np.mean([d.objective[0] - d.objective[-1] for d in diags]))
        rhs = plan.bound_value * delta_v
        return BoundReport.build(plan.strategy, estimate.e1, rhs, estimate.se1)


# ---------------------------------------------------------------------------
# Aggregation and estimates
# ---------------------------------------------------------------------------


def _summary(values: np.ndarray) -> Tuple[float, float, float, float, int]:
    finite = values[~np.isnan(values)]
    if finite.size == 0:
        return math.nan, math.nan, math.nan, math.nan, 0
    q25, q75 = np.quantile(finite, [0.25, 0.75])
    return float(finite.mean()), float(finite.std()), float(q25), float(q75), int(finite.size)


def aggregate(
    diagnostics: Dict[str, List[RunDiagnostics]],
    checkpoints: Sequence[int],
    metrics: Sequence[str],
) -> pd.DataFrame:
    """Mean, std, quartiles per (algorithm, metric, checkpoint), in fixed order."""
    rows = []
    for algorithm, diags in diagnostics.items():
        for metric in metrics:
            if not diags:
                continue
            stacked = np.vstack([d.metric(metric) for d in diags])
            for k in checkpoints:
                if k >= stacked.shape[1]:
                    continue
                mean, std, q25, q75, count = _summary(stacked[:, k])
                rows.append(
                    {
                        "algorithm": algorithm,
                        "k": int(k),
                        "metric": metric,
                        "mean": mean,
                        "std": std,
                        "q25": q25,
                        "q75": q75,
                        "count": count,
                    }
                )
    return pd.DataFrame(
        rows, columns=["algorithm", "k", "metric", "mean", "std", "q25", "q75", "count"]
    )


def _mean_and_se(values: np.ndarray) -> Tuple[float, float]:
    if values.size > 1:
        return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))
    return float(values.mean()), 0.0


@dataclass
class EstimateReport:
    e1: float
    se1: float
    e0: Optional[float] = None
    se0: Optional[float] = None
    e2: Optional[float] = None
    se2: Optional[float] = None
    replicas: int = 0

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def estimate_E(
    diagnostics: Sequence[RunDiagnostics],
    termination: Optional[TerminationRule] = None,
    seed: Optional[int] = None,
    v_max: Optional[float] = None,
    include_e2: bool = False,
) -> EstimateReport:
    """Monte Carlo E₀/E₁/E₂ at the random termination index of each replica.

    With `termination` (and `seed`) the index is redrawn from that rule on
    each replica's termination stream; otherwise the index drawn at run
    time is used.
    """
    if not diagnostics:
        raise ConfigurationError("no diagnostics to estimate from")
    indices = []
    for d in diagnostics:
        if termination is None:
            indices.append(d.terminal_index)
        else:
            if seed is None:
                raise ConfigurationError("resampling the termination index needs the seed")
            if termination.k_max != d.k_max:
                raise ConfigurationError("termination rule does not match the run length")
            indices.append(termination.sample(StreamFactory(seed, d.replica).stream("termination")))

    h = np.array([d.h_sq[k] for d, k in zip(diagnostics, indices)])
    if np.any(np.isnan(h)):
        raise ConfigurationError("‖h‖² missing at the termination index; record all iterations")
    e1, se1 = _mean_and_se(h)
    report = EstimateReport(e1=e1, se1=se1, replicas=len(diagnostics))

    if v_max is not None:
        v = np.array([d.vdot_sq[k] for d, k in zip(diagnostics, indices)])
        if np.any(np.isnan(v)):
            raise ConfigurationError("‖V̇‖² missing; run with track_vdot")
        report.e0, report.se0 = _mean_and_se(v / v_max**2)
    if include_e2:
        e2 = np.array([d.e2[k] for d, k in zip(diagnostics, indices)])
        if np.any(np.isnan(e2)):
            raise ConfigurationError("E2 requested but compute_e2 diagnostics were not recorded")
        report.e2, report.se2 = _mean_and_se(e2)
    return report


@dataclass
class DescentReport:
    lhs: float
    delta_v: float
    se: float
    margin_sigmas: float
    passed: bool
    replicas: int

    @classmethod
    def from_samples(cls, lhs_r: np.ndarray, dv_r: np.ndarray) -> "DescentReport":
        lhs = float(lhs_r.mean())
        delta_v = float(dv_r.mean())
        _, se = _mean_and_se(lhs_r - dv_r)
        slack = delta_v - lhs
        scale = 1e-12 * (1.0 + abs(delta_v) + abs(lhs))
        margin = slack / max(se, scale)
        passed = slack >= -(SE_SIGMAS * se + scale)
        return cls(lhs, delta_v, se, float(margin), bool(passed), int(lhs_r.size))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BoundReport:
    strategy: str
    lhs: float
    rhs: float
    se: float
    margin_sigmas: float
    passed: bool

    @classmethod
    def build(cls, strategy: str, lhs: float, rhs: float, se: float) -> "BoundReport":
        scale = 1e-12 * (1.0 + abs(rhs))
        margin = (rhs - lhs) / max(se, scale)
        passed = lhs <= rhs + SE_SIGMAS * se + scale
        return cls(strategy, lhs, rhs, se, float(margin), bool(passed))

    def to_row(self) -> dict:
        return {
            "strategy": self.strategy,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin_sigmas": self.margin_sigmas,
        }


def ratio_curves(
    table: pd.DataFrame, ref_algorithm: str = "opt-fiem", metric: str = "theta_error"
) -> pd.DataFrame:
    """E[ref]/E[alg] and std[ref]/std[alg] per checkpoint for every other algorithm."""
    sub = table[table["metric"] == metric]
    ref = sub[sub["algorithm"] == ref_algorithm].set_index("k")
    if ref.empty:
        raise ConfigurationError(f"no '{metric}' rows for reference '{ref_algorithm}'")
    rows = []
    for algorithm in sub["algorithm"].unique():
        if algorithm == ref_algorithm:
            continue
        other = sub[sub["algorithm"] == algorithm].set_index("k")
        for k in ref.index.intersection(other.index):
            rows.append(
                {
                    "algorithm": algorithm,
                    "k": int(k),
                    "mean_ratio": ref.at[k, "mean"] / other.at[k, "mean"],
                    "std_ratio": ref.at[k, "std"] / other.at[k, "std"],
                }
            )
    return pd.DataFrame(rows, columns=["algorithm", "k", "mean_ratio", "std_ratio"])


def lambda_tail_mean(diagnostics: Sequence[RunDiagnostics], fraction: float = 0.1) -> float:
    """Mean λ* over the last `fraction` of iterations, across replicas."""
    stacked = np.vstack([d.lambda_star for d in diagnostics])
    start = int(math.floor((1.0 - fraction) * stacked.shape[1]))
    return float(np.nanmean(stacked[:, start:]))


def fluctuation_window(n: int, k_max: int) -> Tuple[int, int]:
    """Iteration window of the fluctuation diagnostic, scaled with n."""
    lo, hi = (int(f * n) for f in FLUCTUATION_WINDOW_FACTORS)
    return min(lo, k_max - 1), min(hi, k_max - 1)


def default_checkpoints(n: int, k_max: int) -> List[int]:
    points = {0, k_max - 1}
    points.update(int(f * n) for f in TOY_CHECKPOINT_FACTORS if int(f * n) < k_max)
    return sorted(points)


# ---------------------------------------------------------------------------
# Toy experiments
# ---------------------------------------------------------------------------


def build_toy_model(settings: Dict[str, Any], seed: int) -> ToyGaussianModel:
    """Toy model from a JSON spec path or from generator settings plus n."""
    settings = dict(settings)
    if "path" in settings:
        return ToyGaussianModel(ToyModelSpec.from_json(settings["path"]))
    n = int(settings.pop("n", 100))
    merged = DEFAULT_TOY_SETTINGS.copy()
    unknown = set(settings) - set(merged)
    if unknown:
        raise ConfigurationError(f"unknown toy model keys: {sorted(unknown)}")
    merged.update(settings)
    return ToyGaussianModel(generate_toy(seed, n, **merged))


def resolve_schedule(
    plan: Dict[str, Any], model: FiniteSumModel, k_max: int
) -> Tuple[StepSchedule, TerminationRule, Dict[str, Any]]:
    """Schedule and termination rule from a plan reference."""
    plan = dict(plan)
    if "gamma" in plan:
        gamma = plan["gamma"]
        gammas = np.full(k_max, float(gamma)) if np.isscalar(gamma) else np.asarray(gamma, float)
        if gammas.size != k_max:
            raise ConfigurationError(f"plan has {gammas.size} step sizes, K_max is {k_max}")
        weights = plan.get("weights")
        termination = (
            TerminationRule.uniform(k_max) if weights is None else TerminationRule.from_weights(weights)
        )
        return StepSchedule(gammas), termination, plan
    if "strategy" not in plan:
        raise ConfigurationError("plan needs either 'gamma' or 'strategy'")
    constants = model.constants()
    inputs = PlannerInputs.from_constants(
        constants, model.n, k_max, plan.get("mu", 0.25), plan.get("lambda", 0.5)
    )
    built = make_plan(
        plan["strategy"],
        inputs,
        weights=plan.get("weights"),
        lipschitz=constants.lipschitz_i,
        epsilon=plan.get("epsilon"),
        strict=True,
    )
    return built.schedule(), built.termination(), built.to_dict()


@dataclass
class ResultTable:
    aggregates: pd.DataFrame
    replica_set: ReplicaSet
    checkpoints: List[int]
    plan: Dict[str, Any]
    constants: Dict[str, float]
    estimates: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return self.replica_set.complete

    def diagnostics_frame(self) -> pd.DataFrame:
        rows = []
        for diags in self.replica_set.diagnostics.values():
            for d in diags:
                rows.extend(d.records(self.checkpoints))
        return pd.DataFrame(rows, columns=["algorithm", "replica", "k", "metric", "value"])

    def write(self, out_dir: str) -> Dict[str, str]:
        out = ensure_output_dir(out_dir)
        paths = {
            "diagnostics": str(out / "diagnostics.csv"),
            "aggregates": str(out / "aggregates.csv"),
        }
        self.diagnostics_frame().to_csv(paths["diagnostics"], index=False)
        self.aggregates.to_csv(paths["aggregates"], index=False)
        if "theta_error" in set(self.aggregates["metric"]) and "opt-fiem" in self.replica_set.algorithms:
            paths["ratios"] = str(out / "ratios.csv")
            ratio_curves(self.aggregates).to_csv(paths["ratios"], index=False)
        return paths


def _toy_metrics(config: ExperimentConfig) -> List[str]:
    metrics = ["h_sq", "fluctuation"]
    if config.compute_e2:
        metrics.append("e2")
    if config.compute_lambda_star and "opt-fiem" in config.algorithms:
        metrics.append("lambda_star")
    if config.track_theta_error:
        metrics.append("theta_error")
    if config.track_loglik:
        metrics.append("objective")
    return metrics


def run_replicated(
    config: ExperimentConfig, model: Optional[ToyGaussianModel] = None, n_jobs: Optional[int] = None
) -> ResultTable:
    model = model or build_toy_model(config.model, config.seed)
    k_max = config.k_max or 20 * model.n
    schedule, termination, plan_doc = resolve_schedule(config.plan, model, k_max)
    checkpoints = config.checkpoints or default_checkpoints(model.n, k_max)
    options = RunOptions(
        batch_size=config.batch_size,
        compute_e2=config.compute_e2,
        track_objective=config.track_loglik,
        track_vdot=True,
        theta_ref=theta_star(model.spec) if config.track_theta_error else None,
        checkpoints=None if config.full_diagnostics else checkpoints,
    )
    runner = ExperimentRunner(model, n_jobs if n_jobs is not None else config.threads)
    replica_set = runner.run_replicas(
        config.algorithms, schedule, termination, config.seed, config.replicas, options, config.kswitch
    )
    table = aggregate(replica_set.diagnostics, checkpoints, _toy_metrics(config))
    constants = model.constants()
    result = ResultTable(table, replica_set, checkpoints, plan_doc, constants.to_dict())
    if config.full_diagnostics:
        for algorithm, diags in replica_set.diagnostics.items():
            if diags:
                result.estimates[algorithm] = estimate_E(
                    diags, v_max=constants.v_max, include_e2=config.compute_e2
                ).to_dict()
    if not replica_set.complete:
        logger.warning("%d replicas aborted; aggregates cover completed replicas", len(replica_set.failures))
    return result


def check_mean_field_pointwise(
    model: FiniteSumModel, n_states: int = 1000, seed: int = 0, scale: float = 1.0
) -> Tuple[bool, float]:
    """⟨h(s), V̇(s)⟩ ≤ −v_min‖h(s)‖² on random states around the start statistic.

    Returns (passed, worst slack) where slack = −v_min‖h‖² − ⟨h, V̇⟩.
    """
    v_min = model.constants().v_min
    rng = StreamFactory(seed).stream("init")
    center = model.initial_statistic()
    spread = scale * (1.0 + np.abs(center))
    worst = math.inf
    for _ in range(n_states):
        s = center + spread * rng.standard_normal(model.q)
        h = mean_field(model, s)
        inner = float(h @ (-model.b_matrix(s) @ h))
        slack = -v_min * float(h @ h) - inner
        worst = min(worst, slack / (1.0 + float(h @ h)))
    return worst >= -1e-10, worst


# ---------------------------------------------------------------------------
# GMM epoch tables
# ---------------------------------------------------------------------------


def load_gmm_dataset(config: GmmExperimentConfig) -> Tuple[GmmDataset, Optional[GmmParams]]:
    truth = None
    if config.synthetic is not None:
        syn = dict(config.synthetic)
        dataset, truth = generate_gmm_synthetic(
            int(syn.get("seed", config.seed)),
            int(syn["n"]),
            int(syn.get("g", config.g)),
            int(syn["p"]),
            float(syn.get("separation", 3.0)),
        )
    else:
        dataset = load_dataset(config.data)
    if config.preprocess is not None:
        dataset, _ = preprocess(dataset.observations, config.preprocess)
    return dataset, truth


def _gmm_gammas(algorithm: str, gamma: float, k_max: int) -> StepSchedule:
    if algorithm in ("em", "iem"):
        return StepSchedule.constant(1.0, k_max)
    return StepSchedule.constant(gamma, k_max)


def gmm_replica(
    dataset: GmmDataset, config: GmmExperimentConfig, algorithm: str, replica: int
) -> Dict[str, Any]:
    """One epoch path; returns per-epoch log-likelihoods, weights and accounting."""
    model = GmmModel(dataset, config.g)
    streams = StreamFactory(config.seed, replica)
    theta0 = initial_parameters(dataset, config.g, streams.stream("init"))
    s0 = sbar(model, theta0)
    boundaries = epoch_boundaries(
        algorithm, dataset.n, config.batch_size, config.epochs, config.kswitch
    )
    k_max = int(boundaries[-1])
    schedule = _gmm_gammas(algorithm, config.gamma, k_max)
    options = RunOptions(
        batch_size=config.batch_size,
        s0=s0,
        track_h=False,
        track_objective=True,
        checkpoints=boundaries.tolist(),
        keep_statistics=True,
        domain_policy=config.domain_policy,
        replica=replica,
    )
    termination = TerminationRule.uniform(k_max)
    try:
        if algorithm == "h-fiem":
            diag = h_fiem_run(model, schedule, config.kswitch, termination, config.seed, options)
        else:
            diag = run(algorithm, model, schedule, termination, config.seed, options)
        final = model.tmap(diag.final_statistic)
    except (DomainError, ParameterError) as err:
        return {"status": "failed", "algorithm": algorithm, "replica": replica, "message": str(err)}
    loglik = -diag.objective[boundaries]
    weights = np.vstack([w for _, w in mixture_weights(diag.statistics, config.g)])
    return {
        "status": "success",
        "algorithm": algorithm,
        "replica": replica,
        "loglik": loglik,
        "weights": weights,
        "iterations": boundaries,
        "examples": diag.examples_processed[boundaries],
        "violations": diag.domain_violations,
        "final": final,
    }


@dataclass
class GmmReport:
    table: pd.DataFrame
    trajectories: pd.DataFrame
    accounting: pd.DataFrame
    accuracy: pd.DataFrame
    final_params: Dict[str, GmmParams]
    failures: List[Dict[str, Any]]

    def write(self, out_dir: str) -> Dict[str, str]:
        out = ensure_output_dir(out_dir)
        paths = {
            "table": str(out / "epoch_table.csv"),
            "trajectories": str(out / "weights.csv"),
            "accounting": str(out / "accounting.csv"),
        }
        self.table.to_csv(paths["table"], index=False)
        self.trajectories.to_csv(paths["trajectories"], index=False)
        self.accounting.to_csv(paths["accounting"], index=False)
        if not self.accuracy.empty:
            paths["accuracy"] = str(out / "accuracy.csv")
            self.accuracy.to_csv(paths["accuracy"], index=False)
        return paths


def table_report(
    config: GmmExperimentConfig, dataset: Optional[GmmDataset] = None, n_jobs: Optional[int] = None
) -> GmmReport:
    """Normalized log-likelihood per algorithm at the requested epochs, mean (std) over replicas."""
    if dataset is None:
        dataset, _ = load_gmm_dataset(config)
    jobs = [(a, r) for a in config.algorithms for r in range(config.replicas)]
    results = Parallel(n_jobs=n_jobs if n_jobs is not None else config.threads)(
        delayed(gmm_replica)(dataset, config, a, r) for a, r in jobs
    )
    epochs = [e for e in config.report_epochs if 0 <= e <= config.epochs]
    table_rows, traj_rows, acc_rows, accuracy_rows = [], [], [], []
    final_params: Dict[str, GmmParams] = {}
    failures = []
    for algorithm in config.algorithms:
        done = [r for r in results if r["algorithm"] == algorithm and r["status"] == "success"]
        failures.extend(r for r in results if r["algorithm"] == algorithm and r["status"] != "success")
        if not done:
            continue
        loglik = np.vstack([r["loglik"] for r in done])
        for e in epochs:
            mean, std = float(loglik[:, e].mean()), float(loglik[:, e].std())
            table_rows.append(
                {
                    "algorithm": algorithm,
                    "epoch": e,
                    "mean": mean,
                    "std": std,
                    "cell": f"{mean:.4e} ({std:.1e})",
                }
            )
        for r in done:
            for e in range(config.epochs + 1):
                for ell, w in enumerate(r["weights"][e]):
                    traj_rows.append(
                        {
                            "algorithm": algorithm,
                            "replica": r["replica"],
                            "epoch": e,
                            "component": ell,
                            "weight": float(w),
                        }
                    )
        first = done[0]
        for e in range(config.epochs + 1):
            acc_rows.append(
                {
                    "algorithm": algorithm,
                    "epoch": e,
                    "iteration": int(first["iterations"][e]),
                    "examples_processed": int(first["examples"][e]),
                }
            )
        if config.reference_loglik is not None:
            hits = epochs_to_accuracy(loglik.mean(axis=0), config.reference_loglik, ACCURACY_BANDS)
            for band, epoch in hits.items():
                accuracy_rows.append({"algorithm": algorithm, "band": band, "epoch": epoch})
        final_params[algorithm] = first["final"]
        violations = sum(r["violations"] for r in done)
        if violations:
            logger.warning("%s: %d domain proxy violations", algorithm, violations)
    for failure in failures:
        logger.warning("%s replica %d aborted: %s", failure["algorithm"], failure["replica"], failure["message"])
    return GmmReport(
        table=pd.DataFrame(table_rows, columns=["algorithm", "epoch", "mean", "std", "cell"]),
        trajectories=pd.DataFrame(
            traj_rows, columns=["algorithm", "replica", "epoch", "component", "weight"]
        ),
        accounting=pd.DataFrame(
            acc_rows, columns=["algorithm", "epoch", "iteration", "examples_processed"]
        ),
        accuracy=pd.DataFrame(accuracy_rows, columns=["algorithm", "band", "epoch"]),
        final_params=final_params,
        failures=failures,
    )


def weight_fluctuation(trajectories: pd.DataFrame, algorithm: str, start_epoch: int) -> float:
    """Mean over replicas and components of the per-epoch std of the weights after start_epoch."""
    sub = trajectories[(trajectories["algorithm"] == algorithm) & (trajectories["epoch"] > start_epoch)]
    if sub.empty:
        raise ConfigurationError(f"no trajectory rows for '{algorithm}' after epoch {start_epoch}")
    return float(sub.groupby(["replica", "component"])["weight"].std(ddof=0).mean())


# ---------------------------------------------------------------------------
# Verification suites
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    margin: Optional[float] = None
    detail: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _identity_model(seed: int, n: int) -> ToyGaussianModel:
    return ToyGaussianModel(generate_toy(seed, n, y_dim=4, p_dim=3, q_dim=5))


def brute_force_tail(gammas: np.ndarray, n: int, betas: np.ndarray, l_sq: float) -> np.ndarray:
    """Σ_{j>k} γ_j² Π_{k<l<j} ρ_l evaluated term by term."""
    k_max = gammas.size
    rho = 1.0 - 1.0 / n + betas + gammas**2 * l_sq
    tail = np.zeros(k_max)
    for k in range(k_max - 1):
        total = 0.0
        for j in range(k + 1, k_max):
            total += gammas[j] ** 2 * float(np.prod(rho[k + 1 : j]))
        tail[k] = total
    return tail


def identity_suite(seed: int = 0) -> List[CheckResult]:
    """Exact algebraic and algorithmic identities; no Monte Carlo error."""
    results = []
    model = _identity_model(seed, 20)
    schedule = StepSchedule.constant(0.05, 200)
    termination = TerminationRule.uniform(schedule.k_max)
    for lam, reference in ((0.0, "online-em"), (1.0, "fiem")):
        forced = run("opt-fiem", model, schedule, termination, seed, RunOptions(forced_lambda=lam))
        other = run(reference, model, schedule, termination, seed, RunOptions())
        same = np.array_equal(forced.final_statistic, other.final_statistic) and np.array_equal(
            forced.step_sq, other.step_sq
        )
        results.append(CheckResult(f"opt-fiem(lambda={lam:g}) == {reference}", bool(same)))

    single = _identity_model(seed, 1)
    diag = run("fiem", single, StepSchedule.constant(0.1, 30), TerminationRule.uniform(30), seed)
    s = single.initial_statistic()
    for _ in range(30):
        s = s + 0.1 * (sbar_T(single, s) - s)
    gap = float(np.max(np.abs(diag.final_statistic - s) / (1.0 + np.abs(s))))
    results.append(CheckResult("fiem(n=1) == deterministic recursion", gap <= 1e-14, gap))

    constants = model.constants()
    inputs = PlannerInputs.from_constants(constants, 1000, 20000, mu=0.5, lam=0.5)
    C = solve_C_case1(inputs)
    target = 2 * inputs.mu * inputs.v_min * inputs.l_rms / inputs.l_gradv
    rel = abs(math.sqrt(C) * f_n(C, inputs.lam, inputs.n) - target) / target
    results.append(CheckResult("case1 C solves its equation", rel <= 1e-12, rel))

    C_eq = solve_C_equal_lambda(inputs)
    results.append(CheckResult("lambda=C root below C+", C_eq <= c_plus(inputs), c_plus(inputs) - C_eq))

    uniform = nonuniform_plan(inputs, np.full(inputs.k_max, 1.0 / inputs.k_max))
    reference_plan = plan_case1(inputs)
    gap = float(np.max(np.abs(uniform.gammas - reference_plan.gammas)) / reference_plan.gamma)
    results.append(CheckResult("nonuniform(uniform) == case1(mu=1/2)", gap <= 1e-12, gap))

    gammas = np.linspace(0.02, 0.01, 50)
    coeffs = descent_coeffs(gammas, model.n, constants)
    tail = brute_force_tail(gammas, model.n, coeffs.betas, constants.lipschitz_rms**2)
    expected = (1.0 + 1.0 / coeffs.betas) * tail
    expected[-1] = 0.0
    gap = float(np.max(np.abs(coeffs.lambdas_big - expected) / (1.0 + np.abs(expected))))
    results.append(CheckResult("descent recursion == brute force", gap <= 1e-12, gap))

    rng = StreamFactory(seed).stream("init")
    center = model.fixed_point()
    worst = 0.0
    for _ in range(20):
        state = center + rng.standard_normal(model.q)
        residual = gradV_identity_check(model, state)
        worst = max(worst, residual / (1.0 + float(np.linalg.norm(vdot(model, state)))))
    results.append(CheckResult("grad(F o T) == -B h", worst <= 1e-6, worst))
    return results


def descent_suite(replicas: int, bound_replicas: int, seed: int = 0, n_jobs: int = 1) -> List[CheckResult]:
    results = []
    model = ToyGaussianModel(generate_toy(seed, 10, y_dim=3, p_dim=2, q_dim=3))
    inputs = PlannerInputs.from_constants(model.constants(), model.n, 50)
    schedule = make_plan("case1", inputs).schedule()
    report = ExperimentRunner(model, n_jobs).verify_descent_inequality(schedule, replicas, seed)
    results.append(
        CheckResult(
            "descent inequality",
            report.passed,
            report.margin_sigmas,
            f"lhs={report.lhs:.6e} delta_v={report.delta_v:.6e} se={report.se:.2e}",
        )
    )

    model = ToyGaussianModel(generate_toy(seed, 100))
    inputs = PlannerInputs.from_constants(model.constants(), model.n, 20 * model.n)
    plan = make_plan("case1", inputs)
    bound = ExperimentRunner(model, n_jobs).verify_plan_bound(plan, bound_replicas, seed)
    results.append(
        CheckResult(
            "case1 bound",
            bound.passed,
            bound.margin_sigmas,
            f"lhs={bound.lhs:.6e} rhs={bound.rhs:.6e}",
        )
    )
    return results


def mean_field_suite(replicas: int, seed: int = 0, n_jobs: int = 1) -> List[CheckResult]:
    model = ToyGaussianModel(generate_toy(seed, 100))
    passed, worst = check_mean_field_pointwise(model, 1000, seed)
    results = [CheckResult("<h, dV> <= -v_min |h|^2 pointwise", passed, worst)]
    constants = model.constants()
    k_max = 20 * model.n
    schedule, termination, _ = resolve_schedule({"strategy": "case1"}, model, k_max)
    options = RunOptions(track_vdot=True)
    runner = ExperimentRunner(model, n_jobs)
    replica_set = runner.run_replicas(
        ["online-em", "fiem", "opt-fiem"], schedule, termination, seed, replicas, options
    )
    for algorithm, diags in replica_set.diagnostics.items():
        est = estimate_E(diags, v_max=constants.v_max)
        slack = est.e1 + SE_SIGMAS * est.se1 - est.e0
        results.append(
            CheckResult(
                f"E0 <= E1 ({algorithm})",
                slack >= 0,
                slack / max(est.se1, 1e-300),
                f"E0={est.e0:.6e} E1={est.e1:.6e}",
            )
        )
    return results
