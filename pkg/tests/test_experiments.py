import re

import numpy as np
import pandas as pd
import pytest

from fiem.core.algorithms import RunOptions, run
from fiem.core.schedules import StepSchedule, TerminationRule
from fiem.core.stepsize import PlannerInputs, make_plan
from fiem.errors import ConfigurationError, ParameterError
from fiem.experiments import (
    ExperimentConfig,
    ExperimentRunner,
    GmmExperimentConfig,
    aggregate,
    build_toy_model,
    check_mean_field_pointwise,
    default_checkpoints,
    estimate_E,
    fluctuation_window,
    identity_suite,
    lambda_tail_mean,
    load_gmm_dataset,
    mean_field_suite,
    ratio_curves,
    resolve_schedule,
    run_replicated,
    table_report,
    descent_suite,
    weight_fluctuation,
)
from fiem.models.toy_gaussian import ToyGaussianModel, generate_toy

SMALL_MODEL = {"n": 12, "y_dim": 4, "p_dim": 3, "q_dim": 5}


class OutsideDomainToy(ToyGaussianModel):
    def admissible(self, s):
        return False, "forced violation"


class SingularToy(ToyGaussianModel):
    def sbar_T_batch(self, s, indices):
        raise ParameterError("covariance is not positive definite")


def _toy_config(**overrides):
    values = dict(
        model=SMALL_MODEL,
        algorithms=["online-em", "fiem", "opt-fiem"],
        plan={"gamma": 0.05},
        k_max=40,
        replicas=2,
        seed=3,
        checkpoints=[0, 10, 39],
    )
    values.update(overrides)
    return ExperimentConfig(**values)


def _gmm_config(**overrides):
    values = dict(
        synthetic={"seed": 11, "n": 300, "p": 2, "g": 3},
        g=3,
        gamma=0.01,
        batch_size=30,
        kswitch=1,
        epochs=4,
        report_epochs=[0, 2, 4],
    )
    values.update(overrides)
    return GmmExperimentConfig(**values)


def test_configs_reject_unknown_keys_and_values():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"replica_count": 3})
    with pytest.raises(ConfigurationError):
        ExperimentConfig(algorithms=["sgd"])
    with pytest.raises(ConfigurationError):
        ExperimentConfig(replicas=0)
    with pytest.raises(ConfigurationError):
        GmmExperimentConfig()
    with pytest.raises(ConfigurationError):
        GmmExperimentConfig(data="a.csv", synthetic={"n": 10, "p": 2})
    with pytest.raises(ConfigurationError):
        _gmm_config(domain_policy="ignore")
    assert ExperimentConfig.from_dict({"replicas": 5}).replicas == 5


def test_build_toy_model_from_settings_and_path(tmp_path, small_toy):
    model = build_toy_model(SMALL_MODEL, 7)
    np.testing.assert_array_equal(model.spec.observations, small_toy.spec.observations)
    path = tmp_path / "toy.json"
    small_toy.spec.to_json(str(path))
    loaded = build_toy_model({"path": str(path)}, 0)
    np.testing.assert_allclose(loaded.spec.A, small_toy.spec.A, rtol=1e-15)
    with pytest.raises(ConfigurationError):
        build_toy_model({"n": 10, "dimension": 3}, 0)


def test_resolve_schedule_variants(small_toy):
    schedule, termination, doc = resolve_schedule({"gamma": 0.1}, small_toy, 30)
    assert schedule.k_max == 30 and termination.k_max == 30
    assert doc == {"gamma": 0.1}
    weights = np.linspace(2.0, 1.0, 30)
    _, termination, _ = resolve_schedule(
        {"gamma": [0.1] * 30, "weights": list(weights / weights.sum())}, small_toy, 30
    )
    np.testing.assert_allclose(termination.weights, weights / weights.sum())
    with pytest.raises(ConfigurationError):
        resolve_schedule({"gamma": [0.1] * 29}, small_toy, 30)
    with pytest.raises(ConfigurationError):
        resolve_schedule({"mu": 0.25}, small_toy, 30)
    _, _, doc = resolve_schedule({"strategy": "case1"}, small_toy, 240)
    assert doc["strategy"] == "case1" and doc["feasible"]


def test_run_replicated_shapes_and_outputs(tmp_path):
    result = run_replicated(_toy_config())
    assert result.complete
    table = result.aggregates
    # 3 algorithms, 4 metrics (h_sq, fluctuation, lambda_star, theta_error), 3 checkpoints.
    assert len(table) == 3 * 4 * 3
    assert set(table["metric"]) == {"h_sq", "fluctuation", "lambda_star", "theta_error"}
    lam_rows = table[(table["metric"] == "lambda_star") & (table["algorithm"] == "fiem")]
    assert (lam_rows["count"] == 0).all()
    assert set(result.estimates) == {"online-em", "fiem", "opt-fiem"}
    assert {"e0", "e1", "se1"} <= set(result.estimates["fiem"])

    paths = result.write(str(tmp_path / "out"))
    assert set(paths) == {"diagnostics", "aggregates", "ratios"}
    frame = pd.read_csv(paths["diagnostics"])
    assert list(frame.columns) == ["algorithm", "replica", "k", "metric", "value"]
    assert set(frame["replica"]) == {0, 1}


def test_single_replica_has_zero_spread():
    result = run_replicated(_toy_config(replicas=1))
    assert (result.aggregates.dropna(subset=["std"])["std"] == 0.0).all()
    assert result.estimates["fiem"]["se1"] == 0.0


def test_run_replicated_is_reproducible():
    first = run_replicated(_toy_config())
    second = run_replicated(_toy_config())
    pd.testing.assert_frame_equal(first.aggregates, second.aggregates)


def test_estimate_E_uses_terminal_index(small_toy):
    schedule = StepSchedule.constant(1.0, 15)
    termination = TerminationRule.uniform(15)
    diags = [
        run("em", small_toy, schedule, termination, 5, RunOptions(replica=r, track_vdot=True))
        for r in range(4)
    ]
    report = estimate_E(diags, v_max=small_toy.constants().v_max)
    expected = np.array([d.h_sq[d.terminal_index] for d in diags])
    assert report.e1 == pytest.approx(expected.mean(), rel=1e-14)
    assert report.se1 == pytest.approx(expected.std(ddof=1) / 2.0, rel=1e-12)
    assert report.e0 <= report.e1 * (1 + 1e-12)
    resampled = estimate_E(diags, termination=termination, seed=5)
    assert resampled.e1 == report.e1
    with pytest.raises(ConfigurationError):
        estimate_E(diags, include_e2=True)
    with pytest.raises(ConfigurationError):
        estimate_E([])


def test_aggregate_statistics(small_toy):
    schedule = StepSchedule.constant(1.0, 5)
    termination = TerminationRule.uniform(5)
    diags = [run("em", small_toy, schedule, termination, 0, RunOptions(replica=r)) for r in range(3)]
    table = aggregate({"em": diags}, [0, 4, 9], ["h_sq", "e2"])
    h_rows = table[table["metric"] == "h_sq"]
    assert h_rows["k"].tolist() == [0, 4]
    np.testing.assert_allclose(h_rows["mean"], diags[0].h_sq[[0, 4]])
    np.testing.assert_allclose(h_rows["std"], 0.0, atol=1e-12 * h_rows["mean"].max())
    assert (h_rows["count"] == 3).all()
    assert (h_rows["q25"] == h_rows["q75"]).all()
    assert (table[table["metric"] == "e2"]["count"] == 0).all()
    assert aggregate({"em": []}, [0], ["h_sq"]).empty


def test_failed_replicas_are_recorded(small_toy):
    model = OutsideDomainToy(small_toy.spec)
    runner = ExperimentRunner(model)
    schedule = StepSchedule.constant(0.1, 10)
    result = runner.run_replicas(
        ["online-em"], schedule, TerminationRule.uniform(10), 0, 2, RunOptions(domain_policy="abort")
    )
    assert not result.complete
    assert len(result.failures) == 2
    assert result.replicas_completed() == 0
    assert {f["replica"] for f in result.failures} == {0, 1}


def test_warn_policy_counts_every_violation(small_toy):
    model = OutsideDomainToy(small_toy.spec)
    schedule = StepSchedule.constant(0.1, 10)
    result = ExperimentRunner(model).run_replicas(
        ["online-em", "fiem"], schedule, TerminationRule.uniform(10), 0, 2, RunOptions()
    )
    assert result.complete
    for diags in result.diagnostics.values():
        assert [d.domain_violations for d in diags] == [10, 10]


def test_parameter_errors_become_failed_replicas(small_toy):
    model = SingularToy(small_toy.spec)
    schedule = StepSchedule.constant(0.1, 10)
    result = ExperimentRunner(model).run_replicas(
        ["online-em"], schedule, TerminationRule.uniform(10), 0, 2, RunOptions()
    )
    assert not result.complete
    assert [f["iteration"] for f in result.failures] == [None, None]
    assert all("not positive definite" in f["message"] for f in result.failures)


def test_descent_holds_on_small_model(tiny_toy):
    inputs = PlannerInputs.from_constants(tiny_toy.constants(), tiny_toy.n, 50)
    schedule = make_plan("case1", inputs).schedule()
    report = ExperimentRunner(tiny_toy).verify_descent_inequality(schedule, 40, seed=2)
    assert report.passed
    assert report.replicas == 40
    assert report.delta_v > 0


def test_ratio_curves():
    table = pd.DataFrame(
        [
            ("opt-fiem", 0, "theta_error", 1.0, 2.0),
            ("fiem", 0, "theta_error", 2.0, 4.0),
            ("fiem", 5, "theta_error", 3.0, 3.0),
            ("fiem", 0, "h_sq", 9.0, 9.0),
        ],
        columns=["algorithm", "k", "metric", "mean", "std"],
    )
    ratios = ratio_curves(table)
    assert ratios.to_dict("records") == [
        {"algorithm": "fiem", "k": 0, "mean_ratio": 0.5, "std_ratio": 0.5}
    ]
    with pytest.raises(ConfigurationError):
        ratio_curves(table, ref_algorithm="iem")


def test_windows_and_checkpoints():
    assert fluctuation_window(100, 2000) == (150, 500)
    assert fluctuation_window(100, 300) == (150, 299)
    points = default_checkpoints(100, 2000)
    assert points[0] == 0 and points[-1] == 1999
    assert 1900 in points and points == sorted(points)


def test_lambda_tail_mean_is_finite(small_toy):
    schedule = StepSchedule.constant(0.05, 60)
    diags = [run("opt-fiem", small_toy, schedule, TerminationRule.uniform(60), 0)]
    assert np.isfinite(lambda_tail_mean(diags))


@pytest.mark.slow
def test_optimal_lambda_approaches_one_late_in_the_run():
    model = ToyGaussianModel(generate_toy(0, 100))
    k_max = 20 * model.n
    inputs = PlannerInputs.from_constants(model.constants(), model.n, k_max)
    schedule = make_plan("case1", inputs).schedule()
    result = ExperimentRunner(model).run_replicas(
        ["opt-fiem"], schedule, TerminationRule.uniform(k_max), 0, 5, RunOptions(track_h=False)
    )
    tail = lambda_tail_mean(result.diagnostics["opt-fiem"])
    assert 0.9 <= tail <= 1.1


def test_mean_field_pointwise(small_toy):
    passed, worst = check_mean_field_pointwise(small_toy, n_states=50, seed=1)
    assert passed
    assert worst >= -1e-10


def test_identity_suite_passes():
    results = identity_suite(seed=0)
    failed = [r.name for r in results if not r.passed]
    assert not failed
    assert len(results) == 8


def test_gmm_table_report(tmp_path):
    config = _gmm_config()
    report = table_report(config)
    assert not report.failures
    assert len(report.table) == 4 * 3
    assert len(report.accounting) == 4 * 5
    assert len(report.trajectories) == 4 * 5 * 3
    assert report.accuracy.empty

    em = report.table[report.table["algorithm"] == "em"]["mean"].to_numpy()
    assert np.all(np.diff(em) >= -1e-9)
    accounting = report.accounting
    np.testing.assert_array_equal(accounting["examples_processed"], accounting["epoch"] * 300)
    assert all(re.fullmatch(r"-?\d\.\d{4}e[+-]\d+ \(\d\.\de[+-]\d+\)", c) for c in report.table["cell"])
    assert set(report.final_params) == {"em", "iem", "online-em", "h-fiem"}

    assert weight_fluctuation(report.trajectories, "online-em", 1) >= 0.0
    with pytest.raises(ConfigurationError):
        weight_fluctuation(report.trajectories, "online-em", 10)

    paths = report.write(str(tmp_path / "gmm"))
    assert set(paths) == {"table", "trajectories", "accounting"}


def test_gmm_accuracy_report():
    config = _gmm_config(algorithms=["em"], reference_loglik=-1e-300)
    report = table_report(config)
    assert report.accuracy["epoch"].isna().all()
    assert len(report.accuracy) == 3


@pytest.mark.slow
def test_monte_carlo_suites_pass_at_small_scale():
    results = descent_suite(replicas=500, bound_replicas=5, seed=0)
    results += mean_field_suite(replicas=3, seed=0)
    failed = [(r.name, r.detail) for r in results if not r.passed]
    assert not failed


def test_h_fiem_weights_fluctuate_less_than_online_em_after_the_switch():
    config = _gmm_config(
        algorithms=["online-em", "h-fiem"],
        gamma=0.1,
        kswitch=4,
        epochs=14,
        replicas=3,
        report_epochs=[0, 14],
    )
    report = table_report(config)
    assert not report.failures
    hybrid = weight_fluctuation(report.trajectories, "h-fiem", config.kswitch)
    online = weight_fluctuation(report.trajectories, "online-em", config.kswitch)
    assert hybrid < online


def test_gmm_dataset_paths_are_resolved(tmp_path, monkeypatch):
    observations = np.arange(12.0).reshape(6, 2)
    pd.DataFrame(observations).to_csv(tmp_path / "points.csv", header=False, index=False)
    monkeypatch.chdir(tmp_path)
    dataset, truth = load_gmm_dataset(GmmExperimentConfig(data="points.csv", g=2))
    assert truth is None
    np.testing.assert_array_equal(dataset.observations, observations)
    with pytest.raises(ConfigurationError, match="File not found"):
        load_gmm_dataset(GmmExperimentConfig(data="missing.csv", g=2))
