import math

import numpy as np
import pytest
from scipy import stats

from fiem.core.algorithms import RunOptions, em_step, init_memory, run
from fiem.core.model import sbar
from fiem.core.schedules import StepSchedule, TerminationRule
from fiem.errors import ArgumentError, ConfigurationError, DomainError, EmptyComponentError
from fiem.models.gmm import (
    GmmDataset,
    GmmModel,
    GmmParams,
    domain_proxies,
    enforce_domain,
    epochs_to_accuracy,
    generate_gmm_synthetic,
    gmm_fiem_step,
    gmm_iem_step,
    gmm_loglik,
    gmm_onlineem_step,
    gmm_tmap,
    initial_parameters,
    log_joint,
    mixture_weights,
    posteriors,
    preprocess,
)
from fiem.utils.rng import StreamFactory


def test_log_joint_matches_scipy(gmm_model):
    theta = gmm_model.theta0
    y = gmm_model.dataset.observations[:20]
    joint = log_joint(theta, y)
    shift = 0.5 * theta.p * math.log(2 * math.pi)
    for ell in range(theta.g):
        expected = np.log(theta.weights[ell]) + stats.multivariate_normal(
            theta.means[ell], theta.covariance
        ).logpdf(y)
        np.testing.assert_allclose(joint[:, ell], expected + shift, rtol=1e-10, atol=1e-10)


def test_posteriors_sum_to_one(gmm_model):
    rho = posteriors(gmm_model.theta0, gmm_model.dataset.observations)
    np.testing.assert_allclose(rho.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(rho >= 0)


def test_structured_statistic_matches_dense_design():
    dataset, _ = generate_gmm_synthetic(2, 20, 3, 4)
    theta0 = initial_parameters(dataset, 3, StreamFactory(2).stream("init"))
    model = GmmModel(dataset, 3, theta0)
    for i in range(dataset.n):
        np.testing.assert_allclose(model.sbar_i(theta0, i), model.dense_sbar_i(theta0, i), atol=1e-12)


def test_tmap_of_expected_statistic_is_valid(gmm_data):
    dataset, truth = gmm_data
    model = GmmModel(dataset, 3, truth)
    theta = model.tmap(sbar(model, truth))
    assert theta.validate()[0]
    np.testing.assert_allclose(theta.weights.sum(), 1.0)
    assert theta.means.shape == (3, 2)


def test_tmap_rejects_empty_and_negative_covariance():
    second_moment = np.eye(2)
    with pytest.raises(EmptyComponentError):
        gmm_tmap(np.array([0.0, 1.0, 0.0, 0.0, 1.0, 1.0]), second_moment, 2)
    with pytest.raises(DomainError) as info:
        gmm_tmap(np.array([0.5, 0.5, 5.0, 5.0, -5.0, -5.0]), second_moment, 2)
    assert not isinstance(info.value, EmptyComponentError)


def test_domain_proxies():
    assert domain_proxies(np.array([0.4, 0.6, 1.0, 2.0]), 2)[0]
    ok, reason = domain_proxies(np.array([-0.1, 1.1, 0.0, 0.0]), 2)
    assert not ok and "negative" in reason
    ok, reason = domain_proxies(np.array([0.5, 0.6, 0.0, 0.0]), 2)
    assert not ok and "total mass" in reason


def test_enforce_domain_policies(gmm_model):
    bad = np.zeros(gmm_model.q)
    bad[: gmm_model.g] = 1.0
    assert enforce_domain(gmm_model, bad, "warn") is False
    with pytest.raises(DomainError):
        enforce_domain(gmm_model, bad, "abort")
    with pytest.raises(ArgumentError):
        enforce_domain(gmm_model, bad, "ignore")
    assert enforce_domain(gmm_model, gmm_model.initial_statistic(), "abort")


def test_warn_policy_keeps_stepping_outside_the_domain(gmm_model):
    bad = gmm_model.initial_statistic().copy()
    bad[0] += 1e-3
    rng = np.random.default_rng(8)
    s = bad
    for _ in range(5):
        s = gmm_onlineem_step(gmm_model, s, rng.integers(0, gmm_model.n, 10), 0.01, "warn")
        assert not domain_proxies(s, gmm_model.g)[0]
    with pytest.raises(DomainError):
        gmm_onlineem_step(gmm_model, bad, [0, 1, 2], 0.01, "abort")

    k_max = 20
    schedule = StepSchedule.constant(0.01, k_max)
    for algorithm in ("online-em", "fiem"):
        diag = run(
            algorithm,
            gmm_model,
            schedule,
            TerminationRule.uniform(k_max),
            0,
            RunOptions(batch_size=5, s0=bad, domain_policy="warn"),
        )
        assert diag.domain_violations == k_max
        assert abs(diag.final_statistic[: gmm_model.g].sum() - 1.0) < 1e-3
    with pytest.raises(DomainError):
        run(
            "online-em",
            gmm_model,
            schedule,
            TerminationRule.uniform(k_max),
            0,
            RunOptions(s0=bad, domain_policy="abort"),
        )


def test_rounding_level_covariance_is_lifted():
    dataset = GmmDataset(np.array([[1.0], [1.0]]))
    theta = gmm_tmap(np.array([1.0, 1.0]), dataset.second_moment, 1)
    assert theta.covariance[0, 0] > 0
    assert np.isfinite(gmm_loglik(theta, dataset))


def test_em_increases_log_likelihood(gmm_model):
    s = gmm_model.initial_statistic()
    previous = gmm_model.loglik_of_statistic(s)
    for _ in range(15):
        s = em_step(gmm_model, s)
        current = gmm_model.loglik_of_statistic(s)
        assert current >= previous - 1e-9
        previous = current


@pytest.mark.slow
def test_em_is_monotone_over_long_runs():
    dataset, _ = generate_gmm_synthetic(4, 2000, 3, 5)
    model = GmmModel(dataset, 3, initial_parameters(dataset, 3, StreamFactory(4).stream("init")))
    s = model.initial_statistic()
    values = [model.loglik_of_statistic(s)]
    for _ in range(100):
        s = em_step(model, s)
        values.append(model.loglik_of_statistic(s))
    assert np.all(np.diff(values) >= -1e-9)


def test_mini_batch_steps_stay_in_domain(gmm_model):
    rng = np.random.default_rng(5)
    s = gmm_model.initial_statistic()
    memory = init_memory(gmm_model, s)
    for _ in range(30):
        batch = rng.choice(gmm_model.n, size=10, replace=False)
        s, memory = gmm_iem_step(gmm_model, s, memory, batch, 1.0, policy="abort")
    assert domain_proxies(s, gmm_model.g)[0]

    s_online = gmm_model.initial_statistic()
    for _ in range(30):
        s_online = gmm_onlineem_step(gmm_model, s_online, rng.integers(0, gmm_model.n, 10), 0.05, "abort")
    np.testing.assert_allclose(s_online[: gmm_model.g].sum(), 1.0, atol=1e-12)


def test_fiem_keeps_total_mass(gmm_model):
    rng = np.random.default_rng(6)
    s = gmm_model.initial_statistic()
    memory = init_memory(gmm_model, s)
    for _ in range(40):
        batch_i = rng.integers(0, gmm_model.n, 10)
        batch_j = rng.integers(0, gmm_model.n, 10)
        s, memory = gmm_fiem_step(gmm_model, s, memory, batch_i, batch_j, 0.05)
    np.testing.assert_allclose(s[: gmm_model.g].sum(), 1.0, atol=1e-10)


def test_model_without_start_needs_explicit_statistic(gmm_data):
    dataset, _ = gmm_data
    with pytest.raises(ConfigurationError):
        GmmModel(dataset, 2).initial_statistic()
    with pytest.raises(ArgumentError):
        GmmModel(dataset, 0)


def test_params_validation():
    params = GmmParams([0.3, 0.3], [[0.0], [1.0]], [[1.0]])
    ok, reason = params.validate()
    assert not ok and "sum" in reason
    with pytest.raises(ConfigurationError):
        GmmParams([1.0], [[0.0, 1.0]], [[1.0]])
    again = GmmParams.from_dict(GmmParams([0.5, 0.5], [[0.0], [1.0]], [[2.0]]).to_dict())
    np.testing.assert_array_equal(again.covariance, [[2.0]])


def test_synthetic_generator_is_seeded_and_checked():
    a, truth_a = generate_gmm_synthetic(3, 50, 2, 3)
    b, _ = generate_gmm_synthetic(3, 50, 2, 3)
    np.testing.assert_array_equal(a.observations, b.observations)
    assert truth_a.validate()[0]
    with pytest.raises(ArgumentError):
        generate_gmm_synthetic(3, 1, 2, 3)


def test_preprocess_drops_constant_features_and_projects(rng):
    raw = np.column_stack([rng.standard_normal(200), np.full(200, 4.0), 3 * rng.standard_normal(200)])
    dataset, info = preprocess(raw, 1)
    assert info["dropped_features"] == 1
    assert info["kept_features"] == 2
    assert dataset.p == 1
    np.testing.assert_allclose(dataset.observations.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(dataset.observations.var(axis=0), info["explained_variance"], rtol=1e-10)
    with pytest.raises(ArgumentError):
        preprocess(raw, 3)


def test_initial_parameters_are_valid(gmm_data):
    dataset, _ = gmm_data
    theta0 = initial_parameters(dataset, 3, StreamFactory(9).stream("init"))
    assert theta0.validate()[0]
    np.testing.assert_allclose(theta0.weights, np.full(3, 1 / 3))


def test_csv_round_trip(tmp_path, gmm_data):
    dataset, _ = gmm_data
    path = tmp_path / "data.csv"
    dataset.to_csv(str(path))
    again = GmmDataset.from_csv(str(path))
    np.testing.assert_allclose(again.observations, dataset.observations, rtol=1e-12)
    np.testing.assert_allclose(again.second_moment, dataset.second_moment, rtol=1e-12)


def test_dataset_rejects_non_finite():
    with pytest.raises(ConfigurationError):
        GmmDataset(np.array([[1.0, np.nan]]))


def test_epochs_to_accuracy():
    hits = epochs_to_accuracy([-2.0, -1.5, -1.01, -1.0], -1.0, [0.1, 1e-3])
    assert hits == {0.1: 2, 1e-3: 3}
    assert epochs_to_accuracy([-2.0, -2.0], -1.0, [0.1]) == {0.1: None}


def test_mixture_weights_are_sorted_and_normalized():
    stats_by_k = {5: np.array([1.0, 3.0, 0.0]), 0: np.array([0.5, 0.5, 9.0])}
    out = mixture_weights(stats_by_k, 2)
    assert [k for k, _ in out] == [0, 5]
    np.testing.assert_allclose(out[1][1], [0.25, 0.75])
