import math

import numpy as np
import pytest

from fiem.core.model import ModelConstants
from fiem.core.stepsize import (
    PlannerInputs,
    asymptotic_case1,
    c_plus,
    case2_asymptotic_bound,
    f_n,
    karimi_plan,
    lambda_star,
    make_plan,
    nonuniform_F,
    nonuniform_F_inverse,
    nonuniform_plan,
    plan_case1,
    recommend,
    scan_mu,
    solve_C_case1,
    solve_C_equal_lambda,
    solve_case2,
    descent_coeffs,
)
from fiem.errors import ArgumentError, InfeasibleError
from fiem.experiments import brute_force_tail
from fiem.models.toy_gaussian import ToyGaussianModel, generate_toy


@pytest.fixture(scope="module")
def toy_constants():
    return ToyGaussianModel(generate_toy(0, 100)).constants()


def _inputs(**overrides):
    values = dict(n=1000, k_max=20000, v_min=1.0, l_rms=1.0, l_gradv=1.0, mu=0.25, lam=0.5)
    values.update(overrides)
    return PlannerInputs(**values)


def test_karimi_unit_constants():
    plan = karimi_plan(_inputs(), [1.0])
    assert plan.gamma == pytest.approx(1.6667e-3, rel=1e-4)
    assert plan.gamma == pytest.approx(1.0 / 600.0, rel=1e-12)


@pytest.mark.parametrize("n", [10, 1000, 10**6])
@pytest.mark.parametrize("mu", [0.1, 0.25, 0.45])
def test_case1_C_solves_its_equation(n, mu):
    inputs = _inputs(n=n, mu=mu, l_gradv=3.0)
    C = solve_C_case1(inputs)
    target = 2 * mu * inputs.v_min * inputs.l_rms / inputs.l_gradv
    assert math.sqrt(C) * f_n(C, inputs.lam, n) == pytest.approx(target, rel=1e-12)


def test_case1_gamma_and_bound():
    inputs = _inputs()
    plan = plan_case1(inputs)
    assert plan.feasible
    assert plan.gamma == pytest.approx(math.sqrt(plan.C) / (1000 ** (2 / 3)), rel=1e-14)
    assert plan.bound_value == pytest.approx(1000 ** (2 / 3) / 20000 * plan.bound_constant)
    np.testing.assert_array_equal(plan.weights, np.full(20000, 1 / 20000))


@pytest.mark.parametrize("mu", [0.1, 0.25, 0.4])
def test_equal_lambda_root_is_below_closed_form(mu):
    inputs = _inputs(mu=mu, n=10**6)
    assert solve_C_equal_lambda(inputs) <= c_plus(inputs)


def test_f_n_feasibility():
    with pytest.raises(InfeasibleError):
        f_n(10.0, 0.5, 8)
    assert f_n(0.0, 0.5, 8) == pytest.approx(8 ** (-2 / 3))


def test_nonuniform_with_uniform_weights_is_case1_half():
    inputs = _inputs(mu=0.5, l_gradv=2.5)
    k_max = inputs.k_max
    uniform = nonuniform_plan(inputs, np.full(k_max, 1.0 / k_max))
    reference = plan_case1(inputs)
    np.testing.assert_allclose(uniform.gammas, reference.gammas, rtol=1e-12)
    assert uniform.C == reference.C


def test_nonuniform_peak_weight_matches_case1_formula():
    inputs = _inputs()
    weights = np.linspace(2.0, 1.0, inputs.k_max)
    weights /= weights.sum()
    plan = nonuniform_plan(inputs, weights)
    C = plan.C
    assert plan.gammas[0] == math.sqrt(C) / (inputs.n ** (2 / 3) * inputs.l_rms)
    assert np.all(np.diff(plan.gammas) <= 0)
    assert plan.to_dict()["weights"][0] == pytest.approx(weights[0])


def test_nonuniform_inverse_round_trip():
    inputs = _inputs()
    fn = f_n(0.01, inputs.lam, inputs.n)
    x = 0.05
    y = nonuniform_F(x, inputs, fn)
    assert nonuniform_F_inverse(y, inputs, fn) == pytest.approx(x, rel=1e-10)


def test_nonuniform_rejects_bad_weights():
    inputs = _inputs(k_max=4)
    with pytest.raises(ArgumentError):
        nonuniform_plan(inputs, [0.5, 0.5])
    with pytest.raises(ArgumentError):
        nonuniform_plan(inputs, [1.0, 0.0, 0.0, 0.0])


def test_case2_solution_and_infeasibility():
    inputs = _inputs(n=10**6, k_max=10**7)
    plan = solve_case2(inputs)
    assert plan.strategy == "case2"
    assert plan.gamma == pytest.approx(
        math.sqrt(plan.C) / ((inputs.n * inputs.k_max) ** (1 / 3) * inputs.l_rms)
    )
    tight = _inputs(n=10**6, k_max=10, l_gradv=1e-3)
    with pytest.raises(InfeasibleError):
        solve_case2(tight)
    flagged = make_plan("case2", tight)
    assert not flagged.feasible
    assert "lambda/C" in flagged.violated_condition


def test_lambda_star_root():
    lam = lambda_star(0.5, 2.0, 3.0, 4.0)
    lhs = (0.5 * 2.0) ** 2 * 4.0**3 * (1 - lam) ** 2
    rhs = (2 * 3.0) ** 2 * lam**3
    assert lhs == pytest.approx(rhs, rel=1e-10)
    plan = case2_asymptotic_bound(_inputs(n=10**6, k_max=10**8), 4.0)
    unit_lam = lambda_star(1.0, 1.0, 1.0, 4.0)
    assert plan.C == pytest.approx(unit_lam * 4.0)
    assert plan.lam == pytest.approx(unit_lam)


def test_asymptotic_case1_constant():
    inputs = _inputs(l_gradv=2.0)
    plan = asymptotic_case1(inputs)
    assert plan.C == pytest.approx(0.25 * (1.0 / 2.0) ** (2 / 3))
    assert plan.bound_constant == pytest.approx(8 / 3 * 2.0 ** (1 / 3))


def test_recommend_and_auto():
    assert recommend(1e-2, 1000) == "case1"
    assert recommend(0.5, 1000) == "case2"
    assert make_plan("auto", _inputs(), epsilon=1e-2).strategy == "case1"
    with pytest.raises(ArgumentError):
        make_plan("auto", _inputs())
    with pytest.raises(ArgumentError):
        make_plan("newton", _inputs())


def test_scan_mu_is_monotone():
    rows = scan_mu(_inputs(), [0.1, 0.2, 0.3, 0.4])
    gammas = [row["gamma"] for row in rows]
    assert gammas == sorted(gammas)
    assert [row["mu"] for row in rows] == [0.1, 0.2, 0.3, 0.4]


def test_step_size_dominance_on_toy_constants(toy_constants):
    inputs = PlannerInputs.from_constants(toy_constants, 10**6, 2 * 10**7)
    fgm = make_plan("case1", inputs)
    karimi = make_plan("karimi", inputs, lipschitz=toy_constants.lipschitz_i)
    assert fgm.gamma > karimi.gamma
    assert fgm.bound_constant < karimi.bound_constant


def test_descent_recursion_matches_brute_force():
    constants = ModelConstants.from_lipschitz(0.3, 2.0, [1.2, 0.8, 1.0], 1.7)
    gammas = np.linspace(0.05, 0.01, 50)
    coeffs = descent_coeffs(gammas, 3, constants)
    tail = brute_force_tail(gammas, 3, coeffs.betas, constants.lipschitz_rms**2)
    expected = (1 + 1 / coeffs.betas) * tail
    expected[-1] = 0.0
    np.testing.assert_allclose(coeffs.lambdas_big, expected, rtol=1e-12, atol=1e-15)
    assert coeffs.lambdas_big[-1] == 0.0
    L2, v, Lv = constants.lipschitz_rms**2, constants.v_min, constants.lipschitz_gradv
    np.testing.assert_allclose(
        coeffs.alphas, gammas * v - gammas**2 * (1 + coeffs.lambdas_big * L2) * Lv / 2, rtol=1e-12
    )


def test_descent_rejects_bad_betas():
    constants = ModelConstants.from_lipschitz(0.3, 2.0, [1.0], 1.0)
    with pytest.raises(ArgumentError):
        descent_coeffs(np.full(5, 0.1), 3, constants, betas=np.full(4, 0.1))
    with pytest.raises(ArgumentError):
        descent_coeffs(np.full(5, 0.1), 3, constants, betas=np.zeros(5))


def test_plan_json_schema():
    doc = plan_case1(_inputs()).to_dict()
    for key in ("strategy", "n", "k_max", "mu", "lambda", "C", "gamma", "bound_constant", "bound_value", "feasible"):
        assert key in doc
    assert isinstance(doc["gamma"], float)
    assert "weights" not in doc
