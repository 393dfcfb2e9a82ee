import numpy as np
import pytest
import scipy.linalg

from romocp import ocp
from romocp.errors import ParameterDomainError, SolverError
from romocp.problems import (default_pollutant_mesh, default_qg_mesh,
                             make_pollutant_problem, make_qg_linear_problem,
                             make_qg_nonlinear_problem)

EAST_WIND = np.array([1.0, -1.0, 1.0])


@pytest.fixture(scope="module")
def pollutant():
    return make_pollutant_problem(default_pollutant_mesh(10))


@pytest.fixture(scope="module")
def qg_linear():
    return make_qg_linear_problem(default_qg_mesh(10))


@pytest.fixture(scope="module")
def qg_nonlinear():
    return make_qg_nonlinear_problem(default_qg_mesh(10))


def test_kkt_block_structure(pollutant):
    system = ocp.assemble_kkt_linear(pollutant, EAST_WIND)
    kkt = system.kkt_matrix()
    assert kkt.shape == (system.dimension,) * 2
    # full KKT matrix is symmetric by construction
    asym = abs(kkt - kkt.T).max()
    assert asym == 0.0
    a_dense = system.a_block.toarray()
    np.testing.assert_array_equal(a_dense, a_dense.T)


def test_affine_equals_direct_assembly(pollutant, qg_linear, qg_nonlinear):
    rng = np.random.default_rng(11)
    for problem in (pollutant, qg_linear, qg_nonlinear):
        box = problem.parameter_box
        for _ in range(10):
            mu = rng.uniform(box[:, 0], box[:, 1])
            affine = ocp._assemble_blocks(problem, mu)
            direct = ocp.assemble_kkt_direct(problem, mu)
            scale = max(abs(affine.b_block).max(), 1.0)
            assert abs(affine.b_block - direct.b_block).max() <= 1e-13 * scale
            assert abs(affine.a_block - direct.a_block).max() <= 1e-13


def test_pollutant_query_block_combination(pollutant):
    system = ocp.assemble_kkt_linear(pollutant, EAST_WIND)
    k, d1, d2, ctrl = pollutant.b_ops
    expected = 1.0 * k + (-1.0) * d1 + 1.0 * d2 + (-1e3) * ctrl
    assert abs(system.b_block - expected).max() == 0.0


def test_one_shot_residual_and_cost(pollutant):
    system = ocp.assemble_kkt_linear(pollutant, EAST_WIND)
    sol = ocp.solve_one_shot(system)
    sol.mu = EAST_WIND
    res = ocp.kkt_residual(pollutant, EAST_WIND, sol)
    assert res <= 1e-10 * np.linalg.norm(system.rhs())
    cost = ocp.evaluate_cost(pollutant, sol)
    assert 0.0 < cost < pollutant.cost.constant  # better than doing nothing


def test_one_shot_zero_rhs(pollutant):
    system = ocp.assemble_kkt_linear(pollutant, EAST_WIND)
    import dataclasses
    hollow = dataclasses.replace(system, f=np.zeros_like(system.f),
                                 g=np.zeros_like(system.g))
    sol = ocp.solve_one_shot(hollow)
    for vec in sol.fields.values():
        np.testing.assert_allclose(vec, 0.0, atol=1e-14)


def test_zero_target_gives_zero_rhs():
    problem = make_pollutant_problem(default_pollutant_mesh(5), y_d=0.0)
    system = ocp.assemble_kkt_linear(problem, EAST_WIND)
    assert np.all(system.f == 0.0)
    assert np.all(system.g == 0.0)


def test_solve_matches_dense_lu_oracle():
    problem = make_pollutant_problem(default_pollutant_mesh(5))
    mu = np.array([0.8, 0.4, -0.6])
    system = ocp.assemble_kkt_linear(problem, mu)
    sol = ocp.solve_one_shot(system)
    z_sparse = sol.pack(problem.x_layout, problem.p_layout)
    z_dense = scipy.linalg.solve(system.kkt_matrix().toarray(), system.rhs())
    np.testing.assert_allclose(z_sparse, z_dense, rtol=0,
                               atol=1e-10 * max(1.0, abs(z_dense).max()))


def test_mu_outside_box_rejected(pollutant):
    with pytest.raises(ParameterDomainError):
        ocp.assemble_kkt_linear(pollutant, [0.1, 0.0, 0.0])
    with pytest.raises(ParameterDomainError):
        ocp.solve_truth(pollutant, [1.0, 3.0, 0.0])


def test_linear_assembly_rejects_nonlinear(qg_nonlinear):
    with pytest.raises(SolverError):
        ocp.assemble_kkt_linear(qg_nonlinear, [1e-3, 0.01, 1e-3])


def test_cost_closed_form(pollutant):
    n = pollutant.spaces["y"].dimension
    fields = {"y": np.zeros(n), "u": np.zeros(1), "p": np.zeros(n)}
    # doing nothing: J = 0.5 * y_d^2 * |obs region|
    assert ocp.evaluate_cost(pollutant, fields) == pytest.approx(0.5 * 0.04 * 0.04,
                                                                 rel=1e-12)
    # hitting the target exactly with zero control costs nothing
    on_target = {"y": np.full(n, 0.2), "u": np.zeros(1), "p": np.zeros(n)}
    assert ocp.evaluate_cost(pollutant, on_target) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        ocp.evaluate_cost(pollutant, {"y": np.zeros(3), "u": np.zeros(1),
                                      "p": np.zeros(n)})


def test_perturbation_increases_residual_and_cost(pollutant):
    sol = ocp.solve_truth(pollutant, EAST_WIND)
    assert ocp.kkt_residual(pollutant, EAST_WIND, sol) <= 1e-8
    bumped = {k: v.copy() for k, v in sol.fields.items()}
    bumped["y"][0] += 1e-3
    assert ocp.kkt_residual(pollutant, EAST_WIND, bumped) > 1e-6


def test_optimality_of_solution(pollutant):
    # J evaluated through the state map is minimal at the computed control
    sol = ocp.solve_truth(pollutant, EAST_WIND)
    u_opt = float(sol.fields["u"][0])
    j_opt = ocp.cost_at_control(pollutant, EAST_WIND, u_opt)
    assert j_opt == pytest.approx(sol.cost, rel=1e-9)
    rng = np.random.default_rng(2)
    for _ in range(5):
        j_other = ocp.cost_at_control(pollutant, EAST_WIND,
                                      u_opt + rng.uniform(-0.5, 0.5))
        assert j_other >= j_opt - 1e-12


@pytest.mark.parametrize("problem_fixture,mu,u_scale", [
    ("pollutant", EAST_WIND, 1.0),
    ("qg_linear", np.array([1e-2, 1e-2]), 1.0),
    ("qg_nonlinear", np.array([1e-2, 1e-2, 1e-3]), 1.0),
])
def test_gradient_matches_finite_differences(problem_fixture, mu, u_scale, request):
    problem = request.getfixturevalue(problem_fixture)
    rng = np.random.default_rng(7)
    dim = 1 if problem.spaces[problem.control] is None \
        else problem.spaces[problem.control].dimension
    u0 = u_scale * rng.standard_normal(dim)
    cost, grad = ocp.control_gradient(problem, mu, u0)
    assert cost == pytest.approx(ocp.cost_at_control(problem, mu, u0), rel=1e-12)
    step = 1e-6
    for _ in range(3):
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        plus = ocp.cost_at_control(problem, mu, u0 + step * direction)
        minus = ocp.cost_at_control(problem, mu, u0 - step * direction)
        fd = (plus - minus) / (2 * step)
        assert fd == pytest.approx(float(grad @ direction), rel=1e-5)


class TestNewton:
    def test_zero_target_zero_solution(self):
        problem = make_qg_nonlinear_problem(default_qg_mesh(6),
                                            target_mu=(1.0, 1.0, 1e-4))
        # overwrite the target with zero: residual at zero is already zero
        import dataclasses
        ni = problem.spaces["psi"].dimension
        cost = dataclasses.replace(problem.cost, linear=np.zeros(ni), constant=0.0)
        hollow = dataclasses.replace(problem, f_ops=(np.zeros(problem.x_layout.size),),
                                     cost=cost)
        sol = ocp.solve_truth_nonlinear(hollow, [1e-3, 0.01, 1e-3])
        assert sol.iterations == 0
        for vec in sol.fields.values():
            np.testing.assert_allclose(vec, 0.0, atol=1e-12)

    def test_small_coupling_stays_close_to_linear(self, qg_nonlinear):
        mu3 = 1e-4
        mu = np.array([1e-2, 1e-2, mu3])
        sol_nl = ocp.solve_truth_nonlinear(qg_nonlinear, mu)
        system = ocp._assemble_blocks(qg_nonlinear, mu)
        sol_lin = ocp.solve_one_shot(system)
        for name in ("psi", "q", "u"):
            denom = max(np.linalg.norm(sol_lin.fields[name]), 1e-12)
            gap = np.linalg.norm(sol_nl.fields[name] - sol_lin.fields[name]) / denom
            assert gap < 50 * mu3
        assert sol_nl.iterations <= 3

    def test_newton_converges_and_reports_history(self, qg_nonlinear):
        mu = np.array([1e-3, 1e-2, 0.045 ** 2])
        sol = ocp.solve_truth_nonlinear(qg_nonlinear, mu)
        assert sol.residuals[-1] <= max(1e-8, 1e-10 * sol.residuals[0])
        assert ocp.kkt_residual(qg_nonlinear, mu, sol) <= 1e-7
        assert sol.cost is not None

    def test_quadratic_tail(self, qg_nonlinear):
        mu = np.array([1e-3, 1e-3, 0.045 ** 2])
        sol = ocp.solve_truth_nonlinear(qg_nonlinear, mu, atol=1e-13, rtol=1e-16,
                                        max_iter=30)
        r = np.array(sol.residuals) / sol.residuals[0]
        tail = [(r[i], r[i + 1]) for i in range(len(r) - 1) if r[i] < 1e-2]
        checked = 0
        for rk, rk1 in tail:
            if rk1 < 1e-13:  # at the round-off floor
                continue
            assert rk1 <= 10.0 * rk ** 1.8
            checked += 1
        assert sol.iterations <= 10
