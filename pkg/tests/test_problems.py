import numpy as np
import pytest

from romocp import fem, problems
from romocp.errors import ConfigurationError, ParameterDomainError
from romocp.mesh import generate_rect_mesh
from romocp.problems import (SamplingPlan, default_pollutant_mesh, default_qg_mesh,
                             make_pollutant_problem, make_qg_linear_problem,
                             make_qg_nonlinear_problem, problem_from_config,
                             sample_parameters, solve_state)


@pytest.fixture(scope="module")
def pollutant():
    return make_pollutant_problem(default_pollutant_mesh(10))


@pytest.fixture(scope="module")
def qg_linear():
    return make_qg_linear_problem(default_qg_mesh(8))


@pytest.fixture(scope="module")
def qg_nonlinear():
    return make_qg_nonlinear_problem(default_qg_mesh(8))


def test_pollutant_defaults(pollutant):
    assert pollutant.kind == "pollutant"
    assert pollutant.config["y_d"] == 0.2
    assert pollutant.config["L"] == 1e3
    np.testing.assert_allclose(pollutant.parameter_box,
                               [[0.5, 1.0], [-1.0, 1.0], [-1.0, 1.0]])
    assert len(pollutant.b_ops) == 4
    assert len(pollutant.a_ops) == 1
    assert len(pollutant.f_ops) == 1
    assert len(pollutant.g_ops) == 0
    # scalar control appended to the state block
    n = pollutant.spaces["y"].dimension
    assert pollutant.x_layout.size == n + 1
    assert pollutant.p_layout.size == n
    assert pollutant.contains([1.0, -1.0, 1.0])      # easterly-wind query
    assert pollutant.contains([1.0, 1.0, -1.0])      # southeasterly-wind query
    assert not pollutant.contains([0.1, 0.0, 0.0])


def test_pollutant_theta_listing(pollutant):
    theta = pollutant.theta([0.7, -0.3, 0.9])
    np.testing.assert_allclose(theta["b"], [0.7, -0.3, 0.9, -1e3])
    np.testing.assert_allclose(theta["a"], [1.0])
    np.testing.assert_allclose(theta["f"], [1.0])


def test_pollutant_requires_region_labels():
    with pytest.raises(ConfigurationError):
        make_pollutant_problem(generate_rect_mesh(4, 4))


def test_qg_theta_listing(qg_linear, qg_nonlinear):
    np.testing.assert_allclose(qg_linear.theta([0.5, 0.25])["b"], [0.5, 0.25, 1.0])
    theta = qg_nonlinear.theta([0.3, 0.2, 0.001])
    np.testing.assert_allclose(theta["b"], [0.3, 0.2, 1.0])
    assert theta["trilinear"] == pytest.approx(-0.001)


def test_qg_layouts(qg_linear):
    ni = qg_linear.spaces["psi"].dimension
    nu = qg_linear.spaces["u"].dimension
    assert ni == 49 and nu == 81
    assert qg_linear.x_layout.size == 2 * ni + nu
    assert qg_linear.p_layout.size == 2 * ni
    assert qg_linear.truth_dimension == 4 * ni + nu
    assert len(qg_linear.b_ops) == 3
    assert qg_linear.aggregation_pairs == (("psi", "chi"), ("q", "t"))


def test_qg_nonlinear_carries_tensor(qg_nonlinear):
    assert qg_nonlinear.is_nonlinear
    assert qg_nonlinear.trilinear.arg1 == "psi"
    assert qg_nonlinear.trilinear.test == "t"
    np.testing.assert_allclose(
        qg_nonlinear.parameter_box,
        [[1e-4, 1.0], [0.07 ** 3, 1.0], [1e-4, 0.045 ** 2]])
    # reference query point of the experiment tables sits in the box
    assert qg_nonlinear.contains([1e-4, 0.07 ** 3, 0.045 ** 2])


def test_qg_target_profile_solves_state_equation(qg_linear):
    # psi_d is defined as the forward solution under the reference forcing;
    # re-solving independently must reproduce the stored cost linearization
    mesh = qg_linear.mesh
    forcing = qg_linear.spaces["u"].restrict(-np.sin(np.pi * mesh.vertices[:, 1]))
    state = solve_state(qg_linear, [1e-4, 0.07 ** 3], forcing)
    mass = fem.assemble_mass(qg_linear.spaces["psi"])
    np.testing.assert_allclose(qg_linear.cost.linear, mass @ state["psi"], rtol=1e-10)
    assert qg_linear.cost.constant > 0.0


def test_qg_alpha_default(qg_linear, qg_nonlinear):
    assert qg_linear.cost.alpha == 1e-5
    assert qg_nonlinear.cost.alpha == 1e-5


def test_uncontrolled_state_solve(pollutant):
    # the state equation driven by a unit source: a(y, .) = c(1, .)
    mu = np.array([1.0, -1.0, 1.0])
    state = solve_state(pollutant, mu, 1.0)
    a_mat = fem.assemble_transport(pollutant.spaces["y"], mu[0], (mu[1], mu[2]))
    load = 1e3 * fem.assemble_region_load(pollutant.spaces["y"], 1)
    residual = a_mat @ state["y"] - load
    assert np.linalg.norm(residual) <= 1e-9 * np.linalg.norm(load)
    assert np.abs(state["y"]).max() > 0


def test_state_solve_residual(qg_nonlinear):
    rng = np.random.default_rng(5)
    u = rng.standard_normal(qg_nonlinear.spaces["u"].dimension)
    mu = np.array([1e-3, 0.05, 1e-3])
    state = solve_state(qg_nonlinear, mu, u)
    # plug into the constraint rows: B_state x + B_ctrl u = 0 plus tensor
    b = problems.assemble_constraint(qg_nonlinear, mu)
    x = np.concatenate([state["psi"], state["q"], u])
    res = b @ x
    tri = qg_nonlinear.trilinear
    test = qg_nonlinear.p_layout.slice_of("t")
    res[test] += qg_nonlinear.theta(mu)["trilinear"] * tri.form.apply_last(
        state["psi"], state["q"])
    assert np.linalg.norm(res) <= 1e-9 * max(1.0, np.linalg.norm(x))


def test_validate_mu(pollutant):
    with pytest.raises(ParameterDomainError):
        pollutant.validate_mu([2.0, 0.0, 0.0])
    with pytest.raises(ParameterDomainError):
        pollutant.validate_mu([0.7, 0.0])
    out = pollutant.validate_mu([0.7, 0.0, 0.0])
    assert out.shape == (3,)


class TestSampling:
    box2 = [[1e-4, 1.0], [1e-4, 1.0]]

    def test_uniform_reproducible_and_inside(self):
        plan = SamplingPlan("uniform", 50, seed=42)
        a = sample_parameters([[0.5, 1], [-1, 1], [-1, 1]], plan)
        b = sample_parameters([[0.5, 1], [-1, 1], [-1, 1]], plan)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (50, 3)
        assert (a >= [0.5, -1, -1]).all() and (a <= [1, 1, 1]).all()

    def test_single_point(self):
        pts = sample_parameters(self.box2, SamplingPlan("uniform", 1, seed=3))
        assert pts.shape == (1, 2)

    def test_log_uniform_mean(self):
        pts = sample_parameters(self.box2, SamplingPlan("log-uniform", 10_000, seed=0))
        logs = np.log10(pts)
        assert abs(logs.mean() + 2.0) < 0.05
        assert (pts >= 1e-4).all() and (pts <= 1.0).all()

    def test_log_uniform_rejects_nonpositive_box(self):
        with pytest.raises(ParameterDomainError):
            sample_parameters([[0.0, 1.0]], SamplingPlan("log-uniform", 3))

    def test_log_equispaced_lattice(self):
        pts = sample_parameters(self.box2, SamplingPlan("log-equispaced", 9))
        assert pts.shape == (9, 2)
        # 3x3 lattice, endpoints included
        first_axis = np.unique(np.round(np.log10(pts[:, 0]), 12))
        np.testing.assert_allclose(first_axis, [-4.0, -2.0, 0.0], atol=1e-12)
        again = sample_parameters(self.box2, SamplingPlan("log-equispaced", 9))
        np.testing.assert_array_equal(pts, again)

    def test_log_equispaced_balanced_factors(self):
        assert problems._balanced_factors(100, 3) == [5, 4, 5]
        assert problems._balanced_factors(27, 3) == [3, 3, 3]
        assert problems._balanced_factors(7, 2) == [1, 7]
        pts = sample_parameters([[1e-4, 1.0]] * 3,
                                SamplingPlan("log-equispaced", 27))
        assert pts.shape == (27, 3)

    def test_unknown_distribution(self):
        with pytest.raises(ConfigurationError):
            sample_parameters(self.box2, SamplingPlan("sobol", 3))


def test_problem_from_config_roundtrip():
    prob = problem_from_config({"problem": "pollutant", "mesh": {"nx": 10},
                                "alpha": 0.5, "y_d": 0.1})
    assert prob.cost.alpha == 0.5
    assert prob.config["y_d"] == 0.1
    qg = problem_from_config({"problem": "qg_linear", "mesh": {"nx": 6}})
    assert qg.kind == "qg_linear"
    with pytest.raises(ConfigurationError):
        problem_from_config({"problem": "heat"})
    with pytest.raises(ConfigurationError):
        problem_from_config({"mesh": {"nx": 4}})
