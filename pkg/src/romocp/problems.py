"""The built-in parametrized optimal control problems.

Each problem is a frozen :class:`ProblemDef`: an affine family of
operators (state-constraint block, cost block, right-hand sides, and an
optional trilinear coupling) together with the coefficient functions that
combine them at a given parameter point.  Three problems ship here:

* ``pollutant`` — scalar-source advection-diffusion control on a coastal
  rectangle; the control is the emission intensity of a tracer source and
  the cost monitors the tracer over an observation box.
* ``qg_linear`` — tracking of a desired stream function for the mixed
  stream-function/vorticity circulation model, controlled by a
  distributed forcing.
* ``qg_nonlinear`` — same tracking problem with the quadratic Jacobian
  coupling between stream function and vorticity switched on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .errors import ConfigurationError, IterationError, ParameterDomainError
from .fem import ThirdOrderForm
from .mesh import Mesh, generate_rect_mesh, load_mesh, region_area

# Boundary labels of the generated coastal mesh
COAST = 1
OPEN_SEA = 2
# Triangle labels
CONTROL_REGION = 1
OBS_REGION = 2

POLLUTANT_BOX = ((0.5, 1.0), (-1.0, 1.0), (-1.0, 1.0))
QG_LINEAR_BOX = ((1e-4, 1.0), (1e-4, 1.0))
# Third coordinate drives the Jacobian coupling; kept small so plain
# Newton from the uncoupled solve stays reliable.
QG_NONLINEAR_BOX = ((1e-4, 1.0), (0.07 ** 3, 1.0), (1e-4, 0.045 ** 2))

QG_LINEAR_REFERENCE_MU = (1e-4, 0.07 ** 3)
QG_NONLINEAR_REFERENCE_MU = (1e-4, 0.07 ** 3, 0.045 ** 2)
QG_NONLINEAR_TARGET_MU = (1e-4, 0.07 ** 3, 0.07 ** 2)


@dataclass(frozen=True)
class BlockLayout:
    """Ordered (name, size) fields of a block vector."""

    fields: tuple

    @property
    def size(self) -> int:
        return sum(n for _, n in self.fields)

    @property
    def names(self) -> tuple:
        return tuple(name for name, _ in self.fields)

    def slice_of(self, name: str) -> slice:
        offset = 0
        for fname, n in self.fields:
            if fname == name:
                return slice(offset, offset + n)
            offset += n
        raise KeyError(f"no field {name!r} in layout {self.names}")

    def split(self, vec: np.ndarray) -> dict:
        return {name: np.asarray(vec[self.slice_of(name)]) for name, _ in self.fields}

    def join(self, values: dict) -> np.ndarray:
        return np.concatenate([np.atleast_1d(np.asarray(values[name], dtype=float))
                               for name, _ in self.fields])


@dataclass(frozen=True)
class TrilinearCoupling:
    """A trilinear term: slot fields for the two solution arguments and the
    test field whose residual rows receive the contribution."""

    form: ThirdOrderForm
    arg1: str
    arg2: str
    test: str


@dataclass(frozen=True)
class CostData:
    """Quadratic cost ``0.5 y'My - f'y + c0 + 0.5 alpha u'Nu`` over the
    observed field ``y`` and the control ``u``."""

    observed: str
    obs_matrix: sp.spmatrix
    linear: np.ndarray
    constant: float
    control: str
    control_matrix: object  # sparse matrix, or float weight for scalar controls
    alpha: float


@dataclass(frozen=True)
class SamplingPlan:
    distribution: str  # "uniform" | "log-uniform" | "log-equispaced"
    count: int
    seed: int = 0


@dataclass(frozen=True)
class ProblemDef:
    """An optimal control problem as affine operator families.

    ``b_ops`` are the constraint blocks (adjoint-test rows by solution
    columns), ``a_ops`` the cost blocks, ``f_ops``/``g_ops`` the right-hand
    sides.  The matching coefficient functions live in the per-kind theta
    table and are evaluated through :meth:`theta`.
    """

    kind: str
    mesh: Mesh
    spaces: dict
    x_layout: BlockLayout
    p_layout: BlockLayout
    a_ops: tuple
    b_ops: tuple
    f_ops: tuple
    g_ops: tuple
    trilinear: TrilinearCoupling | None
    parameter_box: np.ndarray
    cost: CostData
    inner_products: dict
    error_norms: dict
    aggregation_pairs: tuple
    control: str
    observed: str
    config: dict

    def __post_init__(self):
        object.__setattr__(self, "parameter_box",
                           np.asarray(self.parameter_box, dtype=float).reshape(-1, 2))

    @property
    def is_nonlinear(self) -> bool:
        return self.trilinear is not None

    @property
    def num_parameters(self) -> int:
        return self.parameter_box.shape[0]

    @property
    def truth_dimension(self) -> int:
        return self.x_layout.size + self.p_layout.size

    def theta(self, mu) -> dict:
        mu = np.asarray(mu, dtype=float)
        return evaluate_theta(self.kind, mu, self.config)

    def state_fields(self) -> tuple:
        return tuple(n for n in self.x_layout.names if n != self.control)

    def contains(self, mu) -> bool:
        mu = np.asarray(mu, dtype=float)
        box = self.parameter_box
        return bool(mu.shape == (box.shape[0],)
                    and (mu >= box[:, 0]).all() and (mu <= box[:, 1]).all())

    def validate_mu(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if not self.contains(mu):
            raise ParameterDomainError(
                f"parameter {mu.tolist()} outside the box {self.parameter_box.tolist()}")
        return mu


def _pollutant_theta(mu, config):
    return {"a": np.array([1.0]),
            "b": np.array([mu[0], mu[1], mu[2], -float(config.get("L", 1e3))]),
            "f": np.array([1.0]),
            "g": np.empty(0),
            "trilinear": None}


def _qg_linear_theta(mu, config):
    return {"a": np.array([1.0]),
            "b": np.array([mu[0], mu[1], 1.0]),
            "f": np.array([1.0]),
            "g": np.empty(0),
            "trilinear": None}


def _qg_nonlinear_theta(mu, config):
    out = _qg_linear_theta(mu, config)
    out["trilinear"] = -mu[2]
    return out


_THETAS = {"pollutant": _pollutant_theta,
           "qg_linear": _qg_linear_theta,
           "qg_nonlinear": _qg_nonlinear_theta}


def evaluate_theta(kind: str, mu, config) -> dict:
    """Coefficient values of every affine term of a problem kind at ``mu``."""
    if kind not in _THETAS:
        raise ConfigurationError(f"unknown problem kind {kind!r}")
    return _THETAS[kind](np.asarray(mu, dtype=float), config or {})


def default_pollutant_mesh(n: int = 50, control_box=(0.2, 0.2, 0.4, 0.4),
                           obs_box=(0.6, 0.6, 0.8, 0.8)) -> Mesh:
    """Unit-square coastal substitute domain: the bottom and right sides are
    coast (Dirichlet), top and left open sea (natural)."""
    return generate_rect_mesh(
        n, n,
        boundary_plan={"bottom": COAST, "right": COAST, "top": OPEN_SEA, "left": OPEN_SEA},
        regions=[(CONTROL_REGION, control_box), (OBS_REGION, obs_box)])


def default_qg_mesh(n: int = 36) -> Mesh:
    """Unit-square basin with Dirichlet conditions on every side."""
    return generate_rect_mesh(n, n)


def _hstack_blocks(rows, col_sizes):
    """Assemble a sparse block row from {col_index: matrix} per row block."""
    out = []
    for row_size, blocks in rows:
        row = []
        for size in col_sizes:
            row.append(None)
        for idx, mat in blocks.items():
            row[idx] = mat
        for idx, size in enumerate(col_sizes):
            if row[idx] is None:
                row[idx] = sp.csr_matrix((row_size, size))
        out.append(row)
    return sp.bmat(out, format="csr")


def make_pollutant_problem(mesh: Mesh | None = None, *, alpha: float = 1e-2,
                           y_d: float = 0.2, scale: float = 1e3,
                           parameter_box=None, config_extra=None) -> ProblemDef:
    """Scalar-source advection-diffusion control problem.

    The state is the tracer concentration with Dirichlet conditions on the
    coast labels; the control is the (scalar) source intensity on the
    control region, amplified by the nondimensionalizing factor ``scale``;
    the cost tracks the safety threshold ``y_d`` over the observation
    region.
    """
    if mesh is None:
        mesh = default_pollutant_mesh()
    present = set(int(l) for l in np.unique(mesh.region_labels))
    if CONTROL_REGION not in present or OBS_REGION not in present:
        raise ConfigurationError(
            "pollutant mesh must carry control region label "
            f"{CONTROL_REGION} and observation region label {OBS_REGION}")
    if COAST not in set(int(l) for l in mesh.boundary_edges[:, 2]):
        raise ConfigurationError(f"pollutant mesh must carry coast boundary label {COAST}")

    space = fem.build_space(mesh, {COAST})
    n = space.dimension
    stiffness = fem.assemble_stiffness(space)
    adv_x = fem.assemble_advection(space, 1)
    adv_y = fem.assemble_advection(space, 2)
    control_load = fem.assemble_region_load(space, CONTROL_REGION)
    obs_mass = fem.assemble_mass(space, OBS_REGION)
    obs_load = fem.assemble_region_load(space, OBS_REGION)
    control_weight = region_area(mesh, CONTROL_REGION)
    obs_area = region_area(mesh, OBS_REGION)

    x_layout = BlockLayout((("y", n), ("u", 1)))
    p_layout = BlockLayout((("p", n),))

    def widen(mat):  # pad the scalar-control column with zeros
        return sp.hstack([mat, sp.csr_matrix((n, 1))], format="csr")

    control_col = sp.hstack(
        [sp.csr_matrix((n, n)), sp.csr_matrix(control_load.reshape(-1, 1))], format="csr")
    b_ops = (widen(stiffness), widen(adv_x), widen(adv_y), control_col)

    a_op = sp.block_diag([obs_mass, sp.csr_matrix([[alpha * control_weight]])], format="csr")
    f_vec = np.concatenate([y_d * obs_load, [0.0]])
    cost = CostData("y", obs_mass, y_d * obs_load, 0.5 * y_d ** 2 * obs_area,
                    "u", control_weight, alpha)

    box = parameter_box if parameter_box is not None else POLLUTANT_BOX
    config = {"problem": "pollutant", "alpha": alpha, "y_d": y_d, "L": scale,
              "parameter_box": np.asarray(box, dtype=float).tolist()}
    config.update(config_extra or {})

    return ProblemDef(
        kind="pollutant", mesh=mesh,
        spaces={"y": space, "u": None, "p": space},
        x_layout=x_layout, p_layout=p_layout,
        a_ops=(a_op,), b_ops=b_ops, f_ops=(f_vec,), g_ops=(),
        trilinear=None, parameter_box=box, cost=cost,
        inner_products={"y": stiffness, "u": control_weight, "p": stiffness},
        error_norms={"y": stiffness, "u": 1.0, "p": stiffness},
        aggregation_pairs=(("y", "p"),),
        control="u", observed="y", config=config)


def _make_qg_problem(kind, mesh, alpha, target_mu, parameter_box, config_extra):
    if mesh is None:
        mesh = default_qg_mesh()
    interior = fem.build_space(mesh, set(int(l) for l in mesh.boundary_edges[:, 2]))
    everywhere = fem.build_space(mesh)
    ni, nu = interior.dimension, everywhere.dimension
    if ni == 0:
        raise ConfigurationError("mesh too coarse: no interior vertices")

    stiffness = fem.assemble_stiffness(interior)
    mass = fem.assemble_mass(interior)
    adv_x = fem.assemble_advection(interior, 1)
    control_mass = fem.assemble_mass_pair(interior, everywhere)
    full_mass = fem.assemble_mass(everywhere)

    x_layout = BlockLayout((("psi", ni), ("q", ni), ("u", nu)))
    p_layout = BlockLayout((("chi", ni), ("t", ni)))
    col_sizes = [ni, ni, nu]

    # constraint rows: chi-rows couple (grad psi, grad .) and (q, .);
    # t-rows carry the vorticity transport and the control forcing
    b1 = _hstack_blocks([(ni, {}), (ni, {1: mass})], col_sizes)
    b2 = _hstack_blocks([(ni, {}), (ni, {1: stiffness})], col_sizes)
    b3 = _hstack_blocks([(ni, {0: stiffness, 1: mass}),
                         (ni, {0: adv_x, 2: -control_mass})], col_sizes)

    a_op = sp.block_diag([mass, sp.csr_matrix((ni, ni)), alpha * full_mass], format="csr")

    trilinear = None
    if kind == "qg_nonlinear":
        trilinear = TrilinearCoupling(fem.assemble_trilinear(interior), "psi", "q", "t")

    box = parameter_box
    if box is None:
        box = QG_LINEAR_BOX if kind == "qg_linear" else QG_NONLINEAR_BOX
    config = {"problem": kind, "alpha": alpha,
              "target_mu": list(map(float, target_mu)),
              "parameter_box": np.asarray(box, dtype=float).tolist()}
    config.update(config_extra or {})

    problem = ProblemDef(
        kind=kind, mesh=mesh,
        spaces={"psi": interior, "q": interior, "u": everywhere,
                "chi": interior, "t": interior},
        x_layout=x_layout, p_layout=p_layout,
        a_ops=(a_op,), b_ops=(b1, b2, b3),
        f_ops=(np.zeros(x_layout.size),), g_ops=(),
        trilinear=trilinear, parameter_box=box,
        cost=CostData("psi", mass, np.zeros(ni), 0.0, "u", full_mass, alpha),
        inner_products={"psi": stiffness, "q": stiffness, "u": full_mass,
                        "chi": stiffness, "t": stiffness},
        error_norms={"psi": stiffness, "q": stiffness, "u": full_mass,
                     "chi": stiffness, "t": stiffness},
        aggregation_pairs=(("psi", "chi"), ("q", "t")),
        control="u", observed="psi", config=config)

    # desired profile: stream function obtained by driving the circulation
    # model with the reference wind forcing at the target parameters
    forcing = everywhere.restrict(
        -np.sin(np.pi * mesh.vertices[:, 1]))
    state = solve_state(problem, np.asarray(target_mu, dtype=float), forcing,
                        enforce_box=False)
    psi_d = state["psi"]
    f_vec = np.zeros(x_layout.size)
    f_vec[x_layout.slice_of("psi")] = mass @ psi_d
    cost = CostData("psi", mass, mass @ psi_d, 0.5 * psi_d @ (mass @ psi_d),
                    "u", full_mass, alpha)
    return dataclasses.replace(problem, f_ops=(f_vec,), cost=cost)


def make_qg_linear_problem(mesh: Mesh | None = None, *, alpha: float = 1e-5,
                           target_mu=QG_LINEAR_REFERENCE_MU,
                           parameter_box=None, config_extra=None) -> ProblemDef:
    """Stream-function tracking for the linear circulation model."""
    return _make_qg_problem("qg_linear", mesh, alpha, target_mu, parameter_box,
                            config_extra)


def make_qg_nonlinear_problem(mesh: Mesh | None = None, *, alpha: float = 1e-5,
                              target_mu=QG_NONLINEAR_TARGET_MU,
                              parameter_box=None, config_extra=None) -> ProblemDef:
    """Stream-function tracking with the quadratic Jacobian coupling."""
    return _make_qg_problem("qg_nonlinear", mesh, alpha, target_mu, parameter_box,
                            config_extra)


def assemble_constraint(problem: ProblemDef, mu) -> sp.csr_matrix:
    """Affine combination of the constraint blocks at ``mu`` (linear part)."""
    theta = problem.theta(mu)["b"]
    out = theta[0] * problem.b_ops[0]
    for coeff, op in zip(theta[1:], problem.b_ops[1:]):
        out = out + coeff * op
    return out.tocsr()


def assemble_cost_block(problem: ProblemDef, mu) -> sp.csr_matrix:
    theta = problem.theta(mu)["a"]
    out = theta[0] * problem.a_ops[0]
    for coeff, op in zip(theta[1:], problem.a_ops[1:]):
        out = out + coeff * op
    return out.tocsr()


def assemble_rhs(problem: ProblemDef, mu):
    theta = problem.theta(mu)
    f = np.zeros(problem.x_layout.size)
    for coeff, vec in zip(theta["f"], problem.f_ops):
        f += coeff * vec
    g = np.zeros(problem.p_layout.size)
    for coeff, vec in zip(theta["g"], problem.g_ops):
        g += coeff * vec
    return f, g


def solve_state(problem: ProblemDef, mu, control_values, *, enforce_box: bool = True,
                tol: float = 1e-11, max_iter: int = 25) -> dict:
    """Solve the forward state equation at a fixed control.

    ``control_values`` is a scalar for scalar controls, otherwise a vector
    over the control space.  Newton iteration handles the trilinear
    coupling when present.  Returns the state fields as a dict.
    """
    mu = problem.validate_mu(mu) if enforce_box else np.asarray(mu, dtype=float)
    layout = problem.x_layout
    state_names = problem.state_fields()
    state_layout = BlockLayout(tuple((n, s) for n, s in layout.fields
                                     if n != problem.control))

    b_full = assemble_constraint(problem, mu)
    _, g_vec = assemble_rhs(problem, mu)
    u = np.atleast_1d(np.asarray(control_values, dtype=float))
    rhs = g_vec - b_full[:, layout.slice_of(problem.control)] @ u
    state_idx = np.concatenate([np.arange(layout.size)[layout.slice_of(n)]
                                for n in state_names])
    b_state = b_full[:, state_idx].tocsc()

    if problem.trilinear is None:
        return state_layout.split(spla.splu(b_state).solve(rhs))

    tri = problem.trilinear
    theta_t = problem.theta(mu)["trilinear"]
    a1 = state_layout.slice_of(tri.arg1)
    a2 = state_layout.slice_of(tri.arg2)
    test = problem.p_layout.slice_of(tri.test)

    x = spla.splu(b_state).solve(rhs)  # uncoupled solve as the initial guess
    residuals = []
    for _ in range(max_iter):
        res = b_state @ x - rhs
        res[test] += theta_t * tri.form.apply_last(x[a1], x[a2])
        rnorm = np.linalg.norm(res)
        residuals.append(rnorm)
        if rnorm <= tol * max(1.0, np.linalg.norm(rhs)):
            return state_layout.split(x)
        d_arg1 = (theta_t * tri.form.contract_second(x[a2]).T).tocoo()
        d_arg2 = (theta_t * tri.form.contract_first(x[a1]).T).tocoo()
        correction = sp.coo_matrix(
            (np.concatenate([d_arg1.data, d_arg2.data]),
             (np.concatenate([test.start + d_arg1.row, test.start + d_arg2.row]),
              np.concatenate([a1.start + d_arg1.col, a2.start + d_arg2.col]))),
            shape=b_state.shape)
        x = x - spla.splu((b_state + correction).tocsc()).solve(res)
    raise IterationError("state Newton did not converge", residuals)


def sample_parameters(box, plan: SamplingPlan) -> np.ndarray:
    """Draw training/test parameters from a box.

    ``uniform`` and ``log-uniform`` sample i.i.d. per coordinate (the
    latter uniformly in log10); ``log-equispaced`` lays a lattice whose
    per-axis counts are the most balanced factorization of the sample
    count, equispaced in log10 and traversed in raster order.
    """
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    if plan.count < 1:
        raise ConfigurationError("sample count must be >= 1")
    if plan.distribution == "uniform":
        rng = np.random.default_rng(plan.seed)
        return rng.uniform(box[:, 0], box[:, 1], size=(plan.count, box.shape[0]))
    if plan.distribution in ("log-uniform", "log-equispaced"):
        if (box[:, 0] <= 0).any():
            raise ParameterDomainError(
                "log-scaled sampling requires strictly positive box bounds")
        lo, hi = np.log10(box[:, 0]), np.log10(box[:, 1])
        if plan.distribution == "log-uniform":
            rng = np.random.default_rng(plan.seed)
            points = 10.0 ** rng.uniform(lo, hi, size=(plan.count, box.shape[0]))
        else:
            counts = _balanced_factors(plan.count, box.shape[0])
            axes = []
            for axis, cnt in enumerate(counts):
                if cnt == 1:
                    axes.append(np.array([(lo[axis] + hi[axis]) / 2.0]))
                else:
                    axes.append(np.linspace(lo[axis], hi[axis], cnt))
            grids = np.meshgrid(*axes, indexing="ij")
            points = 10.0 ** np.stack([g.ravel() for g in grids], axis=1)
        # the 10**log10 round trip can overshoot a bound by one ulp
        return np.clip(points, box[:, 0], box[:, 1])
    raise ConfigurationError(f"unknown sampling distribution {plan.distribution!r}")


def _balanced_factors(m: int, d: int) -> list:
    factors = []
    rem = m
    for axes_left in range(d, 0, -1):
        if axes_left == 1:
            factors.append(rem)
            break
        target = rem ** (1.0 / axes_left)
        divisors = [k for k in range(1, rem + 1) if rem % k == 0]
        best = min(divisors, key=lambda k: (abs(k - target), k))
        factors.append(best)
        rem //= best
    return factors


_DEFAULT_MESH_N = {"pollutant": 50, "qg_linear": 36, "qg_nonlinear": 36}


def problem_from_config(config: dict, base_dir=None) -> ProblemDef:
    """Build a ProblemDef from a JSON-style configuration mapping.

    Keys: ``problem`` (kind), ``mesh`` (``{"nx", "ny"}`` for a generated
    mesh or ``{"path"}`` / ``{"text"}`` for the plain-text format), then
    per-problem settings (``alpha``, ``y_d``, ``L``, ``target_mu``,
    ``parameter_box``).
    """
    if "problem" not in config:
        raise ConfigurationError("config is missing the 'problem' key")
    kind = config["problem"]
    if kind not in _THETAS:
        raise ConfigurationError(f"unknown problem kind {kind!r}")

    mesh_cfg = dict(config.get("mesh") or {})
    mesh = None
    if "text" in mesh_cfg:
        mesh = load_mesh(mesh_cfg["text"])
    elif "path" in mesh_cfg:
        import pathlib
        path = pathlib.Path(mesh_cfg["path"])
        if base_dir is not None and not path.is_absolute():
            path = pathlib.Path(base_dir) / path
        mesh = load_mesh(path.read_text())
    else:
        n = int(mesh_cfg.get("nx", _DEFAULT_MESH_N[kind]))
        ny = int(mesh_cfg.get("ny", n))
        if kind == "pollutant":
            mesh = generate_rect_mesh(
                n, ny, boundary_plan={"bottom": COAST, "right": COAST,
                                      "top": OPEN_SEA, "left": OPEN_SEA},
                regions=[(CONTROL_REGION, (0.2, 0.2, 0.4, 0.4)),
                         (OBS_REGION, (0.6, 0.6, 0.8, 0.8))])
        else:
            mesh = generate_rect_mesh(n, ny)

    box = config.get("parameter_box")
    try:
        if kind == "pollutant":
            return make_pollutant_problem(
                mesh, alpha=float(config.get("alpha", 1e-2)),
                y_d=float(config.get("y_d", 0.2)),
                scale=float(config.get("L", 1e3)), parameter_box=box)
        maker = make_qg_linear_problem if kind == "qg_linear" else make_qg_nonlinear_problem
        kwargs = {"alpha": float(config.get("alpha", 1e-5)), "parameter_box": box}
        if "target_mu" in config:
            kwargs["target_mu"] = tuple(float(v) for v in config["target_mu"])
        return maker(mesh, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc


def sampling_from_config(config: dict, default_count: int = 100) -> SamplingPlan:
    defaults = {"pollutant": "uniform", "qg_linear": "log-uniform",
                "qg_nonlinear": "log-equispaced"}
    sampling = dict(config.get("sampling") or {})
    distribution = sampling.get("distribution", defaults.get(config.get("problem"), "uniform"))
    return SamplingPlan(distribution=distribution,
                        count=int(sampling.get("count", default_count)),
                        seed=int(sampling.get("seed", 0)))
