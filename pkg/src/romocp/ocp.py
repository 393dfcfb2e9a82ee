"""Full-order optimality systems: one-shot linear solves and Newton.

The discrete optimality conditions are the exact derivatives of the
discrete Lagrangian, so the linear system carries the symmetric block
structure ``[[A, B'], [B, 0]]`` and the Newton matrix of the nonlinear
case is the (symmetric) Lagrangian Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import IterationError, SolverError
from .problems import (BlockLayout, ProblemDef, assemble_constraint,
                       assemble_cost_block, assemble_rhs, solve_state)

NEWTON_ATOL = 1e-8
NEWTON_RTOL = 1e-10
NEWTON_MAX_ITER = 20
ONE_SHOT_RTOL = 1e-10


@dataclass(frozen=True)
class BlockSystem:
    """Assembled saddle-point system ``[[A, B'], [B, 0]] z = [f, g]``."""

    a_block: sp.spmatrix
    b_block: sp.spmatrix
    f: np.ndarray
    g: np.ndarray
    x_layout: BlockLayout
    p_layout: BlockLayout

    @property
    def dimension(self) -> int:
        return self.x_layout.size + self.p_layout.size

    def kkt_matrix(self) -> sp.csr_matrix:
        return sp.bmat([[self.a_block, self.b_block.T],
                        [self.b_block, None]], format="csr")

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.f, self.g])


@dataclass
class OCPSolution:
    """Solution fields of one optimality-system solve plus diagnostics."""

    fields: dict
    mu: np.ndarray
    cost: float | None = None
    iterations: int = 0
    residuals: list = field(default_factory=list)

    def pack(self, x_layout: BlockLayout, p_layout: BlockLayout) -> np.ndarray:
        return np.concatenate([x_layout.join(self.fields), p_layout.join(self.fields)])


def _assemble_blocks(problem: ProblemDef, mu) -> BlockSystem:
    f, g = assemble_rhs(problem, mu)
    return BlockSystem(assemble_cost_block(problem, mu),
                       assemble_constraint(problem, mu),
                       f, g, problem.x_layout, problem.p_layout)


def assemble_kkt_linear(problem: ProblemDef, mu) -> BlockSystem:
    """Affine-combined saddle-point system of a linear problem at ``mu``."""
    if problem.is_nonlinear:
        raise SolverError(
            "assemble_kkt_linear only applies to linear problems; "
            "use solve_truth_nonlinear")
    mu = problem.validate_mu(mu)
    return _assemble_blocks(problem, mu)


def assemble_kkt_direct(problem: ProblemDef, mu) -> BlockSystem:
    """Direct (non-affine) assembly oracle: rebuilds parameter-dependent
    operators with coefficients baked in at the element level instead of
    combining cached affine terms."""
    from . import fem

    mu = np.asarray(mu, dtype=float)
    theta = problem.theta(mu)
    if problem.kind == "pollutant":
        space = problem.spaces["y"]
        n = space.dimension
        a_mat = fem.assemble_transport(space, mu[0], (mu[1], mu[2]))
        control_col = theta["b"][3] * fem.assemble_region_load(space, 1)
        b_block = sp.hstack([a_mat, sp.csr_matrix(control_col.reshape(-1, 1))],
                            format="csr")
        f, g = assemble_rhs(problem, mu)
        return BlockSystem(assemble_cost_block(problem, mu), b_block, f, g,
                           problem.x_layout, problem.p_layout)
    if problem.kind in ("qg_linear", "qg_nonlinear"):
        interior = problem.spaces["psi"]
        everywhere = problem.spaces["u"]
        ni = interior.dimension
        stiffness = fem.assemble_stiffness(interior)
        mass = fem.assemble_mass(interior)
        vort = fem.assemble_transport(interior, mu[1], (0.0, 0.0), mu[0])
        adv = fem.assemble_advection(interior, 1)
        rect = fem.assemble_mass_pair(interior, everywhere)
        b_block = sp.bmat([[stiffness, mass, None],
                           [adv, vort, -rect]], format="csr")
        f, g = assemble_rhs(problem, mu)
        return BlockSystem(assemble_cost_block(problem, mu), b_block, f, g,
                           problem.x_layout, problem.p_layout)
    raise SolverError(f"no direct assembly route for problem kind {problem.kind!r}")


def solve_one_shot(system: BlockSystem) -> OCPSolution:
    """Solve the full coupled system in a single sparse factorization."""
    kkt = system.kkt_matrix().tocsc()
    rhs = system.rhs()
    try:
        lu = spla.splu(kkt)
    except RuntimeError as exc:  # SuperLU signals singularity this way
        raise SolverError(f"KKT factorization failed: {exc}") from exc
    z = lu.solve(rhs)
    if not np.isfinite(z).all():
        raise SolverError("KKT solve produced non-finite values (singular pivot)")
    scale = max(np.linalg.norm(rhs), 1e-300)
    rel = np.linalg.norm(kkt @ z - rhs) / scale
    if rhs.any() and rel > ONE_SHOT_RTOL:
        raise SolverError(f"one-shot solve residual {rel:.3e} above {ONE_SHOT_RTOL:.1e}")
    fields = system.x_layout.split(z[:system.x_layout.size])
    fields.update(system.p_layout.split(z[system.x_layout.size:]))
    return OCPSolution(fields=fields, mu=np.empty(0), iterations=1, residuals=[rel])


def evaluate_cost(problem: ProblemDef, sol) -> float:
    """Quadratic cost of a solution (an :class:`OCPSolution` or field dict)."""
    fields = sol.fields if isinstance(sol, OCPSolution) else sol
    cost = problem.cost
    y = np.asarray(fields[cost.observed], dtype=float)
    if y.shape[0] != cost.obs_matrix.shape[0]:
        raise ValueError(f"observed field has dimension {y.shape[0]}, "
                         f"expected {cost.obs_matrix.shape[0]}")
    u = np.atleast_1d(np.asarray(fields[cost.control], dtype=float))
    track = 0.5 * y @ (cost.obs_matrix @ y) - cost.linear @ y + cost.constant
    if np.isscalar(cost.control_matrix) or isinstance(cost.control_matrix, float):
        penalty = 0.5 * cost.alpha * float(cost.control_matrix) * float(u @ u)
    else:
        penalty = 0.5 * cost.alpha * u @ (cost.control_matrix @ u)
    return float(track + penalty)


def solve_truth_linear(problem: ProblemDef, mu) -> OCPSolution:
    mu = problem.validate_mu(mu)
    sol = solve_one_shot(assemble_kkt_linear(problem, mu))
    sol.mu = mu
    sol.cost = evaluate_cost(problem, sol)
    return sol


def _tensor_offsets(problem: ProblemDef):
    tri = problem.trilinear
    nx = problem.x_layout.size
    return (problem.x_layout.slice_of(tri.arg1).start,
            problem.x_layout.slice_of(tri.arg2).start,
            nx + problem.p_layout.slice_of(tri.test).start)


def kkt_residual_vector(problem: ProblemDef, mu, z: np.ndarray,
                        system: BlockSystem | None = None) -> np.ndarray:
    """Gradient of the discrete Lagrangian at the packed point ``z``."""
    if system is None:
        system = _assemble_blocks(problem, mu)
    nx = system.x_layout.size
    x, p = z[:nx], z[nx:]
    res = np.concatenate([
        system.a_block @ x + system.b_block.T @ p - system.f,
        system.b_block @ x - system.g,
    ])
    if problem.trilinear is not None:
        tri = problem.trilinear
        theta_t = problem.theta(mu)["trilinear"]
        o1, o2, o3 = _tensor_offsets(problem)
        n1, n2, n3 = tri.form.shape
        v1 = z[o1:o1 + n1]
        v2 = z[o2:o2 + n2]
        v3 = z[o3:o3 + n3]
        res[o1:o1 + n1] += theta_t * (tri.form.contract_third(v3) @ v2)
        res[o2:o2 + n2] += theta_t * (tri.form.contract_first(v1) @ v3)
        res[o3:o3 + n3] += theta_t * tri.form.apply_last(v1, v2)
    return res


def kkt_residual(problem: ProblemDef, mu, sol) -> float:
    """Euclidean norm of the full optimality residual at a solution."""
    mu = np.asarray(mu, dtype=float)
    fields = sol.fields if isinstance(sol, OCPSolution) else sol
    z = np.concatenate([problem.x_layout.join(fields), problem.p_layout.join(fields)])
    if z.shape[0] != problem.truth_dimension:
        raise ValueError("solution dimensions do not match the problem layout")
    return float(np.linalg.norm(kkt_residual_vector(problem, mu, z)))


def newton_matrix(problem: ProblemDef, mu, z: np.ndarray,
                  system: BlockSystem | None = None) -> sp.csc_matrix:
    """Lagrangian Hessian (symmetric) at the packed point ``z``."""
    if system is None:
        system = _assemble_blocks(problem, mu)
    kkt = system.kkt_matrix()
    if problem.trilinear is None:
        return kkt.tocsc()
    tri = problem.trilinear
    theta_t = problem.theta(mu)["trilinear"]
    o1, o2, o3 = _tensor_offsets(problem)
    n1, n2, n3 = tri.form.shape
    blocks = [
        (o1, o2, theta_t * tri.form.contract_third(z[o3:o3 + n3])),
        (o1, o3, theta_t * tri.form.contract_second(z[o2:o2 + n2])),
        (o2, o3, theta_t * tri.form.contract_first(z[o1:o1 + n1])),
    ]
    rows, cols, vals = [], [], []
    for r0, c0, mat in blocks:
        coo = mat.tocoo()
        rows.extend([r0 + coo.row, c0 + coo.col])
        cols.extend([c0 + coo.col, r0 + coo.row])
        vals.extend([coo.data, coo.data])
    correction = sp.coo_matrix((np.concatenate(vals),
                                (np.concatenate(rows), np.concatenate(cols))),
                               shape=kkt.shape)
    return (kkt + correction).tocsc()


def solve_truth_nonlinear(problem: ProblemDef, mu, guess: OCPSolution | None = None,
                          atol: float = NEWTON_ATOL, rtol: float = NEWTON_RTOL,
                          max_iter: int = NEWTON_MAX_ITER) -> OCPSolution:
    """Newton iteration on the full optimality system.

    Starts from the solution of the problem with the trilinear coupling
    dropped unless a ``guess`` is supplied.  Converges when the residual
    norm falls below ``atol`` or drops by ``rtol`` relative to the first
    iterate.
    """
    if problem.trilinear is None:
        raise SolverError("solve_truth_nonlinear requires a trilinear term; "
                          "use solve_truth_linear")
    mu = problem.validate_mu(mu)
    system = _assemble_blocks(problem, mu)
    if guess is None:
        guess = solve_one_shot(system)
    z = guess.pack(problem.x_layout, problem.p_layout)

    residuals = []
    for iteration in range(max_iter):
        res = kkt_residual_vector(problem, mu, z, system)
        rnorm = float(np.linalg.norm(res))
        residuals.append(rnorm)
        if rnorm <= max(atol, rtol * residuals[0]):
            fields = problem.x_layout.split(z[:problem.x_layout.size])
            fields.update(problem.p_layout.split(z[problem.x_layout.size:]))
            sol = OCPSolution(fields=fields, mu=mu, iterations=iteration,
                              residuals=residuals)
            sol.cost = evaluate_cost(problem, sol)
            return sol
        jac = newton_matrix(problem, mu, z, system)
        try:
            z = z - spla.splu(jac).solve(res)
        except RuntimeError as exc:
            raise SolverError(f"Newton Jacobian factorization failed: {exc}") from exc
    raise IterationError(
        f"Newton did not converge in {max_iter} iterations "
        f"(last residual {residuals[-1]:.3e})", residuals)


def solve_truth(problem: ProblemDef, mu, guess: OCPSolution | None = None,
                **newton_options) -> OCPSolution:
    """Dispatch to the one-shot or Newton solve as the problem requires.

    ``newton_options`` (``atol``, ``rtol``, ``max_iter``) tune the Newton
    iteration and are ignored for linear problems.
    """
    if problem.is_nonlinear:
        return solve_truth_nonlinear(problem, mu, guess, **newton_options)
    return solve_truth_linear(problem, mu)


def cost_at_control(problem: ProblemDef, mu, control_values) -> float:
    """Cost of the state reached from a fixed control (state solve inside)."""
    fields = solve_state(problem, mu, control_values, enforce_box=False)
    fields[problem.control] = np.atleast_1d(np.asarray(control_values, dtype=float))
    return evaluate_cost(problem, fields)


def control_gradient(problem: ProblemDef, mu, control_values):
    """Adjoint-based gradient of the control-to-cost map.

    Returns ``(cost, gradient)`` with the gradient over control dofs,
    computed by one state solve and one adjoint solve.
    """
    mu = np.asarray(mu, dtype=float)
    u = np.atleast_1d(np.asarray(control_values, dtype=float))
    state = solve_state(problem, mu, u, enforce_box=False)
    fields = dict(state)
    fields[problem.control] = u

    layout = problem.x_layout
    state_names = problem.state_fields()
    state_layout = BlockLayout(tuple((n, s) for n, s in layout.fields
                                     if n != problem.control))
    state_idx = np.concatenate([np.arange(layout.size)[layout.slice_of(n)]
                                for n in state_names])
    b_full = assemble_constraint(problem, mu)
    b_state = b_full[:, state_idx].tocsr()
    b_ctrl = b_full[:, layout.slice_of(problem.control)]

    if problem.trilinear is not None:
        tri = problem.trilinear
        theta_t = problem.theta(mu)["trilinear"]
        a1 = state_layout.slice_of(tri.arg1)
        a2 = state_layout.slice_of(tri.arg2)
        test = problem.p_layout.slice_of(tri.test)
        xs = state_layout.join(state)
        d1 = (theta_t * tri.form.contract_second(xs[a2]).T).tocoo()
        d2 = (theta_t * tri.form.contract_first(xs[a1]).T).tocoo()
        correction = sp.coo_matrix(
            (np.concatenate([d1.data, d2.data]),
             (np.concatenate([test.start + d1.row, test.start + d2.row]),
              np.concatenate([a1.start + d1.col, a2.start + d2.col]))),
            shape=b_state.shape)
        b_state = (b_state + correction).tocsr()

    # adjoint equation: (d residual / d state)' p = -dJ/dstate
    cost_grad = np.zeros(state_layout.size)
    obs = problem.cost
    y = state[obs.observed]
    cost_grad[state_layout.slice_of(obs.observed)] = obs.obs_matrix @ y - obs.linear
    p = spla.splu(b_state.T.tocsc()).solve(-cost_grad)

    if np.isscalar(obs.control_matrix) or isinstance(obs.control_matrix, float):
        penalty_grad = obs.alpha * float(obs.control_matrix) * u
    else:
        penalty_grad = obs.alpha * (obs.control_matrix @ u)
    grad = penalty_grad + b_ctrl.T @ p
    return evaluate_cost(problem, fields), np.asarray(grad).ravel()
