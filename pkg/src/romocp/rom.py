"""Aggregated reduced spaces, offline projection, and online solves.

The reduced space of each state field is spanned jointly by its own
modes and its adjoint partner's modes (this aggregation is what keeps
the reduced saddle point solvable), the two fields of a pair share one
block.  Offline, every affine operator is projected once; online, a
small dense system is combined and solved per parameter query.

Aggregated blocks interleave state and adjoint modes, so the leading
``2n`` columns span the aggregation of the first ``n`` modes of each;
:func:`sub_cache` exploits this to cut a trained cache down to any
smaller basis count without touching full-order quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import IterationError, ParameterDomainError, SolverError
from .pod import apply_ip, ip_norm, orthonormalize
from .problems import BlockLayout, ProblemDef, evaluate_theta

REDUCED_LINEAR_RTOL = 1e-11
REDUCED_NEWTON_ATOL = 1e-10
REDUCED_NEWTON_RTOL = 1e-12
REDUCED_NEWTON_MAX_ITER = 25


@dataclass(frozen=True)
class AggregatedBasis:
    """Per-field basis blocks after state/adjoint aggregation.

    ``blocks`` maps every field name to its basis matrix; the two fields
    of an aggregation pair reference the same matrix.  ``x_layout`` and
    ``p_layout`` give the reduced block sizes.
    """

    blocks: dict
    basis_count: int
    x_layout: BlockLayout
    p_layout: BlockLayout
    scalar_fields: frozenset

    @property
    def reduced_dimension(self) -> int:
        return self.x_layout.size + self.p_layout.size


def aggregate_spaces(pod_bases: dict, n: int, problem: ProblemDef) -> AggregatedBasis:
    """Join state and adjoint modes into shared per-pair blocks.

    Interleaves the first ``n`` modes of each partner and re-orthonormalizes
    in the pair's inner product; near-parallel state/adjoint modes would
    shrink the block below ``2n`` and abort, since downstream dimension
    bookkeeping relies on exact block sizes.
    """
    if n < 1:
        raise ValueError("basis count must be >= 1")
    blocks: dict = {}
    x_fields = []
    p_fields = []
    for state_name, adjoint_name in problem.aggregation_pairs:
        for name in (state_name, adjoint_name):
            if pod_bases[name].retained < n:
                raise SolverError(
                    f"basis for field {name!r} holds {pod_bases[name].retained} "
                    f"vectors, {n} requested")
        state = pod_bases[state_name].vectors[:, :n]
        adjoint = pod_bases[adjoint_name].vectors[:, :n]
        interleaved = np.empty((state.shape[0], 2 * n))
        interleaved[:, 0::2] = state
        interleaved[:, 1::2] = adjoint
        block, _ = orthonormalize(interleaved, problem.inner_products[state_name],
                                     drop_tol=1e-13)
        if block.shape[1] != 2 * n:
            raise SolverError(
                f"aggregation of {state_name}/{adjoint_name} lost "
                f"{2 * n - block.shape[1]} directions to near-parallel modes")
        blocks[state_name] = block
        blocks[adjoint_name] = block

    scalar_fields = set()
    control = problem.control
    ctrl_basis = pod_bases[control]
    if ctrl_basis.scalar:
        blocks[control] = np.ones((1, 1))
        scalar_fields.add(control)
    else:
        if ctrl_basis.retained < n:
            raise SolverError(f"control basis holds {ctrl_basis.retained} vectors, "
                              f"{n} requested")
        blocks[control] = ctrl_basis.vectors[:, :n]

    for name, _ in problem.x_layout.fields:
        x_fields.append((name, blocks[name].shape[1]))
    for name, _ in problem.p_layout.fields:
        p_fields.append((name, blocks[name].shape[1]))
    return AggregatedBasis(blocks=blocks, basis_count=n,
                           x_layout=BlockLayout(tuple(x_fields)),
                           p_layout=BlockLayout(tuple(p_fields)),
                           scalar_fields=frozenset(scalar_fields))


@dataclass(frozen=True)
class ReducedCostData:
    obs_matrix: np.ndarray
    linear: np.ndarray
    constant: float
    control_matrix: np.ndarray
    alpha: float


@dataclass(frozen=True)
class ReducedCache:
    """Parameter-independent reduced quantities of one trained problem."""

    kind: str
    problem_config: dict
    parameter_box: np.ndarray
    basis: AggregatedBasis
    a_terms: tuple
    b_terms: tuple
    f_terms: tuple
    g_terms: tuple
    tensor: np.ndarray | None
    tensor_fields: tuple | None  # (arg1, arg2, test)
    cost: ReducedCostData
    grams: dict
    training_parameters: np.ndarray
    truth_layout: dict
    observed_field: str = "y"
    control_field: str = "u"
    mesh_arrays: dict | None = None

    def __post_init__(self):
        # caches may be read by any number of concurrent online solves
        object.__setattr__(self, "parameter_box",
                           np.asarray(self.parameter_box, dtype=float).reshape(-1, 2))
        arrays = [self.parameter_box, self.training_parameters,
                  self.cost.obs_matrix, self.cost.linear, self.cost.control_matrix,
                  *self.a_terms, *self.b_terms, *self.f_terms, *self.g_terms,
                  *self.grams.values(), *self.basis.blocks.values()]
        if self.tensor is not None:
            arrays.append(self.tensor)
        if self.mesh_arrays:
            arrays.extend(self.mesh_arrays.values())
        for arr in arrays:
            if isinstance(arr, np.ndarray):
                arr.flags.writeable = False

    @property
    def basis_count(self) -> int:
        return self.basis.basis_count

    @property
    def reduced_dimension(self) -> int:
        return self.basis.reduced_dimension

    @property
    def is_nonlinear(self) -> bool:
        return self.tensor is not None

    def theta(self, mu) -> dict:
        return evaluate_theta(self.kind, mu, self.problem_config)

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


@dataclass
class ReducedSolution:
    coefficients: dict
    mu: np.ndarray
    cost: float | None = None
    iterations: int = 0
    residuals: list = field(default_factory=list)


def _block_diag_basis(basis: AggregatedBasis, layout: BlockLayout,
                      full_layout: BlockLayout) -> np.ndarray:
    total_rows = full_layout.size
    total_cols = layout.size
    out = np.zeros((total_rows, total_cols))
    for name, _ in layout.fields:
        rows = full_layout.slice_of(name)
        cols = layout.slice_of(name)
        out[rows, cols] = basis.blocks[name]
    return out


def project_affine(problem: ProblemDef, basis: AggregatedBasis) -> ReducedCache:
    """Project every affine operator once; the result is immutable and
    sufficient for online solves, reconstruction, and error reporting."""
    px = _block_diag_basis(basis, basis.x_layout, problem.x_layout)
    pp = _block_diag_basis(basis, basis.p_layout, problem.p_layout)

    a_terms = tuple(px.T @ (op @ px) for op in problem.a_ops)
    b_terms = tuple(pp.T @ (op @ px) for op in problem.b_ops)
    f_terms = tuple(px.T @ vec for vec in problem.f_ops)
    g_terms = tuple(pp.T @ vec for vec in problem.g_ops)

    tensor = None
    tensor_fields = None
    if problem.trilinear is not None:
        tri = problem.trilinear
        tensor = tri.form.project(basis.blocks[tri.arg1], basis.blocks[tri.arg2],
                                  basis.blocks[tri.test])
        tensor_fields = (tri.arg1, tri.arg2, tri.test)

    cost = problem.cost
    v_obs = basis.blocks[cost.observed]
    v_ctrl = basis.blocks[cost.control]
    if np.isscalar(cost.control_matrix):
        ctrl_reduced = np.array([[float(cost.control_matrix)]])
    else:
        ctrl_reduced = v_ctrl.T @ (cost.control_matrix @ v_ctrl)
    reduced_cost = ReducedCostData(
        obs_matrix=v_obs.T @ (cost.obs_matrix @ v_obs),
        linear=v_obs.T @ cost.linear,
        constant=cost.constant,
        control_matrix=ctrl_reduced,
        alpha=cost.alpha)

    grams = {}
    for name in {n for n, _ in basis.x_layout.fields} | {n for n, _ in basis.p_layout.fields}:
        block = basis.blocks[name]
        grams[name] = block.T @ apply_ip(problem.inner_products[name], block)

    return ReducedCache(
        kind=problem.kind, problem_config=dict(problem.config),
        parameter_box=np.array(problem.parameter_box),
        basis=basis, a_terms=a_terms, b_terms=b_terms,
        f_terms=f_terms, g_terms=g_terms,
        tensor=tensor, tensor_fields=tensor_fields,
        cost=reduced_cost, grams=grams,
        training_parameters=np.empty((0, problem.parameter_box.shape[0])),
        truth_layout={name: size for name, size in
                      problem.x_layout.fields + problem.p_layout.fields},
        observed_field=problem.observed, control_field=problem.control)


def sub_cache(cache: ReducedCache, n: int) -> ReducedCache:
    """Restrict a trained cache to its leading ``n`` modes per field."""
    if n == cache.basis_count:
        return cache
    if not 1 <= n <= cache.basis_count:
        raise ValueError(f"sub-basis count {n} outside 1..{cache.basis_count}")
    basis = cache.basis

    def field_width(name, width):
        if name in basis.scalar_fields:
            return width
        return (2 * n) if width == 2 * basis.basis_count else n

    x_fields = tuple((name, field_width(name, w)) for name, w in basis.x_layout.fields)
    p_fields = tuple((name, field_width(name, w)) for name, w in basis.p_layout.fields)
    blocks = {}
    for name, width in x_fields + p_fields:
        blocks[name] = basis.blocks[name][:, :width]
    small = AggregatedBasis(blocks=blocks, basis_count=n,
                            x_layout=BlockLayout(x_fields),
                            p_layout=BlockLayout(p_fields),
                            scalar_fields=basis.scalar_fields)

    def indices(layout, small_layout):
        idx = []
        for name, width in small_layout.fields:
            start = layout.slice_of(name).start
            idx.extend(range(start, start + width))
        return np.array(idx, dtype=int)

    ix = indices(basis.x_layout, small.x_layout)
    ip_ = indices(basis.p_layout, small.p_layout)

    tensor = cache.tensor
    if tensor is not None:
        a1, a2, test = cache.tensor_fields
        w1 = small.x_layout.slice_of(a1).stop - small.x_layout.slice_of(a1).start
        w2 = small.x_layout.slice_of(a2).stop - small.x_layout.slice_of(a2).start
        w3 = small.p_layout.slice_of(test).stop - small.p_layout.slice_of(test).start
        tensor = tensor[:w1, :w2, :w3]

    def cut_obs(mat_or_vec, width):
        if mat_or_vec.ndim == 1:
            return mat_or_vec[:width]
        return mat_or_vec[:width, :width]

    cost = cache.cost
    obs_field = _observed_field(cache)
    ctrl_field = _control_field(cache)
    w_obs = dict(x_fields + p_fields)[obs_field]
    w_ctrl = dict(x_fields)[ctrl_field]
    reduced_cost = ReducedCostData(
        obs_matrix=cut_obs(cost.obs_matrix, w_obs),
        linear=cut_obs(cost.linear, w_obs),
        constant=cost.constant,
        control_matrix=cut_obs(cost.control_matrix, w_ctrl),
        alpha=cost.alpha)

    grams = {name: cache.grams[name][:dict(x_fields + p_fields)[name],
                                     :dict(x_fields + p_fields)[name]]
             for name in cache.grams}

    return replace(cache, basis=small,
                   a_terms=tuple(t[np.ix_(ix, ix)] for t in cache.a_terms),
                   b_terms=tuple(t[np.ix_(ip_, ix)] for t in cache.b_terms),
                   f_terms=tuple(t[ix] for t in cache.f_terms),
                   g_terms=tuple(t[ip_] for t in cache.g_terms),
                   tensor=tensor, cost=reduced_cost, grams=grams)


def _observed_field(cache: ReducedCache) -> str:
    return cache.observed_field


def _control_field(cache: ReducedCache) -> str:
    return cache.control_field


def combine_terms(theta, terms):
    out = theta[0] * terms[0]
    for coeff, term in zip(theta[1:], terms[1:]):
        out = out + coeff * term
    return out


def assemble_reduced_kkt(cache: ReducedCache, mu):
    """Dense reduced saddle-point matrix and right-hand side (linear part)."""
    theta = cache.theta(mu)
    nx = cache.basis.x_layout.size
    npp = cache.basis.p_layout.size
    a_r = combine_terms(theta["a"], cache.a_terms)
    b_r = combine_terms(theta["b"], cache.b_terms)
    kkt = np.zeros((nx + npp, nx + npp))
    kkt[:nx, :nx] = a_r
    kkt[:nx, nx:] = b_r.T
    kkt[nx:, :nx] = b_r
    rhs = np.zeros(nx + npp)
    if cache.f_terms:
        rhs[:nx] = combine_terms(theta["f"], cache.f_terms)
    if cache.g_terms:
        rhs[nx:] = combine_terms(theta["g"], cache.g_terms)
    return kkt, rhs


def _split_solution(cache: ReducedCache, z: np.ndarray) -> dict:
    nx = cache.basis.x_layout.size
    coeffs = cache.basis.x_layout.split(z[:nx])
    coeffs.update(cache.basis.p_layout.split(z[nx:]))
    return coeffs


def reduced_cost(cache: ReducedCache, coefficients: dict) -> float:
    cost = cache.cost
    y = coefficients[_observed_field(cache)]
    u = coefficients[_control_field(cache)]
    return float(0.5 * y @ (cost.obs_matrix @ y) - cost.linear @ y + cost.constant
                 + 0.5 * cost.alpha * u @ (cost.control_matrix @ u))


def solve_reduced_linear(cache: ReducedCache, mu) -> ReducedSolution:
    """One online query of a linear problem: combine and solve densely."""
    if cache.is_nonlinear:
        raise SolverError("cache carries a trilinear tensor; use solve_reduced_newton")
    mu = cache.validate_mu(mu)
    return _solve_linear_part(cache, mu)


def _solve_linear_part(cache: ReducedCache, mu) -> ReducedSolution:
    kkt, rhs = assemble_reduced_kkt(cache, mu)
    try:
        z = scipy.linalg.solve(kkt, rhs)
    except scipy.linalg.LinAlgError as exc:
        raise SolverError(
            f"reduced saddle-point system singular at mu={np.asarray(mu).tolist()} "
            "(aggregation of the reduced spaces may have been bypassed)") from exc
    scale = max(np.linalg.norm(rhs), 1e-300)
    rel = np.linalg.norm(kkt @ z - rhs) / scale
    if rel > REDUCED_LINEAR_RTOL:
        raise SolverError(f"reduced solve residual {rel:.3e} above {REDUCED_LINEAR_RTOL:.1e}")
    coeffs = _split_solution(cache, z)
    return ReducedSolution(coefficients=coeffs, mu=np.asarray(mu, dtype=float),
                           cost=reduced_cost(cache, coeffs), iterations=1,
                           residuals=[rel])


def _tensor_slices(cache: ReducedCache):
    a1, a2, test = cache.tensor_fields
    nx = cache.basis.x_layout.size
    s1 = cache.basis.x_layout.slice_of(a1)
    s2 = cache.basis.x_layout.slice_of(a2)
    s3 = cache.basis.p_layout.slice_of(test)
    return s1, s2, slice(nx + s3.start, nx + s3.stop)


def reduced_residual(cache: ReducedCache, mu, z: np.ndarray,
                     kkt=None, rhs=None) -> np.ndarray:
    if kkt is None:
        kkt, rhs = assemble_reduced_kkt(cache, mu)
    res = kkt @ z - rhs
    if cache.tensor is not None:
        theta_t = cache.theta(mu)["trilinear"]
        s1, s2, s3 = _tensor_slices(cache)
        v1, v2, v3 = z[s1], z[s2], z[s3]
        res[s1] += theta_t * np.einsum("abc,b,c->a", cache.tensor, v2, v3)
        res[s2] += theta_t * np.einsum("abc,a,c->b", cache.tensor, v1, v3)
        res[s3] += theta_t * np.einsum("abc,a,b->c", cache.tensor, v1, v2)
    return res


def solve_reduced_newton(cache: ReducedCache, mu, guess: ReducedSolution | None = None,
                         atol: float = REDUCED_NEWTON_ATOL,
                         rtol: float = REDUCED_NEWTON_RTOL,
                         max_iter: int = REDUCED_NEWTON_MAX_ITER) -> ReducedSolution:
    """Online Newton solve; each step costs one dense solve plus tensor
    contractions of the reduced size."""
    if cache.tensor is None:
        raise SolverError("cache has no trilinear tensor; use solve_reduced_linear")
    mu = cache.validate_mu(mu)
    kkt, rhs = assemble_reduced_kkt(cache, mu)
    if guess is None:
        guess = _solve_linear_part(cache, mu)
    nx = cache.basis.x_layout.size
    z = np.concatenate([cache.basis.x_layout.join(guess.coefficients),
                        cache.basis.p_layout.join(guess.coefficients)])

    theta_t = cache.theta(mu)["trilinear"]
    s1, s2, s3 = _tensor_slices(cache)
    residuals = []
    for iteration in range(max_iter):
        res = reduced_residual(cache, mu, z, kkt, rhs)
        rnorm = float(np.linalg.norm(res))
        residuals.append(rnorm)
        if rnorm <= max(atol, rtol * residuals[0]):
            coeffs = _split_solution(cache, z)
            return ReducedSolution(coefficients=coeffs, mu=mu,
                                   cost=reduced_cost(cache, coeffs),
                                   iterations=iteration, residuals=residuals)
        jac = kkt.copy()
        h12 = theta_t * np.einsum("abc,c->ab", cache.tensor, z[s3])
        h13 = theta_t * np.einsum("abc,b->ac", cache.tensor, z[s2])
        h23 = theta_t * np.einsum("abc,a->bc", cache.tensor, z[s1])
        jac[s1, s2] += h12
        jac[s2, s1] += h12.T
        jac[s1, s3] += h13
        jac[s3, s1] += h13.T
        jac[s2, s3] += h23
        jac[s3, s2] += h23.T
        try:
            z = z - scipy.linalg.solve(jac, res)
        except scipy.linalg.LinAlgError as exc:
            raise SolverError("reduced Newton matrix singular") from exc
    raise IterationError(
        f"reduced Newton did not converge in {max_iter} iterations "
        f"(last residual {residuals[-1]:.3e})", residuals)


def solve_reduced(cache: ReducedCache, mu, guess: ReducedSolution | None = None,
                  **newton_options) -> ReducedSolution:
    if cache.is_nonlinear:
        return solve_reduced_newton(cache, mu, guess, **newton_options)
    return solve_reduced_linear(cache, mu)


def reconstruct(basis: AggregatedBasis, rsol: ReducedSolution | dict) -> dict:
    """Expand reduced coefficients into full-order coefficient vectors."""
    coeffs = rsol.coefficients if isinstance(rsol, ReducedSolution) else rsol
    return {name: basis.blocks[name] @ np.asarray(coeffs[name], dtype=float)
            for name in coeffs}


def rom_error(truth, reconstructed: dict, norms: dict) -> dict:
    """Per-field norms of truth minus reconstruction.

    ``norms`` maps field names to Gram matrices (or scalar weights; scalar
    controls compare by weighted absolute difference).
    """
    fields = truth.fields if hasattr(truth, "fields") else truth
    out = {}
    for name, norm in norms.items():
        diff = np.atleast_1d(np.asarray(fields[name], dtype=float)) \
            - np.atleast_1d(np.asarray(reconstructed[name], dtype=float))
        out[name] = ip_norm(norm, diff)
    return out


def reduced_infsup(cache: ReducedCache, mu) -> float:
    """Compatibility constant of the reduced constraint block at ``mu``:
    the smallest generalized singular value against the reduced solution
    and adjoint Gram matrices.  Zero signals a rank-deficient block."""
    theta = cache.theta(mu)["b"]
    b_r = combine_terms(theta, cache.b_terms)

    def gram(layout):
        blocks = [cache.grams[name][:w, :w] for name, w in layout.fields]
        return scipy.linalg.block_diag(*blocks)

    lx = scipy.linalg.cholesky(gram(cache.basis.x_layout), lower=True)
    lp = scipy.linalg.cholesky(gram(cache.basis.p_layout), lower=True)
    weighted = scipy.linalg.solve_triangular(lp, b_r, lower=True)
    weighted = scipy.linalg.solve_triangular(lx, weighted.T, lower=True).T
    svals = scipy.linalg.svdvals(weighted)
    rows, cols = weighted.shape
    if rows > cols:  # structurally rank deficient: inf over a taller test space
        return 0.0
    return float(svals.min()) if svals.size else 0.0
