"""Snapshot compression by proper orthogonal decomposition.

Each variable's snapshots are compressed through the eigendecomposition
of their correlation matrix in that variable's inner product; the
partitioned driver runs one decomposition per variable, the monolithic
driver stacks all variables and runs a single one (kept for comparison
studies).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import SolverError

EIGENVALUE_CLIP = -1e-12
# numerical-rank floor of the correlation eigenvalues, relative to the
# leading one; entries of the correlation matrix carry round-off of order
# eps * lambda_1, so eigenvalues below a small multiple of that are ghosts
RANK_RTOL = 5e-15


def apply_ip(ip, mat):
    """Apply an inner-product operator (sparse matrix or scalar weight)."""
    if sp.issparse(ip):
        return ip @ mat
    return float(ip) * np.asarray(mat)


def ip_norm(ip, vec) -> float:
    return float(np.sqrt(max(vec @ apply_ip(ip, vec), 0.0)))


@dataclass(frozen=True)
class PodBasis:
    """Orthonormal basis columns with the full eigenvalue spectrum attached.

    ``vectors`` has one column per retained mode, orthonormal in the
    variable's inner product; ``eigenvalues`` keeps all M values in
    descending order (negatives clipped to zero).  ``rank_deficient`` is
    set when fewer independent directions than requested exist.
    """

    vectors: np.ndarray
    eigenvalues: np.ndarray
    retained: int
    rank_deficient: bool = False
    scalar: bool = False


@dataclass(frozen=True)
class SnapshotSet:
    """Per-variable truth snapshots over one training set.

    ``variables`` maps a name to an ``(n_var, M)`` array (scalar variables
    use ``n_var == 1``); ``inner_products`` supplies the Gram operator per
    variable (a scalar weight for scalar variables).
    """

    variables: dict
    inner_products: dict
    training_parameters: np.ndarray
    scalar_variables: frozenset = frozenset()

    def __post_init__(self):
        counts = {name: arr.shape[1] for name, arr in self.variables.items()}
        if len(set(counts.values())) > 1:
            raise ValueError(f"inconsistent snapshot counts {counts}")
        if self.count < 1:
            raise ValueError("need at least one snapshot")

    @property
    def count(self) -> int:
        return next(iter(self.variables.values())).shape[1]

    @property
    def names(self) -> tuple:
        return tuple(self.variables)


def compute_correlation(snaps: np.ndarray, ip) -> np.ndarray:
    """Correlation matrix ``C[m, q] = (s_m, s_q)_ip / M`` of a snapshot
    family given as columns of ``snaps``."""
    snaps = np.asarray(snaps, dtype=float)
    if snaps.ndim != 2:
        raise ValueError("snapshots must form an (n, M) array")
    m = snaps.shape[1]
    corr = snaps.T @ apply_ip(ip, snaps) / m
    return 0.5 * (corr + corr.T)


def orthonormalize(vectors: np.ndarray, ip, drop_tol: float = 1e-12):
    """Modified Gram-Schmidt in the given inner product.

    A second projection pass keeps orthonormality near machine precision;
    columns whose residual collapses below ``drop_tol`` of their original
    norm are discarded as dependent.  Returns ``(basis, kept_indices)``.
    """
    kept = []
    kept_idx = []
    for idx in range(vectors.shape[1]):
        v = np.array(vectors[:, idx], dtype=float)
        norm0 = ip_norm(ip, v)
        if norm0 == 0.0:
            continue
        for _ in range(2):
            for u in kept:
                v -= (u @ apply_ip(ip, v)) * u
        norm = ip_norm(ip, v)
        if norm <= drop_tol * norm0:
            continue
        kept.append(v / norm)
        kept_idx.append(idx)
    if not kept:
        return np.empty((vectors.shape[0], 0)), []
    return np.column_stack(kept), kept_idx


def pod_basis(corr: np.ndarray, snaps: np.ndarray, n_retain: int, ip,
              rank_rtol: float = RANK_RTOL) -> PodBasis:
    """Dominant eigenspace basis of one variable's snapshot family.

    The requested number of leading eigenvectors is combined with the
    snapshots and re-orthonormalized in the inner product (the raw
    eigenvector combination is not unit length unless the eigenvalue is
    one).  Requests beyond the rank (eigenvalues at or below ``rank_rtol``
    of the leading one) return rank-many vectors with the
    ``rank_deficient`` flag set; ``rank_rtol=0`` keeps every direction
    with a strictly positive eigenvalue, which is what full-retention
    pipelines need when the spectrum bottoms out at round-off.
    """
    snaps = np.asarray(snaps, dtype=float)
    m = snaps.shape[1]
    if not 1 <= n_retain <= m:
        raise ValueError(f"retained count {n_retain} outside 1..{m}")
    if corr.shape != (m, m):
        raise ValueError("correlation matrix does not match the snapshot count")
    eigvals, eigvecs = np.linalg.eigh(corr)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    if eigvals.size and eigvals[-1] < EIGENVALUE_CLIP * max(eigvals[0], 1.0):
        raise SolverError(f"correlation matrix indefinite: min eigenvalue {eigvals[-1]:.3e}")
    eigvals = np.clip(eigvals, 0.0, None)
    if eigvals[0] <= 0.0:
        rank = 0  # identically zero snapshot family
    elif rank_rtol <= 0.0:
        rank = m  # full retention: let orthonormalization drop exact zeros
    else:
        rank = int(np.count_nonzero(eigvals > rank_rtol * eigvals[0]))
    candidates = snaps @ eigvecs[:, order[:min(n_retain, rank)]]
    basis, kept = orthonormalize(candidates, ip)
    return PodBasis(vectors=basis, eigenvalues=eigvals, retained=basis.shape[1],
                    rank_deficient=basis.shape[1] < n_retain)


def pod_partitioned(snapshots: SnapshotSet, n_retain: int,
                    rank_rtol: float = 0.0) -> dict:
    """One POD per variable; scalar variables pass through unreduced.

    Defaults to full retention of requested modes (``rank_rtol=0``): the
    training pipelines ask for a fixed mode count per variable and expect
    to get it even where a smooth manifold's spectrum has reached the
    round-off floor.
    """
    out = {}
    for name, snaps in snapshots.variables.items():
        ip = snapshots.inner_products[name]
        if name in snapshots.scalar_variables:
            corr = compute_correlation(snaps, ip)
            eigvals = np.sort(np.clip(np.linalg.eigvalsh(corr), 0.0, None))[::-1]
            out[name] = PodBasis(vectors=np.ones((1, 1)), eigenvalues=eigvals,
                                 retained=1, scalar=True)
            continue
        n_var = min(n_retain, snapshots.count)
        out[name] = pod_basis(compute_correlation(snaps, ip), snaps, n_var, ip,
                              rank_rtol=rank_rtol)
    return out


def pod_monolithic(snapshots: SnapshotSet, n_retain: int, order=None) -> PodBasis:
    """Single POD over stacked variables with a block-diagonal inner product."""
    names = tuple(order) if order is not None else snapshots.names
    stacked = np.vstack([snapshots.variables[name] for name in names])
    blocks = []
    for name in names:
        ip = snapshots.inner_products[name]
        if sp.issparse(ip):
            blocks.append(ip)
        else:
            n_var = snapshots.variables[name].shape[0]
            blocks.append(float(ip) * sp.identity(n_var, format="csr"))
    block_ip = sp.block_diag(blocks, format="csr")
    corr = compute_correlation(stacked, block_ip)
    return pod_basis(corr, stacked, min(n_retain, snapshots.count), block_ip)


def split_monolithic(basis: PodBasis, snapshots: SnapshotSet, order=None) -> dict:
    """Per-variable blocks of a stacked basis (not individually orthonormal)."""
    names = tuple(order) if order is not None else snapshots.names
    out = {}
    offset = 0
    for name in names:
        n_var = snapshots.variables[name].shape[0]
        out[name] = basis.vectors[offset:offset + n_var, :]
        offset += n_var
    return out


def project_onto(basis_vectors: np.ndarray, ip, vecs: np.ndarray) -> np.ndarray:
    """Orthogonal-projection coefficients of columns of ``vecs``."""
    return basis_vectors.T @ apply_ip(ip, vecs)


def projection_error(basis_vectors: np.ndarray, ip, vecs: np.ndarray) -> np.ndarray:
    """Inner-product norms of the projection residual per column."""
    vecs = np.atleast_2d(np.asarray(vecs, dtype=float))
    if vecs.shape[0] != basis_vectors.shape[0]:
        vecs = vecs.T
    residual = vecs - basis_vectors @ project_onto(basis_vectors, ip, vecs)
    sq = np.einsum("im,im->m", residual, apply_ip(ip, residual))
    return np.sqrt(np.clip(sq, 0.0, None))
