"""P1 Lagrange spaces and sparse assembly on triangle meshes.

One degree of freedom per vertex; homogeneous Dirichlet conditions are
imposed by eliminating constrained vertices, so every assembled operator
acts on the free dofs of its space.  All integrals of P1 products are
evaluated with exact formulas (gradients are constant per triangle, mass
uses the analytic local matrix), which keeps assembled values free of
quadrature error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh


@dataclass(frozen=True)
class FeSpace:
    """P1 space on a mesh with a free/constrained dof split.

    ``free_dofs`` are the vertices not incident to any Dirichlet-labeled
    boundary edge; ``dimension`` is their count.  ``vertex_to_free`` maps
    vertex index to free index (-1 for constrained vertices).
    """

    mesh: Mesh
    dirichlet_labels: frozenset
    free_dofs: np.ndarray
    dirichlet_dofs: np.ndarray
    vertex_to_free: np.ndarray

    @property
    def dimension(self) -> int:
        return self.free_dofs.shape[0]

    @property
    def dof_coordinates(self) -> np.ndarray:
        return self.mesh.vertices[self.free_dofs]

    def expand(self, free_values: np.ndarray) -> np.ndarray:
        """Zero-padded vertex vector from free-dof coefficients."""
        full = np.zeros(self.mesh.num_vertices, dtype=float)
        full[self.free_dofs] = free_values
        return full

    def restrict(self, vertex_values: np.ndarray) -> np.ndarray:
        return np.asarray(vertex_values, dtype=float)[self.free_dofs]


def build_space(mesh: Mesh, dirichlet_labels=()) -> FeSpace:
    """Build the P1 space constrained on the given boundary labels."""
    labels = frozenset(int(l) for l in dirichlet_labels)
    present = set(int(l) for l in mesh.boundary_edges[:, 2])
    unknown = labels - present
    if unknown:
        raise KeyError(f"boundary labels {sorted(unknown)} not present on mesh")
    if labels:
        constrained = mesh.boundary_vertices(labels)
    else:
        constrained = np.empty(0, dtype=np.int64)
    mask = np.ones(mesh.num_vertices, dtype=bool)
    mask[constrained] = False
    free = np.nonzero(mask)[0]
    v2f = np.full(mesh.num_vertices, -1, dtype=np.int64)
    v2f[free] = np.arange(free.size)
    return FeSpace(mesh, labels, free, constrained, v2f)


def _triangle_geometry(mesh: Mesh):
    """Areas and constant P1 gradient components per triangle.

    Returns ``(areas, gx, gy)`` with ``gx[t, a] = d(phi_a)/dx`` on
    triangle ``t`` (and ``gy`` the y-derivative).
    """
    tri = mesh.triangles
    p = mesh.vertices[tri]  # (nt, 3, 2)
    x, y = p[:, :, 0], p[:, :, 1]
    areas = mesh.triangle_areas()
    two_a = 2.0 * areas
    gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / two_a[:, None]
    gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / two_a[:, None]
    return areas, gx, gy


def _scatter(space_rows: FeSpace, space_cols: FeSpace, local: np.ndarray, tri: np.ndarray):
    """Assemble per-triangle 3x3 blocks into a CSR matrix over free dofs."""
    rows = space_rows.vertex_to_free[np.repeat(tri, 3, axis=1).ravel()]
    cols = space_cols.vertex_to_free[np.tile(tri, (1, 3)).ravel()]
    vals = local.ravel()
    keep = (rows >= 0) & (cols >= 0)
    mat = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])),
                        shape=(space_rows.dimension, space_cols.dimension))
    return mat.tocsr()

# Local mass matrix for P1 on a triangle: area/12 * (1 + I).
_MASS_LOCAL = (np.ones((3, 3)) + np.eye(3)) / 12.0


def _region_mask(mesh: Mesh, region_label):
    if region_label is None:
        return np.ones(mesh.num_triangles, dtype=bool)
    mask = mesh.region_labels == int(region_label)
    if not mask.any():
        raise KeyError(f"no triangles carry region label {region_label}")
    return mask


def assemble_mass(space: FeSpace, region_label=None) -> sp.csr_matrix:
    """Mass matrix ``M[i, j] = integral(phi_i phi_j)``, optionally
    restricted to triangles with ``region_label``."""
    return assemble_mass_pair(space, space, region_label)


def assemble_mass_pair(test_space: FeSpace, trial_space: FeSpace,
                       region_label=None) -> sp.csr_matrix:
    """Rectangular mass matrix between two spaces on the same mesh."""
    mesh = test_space.mesh
    mask = _region_mask(mesh, region_label)
    tri = mesh.triangles[mask]
    areas = mesh.triangle_areas()[mask]
    local = areas[:, None, None] * _MASS_LOCAL[None, :, :]
    return _scatter(test_space, trial_space, local, tri)


def assemble_stiffness(space: FeSpace) -> sp.csr_matrix:
    """Stiffness matrix ``K[i, j] = integral(grad phi_i . grad phi_j)``."""
    mesh = space.mesh
    areas, gx, gy = _triangle_geometry(mesh)
    local = areas[:, None, None] * (gx[:, :, None] * gx[:, None, :]
                                    + gy[:, :, None] * gy[:, None, :])
    return _scatter(space, space, local, mesh.triangles)


def assemble_advection(space: FeSpace, direction: int) -> sp.csr_matrix:
    """First-derivative matrix ``D[i, j] = integral(d(phi_j)/dx_dir phi_i)``.

    ``direction`` is 1 or 2 for the two coordinates.
    """
    if direction not in (1, 2):
        raise ValueError(f"direction must be 1 or 2, got {direction}")
    mesh = space.mesh
    areas, gx, gy = _triangle_geometry(mesh)
    g = gx if direction == 1 else gy
    # integral over a triangle of (d phi_j) * phi_i = grad_j * area / 3
    local = np.broadcast_to(((areas / 3.0)[:, None] * g)[:, None, :],
                            (mesh.num_triangles, 3, 3))
    return _scatter(space, space, local, mesh.triangles)


def assemble_transport(space: FeSpace, nu: float, beta=(0.0, 0.0),
                       reaction: float = 0.0) -> sp.csr_matrix:
    """One-pass assembly of ``nu*stiffness + beta.grad advection + reaction*mass``.

    Serves as a direct-assembly route with coefficients baked in at the
    element level, independent of any cached affine combination.
    """
    mesh = space.mesh
    areas, gx, gy = _triangle_geometry(mesh)
    b1, b2 = float(beta[0]), float(beta[1])
    local = areas[:, None, None] * (
        nu * (gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :])
        + reaction * _MASS_LOCAL[None, :, :])
    adv = (b1 * gx + b2 * gy)  # (nt, 3) d(phi_j)/dbeta
    local += (areas[:, None] / 3.0)[:, :, None] * adv[:, None, :]
    return _scatter(space, space, local, mesh.triangles)


def assemble_region_load(space: FeSpace, region_label=None, return_full=False):
    """Load vector ``g[i] = integral over the region of phi_i``.

    Summed over all vertex hats this equals the region area; the returned
    vector is restricted to free dofs unless ``return_full``.
    """
    mesh = space.mesh
    mask = _region_mask(mesh, region_label)
    tri = mesh.triangles[mask]
    areas = mesh.triangle_areas()[mask]
    full = np.zeros(mesh.num_vertices)
    np.add.at(full, tri.ravel(), np.repeat(areas / 3.0, 3))
    if return_full:
        return full
    return full[space.free_dofs]


def norm_matrix(space: FeSpace, kind: str) -> sp.csr_matrix:
    """Gram matrix of the requested norm: ``"h1"`` (seminorm, equals the
    stiffness matrix) or ``"l2"`` (mass matrix)."""
    if kind == "h1":
        return assemble_stiffness(space)
    if kind == "l2":
        return assemble_mass(space)
    raise ValueError(f"unknown norm kind {kind!r}")


@dataclass(frozen=True)
class ThirdOrderForm:
    """Sparse trilinear form ``T[i,j,k] = integral(phi_i * jac(phi_j, phi_k))``
    with ``jac(a, b) = da/dy db/dx - da/dx db/dy``.

    Entries are stored as deduplicated COO triples.  The Jacobian bracket
    makes every entry antisymmetric in its last two slots.
    """

    shape: tuple
    i: np.ndarray
    j: np.ndarray
    k: np.ndarray
    vals: np.ndarray

    def contract_first(self, v) -> sp.csr_matrix:
        """Matrix ``A[j,k] = sum_i v[i] T[i,j,k]``."""
        return sp.coo_matrix((self.vals * v[self.i], (self.j, self.k)),
                             shape=self.shape[1:]).tocsr()

    def contract_second(self, v) -> sp.csr_matrix:
        """Matrix ``A[i,k] = sum_j v[j] T[i,j,k]``."""
        return sp.coo_matrix((self.vals * v[self.j], (self.i, self.k)),
                             shape=(self.shape[0], self.shape[2])).tocsr()

    def contract_third(self, v) -> sp.csr_matrix:
        """Matrix ``A[i,j] = sum_k v[k] T[i,j,k]``."""
        return sp.coo_matrix((self.vals * v[self.k], (self.i, self.j)),
                             shape=self.shape[:2]).tocsr()

    def apply_last(self, a, b) -> np.ndarray:
        """Vector ``r[k] = sum_{ij} a[i] b[j] T[i,j,k]``."""
        out = np.zeros(self.shape[2])
        np.add.at(out, self.k, self.vals * a[self.i] * b[self.j])
        return out

    def project(self, p1: np.ndarray, p2: np.ndarray, p3: np.ndarray) -> np.ndarray:
        """Dense reduced tensor ``That[a,b,c] = T(p1[:,a], p2[:,b], p3[:,c])``."""
        n1 = p1.shape[1]
        out = np.empty((n1, p2.shape[1], p3.shape[1]))
        for a in range(n1):
            m = self.contract_first(p1[:, a])
            out[a] = p2.T @ (m @ p3)
        return out


def assemble_trilinear(space: FeSpace) -> ThirdOrderForm:
    """Assemble the Jacobian-bracket trilinear form over free dofs.

    Per triangle the gradients are constant, so
    ``T[i,j,k] = area/3 * (cy_j*cx_k - cx_j*cy_k)`` for each local
    combination; entries sharing (i, j, k) across triangles are summed.
    """
    mesh = space.mesh
    areas, gx, gy = _triangle_geometry(mesh)
    tri_free = space.vertex_to_free[mesh.triangles]  # (nt, 3)

    bracket = gy[:, :, None] * gx[:, None, :] - gx[:, :, None] * gy[:, None, :]
    nt = mesh.num_triangles
    loc = np.arange(3)
    ii, jj, kk = np.meshgrid(loc, loc, loc, indexing="ij")
    i_idx = tri_free[:, ii.ravel()].ravel()
    j_idx = tri_free[:, jj.ravel()].ravel()
    k_idx = tri_free[:, kk.ravel()].ravel()
    vals = ((areas / 3.0)[:, None] * bracket[:, jj.ravel(), kk.ravel()]).ravel()

    keep = (i_idx >= 0) & (j_idx >= 0) & (k_idx >= 0) & (vals != 0.0)
    i_idx, j_idx, k_idx, vals = i_idx[keep], j_idx[keep], k_idx[keep], vals[keep]

    n = space.dimension
    lin = (i_idx * n + j_idx) * n + k_idx
    order = np.argsort(lin, kind="stable")
    lin, vals = lin[order], vals[order]
    uniq, start = np.unique(lin, return_index=True)
    summed = np.add.reduceat(vals, start) if vals.size else vals
    i_u = uniq // (n * n)
    j_u = (uniq // n) % n
    k_u = uniq % n
    nonzero = summed != 0.0
    return ThirdOrderForm((n, n, n), i_u[nonzero], j_u[nonzero], k_u[nonzero], summed[nonzero])
