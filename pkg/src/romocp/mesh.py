"""Structured triangulations of rectangles and a plain-text mesh format.

Meshes are conforming 2D triangulations with integer labels on boundary
edges (used for boundary conditions) and on triangles (used to mark
control / observation subdomains).  All meshes are immutable after
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MESH_FORMAT_HEADER = "romocp-mesh 1"


class MeshParseError(ValueError):
    """Malformed mesh file; carries the offending 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class MeshValidationError(ValueError):
    """A constructed mesh violates a structural invariant."""


@dataclass(frozen=True)
class Mesh:
    """Conforming triangulation with boundary and subdomain markers.

    Parameters
    ----------
    vertices : (nv, 2) float array
        Vertex coordinates (nondimensional).
    triangles : (nt, 3) int array
        Vertex indices, counterclockwise.
    boundary_edges : (ne, 3) int array
        Rows ``(i, j, label)``; each edge belongs to exactly one triangle.
    region_labels : (nt,) int array
        One subdomain label per triangle (0 = unmarked background).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    region_labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, dtype=float))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64))
        object.__setattr__(self, "boundary_edges", np.ascontiguousarray(self.boundary_edges, dtype=np.int64))
        object.__setattr__(self, "region_labels", np.ascontiguousarray(self.region_labels, dtype=np.int64))
        for arr in (self.vertices, self.triangles, self.boundary_edges, self.region_labels):
            arr.flags.writeable = False
        _validate(self)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    def triangle_areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)

    def boundary_vertices(self, labels=None) -> np.ndarray:
        """Sorted vertex indices touching boundary edges with the given labels
        (all boundary edges when ``labels`` is None)."""
        edges = self.boundary_edges
        if labels is not None:
            mask = np.isin(edges[:, 2], np.fromiter(labels, dtype=np.int64, count=-1))
            edges = edges[mask]
        return np.unique(edges[:, :2])


def _signed_areas(vertices, triangles):
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                  - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))


def _edge_key(a, b):
    return (a, b) if a < b else (b, a)


def _validate(mesh: Mesh):
    nv = mesh.vertices.shape[0]
    if mesh.vertices.ndim != 2 or mesh.vertices.shape[1] != 2:
        raise MeshValidationError("vertices must be an (nv, 2) array")
    if mesh.triangles.ndim != 2 or mesh.triangles.shape[1] != 3:
        raise MeshValidationError("triangles must be an (nt, 3) array")
    if mesh.triangles.size and (mesh.triangles.min() < 0 or mesh.triangles.max() >= nv):
        raise MeshValidationError("triangle vertex index out of range")
    if mesh.region_labels.shape != (mesh.triangles.shape[0],):
        raise MeshValidationError("region_labels must have one entry per triangle")

    areas = _signed_areas(mesh.vertices, mesh.triangles)
    bad = np.nonzero(areas <= 0.0)[0]
    if bad.size:
        raise MeshValidationError(
            f"triangle {bad[0]} has non-positive signed area {areas[bad[0]]:.3e} "
            "(vertices must be counterclockwise)")

    # Edge usage count across triangles: boundary edges are exactly those
    # used by one triangle.
    count: dict[tuple[int, int], int] = {}
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = _edge_key(int(a), int(b))
            count[key] = count.get(key, 0) + 1
    topological = {k for k, c in count.items() if c == 1}

    declared = set()
    for i, j, _label in mesh.boundary_edges:
        key = _edge_key(int(i), int(j))
        if key not in count:
            raise MeshValidationError(f"boundary edge {key} is not an edge of any triangle")
        if count[key] != 1:
            raise MeshValidationError(f"boundary edge {key} is shared by {count[key]} triangles")
        if key in declared:
            raise MeshValidationError(f"boundary edge {key} listed twice")
        declared.add(key)
    missing = topological - declared
    if missing:
        raise MeshValidationError(
            f"{len(missing)} topological boundary edges are unlabeled, e.g. {sorted(missing)[0]}")


def generate_rect_mesh(nx: int, ny: int, bounds=(0.0, 0.0, 1.0, 1.0),
                       boundary_plan=None, regions=()) -> Mesh:
    """Triangulate an axis-aligned rectangle into ``2*nx*ny`` triangles.

    Each cell is split along the diagonal from its lower-left to its
    upper-right corner, so connectivity is deterministic.

    Parameters
    ----------
    nx, ny : int
        Cells per direction (>= 1).
    bounds : (x0, y0, x1, y1)
        Rectangle corners with ``x1 > x0`` and ``y1 > y0``.
    boundary_plan : dict, optional
        Labels for the four sides, keys ``bottom``/``right``/``top``/``left``.
        Missing sides default to label 1.
    regions : iterable of (label, (bx0, by0, bx1, by1))
        Subdomain boxes; each must be aligned to cell boundaries so that
        subdomain integrals stay exact.  Triangles outside every box keep
        label 0.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    x0, y0, x1, y1 = map(float, bounds)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate bounds {bounds!r}")
    plan = {"bottom": 1, "right": 1, "top": 1, "left": 1}
    plan.update(boundary_plan or {})

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):  # column i, row j
        return j * (nx + 1) + i

    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    t = 0
    for j in range(ny):
        for i in range(nx):
            ll, lr = vid(i, j), vid(i + 1, j)
            ul, ur = vid(i, j + 1), vid(i + 1, j + 1)
            triangles[t] = (ll, lr, ur)
            triangles[t + 1] = (ll, ur, ul)
            t += 2

    edges = []
    for i in range(nx):
        edges.append((vid(i, 0), vid(i + 1, 0), plan["bottom"]))
        edges.append((vid(i + 1, ny), vid(i, ny), plan["top"]))
    for j in range(ny):
        edges.append((vid(nx, j), vid(nx, j + 1), plan["right"]))
        edges.append((vid(0, j + 1), vid(0, j), plan["left"]))
    boundary_edges = np.array(edges, dtype=np.int64)

    labels = np.zeros(triangles.shape[0], dtype=np.int64)
    dx = (x1 - x0) / nx
    dy = (y1 - y0) / ny
    centroids = vertices[triangles].mean(axis=1)
    for label, box in regions:
        bx0, by0, bx1, by1 = map(float, box)
        for lo, origin, step in ((bx0, x0, dx), (bx1, x0, dx), (by0, y0, dy), (by1, y0, dy)):
            ratio = (lo - origin) / step
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(
                    f"region box {box!r} is not aligned to the {nx}x{ny} cell grid")
        inside = ((centroids[:, 0] > bx0) & (centroids[:, 0] < bx1)
                  & (centroids[:, 1] > by0) & (centroids[:, 1] < by1))
        labels[inside] = label

    return Mesh(vertices, triangles, boundary_edges, labels)


def region_area(mesh: Mesh, label: int) -> float:
    """Total area of the triangles carrying ``label``."""
    mask = mesh.region_labels == label
    if not mask.any():
        raise KeyError(f"no triangles carry region label {label}")
    return float(mesh.triangle_areas()[mask].sum())


def serialize_mesh(mesh: Mesh) -> str:
    """Render a mesh in the line-oriented ASCII format (see ``load_mesh``)."""
    lines = [MESH_FORMAT_HEADER]
    lines.append(f"V {mesh.num_vertices}")
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r}")
    lines.append(f"T {mesh.num_triangles}")
    for (i, j, k), label in zip(mesh.triangles, mesh.region_labels):
        lines.append(f"{i} {j} {k} {label}")
    lines.append(f"E {mesh.boundary_edges.shape[0]}")
    for i, j, label in mesh.boundary_edges:
        lines.append(f"{i} {j} {label}")
    return "\n".join(lines) + "\n"


def load_mesh(text: str) -> Mesh:
    """Parse the plain-text mesh format.

    Format: header ``romocp-mesh 1``; then ``V <count>`` followed by
    ``x y`` lines; ``T <count>`` followed by ``i j k label`` lines;
    ``E <count>`` followed by ``i j label`` lines.  Indices are 0-based,
    ``#`` starts a comment.  Raises :class:`MeshParseError` on malformed
    input and :class:`MeshValidationError` when the parsed mesh breaks an
    invariant (e.g. a clockwise triangle).
    """
    rows = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if stripped:
            rows.append((line_no, stripped))
    if not rows:
        raise MeshParseError(1, "empty mesh file")
    line_no, header = rows[0]
    if header != MESH_FORMAT_HEADER:
        raise MeshParseError(line_no, f"expected header {MESH_FORMAT_HEADER!r}, got {header!r}")

    pos = 1

    def take_section(tag, width, caster):
        nonlocal pos
        if pos >= len(rows):
            raise MeshParseError(rows[-1][0], f"missing '{tag} <count>' section")
        line_no, line = rows[pos]
        parts = line.split()
        if len(parts) != 2 or parts[0] != tag:
            raise MeshParseError(line_no, f"expected '{tag} <count>', got {line!r}")
        try:
            n = int(parts[1])
        except ValueError:
            raise MeshParseError(line_no, f"bad count {parts[1]!r}") from None
        pos += 1
        out = []
        for _ in range(n):
            if pos >= len(rows):
                raise MeshParseError(rows[-1][0], f"unexpected end of file in section {tag}")
            line_no, line = rows[pos]
            parts = line.split()
            if len(parts) != width:
                raise MeshParseError(line_no, f"expected {width} fields, got {len(parts)}")
            try:
                out.append([caster(p) for p in parts])
            except ValueError:
                raise MeshParseError(line_no, f"bad value in {line!r}") from None
            pos += 1
        return np.array(out, dtype=float if caster is float else np.int64).reshape(n, width)

    vertices = take_section("V", 2, float)
    tri_rows = take_section("T", 4, int)
    edge_rows = take_section("E", 3, int)
    if pos != len(rows):
        raise MeshParseError(rows[pos][0], "trailing content after last section")
    return Mesh(vertices, tri_rows[:, :3], edge_rows, tri_rows[:, 3])
