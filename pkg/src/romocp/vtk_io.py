"""Legacy ASCII VTK output of vertex scalar fields on triangle meshes."""

from __future__ import annotations

import numpy as np

from .mesh import Mesh


def vtk_unstructured(mesh: Mesh, point_fields: dict, title: str = "romocp fields") -> str:
    """Render an UNSTRUCTURED_GRID dataset with one SCALARS block per field.

    ``point_fields`` maps field names to per-vertex value arrays.
    """
    nv, nt = mesh.num_vertices, mesh.num_triangles
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g} 0")
    lines.append(f"CELLS {nt} {4 * nt}")
    for i, j, k in mesh.triangles:
        lines.append(f"3 {i} {j} {k}")
    lines.append(f"CELL_TYPES {nt}")
    lines.extend(["5"] * nt)  # VTK_TRIANGLE
    if point_fields:
        lines.append(f"POINT_DATA {nv}")
        for name, values in point_fields.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (nv,):
                raise ValueError(f"field {name!r} has shape {values.shape}, "
                                 f"expected ({nv},)")
            safe = "".join(c if c.isalnum() or c in "_-" else "_" for c in name)
            lines.append(f"SCALARS {safe} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{v:.17g}" for v in values)
    return "\n".join(lines) + "\n"


def write_vtk(path, mesh: Mesh, point_fields: dict, title: str = "romocp fields") -> None:
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(vtk_unstructured(mesh, point_fields, title))
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc}") from exc
