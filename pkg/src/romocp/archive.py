"""Binary container for snapshot archives and reduced caches.

Layout: an ASCII magic line, an 8-byte little-endian length, a UTF-8
JSON manifest, then the raw data section.  Every array is stored as
little-endian 64-bit floats in C order; the manifest lists name, shape
and byte offset (relative to the data section) per array, so external
tools can both read and produce these files.
"""

from __future__ import annotations

import json
import pathlib

import numpy as np

from .errors import ConfigurationError
from .pod import SnapshotSet
from .problems import BlockLayout, ProblemDef
from .rom import AggregatedBasis, ReducedCache, ReducedCostData

MAGIC = b"romocp-container 1\n"
CONTAINER_VERSION = 1


def save_container(path, meta: dict, arrays: dict) -> None:
    """Write a manifest + float64 arrays container."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=float))
        blob = arr.astype("<f8", copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = dict(meta)
    manifest["container_version"] = CONTAINER_VERSION
    manifest["arrays"] = entries
    payload = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(payload).to_bytes(8, "little"))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_container(path):
    """Read a container; returns ``(manifest, arrays)``."""
    raw = pathlib.Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ConfigurationError(f"{path}: not a container file (bad magic)")
    pos = len(MAGIC)
    length = int.from_bytes(raw[pos:pos + 8], "little")
    pos += 8
    try:
        manifest = json.loads(raw[pos:pos + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"{path}: corrupt manifest: {exc}") from exc
    data = raw[pos + length:]
    arrays = {}
    for entry in manifest.get("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(float)
    return manifest, arrays


def save_snapshots(path, snapshots: SnapshotSet, problem_config: dict | None = None) -> None:
    """Persist a snapshot set (inner products are problem-derived and are
    reattached on load from a ProblemDef)."""
    meta = {
        "kind": "snapshots",
        "variables": list(snapshots.names),
        "count": snapshots.count,
        "dimensions": {name: int(arr.shape[0])
                       for name, arr in snapshots.variables.items()},
        "scalar_variables": sorted(snapshots.scalar_variables),
        "problem_config": problem_config or {},
    }
    arrays = {f"snapshots/{name}": arr for name, arr in snapshots.variables.items()}
    arrays["training_parameters"] = snapshots.training_parameters
    save_container(path, meta, arrays)


def load_snapshots(path, problem: ProblemDef) -> SnapshotSet:
    meta, arrays = load_container(path)
    if meta.get("kind") != "snapshots":
        raise ConfigurationError(f"{path}: container holds {meta.get('kind')!r}, "
                                 "expected 'snapshots'")
    variables = {}
    for name in meta["variables"]:
        variables[name] = arrays[f"snapshots/{name}"]
    return SnapshotSet(variables=variables,
                       inner_products=dict(problem.inner_products),
                       training_parameters=arrays["training_parameters"],
                       scalar_variables=frozenset(meta.get("scalar_variables", [])))


def _mesh_arrays(problem: ProblemDef) -> dict:
    mesh = problem.mesh
    return {"mesh/vertices": mesh.vertices,
            "mesh/triangles": mesh.triangles,
            "mesh/boundary_edges": mesh.boundary_edges,
            "mesh/region_labels": mesh.region_labels}


def save_cache(path, cache: ReducedCache, problem: ProblemDef | None = None) -> None:
    """Persist a reduced cache; embeds the mesh so online queries, field
    reconstruction and export need no other inputs."""
    basis = cache.basis
    meta = {
        "kind": "reduced-cache",
        "problem": cache.kind,
        "problem_config": cache.problem_config,
        "basis_count": basis.basis_count,
        "x_fields": [[n, int(s)] for n, s in basis.x_layout.fields],
        "p_fields": [[n, int(s)] for n, s in basis.p_layout.fields],
        "scalar_fields": sorted(basis.scalar_fields),
        "tensor_fields": list(cache.tensor_fields) if cache.tensor_fields else None,
        "term_counts": {"a": len(cache.a_terms), "b": len(cache.b_terms),
                        "f": len(cache.f_terms), "g": len(cache.g_terms)},
        "cost_constant": cache.cost.constant,
        "cost_alpha": cache.cost.alpha,
        "truth_layout": {k: int(v) for k, v in cache.truth_layout.items()},
        "observed_field": cache.observed_field,
        "control_field": cache.control_field,
    }
    arrays: dict = {}
    alias = {}
    seen: dict = {}
    for name in basis.x_layout.names + basis.p_layout.names:
        block = basis.blocks[name]
        if id(block) in seen:  # aggregation partners share one block
            alias[name] = seen[id(block)]
        else:
            arrays[f"basis/{name}"] = block
            seen[id(block)] = name
    meta["block_alias"] = alias
    for label, terms in (("a", cache.a_terms), ("b", cache.b_terms),
                         ("f", cache.f_terms), ("g", cache.g_terms)):
        for idx, term in enumerate(terms):
            arrays[f"term/{label}/{idx}"] = term
    if cache.tensor is not None:
        arrays["tensor"] = cache.tensor
    arrays["cost/obs_matrix"] = cache.cost.obs_matrix
    arrays["cost/linear"] = cache.cost.linear
    arrays["cost/control_matrix"] = cache.cost.control_matrix
    for name, gram in cache.grams.items():
        arrays[f"gram/{name}"] = gram
    arrays["training_parameters"] = cache.training_parameters
    arrays["parameter_box"] = cache.parameter_box
    if problem is not None:
        arrays.update(_mesh_arrays(problem))
    elif cache.mesh_arrays:
        arrays.update({f"mesh/{k}": v for k, v in cache.mesh_arrays.items()})
    save_container(path, meta, arrays)


def load_cache(path) -> ReducedCache:
    meta, arrays = load_container(path)
    if meta.get("kind") != "reduced-cache":
        raise ConfigurationError(f"{path}: container holds {meta.get('kind')!r}, "
                                 "expected 'reduced-cache'")
    x_layout = BlockLayout(tuple((n, int(s)) for n, s in meta["x_fields"]))
    p_layout = BlockLayout(tuple((n, int(s)) for n, s in meta["p_fields"]))
    alias = meta.get("block_alias", {})
    blocks = {}
    for name in x_layout.names + p_layout.names:
        source = alias.get(name, name)
        blocks[name] = arrays[f"basis/{source}"]
    for name, source in alias.items():
        blocks[name] = blocks[source]
    basis = AggregatedBasis(blocks=blocks, basis_count=int(meta["basis_count"]),
                            x_layout=x_layout, p_layout=p_layout,
                            scalar_fields=frozenset(meta.get("scalar_fields", [])))
    counts = meta["term_counts"]
    cost = ReducedCostData(obs_matrix=arrays["cost/obs_matrix"],
                           linear=arrays["cost/linear"],
                           constant=float(meta["cost_constant"]),
                           control_matrix=arrays["cost/control_matrix"],
                           alpha=float(meta["cost_alpha"]))
    mesh_arrays = None
    if "mesh/vertices" in arrays:
        mesh_arrays = {"vertices": arrays["mesh/vertices"],
                       "triangles": arrays["mesh/triangles"].astype(np.int64),
                       "boundary_edges": arrays["mesh/boundary_edges"].astype(np.int64),
                       "region_labels": arrays["mesh/region_labels"].astype(np.int64)}
    return ReducedCache(
        kind=meta["problem"], problem_config=meta.get("problem_config", {}),
        parameter_box=arrays["parameter_box"], basis=basis,
        a_terms=tuple(arrays[f"term/a/{i}"] for i in range(counts["a"])),
        b_terms=tuple(arrays[f"term/b/{i}"] for i in range(counts["b"])),
        f_terms=tuple(arrays[f"term/f/{i}"] for i in range(counts["f"])),
        g_terms=tuple(arrays[f"term/g/{i}"] for i in range(counts["g"])),
        tensor=arrays.get("tensor"),
        tensor_fields=tuple(meta["tensor_fields"]) if meta.get("tensor_fields") else None,
        cost=cost,
        grams={name: arrays[f"gram/{name}"]
               for name in set(x_layout.names) | set(p_layout.names)},
        training_parameters=arrays["training_parameters"],
        truth_layout={k: int(v) for k, v in meta.get("truth_layout", {}).items()},
        observed_field=meta.get("observed_field", "y"),
        control_field=meta.get("control_field", "u"),
        mesh_arrays=mesh_arrays)


def cache_mesh(cache: ReducedCache):
    """Rebuild the Mesh embedded in a cache (None when absent)."""
    if not cache.mesh_arrays:
        return None
    from .mesh import Mesh
    m = cache.mesh_arrays
    return Mesh(m["vertices"], m["triangles"], m["boundary_edges"], m["region_labels"])
