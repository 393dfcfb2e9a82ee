"""Batch drivers: offline training, online queries, and benchmark studies.

Every study produces a :class:`StudyReport` whose rows are plain scalars,
reproducible bit-exact for a fixed seed/config/cache except for the
wall-time columns (flagged in the metadata).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from . import archive, ocp, pod, rom
from .errors import ConfigurationError, SolverError
from .pod import SnapshotSet
from .problems import (ProblemDef, SamplingPlan, problem_from_config,
                       sample_parameters, sampling_from_config)
from .vtk_io import vtk_unstructured

log = logging.getLogger(__name__)

DEFAULT_BASIS_COUNT = {"pollutant": 20, "qg_linear": 25, "qg_nonlinear": 25}
# snapshots are converged far beyond the reduced model's target accuracy,
# otherwise solver tolerance, not the space, limits reproduction quality
SNAPSHOT_NEWTON = {"atol": 1e-12, "rtol": 1e-14, "max_iter": 25}


@dataclass
class StudyReport:
    kind: str
    problem: str
    metadata: dict
    rows: list

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "problem": self.problem,
                           "metadata": self.metadata, "rows": self.rows}, indent=2)

    def to_csv(self) -> str:
        columns: list = []
        for row in self.rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _csv_value(row.get(k)) for k in columns})
        return buf.getvalue()

    def write(self, path, fmt: str = "csv") -> None:
        text = self.to_csv() if fmt == "csv" else self.to_json()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _csv_value(value):
    if isinstance(value, float):
        return repr(value)
    return value


def _mu_string(mu) -> str:
    return ",".join(repr(float(v)) for v in np.atleast_1d(mu))


def collect_snapshots(problem: ProblemDef, training_mus,
                      solver_options: dict | None = None) -> tuple:
    """Truth-solve every training parameter; returns the snapshot set and
    the underlying solutions."""
    options = SNAPSHOT_NEWTON if solver_options is None else solver_options
    solutions = []
    for mu in training_mus:
        try:
            solutions.append(ocp.solve_truth(problem, mu, **options))
        except SolverError as exc:
            raise SolverError(
                f"truth solve failed at mu={np.asarray(mu).tolist()}: {exc}") from exc
    names = problem.x_layout.names + problem.p_layout.names
    variables = {name: np.column_stack([sol.fields[name] for sol in solutions])
                 for name in names}
    scalar = frozenset({problem.control}) \
        if problem.spaces[problem.control] is None else frozenset()
    snaps = SnapshotSet(variables=variables,
                        inner_products=dict(problem.inner_products),
                        training_parameters=np.asarray(training_mus, dtype=float),
                        scalar_variables=scalar)
    return snaps, solutions


def build_cache(problem: ProblemDef, snapshots: SnapshotSet,
                basis_count: int, rank_rtol: float = 0.0,
                bases: dict | None = None) -> rom.ReducedCache:
    if bases is None:
        bases = pod.pod_partitioned(snapshots, basis_count, rank_rtol=rank_rtol)
    aggregated = rom.aggregate_spaces(bases, basis_count, problem)
    cache = rom.project_affine(problem, aggregated)
    mesh = problem.mesh
    return replace(cache,
                   training_parameters=snapshots.training_parameters,
                   mesh_arrays={"vertices": mesh.vertices,
                                "triangles": mesh.triangles,
                                "boundary_edges": mesh.boundary_edges,
                                "region_labels": mesh.region_labels})


@dataclass
class OfflineResult:
    cache: rom.ReducedCache
    problem: ProblemDef
    snapshots: SnapshotSet
    eigenvalues: dict
    truth_time_total: float
    wall_time: float
    cache_path: str | None = None
    archive_path: str | None = None

    def summary(self) -> dict:
        return {"problem": self.problem.kind,
                "truth_dimension": self.problem.truth_dimension,
                "reduced_dimension": self.cache.reduced_dimension,
                "basis_count": self.cache.basis_count,
                "training_count": self.snapshots.count,
                "truth_time_total": self.truth_time_total,
                "wall_time": self.wall_time,
                "cache_path": self.cache_path,
                "archive_path": self.archive_path}


def run_offline(config: dict, cache_path=None, archive_path=None,
                base_dir=None) -> OfflineResult:
    """Sample the training set, run truth solves, compress, aggregate and
    project; optionally persists the cache and the snapshot archive."""
    t0 = time.perf_counter()
    problem = problem_from_config(config, base_dir=base_dir)
    plan = sampling_from_config(config)
    basis_count = int(config.get("basis_count", DEFAULT_BASIS_COUNT[problem.kind]))
    if basis_count > plan.count:
        raise ConfigurationError(
            f"basis_count {basis_count} exceeds the training set size {plan.count}")
    mus = sample_parameters(problem.parameter_box, plan)

    t_truth = time.perf_counter()
    snaps, _ = collect_snapshots(problem, mus)
    truth_time = time.perf_counter() - t_truth

    rank_rtol = float(config.get("rank_rtol", 0.0))
    bases = pod.pod_partitioned(snaps, basis_count, rank_rtol=rank_rtol)
    cache = build_cache(problem, snaps, basis_count, bases=bases)
    eigenvalues = {name: basis.eigenvalues.tolist() for name, basis in bases.items()}
    for name, vals in eigenvalues.items():
        lead = vals[0] if vals and vals[0] > 0 else 1.0
        decade = sum(1 for v in vals if v > 1e-10 * lead)
        log.info("offline %s: field %s eigenvalues span %.2e..%.2e "
                 "(%d above 1e-10 of leading)", problem.kind, name,
                 vals[0] if vals else 0.0, vals[-1] if vals else 0.0, decade)

    if cache_path is not None:
        archive.save_cache(cache_path, cache, problem)
    if archive_path is not None:
        archive.save_snapshots(archive_path, snaps, problem_config=dict(config))
    return OfflineResult(cache=cache, problem=problem, snapshots=snaps,
                         eigenvalues=eigenvalues,
                         truth_time_total=truth_time,
                         wall_time=time.perf_counter() - t0,
                         cache_path=str(cache_path) if cache_path else None,
                         archive_path=str(archive_path) if archive_path else None)


def problem_for_cache(cache: rom.ReducedCache) -> ProblemDef:
    """Rebuild the full-order problem a cache was trained on (uses the
    embedded mesh; the desired-profile solve is deterministic)."""
    mesh = archive.cache_mesh(cache)
    config = dict(cache.problem_config)
    if mesh is None:
        return problem_from_config(config)
    from .mesh import serialize_mesh
    config = dict(config)
    config["mesh"] = {"text": serialize_mesh(mesh)}
    return problem_from_config(config)


def run_online(cache: rom.ReducedCache, mu, include_fields: bool = False) -> dict:
    """One online query: reduced solve, cost, timing, optional fields."""
    mu = cache.validate_mu(mu)
    t0 = time.perf_counter()
    rsol = rom.solve_reduced(cache, mu)
    wall = time.perf_counter() - t0
    record = {"mu": _mu_string(mu), "cost": rsol.cost,
              "iterations": rsol.iterations,
              "reduced_dimension": cache.reduced_dimension,
              "wall_time": wall}
    if include_fields:
        record["fields"] = {name: vec.tolist()
                            for name, vec in rom.reconstruct(cache.basis, rsol).items()}
        record["coefficients"] = {name: np.asarray(vec).tolist()
                                  for name, vec in rsol.coefficients.items()}
    return record


def _test_parameters(problem_or_cache, test_size: int, seed: int) -> np.ndarray:
    kind = problem_or_cache.kind
    box = problem_or_cache.parameter_box
    distribution = "uniform" if kind == "pollutant" else "log-uniform"
    return sample_parameters(box, SamplingPlan(distribution, test_size, seed))


def run_convergence(cache: rom.ReducedCache, problem: ProblemDef, basis_list,
                    test_size: int, seed: int = 0,
                    test_parameters=None) -> StudyReport:
    """Error-versus-basis-count study over a random test set.

    Every test parameter is solved by both the truth solver and, per basis
    count, the reduced solver; rows carry max and mean errors per field
    plus their field-summed variants.  ``test_parameters`` replaces the
    random draw (e.g. with the training set itself).
    """
    basis_list = [int(n) for n in basis_list]
    for n in basis_list:
        if n > cache.basis_count:
            raise ConfigurationError(f"basis count {n} exceeds the trained {cache.basis_count}")
    rows: list = []
    metadata = {"test_size": int(test_size), "seed": int(seed),
                "truth_dimension": problem.truth_dimension,
                "mesh_vertices": problem.mesh.num_vertices,
                "mesh_triangles": problem.mesh.num_triangles,
                "trained_basis_count": cache.basis_count,
                "training_count": int(cache.training_parameters.shape[0]),
                "nondeterministic": []}
    if not basis_list:
        return StudyReport("convergence", problem.kind, metadata, rows)

    if test_parameters is not None:
        mus = np.asarray(test_parameters, dtype=float)
        metadata["test_size"] = int(mus.shape[0])
        metadata["explicit_test_set"] = True
    else:
        mus = _test_parameters(problem, test_size, seed)
    truths = [ocp.solve_truth(problem, mu, **SNAPSHOT_NEWTON) for mu in mus]
    field_names = list(problem.error_norms)
    for n in sorted(basis_list):
        small = rom.sub_cache(cache, n)
        per_field = {name: [] for name in field_names}
        for mu, truth in zip(mus, truths):
            rsol = rom.solve_reduced(small, mu)
            rec = rom.reconstruct(small.basis, rsol)
            errors = rom.rom_error(truth, rec, problem.error_norms)
            for name, err in errors.items():
                per_field[name].append(err)
        row = {"N": n, "reduced_dimension": small.reduced_dimension}
        summed = np.zeros(len(mus))
        for name in field_names:
            arr = np.asarray(per_field[name])
            row[f"max_err_{name}"] = float(arr.max())
            row[f"mean_err_{name}"] = float(arr.mean())
            summed += arr
        row["max_err_summed"] = float(summed.max())
        row["mean_err_summed"] = float(summed.mean())
        rows.append(row)
    return StudyReport("convergence", problem.kind, metadata, rows)


def run_speedup(cache: rom.ReducedCache, problem: ProblemDef, basis_list,
                repetitions: int, seed: int = 0) -> StudyReport:
    """Wall-time comparison: how many reduced queries fit in one truth solve.

    Truth and reduced solves run over the same parameter batch; the
    speedup index is the ratio of mean wall times.
    """
    basis_list = [int(n) for n in basis_list]
    metadata = {"repetitions": int(repetitions), "seed": int(seed),
                "truth_dimension": problem.truth_dimension,
                "mesh_vertices": problem.mesh.num_vertices,
                "mesh_triangles": problem.mesh.num_triangles,
                "trained_basis_count": cache.basis_count,
                "nondeterministic": ["truth_time_mean", "reduced_time_mean", "speedup"]}
    rows: list = []
    if repetitions < 1:
        for n in sorted(basis_list):
            rows.append({"N": n,
                         "reduced_dimension": rom.sub_cache(cache, n).reduced_dimension})
        return StudyReport("speedup", problem.kind, metadata, rows)

    mus = _test_parameters(problem, repetitions, seed)
    t0 = time.perf_counter()
    for mu in mus:
        ocp.solve_truth(problem, mu)
    truth_mean = (time.perf_counter() - t0) / len(mus)

    for n in sorted(basis_list):
        small = rom.sub_cache(cache, n)
        t0 = time.perf_counter()
        for mu in mus:
            rom.solve_reduced(small, mu)
        reduced_mean = (time.perf_counter() - t0) / len(mus)
        rows.append({"N": n, "reduced_dimension": small.reduced_dimension,
                     "truth_time_mean": truth_mean,
                     "reduced_time_mean": reduced_mean,
                     "speedup": truth_mean / reduced_mean})
    return StudyReport("speedup", problem.kind, metadata, rows)


def _aggregate_with_drops(mode_blocks, problem, n):
    """Aggregation variant for diagnostic pipelines: near-dependent columns
    are dropped instead of aborting, so block widths may fall short."""
    blocks = {}
    x_fields = []
    p_fields = []
    for (state_name, adjoint_name) in problem.aggregation_pairs:
        state = mode_blocks[state_name][:, :n]
        adjoint = mode_blocks[adjoint_name][:, :n]
        interleaved = np.empty((state.shape[0], 2 * n))
        interleaved[:, 0::2] = state
        interleaved[:, 1::2] = adjoint
        block, _ = pod.orthonormalize(interleaved, problem.inner_products[state_name],
                                      drop_tol=1e-10)
        blocks[state_name] = block
        blocks[adjoint_name] = block
    control = problem.control
    scalar_fields = set()
    if problem.spaces[control] is None:
        blocks[control] = np.ones((1, 1))
        scalar_fields.add(control)
    else:
        block, _ = pod.orthonormalize(mode_blocks[control][:, :n],
                                      problem.inner_products[control], drop_tol=1e-10)
        blocks[control] = block
    for name, _ in problem.x_layout.fields:
        x_fields.append((name, blocks[name].shape[1]))
    for name, _ in problem.p_layout.fields:
        p_fields.append((name, blocks[name].shape[1]))
    from .problems import BlockLayout
    return rom.AggregatedBasis(blocks=blocks, basis_count=n,
                               x_layout=BlockLayout(tuple(x_fields)),
                               p_layout=BlockLayout(tuple(p_fields)),
                               scalar_fields=frozenset(scalar_fields))


def _monolithic_errors(problem, stacked_basis, n, test_mus, truths):
    """Joint-coefficient Galerkin on the stacked solution space: one shared
    coefficient per mode for the whole (solution, adjoint) vector, without
    any aggregation.  This is the single-compression baseline the
    partitioned pipeline is measured against."""
    phi = stacked_basis[:, :n]
    nx = problem.x_layout.size
    errors = np.zeros(len(test_mus))
    for idx, (mu, truth) in enumerate(zip(test_mus, truths)):
        system = ocp._assemble_blocks(problem, mu)
        kkt = system.kkt_matrix()
        projected = phi.T @ (kkt @ phi)
        rhs = phi.T @ system.rhs()
        try:
            coeff = np.linalg.solve(projected, rhs)
        except np.linalg.LinAlgError:
            coeff = np.linalg.lstsq(projected, rhs, rcond=None)[0]
        z = phi @ coeff
        fields = problem.x_layout.split(z[:nx])
        fields.update(problem.p_layout.split(z[nx:]))
        errors[idx] = sum(rom.rom_error(truth, fields, problem.error_norms).values())
    return errors


def run_pod_comparison(problem: ProblemDef, basis_list, training_count: int = 50,
                       test_size: int = 20, seed: int = 0,
                       snapshots: SnapshotSet | None = None) -> StudyReport:
    """Per-variable versus stacked-variable compression on one snapshot set.

    The partitioned pipeline is the production one (per-variable modes,
    aggregated spaces); the monolithic baseline compresses the stacked
    (solution, adjoint) vectors with a single decomposition and solves
    with one joint coefficient per mode.  Both are scored by the
    field-summed error against the truth over a shared test set.
    """
    if problem.is_nonlinear:
        raise ConfigurationError("the compression comparison supports linear problems")
    basis_list = sorted(int(n) for n in basis_list)
    if snapshots is None:
        plan = SamplingPlan("uniform" if problem.kind == "pollutant" else "log-uniform",
                            training_count, seed)
        mus = sample_parameters(problem.parameter_box, plan)
        snapshots, _ = collect_snapshots(problem, mus)
    metadata = {"training_count": snapshots.count, "test_size": int(test_size),
                "seed": int(seed), "truth_dimension": problem.truth_dimension,
                "mesh_vertices": problem.mesh.num_vertices,
                "mesh_triangles": problem.mesh.num_triangles,
                "nondeterministic": []}
    rows: list = []
    if not basis_list:
        return StudyReport("pod-comparison", problem.kind, metadata, rows)
    n_max = max(basis_list)
    if n_max > snapshots.count:
        raise ConfigurationError(f"basis count {n_max} exceeds the training size")

    part_bases = pod.pod_partitioned(snapshots, n_max)
    part_blocks = {name: basis.vectors for name, basis in part_bases.items()}
    order = problem.x_layout.names + problem.p_layout.names
    mono = pod.pod_monolithic(snapshots, n_max, order=order)

    test_mus = _test_parameters(problem, test_size, seed + 1)
    truths = [ocp.solve_truth(problem, mu) for mu in test_mus]

    def summed_errors(cache):
        total = np.zeros(len(test_mus))
        for idx, (mu, truth) in enumerate(zip(test_mus, truths)):
            rsol = rom.solve_reduced(cache, mu)
            rec = rom.reconstruct(cache.basis, rsol)
            errors = rom.rom_error(truth, rec, problem.error_norms)
            total[idx] = sum(errors.values())
        return total

    for n in basis_list:
        part_cache = rom.project_affine(
            problem, _aggregate_with_drops(part_blocks, problem, n))
        part_err = summed_errors(part_cache)
        mono_err = _monolithic_errors(problem, mono.vectors, n, test_mus, truths)
        rows.append({"N": n,
                     "partitioned_dimension": part_cache.reduced_dimension,
                     "monolithic_dimension": n,
                     "partitioned_max_summed": float(part_err.max()),
                     "monolithic_max_summed": float(mono_err.max()),
                     "partitioned_mean_summed": float(part_err.mean()),
                     "monolithic_mean_summed": float(mono_err.mean())})
    return StudyReport("pod-comparison", problem.kind, metadata, rows)


def export_fields(cache: rom.ReducedCache, mu, path=None,
                  problem: ProblemDef | None = None,
                  include_truth: bool = True) -> str:
    """Reconstructed fields (and, when requested, the truth fields plus the
    pointwise gap) as a legacy VTK dataset; returns the text, optionally
    writing it to ``path``."""
    mu = cache.validate_mu(mu)
    if problem is None:
        problem = problem_for_cache(cache)
    mesh = problem.mesh
    rsol = rom.solve_reduced(cache, mu)
    reconstructed = rom.reconstruct(cache.basis, rsol)

    point_fields = {}

    def expand(name, vec):
        space = problem.spaces[name]
        if space is None:
            return None  # scalar control has no spatial footprint
        return space.expand(np.asarray(vec))

    for name, vec in reconstructed.items():
        values = expand(name, vec)
        if values is not None:
            point_fields[f"rom_{name}"] = values
    if include_truth:
        truth = ocp.solve_truth(problem, mu)
        for name, vec in truth.fields.items():
            values = expand(name, vec)
            if values is not None:
                point_fields[f"fe_{name}"] = values
                point_fields[f"diff_{name}"] = point_fields[f"rom_{name}"] - values
    text = vtk_unstructured(mesh, point_fields,
                            title=f"{problem.kind} at mu={_mu_string(mu)}")
    if path is not None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(text)
    return text
