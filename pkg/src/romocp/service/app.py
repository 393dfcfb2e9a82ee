"""FastAPI application wrapping the offline/online workflow.

The single long-lived asset is the reduced cache: requests reference
cache files on the server's filesystem, and loaded caches are memoized
by path and modification time so repeated online queries stay cheap.
"""

from __future__ import annotations

import json
import os

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, archive, studies
from ..errors import ConfigurationError, ParameterDomainError, SolverError
from . import models

ERROR_STATUS = {"configuration": 400, "domain": 422, "solver": 500}


def _error_response(kind: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=ERROR_STATUS[kind],
                        content={"detail": {"kind": kind, "message": message}})


def _load_config(request) -> dict:
    if request.config is not None:
        return request.config.as_config()
    if request.config_path:
        try:
            with open(request.config_path, "r", encoding="utf-8") as fh:
                return json.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {request.config_path}: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {request.config_path} is not valid JSON: {exc}")
    raise ConfigurationError("either 'config' or 'config_path' is required")


def create_app() -> FastAPI:
    app = FastAPI(title="romocp", version=__version__,
                  description="Reduced-order parametrized optimal control service")
    cache_store: dict = {}

    def cached(path: str):
        try:
            stamp = os.stat(path).st_mtime_ns
        except OSError as exc:
            raise ConfigurationError(f"cannot read cache {path}: {exc}")
        key = (os.path.abspath(path), stamp)
        if key not in cache_store:
            while len(cache_store) >= 8:
                cache_store.pop(next(iter(cache_store)))
            cache_store[key] = archive.load_cache(path)
        return cache_store[key]

    def problem_for(request, cache):
        if request.config is not None or request.config_path:
            from ..problems import problem_from_config
            return problem_from_config(_load_config(request))
        return studies.problem_for_cache(cache)

    @app.exception_handler(ConfigurationError)
    async def _config_error(_: Request, exc: ConfigurationError):
        return _error_response("configuration", str(exc))

    @app.exception_handler(ParameterDomainError)
    async def _domain_error(_: Request, exc: ParameterDomainError):
        return _error_response("domain", str(exc))

    @app.exception_handler(SolverError)
    async def _solver_error(_: Request, exc: SolverError):
        return _error_response("solver", str(exc))

    @app.get("/health", response_model=models.HealthResponse)
    def health():
        return models.HealthResponse(status="ok", version=__version__)

    @app.post("/offline", response_model=models.OfflineResponse)
    def offline(request: models.OfflineRequest):
        config = _load_config(request)
        result = studies.run_offline(config, cache_path=request.cache_path,
                                     archive_path=request.archive_path)
        return models.OfflineResponse(
            problem=result.problem.kind,
            truth_dimension=result.problem.truth_dimension,
            reduced_dimension=result.cache.reduced_dimension,
            basis_count=result.cache.basis_count,
            training_count=result.snapshots.count,
            truth_time_total=result.truth_time_total,
            wall_time=result.wall_time,
            cache_path=result.cache_path,
            archive_path=result.archive_path,
            eigenvalues=result.eigenvalues)

    @app.post("/online", response_model=models.OnlineResponse,
              response_model_exclude_none=True)
    def online(request: models.OnlineRequest):
        cache = cached(request.cache_path)
        record = studies.run_online(cache, request.mu,
                                    include_fields=request.include_fields)
        return models.OnlineResponse(**record)

    def _study_response(report: studies.StudyReport) -> models.StudyReportModel:
        return models.StudyReportModel(kind=report.kind, problem=report.problem,
                                       metadata=report.metadata, rows=report.rows)

    @app.post("/studies/convergence", response_model=models.StudyReportModel)
    def convergence(request: models.ConvergenceRequest):
        cache = cached(request.cache_path)
        problem = problem_for(request, cache)
        report = studies.run_convergence(cache, problem, request.basis_list,
                                         request.test_size, request.seed)
        return _study_response(report)

    @app.post("/studies/speedup", response_model=models.StudyReportModel)
    def speedup(request: models.SpeedupRequest):
        cache = cached(request.cache_path)
        problem = problem_for(request, cache)
        report = studies.run_speedup(cache, problem, request.basis_list,
                                     request.repetitions, request.seed)
        return _study_response(report)

    @app.post("/studies/compare-pod", response_model=models.StudyReportModel)
    def compare_pod(request: models.ComparePodRequest):
        from ..problems import problem_from_config
        problem = problem_from_config(_load_config(request))
        report = studies.run_pod_comparison(problem, request.basis_list,
                                            training_count=request.training_count,
                                            test_size=request.test_size,
                                            seed=request.seed)
        return _study_response(report)

    @app.post("/export", response_model=models.ExportResponse,
              response_model_exclude_none=True)
    def export(request: models.ExportRequest):
        cache = cached(request.cache_path)
        text = studies.export_fields(cache, request.mu, path=request.out_path,
                                     include_truth=request.include_truth)
        return models.ExportResponse(vtk=text, out_path=request.out_path)

    return app
