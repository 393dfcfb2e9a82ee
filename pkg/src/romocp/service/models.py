"""Pydantic request/response models of the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class SamplingModel(BaseModel):
    distribution: Literal["uniform", "log-uniform", "log-equispaced"] | None = None
    count: int = Field(default=100, ge=1)
    seed: int = 0


class ProblemConfigModel(BaseModel):
    problem: Literal["pollutant", "qg_linear", "qg_nonlinear"]
    mesh: Optional[dict] = None
    alpha: Optional[float] = None
    y_d: Optional[float] = None
    L: Optional[float] = None
    target_mu: Optional[list[float]] = None
    parameter_box: Optional[list[list[float]]] = None
    sampling: Optional[SamplingModel] = None
    basis_count: Optional[int] = Field(default=None, ge=1)

    def as_config(self) -> dict:
        out = self.model_dump(exclude_none=True)
        return out


class OfflineRequest(BaseModel):
    config: Optional[ProblemConfigModel] = None
    config_path: Optional[str] = None
    cache_path: str
    archive_path: Optional[str] = None


class OfflineResponse(BaseModel):
    problem: str
    truth_dimension: int
    reduced_dimension: int
    basis_count: int
    training_count: int
    truth_time_total: float
    wall_time: float
    cache_path: Optional[str]
    archive_path: Optional[str]
    eigenvalues: dict[str, list[float]]


class OnlineRequest(BaseModel):
    cache_path: str
    mu: list[float]
    include_fields: bool = False


class OnlineResponse(BaseModel):
    mu: str
    cost: float
    iterations: int
    reduced_dimension: int
    wall_time: float
    fields: Optional[dict[str, list[float]]] = None
    coefficients: Optional[dict[str, list[float]]] = None


class ConvergenceRequest(BaseModel):
    cache_path: str
    config: Optional[ProblemConfigModel] = None
    config_path: Optional[str] = None
    basis_list: list[int]
    test_size: int = Field(default=100, ge=0)
    seed: int = 0


class SpeedupRequest(BaseModel):
    cache_path: str
    config: Optional[ProblemConfigModel] = None
    config_path: Optional[str] = None
    basis_list: list[int]
    repetitions: int = Field(default=20, ge=0)
    seed: int = 0


class ComparePodRequest(BaseModel):
    config: Optional[ProblemConfigModel] = None
    config_path: Optional[str] = None
    basis_list: list[int]
    training_count: int = Field(default=50, ge=1)
    test_size: int = Field(default=20, ge=1)
    seed: int = 0


class StudyReportModel(BaseModel):
    kind: str
    problem: str
    metadata: dict
    rows: list[dict]


class ExportRequest(BaseModel):
    cache_path: str
    mu: list[float]
    include_truth: bool = True
    out_path: Optional[str] = None


class ExportResponse(BaseModel):
    vtk: str
    out_path: Optional[str] = None


class HealthResponse(BaseModel):
    status: str
    version: str
