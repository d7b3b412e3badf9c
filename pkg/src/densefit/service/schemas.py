"""Pydantic request/response models for the densefit service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class ModelGenRequest(BaseModel):
    joints: int = 16
    vertices_per_segment: int = 24
    blendshapes: int = 10
    keypoints: int = 25
    seed: int = 0


class ModelGenResponse(BaseModel):
    model: dict
    vertex_count: int
    joint_count: int
    face_count: int


class SceneGenRequest(BaseModel):
    config: dict = Field(default_factory=dict)  # ExperimentConfig fields
    seed: int | None = None
    count: int | None = None


class SceneGenResponse(BaseModel):
    scenes: dict
    count: int


class ExperimentRequest(BaseModel):
    config: dict = Field(default_factory=dict)  # ExperimentConfig fields
    seed: int | None = None                     # overrides config["seed"]
    out_dir: str | None = None                  # written server-side
    jobs: int = 1


class NoiseAblationRequest(ExperimentRequest):
    sigmas: list[float] = Field(default_factory=lambda: [0.0, 2.0, 5.0, 10.0])


class TextureAblationRequest(ExperimentRequest):
    modes: list[str] | None = None


class ExperimentResponse(BaseModel):
    summary: dict
    csv: str
    error_count: int
    written: list[str]


class ReportRequest(BaseModel):
    csv: str


class ReportResponse(BaseModel):
    summary: dict
