"""FastAPI service wrapping the densefit core.

Experiment endpoints optionally write their outputs server-side (out_dir) and
always return the CSV and summary inline, so remote clients can keep their
own copies.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..bodymodel import SynthConfig, make_synthetic_model, model_to_doc
from ..harness import (ExperimentConfig, TEXTURE_MODES, ablate_noise, ablate_texture,
                       csv_to_rows, generate_scenes_doc, run_experiment, summarize_rows)
from . import schemas

app = FastAPI(title="densefit", version=__version__)


@app.exception_handler(ValueError)
async def value_error_handler(request: Request, exc: ValueError):
    return JSONResponse(status_code=422, content={"detail": str(exc)})


@app.get("/health", response_model=schemas.HealthResponse)
def health() -> schemas.HealthResponse:
    return schemas.HealthResponse(status="ok", version=__version__)


@app.post("/model/generate", response_model=schemas.ModelGenResponse)
def generate_model(req: schemas.ModelGenRequest) -> schemas.ModelGenResponse:
    cfg = SynthConfig(joints=req.joints, vertices_per_segment=req.vertices_per_segment,
                      blendshapes=req.blendshapes, keypoints=req.keypoints)
    model = make_synthetic_model(cfg, seed=req.seed)
    return schemas.ModelGenResponse(model=model_to_doc(model),
                                    vertex_count=model.vertex_count,
                                    joint_count=model.joint_count,
                                    face_count=model.face_count)


def _experiment_config(doc: dict, seed: int | None) -> ExperimentConfig:
    doc = dict(doc)
    if seed is not None:
        doc["seed"] = seed
    return ExperimentConfig.from_dict(doc)


@app.post("/scenes/generate", response_model=schemas.SceneGenResponse)
def generate_scenes(req: schemas.SceneGenRequest) -> schemas.SceneGenResponse:
    doc = dict(req.config)
    if req.count is not None:
        doc["scene_count"] = req.count
    config = _experiment_config(doc, req.seed)
    scenes = generate_scenes_doc(config)
    return schemas.SceneGenResponse(scenes=scenes, count=len(scenes["scenes"]))


@app.post("/experiments/fit", response_model=schemas.ExperimentResponse)
def experiment_fit(req: schemas.ExperimentRequest) -> schemas.ExperimentResponse:
    config = _experiment_config(req.config, req.seed)
    result = run_experiment(config, out_dir=req.out_dir, jobs=req.jobs)
    return schemas.ExperimentResponse(summary=result.summary, csv=result.csv_text,
                                      error_count=result.error_count, written=result.written)


@app.post("/experiments/ablate-noise", response_model=schemas.ExperimentResponse)
def experiment_ablate_noise(req: schemas.NoiseAblationRequest) -> schemas.ExperimentResponse:
    config = _experiment_config(req.config, req.seed)
    result = ablate_noise(config, sigmas=tuple(req.sigmas), out_dir=req.out_dir, jobs=req.jobs)
    return schemas.ExperimentResponse(summary=result.summary, csv=result.csv_text,
                                      error_count=result.error_count, written=result.written)


@app.post("/experiments/ablate-texture", response_model=schemas.ExperimentResponse)
def experiment_ablate_texture(req: schemas.TextureAblationRequest) -> schemas.ExperimentResponse:
    config = _experiment_config(req.config, req.seed)
    modes = tuple(req.modes) if req.modes else TEXTURE_MODES
    result = ablate_texture(config, modes=modes, out_dir=req.out_dir, jobs=req.jobs)
    return schemas.ExperimentResponse(summary=result.summary, csv=result.csv_text,
                                      error_count=result.error_count, written=result.written)


@app.post("/reports/summarize", response_model=schemas.ReportResponse)
def summarize(req: schemas.ReportRequest) -> schemas.ReportResponse:
    return schemas.ReportResponse(summary=summarize_rows(csv_to_rows(req.csv)))
