"""Experiment runner: scene generation, perturbation, refinement, metric
tables and overlay images.

The whole pipeline is a pure function of (config, master seed); repeated runs
produce byte-identical CSV output. Scene failures become rows with an error
code and the run continues.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .bodymodel import BodyModel, SynthConfig, forward, load_model, make_synthetic_model
from .camera import frame_camera
from .displacement import epe, pixel_to_vertex, target_vertices, DisplacementField
from .fitter import FitConfig, fit, make_dense_target, make_sparse_target
from .metrics import report
from .priors import GmmPrior, fit_gmm
from .providers import ProviderSpec, provide_dense, provide_sparse
from .rasterizer import rasterize, unique_vertex_colors, vertex_normals, write_ppm_color
from .scenes import Scene, make_scene, perturb_params, pose_pool, scene_seed
from .texture import backproject, median_texture, perturb_texture


class HarnessError(ValueError):
    pass


METRIC_KEYS = ("mpjpe", "pa_mpjpe", "n_mpjpe", "pve", "pa_pve", "n_pve")

CSV_COLUMNS = (["scene_id", "provider"]
               + [f"{w}_{m}" for m in METRIC_KEYS for w in ("pre", "post")]
               + ["epe", "iterations", "wall_ms", "error_code"])

TEXTURE_CSV_COLUMNS = ["scene_id", "mode", "render_l1", "texture_rmse", "coverage",
                       "error_code"]

TEXTURE_MODES = ("clean", "noise10", "noise30", "brightness25", "brightness50", "swap")

# Spawn-key tags for per-scene randomness streams (scene generation itself
# uses (index, attempt)).
_TAG_PERTURB = 101
_TAG_PROVIDER = 201
_TAG_TEXTURE = 301
_TAG_OTHER_TEXTURE = 777


@dataclass(frozen=True)
class ExperimentConfig:
    scene_count: int = 100
    image_width: int = 128
    image_height: int = 128
    pose_sigma: float = 0.15
    shape_sigma: float = 0.5
    translation_sigma: float = 0.05
    providers: tuple = (ProviderSpec("oracle"),)
    fit: FitConfig = field(default_factory=FitConfig)
    seed: int = 0
    model_path: str | None = None
    model_synth: SynthConfig = field(default_factory=SynthConfig)
    model_seed: int | None = None
    prior_components: int = 4
    prior_samples: int = 2000
    min_visible_fraction: float = 0.3
    overlays: bool = False
    overlay_stride: int = 8
    timing: bool = False
    refit_rounds: int = 1   # >1: re-render at the refined params and fit again

    def __post_init__(self):
        if self.scene_count < 1:
            raise HarnessError("scene_count must be >= 1")
        if min(self.pose_sigma, self.shape_sigma, self.translation_sigma) < 0:
            raise HarnessError("perturbation sigmas must be >= 0")
        if self.refit_rounds < 1:
            raise HarnessError("refit_rounds must be >= 1")

    def to_dict(self) -> dict:
        return {
            "scene_count": self.scene_count,
            "image_width": self.image_width, "image_height": self.image_height,
            "pose_sigma": self.pose_sigma, "shape_sigma": self.shape_sigma,
            "translation_sigma": self.translation_sigma,
            "providers": [p.to_dict() for p in self.providers],
            "fit": self.fit.to_dict(),
            "seed": self.seed,
            "model_path": self.model_path,
            "model_synth": self.model_synth.__dict__,
            "model_seed": self.model_seed,
            "prior_components": self.prior_components,
            "prior_samples": self.prior_samples,
            "min_visible_fraction": self.min_visible_fraction,
            "overlays": self.overlays, "overlay_stride": self.overlay_stride,
            "timing": self.timing,
            "refit_rounds": self.refit_rounds,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        if "providers" in doc:
            doc["providers"] = tuple(ProviderSpec.from_dict(p) for p in doc["providers"])
        if "fit" in doc:
            doc["fit"] = FitConfig.from_dict(doc["fit"])
        if "model_synth" in doc:
            doc["model_synth"] = SynthConfig(**doc["model_synth"])
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise HarnessError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass(eq=False)
class ExperimentResult:
    rows: list
    csv_text: str
    summary: dict
    error_count: int
    written: list


def build_model(config: ExperimentConfig) -> BodyModel:
    if config.model_path:
        return load_model(config.model_path)
    seed = config.seed if config.model_seed is None else config.model_seed
    return make_synthetic_model(config.model_synth, seed=seed)


def build_prior(model: BodyModel, config: ExperimentConfig) -> GmmPrior:
    samples = pose_pool(model, config.prior_samples, config.seed)
    return fit_gmm(samples, config.prior_components, seed=config.seed)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def rows_to_csv(rows: list, columns=CSV_COLUMNS) -> str:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    return "\n".join(lines) + "\n"


def _empty_row(scene_id: int, provider: str, error_code: str) -> dict:
    row = {c: None for c in CSV_COLUMNS}
    row.update(scene_id=scene_id, provider=provider, error_code=error_code)
    return row


_INT_COLUMNS = {"scene_id", "iterations"}
_TEXT_COLUMNS = {"provider", "error_code", "mode"}


def csv_to_rows(csv_text: str) -> list:
    """Parse a results CSV (fit or texture schema) back into row dicts."""
    lines = [ln for ln in csv_text.strip().split("\n") if ln]
    if not lines:
        raise HarnessError("empty CSV")
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        values = line.split(",")
        if len(values) != len(header):
            raise HarnessError(f"CSV row has {len(values)} fields, expected {len(header)}")
        row: dict = {}
        for col, val in zip(header, values):
            if col in _TEXT_COLUMNS:
                row[col] = val
            elif val == "":
                row[col] = None
            elif col in _INT_COLUMNS:
                row[col] = int(val)
            else:
                row[col] = float(val)
        rows.append(row)
    return rows


def generate_scenes_doc(config: ExperimentConfig) -> dict:
    """Materialize the scene set as a JSON document (for inspection; runs
    regenerate scenes deterministically from the config)."""
    model = build_model(config)
    scenes = [make_scene(model, i, config.seed, config.image_width, config.image_height,
                         min_visible_fraction=config.min_visible_fraction).to_dict()
              for i in range(config.scene_count)]
    return {"config": config.to_dict(), "model_ref": config.model_path or "synthetic",
            "scenes": scenes}


def run_scene(model: BodyModel, prior: GmmPrior, config: ExperimentConfig,
              index: int) -> tuple[list, dict]:
    """Process one scene against every configured provider.

    Returns (rows, overlays); overlays maps provider label -> (H, W, 3) image
    when config.overlays is set.
    """
    overlays: dict = {}
    try:
        scene = make_scene(model, index, config.seed, config.image_width,
                           config.image_height,
                           min_visible_fraction=config.min_visible_fraction)
    except Exception as exc:  # scene-level failure: one error row per provider
        return [_empty_row(index, p.label(), type(exc).__name__) for p in config.providers], overlays

    init_pose, init_shape, init_cam = perturb_params(
        scene.pose, scene.shape, scene.camera, config.pose_sigma, config.shape_sigma,
        config.translation_sigma, scene_seed(config.seed, index, _TAG_PERTURB))
    gt_mesh = forward(model, scene.pose, scene.shape)
    init_mesh = forward(model, init_pose, init_shape)

    attributes = None
    if config.overlays:
        attributes = {"rgb": scene.texture.colors,
                      "vertex_color": unique_vertex_colors(model),
                      "normal": vertex_normals(init_mesh, model.faces)}
    buffers = rasterize(init_mesh, model.faces, init_cam, attributes=attributes)

    oracle_field = None
    if any(p.dense for p in config.providers):
        oracle_field = provide_dense(ProviderSpec("oracle"), scene, init_pose,
                                     init_shape, init_cam, buffers)

    rows = []
    for p_idx, spec in enumerate(config.providers):
        label = spec.label()
        provider_seed = int(scene_seed(config.seed, index, _TAG_PROVIDER + p_idx).generate_state(1)[0])
        runtime_spec = replace(spec, seed=provider_seed)
        try:
            t0 = time.perf_counter()
            field_epe = None
            iterations = 0
            cur_pose, cur_shape, cur_cam = init_pose, init_shape, init_cam
            cur_buffers = buffers
            for round_idx in range(config.refit_rounds):
                if round_idx > 0:
                    cur_buffers = rasterize(forward(model, cur_pose, cur_shape),
                                            model.faces, cur_cam)
                if spec.dense:
                    dense_field = provide_dense(runtime_spec, scene, cur_pose, cur_shape,
                                                cur_cam, cur_buffers)
                    if round_idx == 0:
                        field_epe = epe(dense_field, oracle_field)
                        if config.overlays:
                            overlays[label] = render_overlay(cur_buffers, dense_field,
                                                             config.overlay_stride)
                    vd = pixel_to_vertex(dense_field, cur_buffers, model.faces,
                                         model.vertex_count)
                    targets, valid = target_vertices(vd, model, cur_pose, cur_shape,
                                                     cur_cam)
                    data = make_dense_target(targets, valid.astype(np.float64),
                                             config.fit, cur_buffers)
                else:
                    joints2d, conf = provide_sparse(runtime_spec, scene)
                    data = make_sparse_target(joints2d, conf, config.fit, cur_buffers)

                result = fit(model, cur_pose, cur_shape, cur_cam, data, prior, config.fit)
                iterations += result.iterations
                cur_pose, cur_shape, cur_cam = result.pose, result.shape, result.camera
            wall_ms = (time.perf_counter() - t0) * 1000.0 if config.timing else 0.0

            pre = report(init_mesh, gt_mesh, model)
            post = report(forward(model, cur_pose, cur_shape), gt_mesh, model)
            row = {"scene_id": index, "provider": label, "epe": field_epe,
                   "iterations": iterations, "wall_ms": wall_ms, "error_code": ""}
            for m in METRIC_KEYS:
                row[f"pre_{m}"] = getattr(pre, m)
                row[f"post_{m}"] = getattr(post, m)
            rows.append(row)
        except Exception as exc:
            rows.append(_empty_row(index, label, type(exc).__name__))
    return rows, overlays


def summarize_rows(rows: list) -> dict:
    """Per-provider medians/means of the pre/post metrics plus error counts."""
    providers: dict = {}
    for row in rows:
        providers.setdefault(row["provider"], []).append(row)
    summary: dict = {"providers": {}, "scene_count": len({r["scene_id"] for r in rows}),
                     "error_count": sum(1 for r in rows if r["error_code"])}
    for label, group in providers.items():
        ok = [r for r in group if not r["error_code"]]
        entry: dict = {"rows": len(group), "errors": len(group) - len(ok)}
        for m in METRIC_KEYS:
            for w in ("pre", "post"):
                vals = [r[f"{w}_{m}"] for r in ok if r.get(f"{w}_{m}") is not None]
                if vals:
                    entry[f"{w}_{m}_median"] = float(np.median(vals))
                    entry[f"{w}_{m}_mean"] = float(np.mean(vals))
        epes = [r["epe"] for r in ok if r.get("epe") is not None]
        if epes:
            entry["epe_median"] = float(np.median(epes))
            entry["epe_mean"] = float(np.mean(epes))
        summary["providers"][label] = entry
    return summary


# Parallel workers re-derive nothing: the model/prior/config land in globals
# via the pool initializer, and per-scene seeds make results order-free.
_WORKER: dict = {}


def _init_worker(model_doc: dict, prior_state: tuple, config_doc: dict) -> None:
    from .bodymodel import model_from_doc
    torch.set_num_threads(1)
    _WORKER["model"] = model_from_doc(model_doc)
    _WORKER["prior"] = GmmPrior(*prior_state)
    _WORKER["config"] = ExperimentConfig.from_dict(config_doc)


def _worker_scene(index: int) -> tuple[list, dict]:
    return run_scene(_WORKER["model"], _WORKER["prior"], _WORKER["config"], index)


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> ExperimentResult:
    """Full run: per scene x provider, render, fit, evaluate; buffered rows
    are written in scene order regardless of job count."""
    torch.set_num_threads(1)
    model = build_model(config)
    prior = build_prior(model, config)

    all_rows: list = []
    overlay_images: list = []
    if jobs > 1:
        from .bodymodel import model_to_doc
        prior_state = (prior.means, prior.precisions, prior.weights)
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(model_to_doc(model), prior_state,
                                           config.to_dict())) as pool:
            for index, (rows, overlays) in enumerate(
                    pool.map(_worker_scene, range(config.scene_count))):
                all_rows.extend(rows)
                overlay_images.append((index, overlays))
    else:
        for index in range(config.scene_count):
            rows, overlays = run_scene(model, prior, config, index)
            all_rows.extend(rows)
            overlay_images.append((index, overlays))

    csv_text = rows_to_csv(all_rows)
    summary = summarize_rows(all_rows)
    written: list = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(csv_text, encoding="utf-8")
        written.append(str(out / "results.csv"))
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1),
                                          encoding="utf-8")
        written.append(str(out / "summary.json"))
        if config.overlays:
            for index, overlays in overlay_images:
                for label, image in overlays.items():
                    path = out / f"overlay_{index:04d}_{label}.ppm"
                    write_ppm_color(path, image)
                    written.append(str(path))
    return ExperimentResult(rows=all_rows, csv_text=csv_text, summary=summary,
                            error_count=summary["error_count"], written=written)


def ablate_noise(config: ExperimentConfig, sigmas=(0.0, 2.0, 5.0, 10.0),
                 out_dir=None, jobs: int = 1) -> ExperimentResult:
    """Noise sweep: one dense provider per sigma (sigma 0 is the oracle).

    The summary gains a `noise` section with the post-PVE median per sigma
    and a monotonicity flag."""
    providers = tuple(ProviderSpec("oracle") if s == 0 else
                      ProviderSpec("noisy_oracle", noise_sigma=float(s)) for s in sigmas)
    result = run_experiment(replace(config, providers=providers), out_dir=out_dir, jobs=jobs)
    medians = []
    for s, spec in zip(sigmas, providers):
        entry = result.summary["providers"].get(spec.label(), {})
        medians.append({"sigma": float(s), "post_pve_median": entry.get("post_pve_median"),
                        "epe_median": entry.get("epe_median")})
    values = [m["post_pve_median"] for m in medians if m["post_pve_median"] is not None]
    result.summary["noise"] = {
        "sweep": medians,
        "non_decreasing": all(b >= a - 1e-9 for a, b in zip(values, values[1:])),
    }
    if out_dir is not None:
        path = Path(out_dir) / "summary.json"
        path.write_text(json.dumps(result.summary, sort_keys=True, indent=1), encoding="utf-8")
    return result


# ---------------------------------------------------------------------------
# Texture ablation
# ---------------------------------------------------------------------------

_TEXTURE_MODE_ARGS = {
    "clean": ("noise", 0.0),
    "noise10": ("noise", 10.0),
    "noise30": ("noise", 30.0),
    "brightness25": ("brightness", 25.0),
    "brightness50": ("brightness", 50.0),
    "swap": ("swap", 0.0),
}


def _texture_views(model: BodyModel, mesh, width: int, height: int) -> list:
    center = 0.5 * (mesh.min(axis=0) + mesh.max(axis=0))
    extent = float(np.linalg.norm(mesh.max(axis=0) - mesh.min(axis=0)))
    return [frame_camera(center, extent, width, height, yaw=yaw)
            for yaw in (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)]


def run_texture_scene(model: BodyModel, config: ExperimentConfig, index: int,
                      modes) -> list:
    """Texture study for one scene: corrupt the texture, re-render, rebuild it
    by multi-view back-projection, and measure the degradation."""
    try:
        scene = make_scene(model, index, config.seed, config.image_width,
                           config.image_height,
                           min_visible_fraction=config.min_visible_fraction)
    except Exception as exc:
        return [{**{c: None for c in TEXTURE_CSV_COLUMNS}, "scene_id": index,
                 "mode": mode, "error_code": type(exc).__name__} for mode in modes]

    gt_mesh = forward(model, scene.pose, scene.shape)
    cams = _texture_views(model, gt_mesh, config.image_width, config.image_height)
    clean_render = rasterize(gt_mesh, model.faces, scene.camera,
                             attributes={"rgb": scene.texture.colors})
    rows = []
    for mode in modes:
        try:
            kind, magnitude = _TEXTURE_MODE_ARGS[mode]
            seed = int(scene_seed(config.seed, index, _TAG_TEXTURE).generate_state(1)[0])
            other = None
            if kind == "swap":
                other_rng = np.random.default_rng(scene_seed(config.seed, index, _TAG_OTHER_TEXTURE))
                from .scenes import procedural_texture
                other = procedural_texture(model, other_rng)
            perturbed = perturb_texture(scene.texture, kind, magnitude, seed=seed, other=other)

            render = rasterize(gt_mesh, model.faces, scene.camera,
                               attributes={"rgb": perturbed.colors})
            m = clean_render.mask
            render_l1 = float(np.abs(render.rgb[m] - clean_render.rgb[m]).mean()) if m.any() else 0.0

            frames = []
            for cam in cams:
                buf = rasterize(gt_mesh, model.faces, cam,
                                attributes={"rgb": perturbed.colors})
                frames.append((buf.rgb, scene.pose, scene.shape, cam))
            recon = median_texture(backproject(frames, model))
            covered = recon.covered
            texture_rmse = float(np.sqrt(np.mean(
                (recon.colors[covered] - scene.texture.colors[covered]) ** 2))) if covered.any() else None
            rows.append({"scene_id": index, "mode": mode, "render_l1": render_l1,
                         "texture_rmse": texture_rmse,
                         "coverage": float(covered.mean()), "error_code": ""})
        except Exception as exc:
            rows.append({**{c: None for c in TEXTURE_CSV_COLUMNS}, "scene_id": index,
                         "mode": mode, "error_code": type(exc).__name__})
    return rows


def ablate_texture(config: ExperimentConfig, modes=TEXTURE_MODES, out_dir=None,
                   jobs: int = 1) -> ExperimentResult:
    """Texture perturbation study (the displacement providers here are
    texture-independent by construction, so this measures the texture and
    rendering pipeline itself)."""
    torch.set_num_threads(1)
    for mode in modes:
        if mode not in _TEXTURE_MODE_ARGS:
            raise HarnessError(f"unknown texture mode '{mode}'")
    model = build_model(config)
    all_rows: list = []
    for index in range(config.scene_count):
        all_rows.extend(run_texture_scene(model, config, index, modes))
    csv_text = rows_to_csv(all_rows, columns=TEXTURE_CSV_COLUMNS)

    by_mode: dict = {}
    for row in all_rows:
        if not row["error_code"]:
            by_mode.setdefault(row["mode"], []).append(row)
    summary = {"modes": {}, "error_count": sum(1 for r in all_rows if r["error_code"])}
    for mode, group in by_mode.items():
        summary["modes"][mode] = {
            "render_l1_median": float(np.median([r["render_l1"] for r in group])),
            "texture_rmse_median": float(np.median([r["texture_rmse"] for r in group
                                                    if r["texture_rmse"] is not None])),
            "coverage_median": float(np.median([r["coverage"] for r in group])),
        }
    written: list = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "texture_results.csv").write_text(csv_text, encoding="utf-8")
        (out / "texture_summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=1), encoding="utf-8")
        written = [str(out / "texture_results.csv"), str(out / "texture_summary.json")]
    return ExperimentResult(rows=all_rows, csv_text=csv_text, summary=summary,
                            error_count=summary["error_count"], written=written)


# ---------------------------------------------------------------------------
# Overlay rendering
# ---------------------------------------------------------------------------

def _draw_line(image: np.ndarray, x0: float, y0: float, x1: float, y1: float,
               color) -> None:
    h, w = image.shape[:2]
    steps = int(2 * max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.round(np.linspace(x0, x1, steps)).astype(int)
    ys = np.round(np.linspace(y0, y1, steps)).astype(int)
    keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    image[ys[keep], xs[keep]] = color


def render_overlay(buffers, field: DisplacementField, stride: int = 8) -> np.ndarray:
    """RGB render with a displacement arrow at every stride-th valid pixel.

    Arrows are line segments from the pixel to pixel + displacement with a
    contrasting endpoint dot; zero-length displacements draw nothing.
    """
    if stride < 1:
        raise HarnessError("stride must be >= 1")
    image = np.where(buffers.mask[..., None], buffers.rgb, 0.12)
    line_color = np.array([0.1, 1.0, 0.2])
    tip_color = np.array([1.0, 0.25, 0.1])
    h, w = buffers.mask.shape
    for y in range(0, h, stride):
        for x in range(0, w, stride):
            if not buffers.mask[y, x]:
                continue
            dx, dy = field.vectors[y, x]
            if math.hypot(dx, dy) < 0.5:
                continue
            _draw_line(image, x, y, x + dx, y + dy, line_color)
            tx, ty = int(round(x + dx)), int(round(y + dy))
            if 0 <= tx < w and 0 <= ty < h:
                image[ty, tx] = tip_color
    return image
