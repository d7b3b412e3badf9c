"""Refinement optimizer.

Minimizes a weighted sum of a robust reprojection term (dense per-vertex 2D
targets or a sparse-keypoint baseline), a Gaussian-mixture pose prior, a
shape regularizer, and an optional hinge bending penalty, over pose, shape and
camera translation. First-order staged optimization: per-parameter adaptive
step scaling with backtracking on objective increase; the best-seen
parameters are returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import _diff
from .bodymodel import BodyModel, check_pose, check_shape
from .camera import Camera
from .priors import GmmPrior
from .rasterizer import RenderBuffers


class FitError(ValueError):
    pass


class FitDivergence(RuntimeError):
    """Objective became non-finite; carries the partial trace."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


# Parameter blocks addressable by optimization stages.
_BLOCKS = ("root", "body", "pose", "shape", "cam_t", "cam_rot")

TERM_KEYS = ("data", "pose_prior", "shape_prior", "bending")


@dataclass(frozen=True)
class Stage:
    params: tuple
    iterations: int
    step: float

    def __post_init__(self):
        for p in self.params:
            if p not in _BLOCKS:
                raise FitError(f"unknown parameter block '{p}'")
        if self.iterations < 1 or self.step <= 0:
            raise FitError("stage needs iterations >= 1 and step > 0")


@dataclass(frozen=True)
class FitConfig:
    """Objective weights, robust-cost scale, and the stage schedule.

    The default schedule spends 30 iterations on camera translation plus
    root rotation, then 70 on everything. scale_mode "fixed" multiplies the
    data term by dense_factor/sparse_factor; "person-size" additionally
    divides squared pixel residuals by (bbox diagonal / reference)^2.
    """

    data_weight: float = 1.0
    pose_prior_weight: float = 1.0
    shape_prior_weight: float = 1.0
    bending_weight: float = 0.0
    gm_sigma: float = 100.0
    gm_mode: str = "norm"              # "norm" | "per-coordinate"
    scale_mode: str = "fixed"          # "fixed" | "person-size"
    dense_factor: float = 0.4
    sparse_factor: float = 5.0
    person_size_reference: float = 200.0
    gmm_mode: str = "min-component"
    stages: tuple = (Stage(("cam_t", "root"), 30, 0.05),
                     Stage(("pose", "shape", "cam_t"), 70, 0.03))
    tol: float = 0.0                   # relative best-objective decrease
    patience: int = 8
    use_pose_blendshapes: bool = True

    def __post_init__(self):
        if min(self.data_weight, self.pose_prior_weight, self.shape_prior_weight,
               self.bending_weight) < 0:
            raise FitError("objective weights must be >= 0")
        if self.gm_sigma <= 0:
            raise FitError("gm_sigma must be positive")
        if self.gm_mode not in ("norm", "per-coordinate"):
            raise FitError(f"unknown gm_mode '{self.gm_mode}'")
        if self.scale_mode not in ("fixed", "person-size"):
            raise FitError(f"unknown scale_mode '{self.scale_mode}'")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "data_weight", "pose_prior_weight", "shape_prior_weight", "bending_weight",
            "gm_sigma", "gm_mode", "scale_mode", "dense_factor", "sparse_factor",
            "person_size_reference", "gmm_mode", "tol", "patience", "use_pose_blendshapes")}
        d["stages"] = [{"params": list(s.params), "iterations": s.iterations, "step": s.step}
                       for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "FitConfig":
        doc = dict(doc)
        stages = doc.pop("stages", None)
        if stages is not None:
            doc["stages"] = tuple(Stage(tuple(s["params"]), int(s["iterations"]), float(s["step"]))
                                  for s in stages)
        return cls(**doc)


@dataclass(eq=False)
class DenseTarget:
    """Per-vertex 2D targets with visibility weights."""

    points: np.ndarray          # (N, 2) pixels
    weights: np.ndarray         # (N,) in {0, 1} (or confidences)
    factor: float
    residual_scale_sq: float = 1.0


@dataclass(eq=False)
class SparseTarget:
    """Keypoint 2D targets with confidences."""

    points: np.ndarray          # (k, 2) pixels
    conf: np.ndarray            # (k,)
    factor: float
    residual_scale_sq: float = 1.0


def _person_scale_sq(config: FitConfig, buffers: RenderBuffers | None) -> float:
    if config.scale_mode != "person-size":
        return 1.0
    if buffers is None or not buffers.mask.any():
        raise FitError("person-size scaling needs a rendering with valid pixels")
    yy, xx = np.nonzero(buffers.mask)
    diag = math.hypot(xx.max() - xx.min() + 1, yy.max() - yy.min() + 1)
    return (config.person_size_reference / diag) ** 2


def make_dense_target(points, weights, config: FitConfig,
                      buffers: RenderBuffers | None = None) -> DenseTarget:
    w = np.asarray(weights, dtype=np.float64)
    if not np.any(w > 0):
        raise FitError("dense target has no visible vertices")
    return DenseTarget(points=np.asarray(points, dtype=np.float64), weights=w,
                       factor=config.dense_factor,
                       residual_scale_sq=_person_scale_sq(config, buffers))


def make_sparse_target(points, conf, config: FitConfig,
                       buffers: RenderBuffers | None = None) -> SparseTarget:
    c = np.asarray(conf, dtype=np.float64)
    if not np.any(c > 0):
        raise FitError("sparse target has all-zero confidences")
    return SparseTarget(points=np.asarray(points, dtype=np.float64), conf=c,
                        factor=config.sparse_factor,
                        residual_scale_sq=_person_scale_sq(config, buffers))


def geman_mcclure(residual_norm_sq, sigma: float):
    """Robust cost sigma^2 * q / (q + sigma^2) on squared residual norms;
    bounded by sigma^2, so outliers saturate."""
    q = np.asarray(residual_norm_sq, dtype=np.float64)
    s2 = float(sigma) * float(sigma)
    out = s2 * q / (q + s2)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Objective graph
# ---------------------------------------------------------------------------

def _robust_residuals(px, points, scale_sq: float, config: FitConfig) -> torch.Tensor:
    sq = (px - _diff.to_t(points)) ** 2 * scale_sq
    if config.gm_mode == "per-coordinate":
        return _diff.geman_mcclure_t(sq, config.gm_sigma).sum(-1)
    return _diff.geman_mcclure_t(sq.sum(-1), config.gm_sigma)


def _data_term_t(mt, ct, verts_t, trans_t, rot_delta_t, data, config: FitConfig) -> torch.Tensor:
    if isinstance(data, DenseTarget):
        px = _diff.project_t(ct, verts_t, translation=trans_t, rot_delta=rot_delta_t)
        rho = _robust_residuals(px, data.points, data.residual_scale_sq, config)
        return data.factor * (_diff.to_t(data.weights) * rho).sum()
    if isinstance(data, SparseTarget):
        kp = mt.keypoint_regressor @ verts_t
        px = _diff.project_t(ct, kp, translation=trans_t, rot_delta=rot_delta_t)
        rho = _robust_residuals(px, data.points, data.residual_scale_sq, config)
        return data.factor * (_diff.to_t(data.conf) * rho).sum()
    raise FitError(f"unknown data term type: {type(data).__name__}")


def _objective_t(model: BodyModel, camera: Camera, pose_t, shape_t, trans_t, rot_delta_t,
                 data, prior: GmmPrior | None, config: FitConfig) -> tuple[torch.Tensor, dict]:
    mt = model.tensors()
    ct = _diff.CameraTensors.from_camera(camera)
    zero = torch.zeros((), dtype=_diff.DTYPE)
    terms = {k: zero for k in TERM_KEYS}
    if config.data_weight > 0 and data is not None:
        verts_t, _ = _diff.forward_t(mt, pose_t, shape_t,
                                     use_pose_blendshapes=config.use_pose_blendshapes)
        terms["data"] = config.data_weight * _data_term_t(mt, ct, verts_t, trans_t,
                                                          rot_delta_t, data, config)
    if config.pose_prior_weight > 0 and prior is not None:
        body = pose_t[1:].reshape(-1)
        terms["pose_prior"] = config.pose_prior_weight * _diff.gmm_nll_t(
            prior.tensors(), body, config.gmm_mode)
    if config.shape_prior_weight > 0:
        terms["shape_prior"] = config.shape_prior_weight * _diff.shape_reg_t(shape_t)
    if config.bending_weight > 0 and model.hinge_indices is not None and model.hinge_indices.size:
        terms["bending"] = config.bending_weight * _diff.bending_t(
            pose_t.reshape(-1), torch.as_tensor(model.hinge_indices),
            _diff.to_t(model.hinge_signs))
    total = terms["data"] + terms["pose_prior"] + terms["shape_prior"] + terms["bending"]
    return total, terms


def _leaves(model: BodyModel, pose, shape, camera: Camera, requires: set):
    pose_t = _diff.to_t(check_pose(pose, model.joint_count)).clone()
    shape_t = _diff.to_t(check_shape(shape, model.shape_count)).clone()
    trans_t = _diff.to_t(camera.translation).clone()
    rot_delta_t = torch.zeros(3, dtype=_diff.DTYPE)
    pose_t.requires_grad_("pose" in requires or "root" in requires or "body" in requires)
    shape_t.requires_grad_("shape" in requires)
    trans_t.requires_grad_("cam_t" in requires)
    rot_delta_t.requires_grad_("cam_rot" in requires)
    return pose_t, shape_t, trans_t, rot_delta_t


def objective(model: BodyModel, pose, shape, camera: Camera, data,
              prior: GmmPrior | None, config: FitConfig) -> tuple[float, dict]:
    """Weighted objective and its term breakdown (weighted contributions;
    the breakdown sums to the total)."""
    with torch.no_grad():
        total, terms = _objective_t(model, camera,
                                    _diff.to_t(check_pose(pose, model.joint_count)),
                                    _diff.to_t(check_shape(shape, model.shape_count)),
                                    _diff.to_t(camera.translation), None,
                                    data, prior, config)
    return float(total), {k: float(v) for k, v in terms.items()}


def reproj_dense(model: BodyModel, pose, shape, camera: Camera, points, weights,
                 config: FitConfig, buffers: RenderBuffers | None = None) -> float:
    """Robust dense reprojection term, scaled per config (unweighted by
    data_weight)."""
    data = make_dense_target(points, weights, config, buffers)
    with torch.no_grad():
        mt = model.tensors()
        ct = _diff.CameraTensors.from_camera(camera)
        verts_t, _ = _diff.forward_t(mt, _diff.to_t(check_pose(pose, model.joint_count)),
                                     _diff.to_t(check_shape(shape, model.shape_count)),
                                     use_pose_blendshapes=config.use_pose_blendshapes)
        return float(_data_term_t(mt, ct, verts_t, None, None, data, config))


def reproj_sparse(model: BodyModel, pose, shape, camera: Camera, joints2d, conf,
                  config: FitConfig, buffers: RenderBuffers | None = None) -> float:
    """Robust sparse-keypoint reprojection term, scaled per config."""
    data = make_sparse_target(joints2d, conf, config, buffers)
    with torch.no_grad():
        mt = model.tensors()
        ct = _diff.CameraTensors.from_camera(camera)
        verts_t, _ = _diff.forward_t(mt, _diff.to_t(check_pose(pose, model.joint_count)),
                                     _diff.to_t(check_shape(shape, model.shape_count)),
                                     use_pose_blendshapes=config.use_pose_blendshapes)
        return float(_data_term_t(mt, ct, verts_t, None, None, data, config))


def _flat_slices(model: BodyModel) -> dict:
    p = 3 * model.joint_count
    return {"pose": slice(0, p), "shape": slice(p, p + model.shape_count),
            "cam_t": slice(p + model.shape_count, p + model.shape_count + 3)}


def objective_gradient(model: BodyModel, pose, shape, camera: Camera, data,
                       prior: GmmPrior | None, config: FitConfig,
                       active=("pose", "shape", "cam_t")) -> np.ndarray:
    """Gradient of the objective over the flat layout [pose | shape | cam_t].

    Entries for blocks not in `active` are exactly zero. "root"/"body"
    select the first/remaining pose rows.
    """
    requires = set(active)
    for name in requires:
        if name not in _BLOCKS:
            raise FitError(f"unknown parameter block '{name}'")
    pose_t, shape_t, trans_t, rot_delta_t = _leaves(model, pose, shape, camera, requires)
    total, _ = _objective_t(model, camera, pose_t, shape_t, trans_t, rot_delta_t,
                            data, prior, config)
    leaves = [t for t in (pose_t, shape_t, trans_t) if t.requires_grad]
    grads = {}
    if leaves and total.requires_grad:
        computed = torch.autograd.grad(total, leaves, allow_unused=True)
        grads = {id(leaf): g for leaf, g in zip(leaves, computed)}

    def grad_of(t):
        g = grads.get(id(t))
        return np.zeros(t.shape) if g is None else g.detach().numpy()

    sl = _flat_slices(model)
    out = np.zeros(sl["cam_t"].stop)
    g_pose = grad_of(pose_t).reshape(-1)
    if "pose" in requires:
        out[sl["pose"]] = g_pose
    else:
        if "root" in requires:
            out[0:3] = g_pose[0:3]
        if "body" in requires:
            out[3:sl["pose"].stop] = g_pose[3:]
    if "shape" in requires:
        out[sl["shape"]] = grad_of(shape_t)
    if "cam_t" in requires:
        out[sl["cam_t"]] = grad_of(trans_t)
    return out


# ---------------------------------------------------------------------------
# Fit loop
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FitResult:
    pose: np.ndarray
    shape: np.ndarray
    camera: Camera
    trace: list              # dict rows per iteration
    converged: bool
    iterations: int
    best_objective: float
    terms: dict              # breakdown at the best-seen parameters

    def trace_csv(self) -> str:
        header = "iteration,stage,total,data,pose_prior,shape_prior,bending,best_total"
        lines = [header]
        for row in self.trace:
            lines.append("{iteration},{stage},{total:.12g},{data:.12g},{pose_prior:.12g},"
                         "{shape_prior:.12g},{bending:.12g},{best_total:.12g}".format(**row))
        return "\n".join(lines) + "\n"


class _Adam:
    """Diagonal-moment step direction; the caller owns the step length."""

    def __init__(self, shapes):
        self.m = [torch.zeros(s, dtype=_diff.DTYPE) for s in shapes]
        self.v = [torch.zeros(s, dtype=_diff.DTYPE) for s in shapes]
        self.t = 0

    def direction(self, grads):
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        out = []
        for i, g in enumerate(grads):
            if g is None:
                out.append(None)
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            out.append(m_hat / (torch.sqrt(v_hat) + eps))
        return out


def _mask_pose_grad(grad: torch.Tensor, requires: set) -> torch.Tensor:
    if "pose" in requires:
        return grad
    masked = torch.zeros_like(grad)
    if "root" in requires:
        masked[0] = grad[0]
    if "body" in requires:
        masked[1:] = grad[1:]
    return masked


def fit(model: BodyModel, pose, shape, camera: Camera, data,
        prior: GmmPrior | None, config: FitConfig | None = None) -> FitResult:
    """Run the staged refinement and return the best-seen parameters.

    Raises FitError if the objective is non-finite at the initialization and
    FitDivergence (with the partial trace attached) if it becomes NaN later.
    """
    config = config or FitConfig()
    init_total, _ = objective(model, pose, shape, camera, data, prior, config)
    if not math.isfinite(init_total):
        raise FitError(f"objective is not finite at the initialization: {init_total}")

    pose_t = _diff.to_t(check_pose(pose, model.joint_count)).clone().requires_grad_(True)
    shape_t = _diff.to_t(check_shape(shape, model.shape_count)).clone().requires_grad_(True)
    trans_t = _diff.to_t(camera.translation).clone().requires_grad_(True)
    uses_cam_rot = any("cam_rot" in stage.params for stage in config.stages)
    rot_delta_t = torch.zeros(3, dtype=_diff.DTYPE, requires_grad=True)
    leaves = (pose_t, shape_t, trans_t, rot_delta_t)

    def rot_arg():
        return rot_delta_t if uses_cam_rot else None

    def current():
        with torch.no_grad():
            total, terms = _objective_t(model, camera, pose_t, shape_t, trans_t,
                                        rot_arg(), data, prior, config)
        return float(total), terms

    def snapshot():
        rot = camera.rotation
        if float(rot_delta_t.detach().abs().sum()) > 0:
            with torch.no_grad():
                rot = (_diff.rodrigues_t(rot_delta_t) @ _diff.to_t(camera.rotation)).numpy()
        cam = Camera(camera.fx, camera.fy, camera.cx, camera.cy, rot,
                     trans_t.detach().numpy().copy(), camera.width, camera.height)
        return (pose_t.detach().numpy().copy(), shape_t.detach().numpy().copy(), cam)

    best_total, best_terms = init_total, None
    best_params = snapshot()
    trace: list = []
    iterations = 0
    converged = False

    for stage_idx, stage in enumerate(config.stages):
        requires = set(stage.params)
        active = [i for i, (t, names) in enumerate(zip(
            leaves, (("pose", "root", "body"), ("shape",), ("cam_t",), ("cam_rot",))))
            if requires & set(names)]
        adam = _Adam([leaves[i].shape for i in active])
        lr = stage.step
        stall = 0

        for _ in range(stage.iterations):
            total_t, terms_t = _objective_t(model, camera, pose_t, shape_t, trans_t,
                                            rot_arg(), data, prior, config)
            total = float(total_t.detach())
            if not math.isfinite(total):
                raise FitDivergence("objective became non-finite", trace)
            if active and total_t.requires_grad:
                grads = torch.autograd.grad(total_t, [leaves[i] for i in active],
                                            allow_unused=True)
            else:
                grads = [None] * len(active)
            grads = [torch.zeros_like(leaves[i]) if g is None else g
                     for i, g in zip(active, grads)]
            if active and active[0] == 0:  # pose leaf first when present
                grads[0] = _mask_pose_grad(grads[0], requires)
            directions = adam.direction(grads)

            originals = [leaves[i].detach().clone() for i in active]
            scale = 1.0
            accepted = False
            trial_total, trial_terms = total, terms_t
            for _try in range(9):
                with torch.no_grad():
                    for j, i in enumerate(active):
                        leaves[i].copy_(originals[j] - scale * lr * directions[j])
                trial_total, trial_terms = current()
                if math.isfinite(trial_total) and trial_total <= total + 1e-12:
                    accepted = True
                    break
                scale *= 0.5
            if not accepted:
                with torch.no_grad():
                    for j, i in enumerate(active):
                        leaves[i].copy_(originals[j])
                lr = max(lr * 0.5, stage.step * 1e-6)
                now_total, now_terms = total, terms_t
            else:
                if scale < 1.0:
                    lr = max(lr * 0.5, stage.step * 1e-6)
                else:
                    lr = min(lr * 1.05, stage.step * 4.0)
                now_total, now_terms = trial_total, trial_terms
            now_terms = {k: float(v.detach()) for k, v in now_terms.items()}
            prev_best = best_total
            if now_total < best_total:
                best_total, best_terms = now_total, dict(now_terms)
                best_params = snapshot()
            iterations += 1
            trace.append({
                "iteration": iterations, "stage": stage_idx, "total": now_total,
                **now_terms,
                "best_total": best_total,
            })
            if config.tol > 0:
                improved = prev_best - best_total
                stall = 0 if improved > config.tol * max(1.0, abs(best_total)) else stall + 1
                if stall >= config.patience:
                    converged = True
                    break

    if best_terms is None:
        _, terms0 = objective(model, pose, shape, camera, data, prior, config)
        best_terms = terms0
    pose_best, shape_best, cam_best = best_params
    return FitResult(pose=pose_best, shape=shape_best, camera=cam_best, trace=trace,
                     converged=converged, iterations=iterations,
                     best_objective=best_total, terms=best_terms)
