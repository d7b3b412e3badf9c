"""3D evaluation metrics: mean per-joint/vertex position error, plus the
Procrustes-aligned and scale-normalized variants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bodymodel import BodyModel, regress_keypoints


class MetricsError(ValueError):
    pass


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise MetricsError(f"point sets must both be (M, 3), got {p.shape} vs {g.shape}")
    return p, g


def mpjpe(pred, gt) -> float:
    """Mean Euclidean distance, in the units of the inputs. No alignment."""
    p, g = _pair(pred, gt)
    return float(np.linalg.norm(p - g, axis=1).mean())


def pa_align(pred, gt) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity Procrustes: (scale, rotation, translation) minimizing
    ||s R pred + t - gt||^2 with det(R) = +1 (no reflections)."""
    p, g = _pair(pred, gt)
    if p.shape[0] < 3:
        raise MetricsError("Procrustes alignment needs at least 3 points")
    mu_p, mu_g = p.mean(axis=0), g.mean(axis=0)
    pc, gc = p - mu_p, g - mu_g
    if np.linalg.matrix_rank(pc, tol=1e-12) < 2:
        raise MetricsError("Procrustes alignment needs non-collinear points")
    cov = pc.T @ gc
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.diag([1.0, 1.0, d])
    rot = vt.T @ flip @ u.T
    denom = (pc * pc).sum()
    scale = (s * np.diag(flip)).sum() / denom
    trans = mu_g - scale * rot @ mu_p
    return float(scale), rot, trans


def pa_mpjpe(pred, gt) -> float:
    """Mean distance after optimal similarity alignment of pred onto gt."""
    scale, rot, trans = pa_align(pred, gt)
    p, g = _pair(pred, gt)
    aligned = scale * p @ rot.T + trans
    return float(np.linalg.norm(aligned - g, axis=1).mean())


def n_mpjpe(pred, gt) -> float:
    """Mean distance after centering both sets and scaling pred by the
    least-squares optimal factor <pred, gt> / <pred, pred>."""
    p, g = _pair(pred, gt)
    pc = p - p.mean(axis=0)
    gc = g - g.mean(axis=0)
    denom = (pc * pc).sum()
    if denom == 0.0:
        raise MetricsError("cannot scale-normalize a degenerate point set")
    scale = (pc * gc).sum() / denom
    return float(np.linalg.norm(scale * pc - gc, axis=1).mean())


# The per-vertex metrics are the same estimators applied to mesh vertices.
pve = mpjpe
pa_pve = pa_mpjpe
n_pve = n_mpjpe


@dataclass
class MetricsReport:
    """All six errors in millimeters, plus a slot for the field end-point error."""

    mpjpe: float
    pa_mpjpe: float
    n_mpjpe: float
    pve: float
    pa_pve: float
    n_pve: float
    epe: float | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("mpjpe", "pa_mpjpe", "n_mpjpe", "pve", "pa_pve", "n_pve", "epe")}


def report(pred_mesh, gt_mesh, model: BodyModel, root_align: bool = False,
           epe: float | None = None) -> MetricsReport:
    """Joint metrics via the model's keypoint regressor, vertex metrics on the
    meshes directly; meters in, millimeters out.

    root_align subtracts the first regressed joint from both meshes before
    the unaligned metrics (off by default)."""
    pred = np.asarray(pred_mesh, dtype=np.float64)
    gt = np.asarray(gt_mesh, dtype=np.float64)
    pred_j = regress_keypoints(model, pred)
    gt_j = regress_keypoints(model, gt)
    if root_align:
        pred = pred - pred_j[0]
        gt = gt - gt_j[0]
        pred_j = pred_j - pred_j[0]
        gt_j = gt_j - gt_j[0]
    mm = 1000.0
    return MetricsReport(
        mpjpe=mm * mpjpe(pred_j, gt_j),
        pa_mpjpe=mm * pa_mpjpe(pred_j, gt_j),
        n_mpjpe=mm * n_mpjpe(pred_j, gt_j),
        pve=mm * pve(pred, gt),
        pa_pve=mm * pa_pve(pred, gt),
        n_pve=mm * n_pve(pred, gt),
        epe=epe,
    )
