"""Differentiable core shared by the body model and the fitter.

Everything here is torch float64 so that the refinement objective is a single
autograd graph from (pose, shape, camera translation) down to the scalar loss.
Public numpy-facing wrappers live in the owning modules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64

# Below this squared magnitude the Rodrigues coefficients switch to their
# series expansion; keeps value and gradient finite at the zero rotation.
_TAYLOR_EPS_SQ = 1e-16


def to_t(a) -> torch.Tensor:
    arr = np.asarray(a)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.as_tensor(arr, dtype=DTYPE)


def skew(v: torch.Tensor) -> torch.Tensor:
    """Skew-symmetric matrices from vectors, (..., 3) -> (..., 3, 3)."""
    x, y, z = v.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack(
        [
            torch.stack([o, -z, y], -1),
            torch.stack([z, o, -x], -1),
            torch.stack([-y, x, o], -1),
        ],
        -2,
    )


def rodrigues_t(axis_angle: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3).

    Uses R = I + a*K + b*K^2 with K the unnormalized skew matrix,
    a = sin(t)/t and b = (1-cos(t))/t^2, so no axis normalization is needed
    and the zero rotation is smooth.
    """
    t_sq = (axis_angle * axis_angle).sum(-1)
    t = torch.sqrt(torch.clamp(t_sq, min=_TAYLOR_EPS_SQ))
    small = t_sq < _TAYLOR_EPS_SQ
    a = torch.where(small, 1.0 - t_sq / 6.0, torch.sin(t) / t)
    b = torch.where(small, 0.5 - t_sq / 24.0, (1.0 - torch.cos(t)) / torch.clamp(t_sq, min=_TAYLOR_EPS_SQ))
    k = skew(axis_angle)
    eye = torch.eye(3, dtype=axis_angle.dtype)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


@dataclass(eq=False)
class ModelTensors:
    """Torch copies of the body-model arrays, built once per model."""

    template: torch.Tensor          # (N, 3)
    shape_blendshapes: torch.Tensor  # (B, N, 3)
    joint_regressor: torch.Tensor   # (J, N)
    keypoint_regressor: torch.Tensor  # (k, N)
    skinning_weights: torch.Tensor  # (N, J)
    parents: list                   # python ints, parents[0] == -1
    pose_blendshapes: torch.Tensor | None  # (9*(J-1), N, 3) or None

    @classmethod
    def from_arrays(cls, template, shape_blendshapes, joint_regressor,
                    keypoint_regressor, skinning_weights, parents,
                    pose_blendshapes=None) -> "ModelTensors":
        return cls(
            template=to_t(template),
            shape_blendshapes=to_t(shape_blendshapes),
            joint_regressor=to_t(joint_regressor),
            keypoint_regressor=to_t(keypoint_regressor),
            skinning_weights=to_t(skinning_weights),
            parents=[int(p) for p in parents],
            pose_blendshapes=None if pose_blendshapes is None else to_t(pose_blendshapes),
        )


def forward_t(mt: ModelTensors, pose: torch.Tensor, shape: torch.Tensor,
              use_pose_blendshapes: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Pose + shape -> (vertices (N, 3), posed joints (J, 3)).

    Shape blendshapes offset the template, joints are regressed from the
    shaped template, local joint rotations compose down the kinematic tree,
    and vertices are skinned against the rest joints.
    """
    n_joints = len(mt.parents)
    n_verts = mt.template.shape[0]
    v_shaped = mt.template + (shape @ mt.shape_blendshapes.reshape(shape.shape[0], -1)
                              ).reshape(n_verts, 3)
    j_rest = mt.joint_regressor @ v_shaped  # (J, 3)

    rots = rodrigues_t(pose)  # (J, 3, 3)

    if use_pose_blendshapes and mt.pose_blendshapes is not None:
        eye = torch.eye(3, dtype=DTYPE)
        feat = (rots[1:] - eye).reshape(-1)  # (9*(J-1),)
        v_shaped = v_shaped + (feat @ mt.pose_blendshapes.reshape(feat.shape[0], -1)
                               ).reshape(n_verts, 3)

    # World transforms per joint: rotation and translation parts kept separate.
    world_r = [rots[0]]
    world_p = [j_rest[0]]
    for j in range(1, n_joints):
        p = mt.parents[j]
        world_r.append(world_r[p] @ rots[j])
        world_p.append(world_p[p] + world_r[p] @ (j_rest[j] - j_rest[p]))
    world_r = torch.stack(world_r)  # (J, 3, 3)
    world_p = torch.stack(world_p)  # (J, 3)

    # Skinning transform relative to the rest pose: x -> R (x - j_rest) + p.
    trans = world_p - (world_r @ j_rest[:, :, None]).squeeze(-1)  # (J, 3)
    blended_r = (mt.skinning_weights @ world_r.reshape(n_joints, 9)).reshape(n_verts, 3, 3)
    blended_t = mt.skinning_weights @ trans
    verts = (blended_r @ v_shaped[:, :, None]).squeeze(-1) + blended_t
    return verts, world_p


@dataclass(eq=False)
class CameraTensors:
    fx: torch.Tensor
    fy: torch.Tensor
    cx: torch.Tensor
    cy: torch.Tensor
    rotation: torch.Tensor   # (3, 3) world -> camera
    translation: torch.Tensor  # (3,)

    @classmethod
    def from_camera(cls, cam) -> "CameraTensors":
        return cls(
            fx=to_t(cam.fx), fy=to_t(cam.fy), cx=to_t(cam.cx), cy=to_t(cam.cy),
            rotation=to_t(cam.rotation), translation=to_t(cam.translation),
        )


def project_t(ct: CameraTensors, points: torch.Tensor,
              translation: torch.Tensor | None = None,
              rot_delta: torch.Tensor | None = None,
              eps_z: float = 1e-4) -> torch.Tensor:
    """Perspective projection (M, 3) -> (M, 2) pixels.

    `translation` / `rot_delta` override or perturb the camera extrinsics so
    they can be optimization variables. Depths are clamped at eps_z to keep
    the graph finite if a vertex crosses the camera plane mid-optimization.
    """
    rot = ct.rotation if rot_delta is None else rodrigues_t(rot_delta) @ ct.rotation
    t = ct.translation if translation is None else translation
    cam_pts = points @ rot.transpose(0, 1) + t
    z = torch.clamp(cam_pts[:, 2], min=eps_z)
    u = ct.fx * cam_pts[:, 0] / z + ct.cx
    v = ct.fy * cam_pts[:, 1] / z + ct.cy
    return torch.stack([u, v], -1)


def geman_mcclure_t(residual_sq: torch.Tensor, sigma: float) -> torch.Tensor:
    s2 = sigma * sigma
    return s2 * residual_sq / (residual_sq + s2)


@dataclass(eq=False)
class GmmTensors:
    means: torch.Tensor        # (K, D)
    precisions: torch.Tensor   # (K, D, D)
    log_weights: torch.Tensor  # (K,)
    log_normalizers: torch.Tensor  # (K,) 0.5*(D log 2pi - logdet precision)

    @classmethod
    def from_prior(cls, prior) -> "GmmTensors":
        return cls(
            means=to_t(prior.means),
            precisions=to_t(prior.precisions),
            log_weights=to_t(np.log(prior.weights)),
            log_normalizers=to_t(prior.log_normalizers),
        )


def gmm_nll_t(gt: GmmTensors, theta_body: torch.Tensor, mode: str = "min-component") -> torch.Tensor:
    diff = theta_body[None, :] - gt.means  # (K, D)
    quad = 0.5 * ((diff[:, None, :] @ gt.precisions).squeeze(1) * diff).sum(-1)
    comp_nll = quad - gt.log_weights + gt.log_normalizers
    if mode == "min-component":
        return comp_nll.min()
    if mode == "log-sum-exp":
        return -torch.logsumexp(-comp_nll, dim=0)
    raise ValueError(f"unknown gmm mode: {mode}")


def shape_reg_t(shape: torch.Tensor) -> torch.Tensor:
    return (shape * shape).sum()


def bending_t(pose_flat: torch.Tensor, hinge_indices: torch.Tensor, hinge_signs: torch.Tensor) -> torch.Tensor:
    return torch.exp(hinge_signs * pose_flat[hinge_indices]).sum()
