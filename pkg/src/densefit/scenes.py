"""Synthetic scene generation and parameter perturbation.

A scene is a body model with ground-truth pose/shape/camera, an image size
and a per-vertex texture. Scene seeds derive from the master seed by a
counter-based split, so changing the scene count never reshuffles earlier
scenes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bodymodel import BodyModel, forward
from .camera import Camera, frame_camera, project
from .rasterizer import rasterize, vertex_visibility
from .texture import VertexTexture


class SceneError(ValueError):
    pass


# Plausible-pose sampler spreads (radians); the prior is fitted to the same
# distribution the scenes are drawn from.
_BODY_SPREAD = 0.18
_ROOT_YAW = 0.45
_ROOT_TILT = 0.08
_SHAPE_SPREAD = 0.6


@dataclass(eq=False)
class Scene:
    model: BodyModel
    index: int
    seed: int
    pose: np.ndarray       # (J, 3) ground truth
    shape: np.ndarray      # (B,) ground truth
    camera: Camera
    texture: VertexTexture
    visible_fraction: float

    def to_dict(self) -> dict:
        return {
            "index": self.index, "seed": self.seed,
            "pose": self.pose.tolist(), "shape": self.shape.tolist(),
            "camera": self.camera.to_dict(),
            "texture": self.texture.colors.tolist(),
            "visible_fraction": self.visible_fraction,
        }


def scene_seed(master_seed: int, index: int, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(index, *extra))


def sample_body_pose(joint_count: int, rng: np.random.Generator) -> np.ndarray:
    """Plausible ground-truth pose: a bit of bend per joint, a larger yaw and
    a small tilt at the root."""
    pose = rng.normal(0.0, _BODY_SPREAD, size=(joint_count, 3))
    pose[0, 0] = rng.normal(0.0, _ROOT_TILT)
    pose[0, 1] = rng.uniform(-_ROOT_YAW, _ROOT_YAW)
    pose[0, 2] = rng.normal(0.0, _ROOT_TILT)
    return pose


def pose_pool(model: BodyModel, count: int, seed: int) -> np.ndarray:
    """Body-pose vectors (root excluded) drawn from the scene distribution,
    for fitting the pose prior."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xF00,)))
    rows = [sample_body_pose(model.joint_count, rng)[1:].reshape(-1) for _ in range(count)]
    return np.asarray(rows)


def procedural_texture(model: BodyModel, rng: np.random.Generator) -> VertexTexture:
    """Smooth per-vertex colors from sinusoids of template position."""
    pos = model.template
    colors = np.empty((model.vertex_count, 3))
    for c in range(3):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(4.0, 12.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        colors[:, c] = 0.5 + 0.35 * np.sin(freq * (pos @ direction) + phase)
    colors = np.clip(colors, 0.0, 1.0)
    counts = np.ones(model.vertex_count, dtype=np.int64)
    return VertexTexture(colors=colors, sample_count=counts, covered=counts > 0)


def make_scene(model: BodyModel, index: int, master_seed: int, width: int, height: int,
               min_visible_fraction: float = 0.3, max_tries: int = 25) -> Scene:
    """Draw a valid scene: ground-truth mesh fully in front of the camera and
    at least `min_visible_fraction` of the vertices visible. Invalid draws are
    regenerated from sub-seeds."""
    for attempt in range(max_tries):
        ss = scene_seed(master_seed, index, attempt)
        rng = np.random.default_rng(ss)
        pose = sample_body_pose(model.joint_count, rng)
        shape = rng.normal(0.0, _SHAPE_SPREAD, size=model.shape_count)
        mesh = forward(model, pose, shape)
        center = 0.5 * (mesh.min(axis=0) + mesh.max(axis=0))
        extent = float(np.linalg.norm(mesh.max(axis=0) - mesh.min(axis=0)))
        cam = frame_camera(center, extent, width, height,
                           fill=rng.uniform(0.5, 0.62), yaw=rng.uniform(-0.35, 0.35))
        _, in_front = project(cam, mesh)
        if not in_front.all():
            continue
        buffers = rasterize(mesh, model.faces, cam, width, height)
        visible, _ = vertex_visibility(buffers, model.faces, model.vertex_count)
        frac = float(visible.mean())
        if frac < min_visible_fraction:
            continue
        texture = procedural_texture(model, rng)
        return Scene(model=model, index=index, seed=int(ss.generate_state(1)[0]),
                     pose=pose, shape=shape, camera=cam, texture=texture,
                     visible_fraction=frac)
    raise SceneError(f"could not generate a valid scene for index {index} "
                     f"after {max_tries} attempts")


def perturb_params(pose, shape, camera: Camera, pose_sigma: float, shape_sigma: float,
                   translation_sigma: float, seed) -> tuple[np.ndarray, np.ndarray, Camera]:
    """Add i.i.d. Gaussian noise per coordinate to pose, shape and camera
    translation. Deterministic per seed; all sigmas zero is the identity."""
    rng = np.random.default_rng(seed)
    pose = np.asarray(pose, dtype=np.float64)
    shape = np.asarray(shape, dtype=np.float64)
    new_pose = pose + rng.normal(0.0, pose_sigma, size=pose.shape) if pose_sigma > 0 else pose.copy()
    new_shape = shape + rng.normal(0.0, shape_sigma, size=shape.shape) if shape_sigma > 0 else shape.copy()
    if translation_sigma > 0:
        new_cam = camera.with_translation(
            camera.translation + rng.normal(0.0, translation_sigma, size=3))
    else:
        new_cam = camera
    return new_pose, new_shape, new_cam
