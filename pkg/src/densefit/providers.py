"""Displacement providers: stand-ins for a learned predictor.

The oracle composes the reference per-vertex field with barycentric
interpolation; the noisy oracle adds per-pixel Gaussian error (optionally
blurred for spatial correlation); sparse mode produces ground-truth keypoints
with jitter/dropout; external mode loads a field file.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bodymodel import forward, regress_keypoints
from .camera import Camera, project
from .displacement import (DisplacementField, FieldError, gt_vertex_displacements,
                           read_field, vertex_to_pixel)
from .rasterizer import RenderBuffers, vertex_visibility


class ProviderError(ValueError):
    pass


@dataclass(frozen=True)
class ProviderSpec:
    kind: str                      # oracle | noisy_oracle | sparse_keypoints | external
    noise_sigma: float = 0.0       # pixels, noisy_oracle
    correlation_radius: float = 0.0  # >0 blurs the noise before rescaling
    jitter_sigma: float = 0.0      # pixels, sparse_keypoints
    dropout: float = 0.0           # fraction of keypoints dropped (conf 0)
    path: str | None = None        # external field file
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("oracle", "noisy_oracle", "sparse_keypoints", "external"):
            raise ProviderError(f"unknown provider kind '{self.kind}'")
        if self.noise_sigma < 0 or self.jitter_sigma < 0:
            raise ProviderError("noise sigmas must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ProviderError("dropout must lie in [0, 1)")
        if self.kind == "external" and not self.path:
            raise ProviderError("external provider needs a file path")

    @property
    def dense(self) -> bool:
        return self.kind in ("oracle", "noisy_oracle", "external")

    def label(self) -> str:
        if self.kind == "noisy_oracle":
            tag = f"noisy_oracle_s{self.noise_sigma:g}"
            if self.correlation_radius > 0:
                tag += f"_r{self.correlation_radius:g}"
            return tag
        if self.kind == "sparse_keypoints":
            return f"sparse_j{self.jitter_sigma:g}_d{self.dropout:g}"
        return self.kind

    def to_dict(self) -> dict:
        return {"kind": self.kind, "noise_sigma": self.noise_sigma,
                "correlation_radius": self.correlation_radius,
                "jitter_sigma": self.jitter_sigma, "dropout": self.dropout,
                "path": self.path, "seed": self.seed}

    @classmethod
    def from_dict(cls, doc: dict) -> "ProviderSpec":
        return cls(**{k: doc[k] for k in doc
                      if k in ("kind", "noise_sigma", "correlation_radius",
                               "jitter_sigma", "dropout", "path", "seed")})


def _blur(noise: np.ndarray, radius: float) -> np.ndarray:
    """Separable Gaussian blur, rescaled to keep the per-pixel std."""
    half = max(1, int(np.ceil(3.0 * radius)))
    x = np.arange(-half, half + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / radius) ** 2)
    kernel /= kernel.sum()
    out = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), 0, noise)
    out = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), 1, out)
    # Each axis shrinks the std by sqrt(sum k^2); restore the per-pixel std.
    return out / (kernel ** 2).sum()


def provide_dense(spec: ProviderSpec, scene, init_pose, init_shape,
                  init_camera: Camera, buffers: RenderBuffers) -> DisplacementField:
    """Dense per-pixel displacement field for the initial rendering."""
    if not spec.dense:
        raise ProviderError(f"provider '{spec.kind}' is not dense")
    if spec.kind == "external":
        field = read_field(spec.path)
        if field.mask.shape != buffers.mask.shape or not np.array_equal(field.mask, buffers.mask):
            raise FieldError("external field mask does not match the rendering")
        return field
    model = scene.model
    visible, mass = vertex_visibility(buffers, model.faces, model.vertex_count)
    vd = gt_vertex_displacements(model, scene.pose, scene.shape, scene.camera,
                                 init_pose, init_shape, init_camera,
                                 visible=visible, mass=mass)
    field = vertex_to_pixel(vd, buffers, model.faces)
    if spec.kind == "noisy_oracle" and spec.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
        noise = rng.normal(0.0, spec.noise_sigma, size=field.vectors.shape)
        if spec.correlation_radius > 0:
            noise = _blur(noise, spec.correlation_radius)
        vectors = field.vectors + np.where(field.mask[..., None], noise, 0.0)
        field = DisplacementField(vectors=vectors, mask=field.mask)
    return field


def provide_sparse(spec: ProviderSpec, scene) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth 2D keypoints (occluded ones included) with jitter/dropout.

    dropout r zeroes the confidence of round(r * k) keypoints chosen per
    seed, so the dropped count is exact.
    """
    if spec.kind != "sparse_keypoints":
        raise ProviderError(f"provider '{spec.kind}' is not sparse")
    model = scene.model
    keypoints = regress_keypoints(model, forward(model, scene.pose, scene.shape))
    uv, ok = project(scene.camera, keypoints)
    conf = ok.astype(np.float64)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    if spec.jitter_sigma > 0:
        uv = uv + rng.normal(0.0, spec.jitter_sigma, size=uv.shape)
    n_drop = int(round(spec.dropout * len(conf)))
    if n_drop:
        conf[rng.choice(len(conf), size=n_drop, replace=False)] = 0.0
    return uv, conf
