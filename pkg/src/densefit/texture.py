"""Per-vertex texture construction by multi-frame back-projection and median,
plus the perturbations used in robustness studies.

Colors are kept per-vertex (they only ever feed the rasterizer as vertex
attributes) and sampled nearest-pixel so that rendering a texture and
back-projecting it is a fixed point at well-covered vertices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bodymodel import BodyModel, forward
from .camera import project
from .arrayjson import array_field, arrays_to_lists, dump_doc, int_field, load_doc
from .rasterizer import rasterize, vertex_visibility


class TextureError(ValueError):
    pass


@dataclass(eq=False)
class VertexTexture:
    colors: np.ndarray        # (N, 3) in [0, 1]
    sample_count: np.ndarray  # (N,) int
    covered: np.ndarray       # (N,) bool; covered[i] iff sample_count[i] > 0

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64)
        self.sample_count = np.asarray(self.sample_count, dtype=np.int64)
        self.covered = np.asarray(self.covered, dtype=bool)
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise TextureError("texture colors must lie in [0, 1]")
        if np.any(self.covered != (self.sample_count > 0)):
            raise TextureError("coverage must equal sample_count > 0")


def backproject(frames, model: BodyModel) -> list:
    """Collect per-vertex color samples across frames.

    Each frame is (image (H, W, 3) in [0, 1], pose, shape, camera). The posed
    mesh is rasterized for visibility; every visible vertex (positive
    barycentric mass) samples the image at the pixel nearest its projection.
    Projections outside the image are skipped.
    """
    if not frames:
        raise TextureError("backprojection needs at least one frame")
    samples: list = [[] for _ in range(model.vertex_count)]
    for image, pose, shape, cam in frames:
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape[:2]
        mesh = forward(model, pose, shape)
        buffers = rasterize(mesh, model.faces, cam, w, h)
        visible, _ = vertex_visibility(buffers, model.faces, model.vertex_count)
        uv, ok = project(cam, mesh)
        px = np.floor(uv).astype(np.int64)
        usable = visible & ok & (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
        for i in np.nonzero(usable)[0]:
            samples[i].append(img[px[i, 1], px[i, 0]].copy())
    return samples


def median_texture(samples) -> VertexTexture:
    """Per-channel median of the collected samples.

    Even sample counts take the lower median (deterministic). Vertices with
    no samples get mid-gray and coverage 0.
    """
    n = len(samples)
    colors = np.full((n, 3), 0.5)
    counts = np.zeros(n, dtype=np.int64)
    for i, vals in enumerate(samples):
        if not vals:
            continue
        arr = np.sort(np.asarray(vals, dtype=np.float64), axis=0)
        colors[i] = arr[(arr.shape[0] - 1) // 2]
        counts[i] = arr.shape[0]
    return VertexTexture(colors=np.clip(colors, 0.0, 1.0), sample_count=counts,
                         covered=counts > 0)


def perturb_texture(tex: VertexTexture, mode: str, magnitude: float = 0.0,
                    seed: int = 0, other: VertexTexture | None = None) -> VertexTexture:
    """Perturbed copy of a texture.

    mode "noise": per-entry Gaussian with std magnitude on the 0-255 scale;
    mode "brightness": one Gaussian offset for the whole texture;
    mode "swap": replace the colors with another texture's. Deterministic
    per seed; results are clamped to [0, 1].
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if mode == "noise":
        colors = tex.colors + rng.normal(0.0, magnitude / 255.0, size=tex.colors.shape)
    elif mode == "brightness":
        colors = tex.colors + rng.normal(0.0, magnitude / 255.0)
    elif mode == "swap":
        if other is None:
            raise TextureError("swap mode needs the other texture")
        if other.colors.shape != tex.colors.shape:
            raise TextureError("swap textures must have the same vertex count")
        colors = other.colors.copy()
    else:
        raise TextureError(f"unknown perturbation mode '{mode}'")
    return VertexTexture(colors=np.clip(colors, 0.0, 1.0),
                         sample_count=tex.sample_count.copy(),
                         covered=tex.covered.copy())


def save_texture(tex: VertexTexture, path) -> None:
    doc = {"N": int(tex.colors.shape[0])}
    doc.update(arrays_to_lists(colors=tex.colors, coverage=tex.covered.astype(np.int64)))
    dump_doc(doc, path)


def load_texture(path) -> VertexTexture:
    doc = load_doc(path)
    n = int_field(doc, "N")
    colors = array_field(doc, "colors", (n, 3))
    covered = array_field(doc, "coverage", (n,), dtype=np.int64) > 0
    return VertexTexture(colors=colors, sample_count=covered.astype(np.int64),
                         covered=covered)
