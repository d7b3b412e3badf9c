"""Displacement algebra: per-vertex 2D fields, vertex<->pixel transport,
target-vertex construction, and field quality metrics.

All quantities are plain pixels end to end; target positions are recovered by
adding a displacement to a projection, never by rescaling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bodymodel import BodyModel, forward
from .camera import Camera, project
from .rasterizer import RenderBuffers


class FieldError(ValueError):
    pass


@dataclass(eq=False)
class VertexDisplacements:
    """Per-vertex 2D displacements with visibility and barycentric mass.

    vectors[i] is only meaningful where visible[i]; invisible rows are kept
    at zero so downstream code never reads garbage.
    """

    vectors: np.ndarray   # (N, 2) pixels
    visible: np.ndarray   # (N,) bool
    mass: np.ndarray      # (N,) accumulated barycentric mass, >= 0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        self.mass = np.asarray(self.mass, dtype=np.float64)


@dataclass(eq=False)
class DisplacementField:
    """Per-pixel 2D displacements over the validity mask of a rendering."""

    vectors: np.ndarray  # (H, W, 2) pixels
    mask: np.ndarray     # (H, W) bool

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.vectors.shape[:2] != self.mask.shape or self.vectors.shape[2:] != (2,):
            raise FieldError("field vectors must be (H, W, 2) matching the mask")

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]


def gt_vertex_displacements(model: BodyModel,
                            target_pose, target_shape, target_camera: Camera,
                            source_pose, source_shape, source_camera: Camera,
                            visible=None, mass=None) -> VertexDisplacements:
    """Reference per-vertex displacement field between two parameter sets.

    Rowwise difference of the two projected meshes: where the source
    rendering put each vertex versus where the target parameters put it.
    Vertices behind either camera are flagged invisible; `visible`/`mass`
    from the caller's rasterization of the source parameters are merged in.
    """
    target_px, target_ok = project(target_camera, forward(model, target_pose, target_shape))
    source_px, source_ok = project(source_camera, forward(model, source_pose, source_shape))
    ok = target_ok & source_ok
    if visible is not None:
        ok &= np.asarray(visible, dtype=bool)
    vectors = np.where(ok[:, None], target_px - source_px, 0.0)
    out_mass = np.asarray(mass, dtype=np.float64).copy() if mass is not None else ok.astype(np.float64)
    out_mass[~ok] = 0.0
    return VertexDisplacements(vectors=vectors, visible=ok, mass=out_mass)


def vertex_to_pixel(displacements: VertexDisplacements, buffers: RenderBuffers,
                    faces) -> DisplacementField:
    """Interpolate per-vertex displacements across projected triangles.

    Each valid pixel gets the barycentric blend of its visible triangle's
    three vertex displacements; the mask is copied from the rendering.
    """
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    vectors = np.zeros((buffers.height, buffers.width, 2))
    if buffers.mask.any():
        yy, xx = np.nonzero(buffers.mask)
        corner = tris[buffers.index_map[yy, xx]]       # (M, 3)
        weights = buffers.bary[yy, xx]                 # (M, 3)
        vectors[yy, xx] = np.einsum("mc,mcd->md", weights, displacements.vectors[corner])
    return DisplacementField(vectors=vectors, mask=buffers.mask.copy())


def pixel_to_vertex(field: DisplacementField, buffers: RenderBuffers, faces,
                    vertex_count: int) -> VertexDisplacements:
    """Aggregate a per-pixel field back to vertices.

    vectors[i] is the barycentric-mass-weighted average of the field over
    pixels whose visible triangle contains vertex i. A zero accumulated mass
    marks the vertex invisible instead of dividing.
    """
    if field.mask.shape != buffers.mask.shape or not np.array_equal(field.mask, buffers.mask):
        raise FieldError("field mask does not match the rendering mask")
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    num = np.zeros((vertex_count, 2))
    mass = np.zeros(vertex_count)
    if buffers.mask.any():
        yy, xx = np.nonzero(buffers.mask)
        corner = tris[buffers.index_map[yy, xx]]
        weights = buffers.bary[yy, xx]
        values = field.vectors[yy, xx]
        for c in range(3):
            np.add.at(mass, corner[:, c], weights[:, c])
            np.add.at(num, corner[:, c], weights[:, c, None] * values)
    visible = mass > 0.0
    vectors = np.zeros((vertex_count, 2))
    vectors[visible] = num[visible] / mass[visible, None]
    return VertexDisplacements(vectors=vectors, visible=visible, mass=mass)


def target_vertices(displacements: VertexDisplacements, model: BodyModel,
                    pose, shape, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """2D fitting targets: displacement plus the projection of the initial
    parameters. Returns (targets (N, 2), valid (N,)); projection flags are
    propagated into valid."""
    px, ok = project(cam, forward(model, pose, shape))
    return displacements.vectors + px, displacements.visible & ok


def masked_l1(pred: DisplacementField, ref: DisplacementField) -> float:
    """L1 distance between two fields, averaged over the full pixel grid
    (masked-out pixels contribute zero)."""
    _check_pair(pred, ref)
    diff = np.abs(pred.vectors - ref.vectors).sum(axis=2)
    return float(diff[pred.mask].sum() / (pred.height * pred.width))


def epe(pred: DisplacementField, ref: DisplacementField) -> float:
    """End-point error: mean Euclidean norm of the difference over valid pixels."""
    _check_pair(pred, ref)
    if not pred.mask.any():
        raise FieldError("end-point error is undefined with no valid pixels")
    diff = pred.vectors[pred.mask] - ref.vectors[pred.mask]
    return float(np.linalg.norm(diff, axis=1).mean())


def _check_pair(a: DisplacementField, b: DisplacementField) -> None:
    if a.vectors.shape != b.vectors.shape:
        raise FieldError(f"field shapes differ: {a.vectors.shape} vs {b.vectors.shape}")
    if not np.array_equal(a.mask, b.mask):
        raise FieldError("field masks differ")


# ---------------------------------------------------------------------------
# Binary field format (the external-provider interchange format)
# ---------------------------------------------------------------------------

MAGIC = b"DF01"


def write_field(field: DisplacementField, path) -> None:
    """Little-endian binary: magic "DF01", u32 W, u32 H, then (H, W, 2)
    float32 row-major vectors, then (H, W) u8 mask."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", field.width, field.height))
        f.write(field.vectors.astype("<f4").tobytes())
        f.write(field.mask.astype(np.uint8).tobytes())


def read_field(path) -> DisplacementField:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise FieldError(f"{path}: not a DF01 displacement field")
    w, h = struct.unpack("<II", data[4:12])
    vec_bytes = h * w * 2 * 4
    if len(data) != 12 + vec_bytes + h * w:
        raise FieldError(f"{path}: truncated or oversized DF01 payload")
    vectors = np.frombuffer(data[12:12 + vec_bytes], dtype="<f4").reshape(h, w, 2)
    mask = np.frombuffer(data[12 + vec_bytes:], dtype=np.uint8).reshape(h, w) != 0
    return DisplacementField(vectors=vectors.astype(np.float64), mask=mask)
