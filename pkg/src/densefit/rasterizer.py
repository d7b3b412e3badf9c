"""Deterministic software rasterizer.

Produces every per-pixel buffer the displacement algebra needs: triangle
index map, screen-space barycentric coordinates, camera-space depth,
interpolated normals/colors, and the validity mask.

Conventions (the oracle tests depend on these exactly):
  - pixel (x, y) is sampled at its center (x + 0.5, y + 0.5);
  - coverage is inclusive: a sample on a triangle boundary (barycentric
    coordinate exactly 0) is covered;
  - barycentrics are affine coordinates of the projected 2D triangle, not
    perspective-correct;
  - the nearest triangle by affinely interpolated camera-space depth wins,
    depth ties go to the lower triangle index;
  - no backface culling; zero-area and behind-camera triangles are skipped
    and counted in the diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, CameraError, camera_space

BACKGROUND = -1


class RasterError(ValueError):
    pass


@dataclass(eq=False)
class RasterStats:
    skipped_behind: int = 0
    skipped_degenerate: int = 0


@dataclass(eq=False)
class RenderBuffers:
    index_map: np.ndarray    # (H, W) int64, BACKGROUND where empty
    bary: np.ndarray         # (H, W, 3)
    depth: np.ndarray        # (H, W) camera-space meters, 0 where empty
    normal: np.ndarray       # (H, W, 3) unit vectors, 0 where empty
    rgb: np.ndarray          # (H, W, 3) in [0, 1]
    vertex_color: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray         # (H, W) bool
    stats: RasterStats = field(default_factory=RasterStats)

    @property
    def height(self) -> int:
        return self.index_map.shape[0]

    @property
    def width(self) -> int:
        return self.index_map.shape[1]


def rasterize(mesh, faces, camera: Camera, width: int | None = None,
              height: int | None = None, attributes: dict | None = None) -> RenderBuffers:
    """Render a triangle mesh into per-pixel buffers.

    `attributes` may carry per-vertex arrays under the keys "rgb",
    "vertex_color" and "normal" (each (N, 3)); missing attributes render as
    zeros. Normals are renormalized after interpolation.
    """
    verts = np.asarray(mesh, dtype=np.float64)
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if not np.all(np.isfinite(verts)):
        raise RasterError("mesh contains non-finite vertices")
    w = camera.width if width is None else int(width)
    h = camera.height if height is None else int(height)
    if w < 1 or h < 1:
        raise CameraError("image size must be at least 1x1")

    stats = RasterStats()
    index_map = np.full((h, w), BACKGROUND, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)

    cam_pts = camera_space(camera, verts)
    z = cam_pts[:, 2]
    uv = np.zeros((verts.shape[0], 2))
    in_front = z > 1e-12
    z_safe = np.where(in_front, z, 1.0)
    uv[:, 0] = camera.fx * cam_pts[:, 0] / z_safe + camera.cx
    uv[:, 1] = camera.fy * cam_pts[:, 1] / z_safe + camera.cy

    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t]
        if not (in_front[i0] and in_front[i1] and in_front[i2]):
            stats.skipped_behind += 1
            continue
        p0, p1, p2 = uv[i0], uv[i1], uv[i2]
        d1 = p1 - p0
        d2 = p2 - p0
        denom = d1[0] * d2[1] - d1[1] * d2[0]
        if denom == 0.0:
            stats.skipped_degenerate += 1
            continue

        xs = np.array([p0[0], p1[0], p2[0]])
        ys = np.array([p0[1], p1[1], p2[1]])
        # Pixel centers x+0.5 within [min, max] of the projected triangle.
        x_lo = max(0, int(np.ceil(xs.min() - 0.5)))
        x_hi = min(w - 1, int(np.floor(xs.max() - 0.5)))
        y_lo = max(0, int(np.ceil(ys.min() - 0.5)))
        y_hi = min(h - 1, int(np.floor(ys.max() - 0.5)))
        if x_lo > x_hi or y_lo > y_hi:
            continue

        sx = np.arange(x_lo, x_hi + 1) + 0.5 - p0[0]
        sy = np.arange(y_lo, y_hi + 1) + 0.5 - p0[1]
        qx, qy = np.meshgrid(sx, sy)
        b1 = (qx * d2[1] - qy * d2[0]) / denom
        b2 = (d1[0] * qy - d1[1] * qx) / denom
        b0 = 1.0 - b1 - b2
        inside = (b0 >= 0.0) & (b1 >= 0.0) & (b2 >= 0.0)
        if not inside.any():
            continue
        z_interp = b0 * z[i0] + b1 * z[i1] + b2 * z[i2]

        region = (slice(y_lo, y_hi + 1), slice(x_lo, x_hi + 1))
        closer = inside & (z_interp < depth[region])
        if not closer.any():
            continue
        depth[region] = np.where(closer, z_interp, depth[region])
        index_map[region] = np.where(closer, t, index_map[region])
        for c, b in enumerate((b0, b1, b2)):
            bary[region][..., c] = np.where(closer, b, bary[region][..., c])

    mask = index_map != BACKGROUND
    depth[~mask] = 0.0
    bary[~mask] = 0.0

    normal = np.zeros((h, w, 3))
    rgb = np.zeros((h, w, 3))
    vertex_color = np.zeros((h, w, 3))
    if mask.any() and attributes:
        yy, xx = np.nonzero(mask)
        tri_idx = index_map[yy, xx]
        corner = tris[tri_idx]           # (M, 3) vertex indices
        weights = bary[yy, xx]           # (M, 3)
        for key, buf in (("normal", normal), ("rgb", rgb), ("vertex_color", vertex_color)):
            attr = attributes.get(key)
            if attr is None:
                continue
            attr = np.asarray(attr, dtype=np.float64)
            vals = np.einsum("mc,mcd->md", weights, attr[corner])
            if key == "normal":
                norms = np.linalg.norm(vals, axis=1, keepdims=True)
                vals = vals / np.where(norms > 0, norms, 1.0)
            buf[yy, xx] = vals

    return RenderBuffers(index_map=index_map, bary=bary, depth=depth, normal=normal,
                         rgb=rgb, vertex_color=vertex_color, mask=mask, stats=stats)


def unique_vertex_colors(model) -> np.ndarray:
    """Per-vertex identity colors: the rest-pose vertex positions, min-max
    normalized per axis into [0, 1]."""
    from .bodymodel import forward
    rest = forward(model, model.zero_pose(), model.zero_shape())
    lo = rest.min(axis=0)
    span = rest.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    return (rest - lo) / span


def vertex_normals(mesh, faces) -> np.ndarray:
    """Area-weighted vertex normals (unnormalized faces accumulate)."""
    verts = np.asarray(mesh, dtype=np.float64)
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    fn = np.cross(verts[tris[:, 1]] - verts[tris[:, 0]], verts[tris[:, 2]] - verts[tris[:, 0]])
    out = np.zeros_like(verts)
    for c in range(3):
        np.add.at(out, tris[:, c], fn)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(norms > 0, norms, 1.0)


def vertex_visibility(buffers: RenderBuffers, faces, vertex_count: int,
                      min_mass: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Accumulated barycentric mass per vertex and the visibility it implies.

    mass[i] sums, over valid pixels whose visible triangle contains vertex i,
    that pixel's barycentric weight for i; visible[i] is mass[i] > min_mass.
    """
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    mass = np.zeros(vertex_count)
    if buffers.mask.any():
        yy, xx = np.nonzero(buffers.mask)
        corner = tris[buffers.index_map[yy, xx]]  # (M, 3)
        weights = buffers.bary[yy, xx]            # (M, 3)
        for c in range(3):
            np.add.at(mass, corner[:, c], weights[:, c])
    return mass > min_mass, mass


# ---------------------------------------------------------------------------
# PPM export
# ---------------------------------------------------------------------------

def write_ppm_color(path, image) -> None:
    """P6 PPM from an (H, W, 3) float array in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape[:2]
    data = (img * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_ppm_gray16(path, values, normalize: bool = True) -> None:
    """16-bit P5 PGM (big-endian samples) for depth/mask buffers.

    With normalize=True the value range is mapped to [0, 65535]; pass
    normalize=False for data already in [0, 1] (e.g. a mask).
    """
    vals = np.asarray(values, dtype=np.float64)
    if normalize:
        lo, hi = vals.min(), vals.max()
        vals = (vals - lo) / (hi - lo) if hi > lo else np.zeros_like(vals)
    data = (np.clip(vals, 0.0, 1.0) * 65535.0 + 0.5).astype(">u2")
    h, w = vals.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(data.tobytes())
