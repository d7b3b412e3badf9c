"""Shared test utilities (independent oracles and scene builders)."""

import numpy as np

from densefit.camera import Camera, default_focal
from densefit.displacement import VertexDisplacements, pixel_to_vertex, vertex_to_pixel
from densefit.rasterizer import BACKGROUND, rasterize


def oracle_rasterize(mesh, faces, camera, width, height):
    """Brute-force rasterization oracle: every pixel against every triangle.

    Barycentrics come from an LU solve of the 2x2 edge system (a different
    arithmetic path than the renderer's closed form); the nearest depth wins
    and exact ties go to the first (lowest) triangle index via argmin.
    """
    verts = np.asarray(mesh, dtype=np.float64)
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    cam_pts = verts @ camera.rotation.T + camera.translation
    z = cam_pts[:, 2]
    uv = np.stack([camera.fx * cam_pts[:, 0] / z + camera.cx,
                   camera.fy * cam_pts[:, 1] / z + camera.cy], axis=1)

    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    samples = np.stack([gx.ravel(), gy.ravel()])  # (2, P)
    n_pix = samples.shape[1]

    depth_all = np.full((tris.shape[0], n_pix), np.inf)
    bary_all = np.zeros((tris.shape[0], 3, n_pix))
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t]
        if z[i0] <= 1e-12 or z[i1] <= 1e-12 or z[i2] <= 1e-12:
            continue
        a = np.stack([uv[i1] - uv[i0], uv[i2] - uv[i0]], axis=1)
        if np.linalg.det(a) == 0.0:
            continue
        sol = np.linalg.solve(a, samples - uv[i0][:, None])
        b1, b2 = sol
        b0 = 1.0 - b1 - b2
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        d = b0 * z[i0] + b1 * z[i1] + b2 * z[i2]
        depth_all[t] = np.where(inside, d, np.inf)
        bary_all[t] = np.stack([b0, b1, b2])

    winner = np.argmin(depth_all, axis=0)  # first minimum = lowest index
    best = depth_all[winner, np.arange(n_pix)]
    covered = np.isfinite(best)
    index_map = np.where(covered, winner, BACKGROUND).reshape(height, width)
    depth = np.where(covered, best, 0.0).reshape(height, width)
    bary = np.where(covered, bary_all[winner, :, np.arange(n_pix)].T, 0.0)
    bary = bary.T.reshape(height, width, 3)
    mask = covered.reshape(height, width)
    return index_map.astype(np.int64), bary, depth, mask


def sheet_mesh(n: int = 12, seed: int = 0):
    """Gently curved triangulated sheet facing the camera at z ~ 2 m."""
    xs = np.linspace(-0.8, 0.8, n)
    vv, uu = np.meshgrid(xs, xs)
    z = 2.0 + 0.15 * np.sin(1.3 * uu + 0.4 + 0.2 * seed) * np.cos(1.1 * vv)
    verts = np.stack([uu.ravel(), vv.ravel(), z.ravel()], axis=1)
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            faces.append((a, a + 1, a + n))
            faces.append((a + 1, a + n + 1, a + n))
    return verts, np.asarray(faces, dtype=np.int64)


def smooth_round_trip_errors(seed: int, resolutions=(64, 128, 256)):
    """Round-trip (vertex -> pixel -> vertex) RMS error of a smooth random
    per-vertex field at each resolution."""
    rng = np.random.default_rng(100 + seed)
    verts, faces = sheet_mesh(seed=seed)
    n = len(verts)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    field_v = np.stack([np.sin(1.1 * (verts @ direction) + 0.3),
                        np.cos(0.9 * (verts @ direction))], axis=1) * 5.0
    errors = []
    for res in resolutions:
        focal = default_focal(res, res) * 0.35
        cam = Camera(fx=focal, fy=focal, cx=res / 2, cy=res / 2, rotation=np.eye(3),
                     translation=np.zeros(3), width=res, height=res)
        buffers = rasterize(verts, faces, cam)
        vd = VertexDisplacements(vectors=field_v, visible=np.ones(n, dtype=bool),
                                 mass=np.ones(n))
        field = vertex_to_pixel(vd, buffers, faces)
        back = pixel_to_vertex(field, buffers, faces, n)
        vis = back.visible
        errors.append(float(np.sqrt(np.mean(
            np.sum((back.vectors[vis] - field_v[vis]) ** 2, axis=1)))))
    return errors
