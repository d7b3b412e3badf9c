import numpy as np
import pytest

from densefit.bodymodel import forward
from densefit.camera import Camera, frame_camera, project
from densefit.displacement import (DisplacementField, FieldError, VertexDisplacements,
                                   epe, gt_vertex_displacements, masked_l1,
                                   pixel_to_vertex, read_field, target_vertices,
                                   vertex_to_pixel, write_field)
from densefit.rasterizer import RenderBuffers, RasterStats, rasterize, vertex_visibility

from helpers import smooth_round_trip_errors


def model_scene(model, width=96, height=96, pose_scale=0.0, seed=0):
    rng = np.random.default_rng(seed)
    pose = rng.normal(scale=pose_scale, size=(model.joint_count, 3))
    shape = rng.normal(scale=0.3, size=model.shape_count)
    mesh = forward(model, pose, shape)
    center = 0.5 * (mesh.min(axis=0) + mesh.max(axis=0))
    extent = float(np.linalg.norm(mesh.max(axis=0) - mesh.min(axis=0)))
    cam = frame_camera(center, extent, width, height)
    return pose, shape, cam, mesh


def tiny_buffers(bary, index=0):
    """1x1 rendering showing triangle `index` with the given barycentrics."""
    return RenderBuffers(
        index_map=np.array([[index]], dtype=np.int64),
        bary=np.array([[bary]], dtype=np.float64),
        depth=np.ones((1, 1)),
        normal=np.zeros((1, 1, 3)),
        rgb=np.zeros((1, 1, 3)),
        vertex_color=np.zeros((1, 1, 3)),
        mask=np.ones((1, 1), dtype=bool),
        stats=RasterStats(),
    )


class TestGtVertexDisplacements:
    def test_equal_parameters_give_zero(self, small_model):
        pose, shape, cam, _ = model_scene(small_model)
        vd = gt_vertex_displacements(small_model, pose, shape, cam, pose, shape, cam)
        assert np.allclose(vd.vectors, 0.0)
        assert vd.visible.all()

    def test_principal_point_shift_is_constant_field(self, small_model):
        pose, shape, cam, _ = model_scene(small_model)
        shifted = Camera(cam.fx, cam.fy, cam.cx + 5.0, cam.cy, cam.rotation,
                         cam.translation, cam.width, cam.height)
        vd = gt_vertex_displacements(small_model, pose, shape, shifted, pose, shape, cam)
        assert np.allclose(vd.vectors, [5.0, 0.0], atol=1e-12)

    def test_matches_two_projection_oracle(self, small_model):
        rng = np.random.default_rng(1)
        pose, shape, cam, _ = model_scene(small_model)
        pose2 = pose + rng.normal(scale=0.1, size=pose.shape)
        shape2 = shape + rng.normal(scale=0.2, size=shape.shape)
        vd = gt_vertex_displacements(small_model, pose2, shape2, cam, pose, shape, cam)
        gt_px, _ = project(cam, forward(small_model, pose2, shape2))
        init_px, _ = project(cam, forward(small_model, pose, shape))
        assert np.allclose(vd.vectors, gt_px - init_px, atol=1e-12)

    def test_caller_visibility_merged(self, small_model):
        pose, shape, cam, _ = model_scene(small_model)
        visible = np.zeros(small_model.vertex_count, dtype=bool)
        visible[:5] = True
        vd = gt_vertex_displacements(small_model, pose, shape, cam, pose, shape, cam,
                                     visible=visible, mass=visible.astype(float) * 2.0)
        assert np.array_equal(vd.visible, visible)
        assert vd.mass[0] == 2.0 and vd.mass[7] == 0.0


class TestVertexToPixel:
    def test_constant_field_everywhere(self, small_model):
        pose, shape, cam, mesh = model_scene(small_model)
        buffers = rasterize(mesh, small_model.faces, cam)
        n = small_model.vertex_count
        vd = VertexDisplacements(vectors=np.tile([3.0, -2.0], (n, 1)),
                                 visible=np.ones(n, dtype=bool), mass=np.ones(n))
        field = vertex_to_pixel(vd, buffers, small_model.faces)
        assert np.allclose(field.vectors[field.mask], [3.0, -2.0], atol=1e-9)
        assert np.array_equal(field.mask, buffers.mask)

    def test_hand_computed_blend(self):
        vd = VertexDisplacements(vectors=np.array([[10.0, 0.0], [0.0, 10.0], [2.0, 2.0]]),
                                 visible=np.ones(3, dtype=bool), mass=np.ones(3))
        field = vertex_to_pixel(vd, tiny_buffers([0.2, 0.3, 0.5]), [[0, 1, 2]])
        assert np.allclose(field.vectors[0, 0], [3.0, 4.0], atol=1e-12)

    def test_affine_field_reproduction(self):
        # v_i = A p_i + d at the projected vertices reproduces the affine map
        # at every sample point.
        cam = Camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0, rotation=np.eye(3),
                     translation=np.zeros(3), width=64, height=64)
        verts = np.array([[3.3, 2.1, 1.0], [60.7, 8.2, 1.0], [10.4, 58.9, 1.0]])
        faces = [[0, 1, 2]]
        buffers = rasterize(verts, faces, cam)
        proj, _ = project(cam, verts)
        a = np.array([[0.02, -0.01], [0.03, 0.05]])
        d = np.array([1.5, -0.7])
        vd = VertexDisplacements(vectors=proj @ a.T + d,
                                 visible=np.ones(3, dtype=bool), mass=np.ones(3))
        field = vertex_to_pixel(vd, buffers, faces)
        yy, xx = np.nonzero(field.mask)
        samples = np.stack([xx + 0.5, yy + 0.5], axis=1)
        assert np.allclose(field.vectors[yy, xx], samples @ a.T + d, atol=1e-9)

    def test_convex_hull_property(self, small_model):
        rng = np.random.default_rng(3)
        pose, shape, cam, mesh = model_scene(small_model)
        buffers = rasterize(mesh, small_model.faces, cam)
        n = small_model.vertex_count
        vd = VertexDisplacements(vectors=rng.normal(size=(n, 2)),
                                 visible=np.ones(n, dtype=bool), mass=np.ones(n))
        field = vertex_to_pixel(vd, buffers, small_model.faces)
        yy, xx = np.nonzero(field.mask)
        corners = vd.vectors[np.asarray(small_model.faces)[buffers.index_map[yy, xx]]]
        lo = corners.min(axis=1) - 1e-9
        hi = corners.max(axis=1) + 1e-9
        vals = field.vectors[yy, xx]
        assert np.all((vals >= lo) & (vals <= hi))


class TestPixelToVertex:
    def test_constant_field_recovered(self, small_model):
        pose, shape, cam, mesh = model_scene(small_model)
        buffers = rasterize(mesh, small_model.faces, cam)
        vectors = np.where(buffers.mask[..., None], np.array([4.0, 7.0]), 0.0)
        field = DisplacementField(vectors=vectors, mask=buffers.mask)
        vd = pixel_to_vertex(field, buffers, small_model.faces, small_model.vertex_count)
        assert np.allclose(vd.vectors[vd.visible], [4.0, 7.0], atol=1e-9)

    def test_toy_raster_matches_accumulation_oracle(self):
        # 3x3 rendering of two triangles with hand-listed barycentrics.
        index_map = np.array([[0, 0, -1], [1, 0, -1], [-1, -1, -1]], dtype=np.int64)
        bary = np.zeros((3, 3, 3))
        bary[0, 0] = [0.5, 0.25, 0.25]
        bary[0, 1] = [0.1, 0.6, 0.3]
        bary[1, 0] = [0.2, 0.3, 0.5]
        bary[1, 1] = [1.0, 0.0, 0.0]
        mask = index_map != -1
        buffers = RenderBuffers(index_map=index_map, bary=bary,
                                depth=mask.astype(float), normal=np.zeros((3, 3, 3)),
                                rgb=np.zeros((3, 3, 3)), vertex_color=np.zeros((3, 3, 3)),
                                mask=mask, stats=RasterStats())
        faces = [[0, 1, 2], [1, 3, 2]]
        vectors = np.zeros((3, 3, 2))
        vectors[0, 0] = [1.0, 0.0]
        vectors[0, 1] = [0.0, 1.0]
        vectors[1, 0] = [2.0, 2.0]
        vectors[1, 1] = [-1.0, 3.0]
        field = DisplacementField(vectors=vectors, mask=mask)
        vd = pixel_to_vertex(field, buffers, faces, 4)

        num = np.zeros((4, 2))
        den = np.zeros(4)
        for (y, x), tri in (((0, 0), 0), ((0, 1), 0), ((1, 0), 1), ((1, 1), 0)):
            tri = index_map[y, x]
            for c, vi in enumerate(faces[tri]):
                num[vi] += bary[y, x, c] * vectors[y, x]
                den[vi] += bary[y, x, c]
        for i in range(4):
            if den[i] > 0:
                assert vd.visible[i]
                assert np.allclose(vd.vectors[i], num[i] / den[i], atol=1e-12)
            else:
                assert not vd.visible[i]
                assert np.array_equal(vd.vectors[i], [0.0, 0.0])

    def test_zero_mass_means_invisible_not_division(self):
        buffers = tiny_buffers([1.0, 0.0, 0.0])
        field = DisplacementField(vectors=np.ones((1, 1, 2)), mask=np.ones((1, 1), bool))
        vd = pixel_to_vertex(field, buffers, [[0, 1, 2]], 5)
        assert vd.visible[0] and not vd.visible[1] and not vd.visible[2]
        assert np.all(np.isfinite(vd.vectors))

    def test_linearity_in_field(self, small_model):
        rng = np.random.default_rng(4)
        pose, shape, cam, mesh = model_scene(small_model)
        buffers = rasterize(mesh, small_model.faces, cam)
        shape_hw2 = (buffers.height, buffers.width, 2)
        f1 = np.where(buffers.mask[..., None], rng.normal(size=shape_hw2), 0.0)
        f2 = np.where(buffers.mask[..., None], rng.normal(size=shape_hw2), 0.0)
        n = small_model.vertex_count
        agg = lambda arr: pixel_to_vertex(DisplacementField(vectors=arr, mask=buffers.mask),
                                          buffers, small_model.faces, n)
        combined = agg(2.5 * f1 + f2)
        left = agg(f1)
        right = agg(f2)
        vis = combined.visible
        assert np.allclose(combined.vectors[vis],
                           2.5 * left.vectors[vis] + right.vectors[vis], atol=1e-9)

    def test_mask_mismatch_rejected(self, small_model):
        pose, shape, cam, mesh = model_scene(small_model)
        buffers = rasterize(mesh, small_model.faces, cam)
        wrong = np.zeros_like(buffers.mask)
        field = DisplacementField(vectors=np.zeros((buffers.height, buffers.width, 2)),
                                  mask=wrong)
        with pytest.raises(FieldError):
            pixel_to_vertex(field, buffers, small_model.faces, small_model.vertex_count)


class TestRoundTrip:
    def test_constant_round_trip_exact(self, small_model):
        pose, shape, cam, mesh = model_scene(small_model)
        buffers = rasterize(mesh, small_model.faces, cam)
        n = small_model.vertex_count
        visible, mass = vertex_visibility(buffers, small_model.faces, n)
        vd = VertexDisplacements(vectors=np.tile([1.25, -3.5], (n, 1)),
                                 visible=np.ones(n, dtype=bool), mass=np.ones(n))
        field = vertex_to_pixel(vd, buffers, small_model.faces)
        back = pixel_to_vertex(field, buffers, small_model.faces, n)
        assert np.array_equal(back.visible, visible)
        assert np.allclose(back.vectors[back.visible], [1.25, -3.5], atol=1e-9)

    def test_smooth_field_rms_strictly_decreases_with_resolution(self):
        for seed in range(3):
            errors = smooth_round_trip_errors(seed)
            assert errors[0] > errors[1] > errors[2], (seed, errors)

    def test_body_mesh_round_trip_converges(self, small_model):
        # On an articulated body the aggregation has a small smoothing bias,
        # so the error drops 64 -> 128 and then levels off near its floor.
        rng = np.random.default_rng(5)
        mesh = forward(small_model, small_model.zero_pose(), small_model.zero_shape())
        center = 0.5 * (mesh.min(axis=0) + mesh.max(axis=0))
        extent = float(np.linalg.norm(mesh.max(axis=0) - mesh.min(axis=0)))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        smooth = np.stack([np.sin(0.6 * (mesh @ direction)),
                           np.cos(0.5 * (mesh @ direction))], axis=1) * 6.0
        n = small_model.vertex_count
        results = {}
        for res in (64, 128, 256):
            cam = frame_camera(center, extent, res, res)
            buffers = rasterize(mesh, small_model.faces, cam)
            vd = VertexDisplacements(vectors=smooth, visible=np.ones(n, dtype=bool),
                                     mass=np.ones(n))
            field = vertex_to_pixel(vd, buffers, small_model.faces)
            results[res] = pixel_to_vertex(field, buffers, small_model.faces, n)
        common = results[64].visible & results[128].visible & results[256].visible
        errors = [float(np.sqrt(np.mean(np.sum(
            (results[r].vectors[common] - smooth[common]) ** 2, axis=1))))
            for r in (64, 128, 256)]
        assert errors[1] < errors[0]
        assert errors[2] < errors[1] * 1.05


class TestTargetVertices:
    def test_zero_displacement_gives_projection(self, small_model):
        pose, shape, cam, mesh = model_scene(small_model)
        n = small_model.vertex_count
        vd = VertexDisplacements(vectors=np.zeros((n, 2)),
                                 visible=np.ones(n, dtype=bool), mass=np.ones(n))
        targets, valid = target_vertices(vd, small_model, pose, shape, cam)
        proj, _ = project(cam, mesh)
        assert np.allclose(targets, proj, atol=1e-12)
        assert valid.all()

    def test_cancellation_recovers_gt_projection(self, small_model):
        rng = np.random.default_rng(6)
        gt_pose, gt_shape, cam, gt_mesh = model_scene(small_model, pose_scale=0.1, seed=8)
        init_pose = gt_pose + rng.normal(scale=0.1, size=gt_pose.shape)
        init_shape = gt_shape + rng.normal(scale=0.3, size=gt_shape.shape)
        vd = gt_vertex_displacements(small_model, gt_pose, gt_shape, cam,
                                     init_pose, init_shape, cam)
        targets, valid = target_vertices(vd, small_model, init_pose, init_shape, cam)
        gt_px, _ = project(cam, gt_mesh)
        assert valid.any()
        assert np.allclose(targets[valid], gt_px[valid], atol=1e-9)

    def test_constant_shift(self, small_model):
        pose, shape, cam, mesh = model_scene(small_model)
        n = small_model.vertex_count
        vd = VertexDisplacements(vectors=np.tile([5.0, 0.0], (n, 1)),
                                 visible=np.ones(n, dtype=bool), mass=np.ones(n))
        targets, _ = target_vertices(vd, small_model, pose, shape, cam)
        proj, _ = project(cam, mesh)
        assert np.allclose(targets - proj, [5.0, 0.0], atol=1e-12)


class TestFieldMetrics:
    def test_identical_fields_zero(self):
        mask = np.ones((4, 4), dtype=bool)
        f = DisplacementField(vectors=np.random.default_rng(0).normal(size=(4, 4, 2)),
                              mask=mask)
        assert masked_l1(f, f) == 0.0
        assert epe(f, f) == 0.0

    def test_masked_l1_single_pixel(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[3, 4] = True
        a = DisplacementField(vectors=np.zeros((10, 10, 2)), mask=mask)
        b_vec = np.zeros((10, 10, 2))
        b_vec[3, 4] = [3.0, 4.0]
        b = DisplacementField(vectors=b_vec, mask=mask)
        assert masked_l1(a, b) == pytest.approx(7.0 / 100.0)

    def test_masked_l1_matches_brute_sum(self):
        rng = np.random.default_rng(7)
        mask = rng.uniform(size=(12, 9)) > 0.4
        a = DisplacementField(vectors=rng.normal(size=(12, 9, 2)), mask=mask)
        b = DisplacementField(vectors=rng.normal(size=(12, 9, 2)), mask=mask)
        total = 0.0
        for y in range(12):
            for x in range(9):
                if mask[y, x]:
                    total += abs(a.vectors[y, x, 0] - b.vectors[y, x, 0])
                    total += abs(a.vectors[y, x, 1] - b.vectors[y, x, 1])
        assert masked_l1(a, b) == pytest.approx(total / (12 * 9), abs=1e-12)

    def test_epe_uniform_offset(self):
        mask = np.ones((6, 6), dtype=bool)
        a = DisplacementField(vectors=np.zeros((6, 6, 2)), mask=mask)
        b = DisplacementField(vectors=np.tile([3.0, 4.0], (6, 6, 1)), mask=mask)
        assert epe(a, b) == pytest.approx(5.0)

    def test_epe_gaussian_noise_rayleigh_mean(self):
        rng = np.random.default_rng(8)
        sigma = 3.0
        mask = np.ones((128, 128), dtype=bool)
        base = DisplacementField(vectors=np.zeros((128, 128, 2)), mask=mask)
        noisy = DisplacementField(vectors=rng.normal(0, sigma, size=(128, 128, 2)),
                                  mask=mask)
        assert epe(noisy, base) == pytest.approx(sigma * np.sqrt(np.pi / 2), rel=0.05)

    def test_empty_domain_error(self):
        mask = np.zeros((3, 3), dtype=bool)
        f = DisplacementField(vectors=np.zeros((3, 3, 2)), mask=mask)
        with pytest.raises(FieldError):
            epe(f, f)

    def test_shape_mismatch_error(self):
        a = DisplacementField(vectors=np.zeros((3, 3, 2)), mask=np.ones((3, 3), bool))
        b = DisplacementField(vectors=np.zeros((4, 3, 2)), mask=np.ones((4, 3), bool))
        with pytest.raises(FieldError):
            masked_l1(a, b)


class TestFieldFile:
    def test_round_trip_bit_identical(self, tmp_path, small_model):
        pose, shape, cam, mesh = model_scene(small_model)
        buffers = rasterize(mesh, small_model.faces, cam)
        rng = np.random.default_rng(9)
        vectors = np.where(buffers.mask[..., None],
                           rng.normal(size=(buffers.height, buffers.width, 2)), 0.0)
        field = DisplacementField(vectors=vectors, mask=buffers.mask)
        p1 = tmp_path / "field.df"
        p2 = tmp_path / "again.df"
        write_field(field, p1)
        loaded = read_field(p1)
        write_field(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert np.array_equal(loaded.mask, field.mask)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.df"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FieldError):
            read_field(path)

    def test_truncated(self, tmp_path):
        mask = np.ones((4, 4), dtype=bool)
        field = DisplacementField(vectors=np.zeros((4, 4, 2)), mask=mask)
        path = tmp_path / "trunc.df"
        write_field(field, path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(FieldError):
            read_field(path)
