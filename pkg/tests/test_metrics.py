import numpy as np
import pytest

from densefit.bodymodel import forward
from densefit.metrics import (MetricsError, mpjpe, n_mpjpe, pa_align, pa_mpjpe, report)

from conftest import random_rotation


def horn_quaternion_align(pred, gt):
    """Independent similarity-Procrustes oracle: Horn's quaternion method
    (eigenvector of the 4x4 cross-covariance form), reflections excluded."""
    p = pred - pred.mean(axis=0)
    g = gt - gt.mean(axis=0)
    m = p.T @ g
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    vals, vecs = np.linalg.eigh(n)
    w, x, y, z = vecs[:, np.argmax(vals)]
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    scale = np.trace(rot @ m) / (p * p).sum()
    trans = gt.mean(axis=0) - scale * rot @ pred.mean(axis=0)
    return scale, rot, trans


def golden_section_scale(pred_c, gt_c):
    """Scalar oracle: golden-section minimization of the squared error in s."""
    f = lambda s: ((s * pred_c - gt_c) ** 2).sum()
    lo, hi = -10.0, 10.0
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = hi - phi * (hi - lo), lo + phi * (hi - lo)
    for _ in range(200):
        if f(a) < f(b):
            hi = b
        else:
            lo = a
        a, b = hi - phi * (hi - lo), lo + phi * (hi - lo)
    return 0.5 * (lo + hi)


class TestMpjpe:
    def test_identical(self):
        pts = np.random.default_rng(0).normal(size=(10, 3))
        assert mpjpe(pts, pts) == 0.0

    def test_uniform_offset(self):
        pts = np.random.default_rng(1).normal(size=(12, 3))
        offset = np.array([0.006, 0.008, 0.0])  # 10 mm
        assert mpjpe(pts + offset, pts) == pytest.approx(0.01)

    def test_per_point_norm_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 20, 3))
        expected = np.mean([np.sqrt(((a[i] - b[i]) ** 2).sum()) for i in range(20)])
        assert mpjpe(a, b) == pytest.approx(expected, abs=1e-12)


class TestProcrustes:
    def test_similarity_transform_gives_zero(self):
        rng = np.random.default_rng(3)
        pred = rng.normal(size=(15, 3))
        rot = random_rotation(rng)
        gt = 1.7 * pred @ rot.T + np.array([0.3, -0.5, 2.0])
        assert pa_mpjpe(pred, gt) <= 1e-8

    def test_identical_zero(self):
        pts = np.random.default_rng(4).normal(size=(8, 3))
        assert pa_mpjpe(pts, pts) <= 1e-12

    def test_matches_horn_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            pred = rng.normal(size=(4, 3)) * [1.0, 2.0, 0.5]
            gt = rng.normal(size=(4, 3))
            s1, r1, t1 = pa_align(pred, gt)
            s2, r2, t2 = horn_quaternion_align(pred, gt)
            assert np.allclose(r1, r2, atol=1e-8)
            assert s1 == pytest.approx(s2, abs=1e-8)
            assert np.allclose(t1, t2, atol=1e-8)

    def test_rotation_is_proper(self):
        rng = np.random.default_rng(6)
        # Mirror-image target tempts a reflection; det must stay +1.
        pred = rng.normal(size=(10, 3))
        gt = pred * np.array([-1.0, 1.0, 1.0])
        _, rot, _ = pa_align(pred, gt)
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)

    def test_too_few_points(self):
        with pytest.raises(MetricsError):
            pa_align(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_collinear_points(self):
        line = np.outer(np.arange(5.0), [1.0, 0.0, 0.0])
        with pytest.raises(MetricsError):
            pa_align(line, line + 1.0)


class TestScaleNormalized:
    def test_double_scale_gives_zero(self):
        rng = np.random.default_rng(7)
        gt = rng.normal(size=(9, 3))
        gt -= gt.mean(axis=0)
        assert n_mpjpe(2.0 * gt, gt) <= 1e-12

    def test_identical_zero(self):
        pts = np.random.default_rng(8).normal(size=(9, 3))
        assert n_mpjpe(pts, pts) <= 1e-12

    def test_matches_golden_section_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(8):
            pred = rng.normal(size=(11, 3))
            gt = rng.normal(size=(11, 3))
            pc = pred - pred.mean(axis=0)
            gc = gt - gt.mean(axis=0)
            s_star = golden_section_scale(pc, gc)
            direct = (pc * gc).sum() / (pc * pc).sum()
            assert direct == pytest.approx(s_star, abs=1e-7)
            assert n_mpjpe(pred, gt) == pytest.approx(
                float(np.linalg.norm(direct * pc - gc, axis=1).mean()), abs=1e-10)


class TestInvariances:
    def test_pa_invariant_under_similarity(self):
        rng = np.random.default_rng(10)
        pred = rng.normal(size=(14, 3))
        gt = rng.normal(size=(14, 3))
        base = pa_mpjpe(pred, gt)
        for _ in range(50):
            rot = random_rotation(rng)
            s = rng.uniform(0.2, 5.0)
            t = rng.normal(size=3)
            assert abs(pa_mpjpe(s * pred @ rot.T + t, gt) - base) <= 1e-8

    def test_n_invariant_under_uniform_scaling(self):
        rng = np.random.default_rng(11)
        pred = rng.normal(size=(14, 3))
        gt = rng.normal(size=(14, 3))
        base = n_mpjpe(pred, gt)
        for _ in range(50):
            s = rng.uniform(0.1, 10.0)
            assert abs(n_mpjpe(s * pred, gt) - base) <= 1e-8

    def test_alignment_only_reduces_squared_error_on_centered_data(self):
        # The nesting argument is exact for the least-squares (RMS) forms;
        # the mean-of-norms metrics follow it in aggregate but not pointwise.
        rng = np.random.default_rng(12)
        rms = lambda d: float(np.sqrt((d ** 2).sum(axis=1).mean()))
        for _ in range(40):
            pred = rng.normal(size=(16, 3))
            gt = rng.normal(size=(16, 3))
            pred -= pred.mean(axis=0)
            gt -= gt.mean(axis=0)
            n_scale = (pred * gt).sum() / (pred * pred).sum()
            if n_scale <= 0:
                continue  # the scale-only optimum is outside the PA family
            scale, rot, trans = pa_align(pred, gt)
            assert rms(scale * pred @ rot.T + trans - gt) <= rms(n_scale * pred - gt) + 1e-12
            assert rms(n_scale * pred - gt) <= rms(pred - gt) + 1e-12

    def test_alignment_reduces_reported_metrics_in_aggregate(self):
        from densefit.bodymodel import rodrigues
        rng = np.random.default_rng(13)
        pa_vals, n_vals, plain_vals = [], [], []
        for _ in range(40):
            gt = rng.normal(size=(16, 3))
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            rot = rodrigues(rng.uniform(0.25, 0.7) * axis)
            pred = rng.uniform(1.15, 1.6) * gt @ rot.T + rng.normal(scale=0.08,
                                                                    size=gt.shape)
            pred -= pred.mean(axis=0)
            gt = gt - gt.mean(axis=0)
            pa_vals.append(pa_mpjpe(pred, gt))
            n_vals.append(n_mpjpe(pred, gt))
            plain_vals.append(mpjpe(pred, gt))
        assert np.median(pa_vals) <= np.median(n_vals) <= np.median(plain_vals)


class TestReport:
    def test_composition(self, small_model):
        rng = np.random.default_rng(13)
        gt_mesh = forward(small_model, small_model.zero_pose(), small_model.zero_shape())
        pred_mesh = gt_mesh + rng.normal(scale=0.01, size=gt_mesh.shape)
        rep = report(pred_mesh, gt_mesh, small_model, epe=1.5)
        assert rep.pve == pytest.approx(1000 * mpjpe(pred_mesh, gt_mesh))
        from densefit.bodymodel import regress_keypoints
        assert rep.mpjpe == pytest.approx(1000 * mpjpe(
            regress_keypoints(small_model, pred_mesh),
            regress_keypoints(small_model, gt_mesh)))
        assert rep.pa_pve <= rep.n_pve * (1 + 1e-9)
        assert rep.epe == 1.5

    def test_identical_meshes_all_zero(self, small_model):
        mesh = forward(small_model, small_model.zero_pose(), small_model.zero_shape())
        rep = report(mesh, mesh, small_model)
        for key, value in rep.to_dict().items():
            if key != "epe":
                assert value <= 1e-8

    def test_root_align_flag(self, small_model):
        mesh = forward(small_model, small_model.zero_pose(), small_model.zero_shape())
        shifted = mesh + np.array([0.1, 0.0, 0.0])
        plain = report(shifted, mesh, small_model)
        aligned = report(shifted, mesh, small_model, root_align=True)
        assert plain.mpjpe == pytest.approx(100.0)
        assert aligned.mpjpe <= 1e-8
