"""Image metrics, trajectory alignment, pose errors, test-pose estimation."""

import math

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from posefield.errors import DegenerateConfiguration, ImageTooSmall, ShapeMismatch
from posefield.evaluation import (
    align_poses,
    estimate_pose,
    pose_errors,
    psnr,
    select_test_views,
    ssim,
)


class TestPsnr:
    def test_identical_hits_cap(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        assert psnr(img, img) == 99.0

    def test_known_mse(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)
        assert abs(psnr(a, b) - 20.0) < 1e-9

    def test_black_vs_white(self):
        assert abs(psnr(np.zeros((8, 8)), np.ones((8, 8)))) < 1e-12

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            psnr(np.zeros((8, 8)), np.zeros((9, 8)))


class TestSsim:
    def test_identical_is_one(self):
        img = np.random.default_rng(2).random((32, 32, 3))
        assert abs(ssim(img, img) - 1.0) < 1e-12

    def test_constant_pair_is_one(self):
        img = np.full((16, 16), 0.5)
        assert abs(ssim(img, img.copy()) - 1.0) < 1e-12

    def test_negative_correlation(self):
        rng = np.random.default_rng(3)
        a = rng.random((32, 32))
        a = (a - a.mean()) * 0.5 + 0.5
        b = 1.0 - a
        assert ssim(a, b) < 0.0

    def test_too_small_rejected(self):
        with pytest.raises(ImageTooSmall):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))


def random_centers(n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3)) * 3.0


def random_similarity(seed=0):
    rng = np.random.default_rng(seed)
    rot = Rotation.random(random_state=rng).as_matrix()
    scale = float(rng.uniform(0.3, 3.0))
    trans = rng.normal(size=3)
    return scale, rot, trans


class TestAlignPoses:
    def test_identity(self):
        ref = random_centers(10)
        t = align_poses(ref, ref)
        assert abs(t.scale - 1.0) < 1e-10
        assert np.allclose(t.rotation, np.eye(3), atol=1e-10)
        assert np.allclose(t.translation, 0.0, atol=1e-10)

    def test_double_scale_recovers_half(self):
        ref = random_centers(10, seed=1)
        t = align_poses(2.0 * ref, ref)
        assert abs(t.scale - 0.5) < 1e-10

    def test_synthetic_similarity_round_trip(self):
        ref = random_centers(20, seed=2)
        scale, rot, trans = random_similarity(seed=3)
        est = scale * ref @ rot.T + trans
        t = align_poses(est, ref)
        back = t.apply(est)
        rmse = np.sqrt(((back - ref) ** 2).sum(axis=1).mean())
        assert rmse < 1e-8

    def test_alignment_is_least_squares_optimum(self):
        ref = random_centers(15, seed=4)
        est = random_centers(15, seed=5)
        t = align_poses(est, ref)

        def rmse(scale, rot, trans):
            mapped = scale * est @ rot.T + trans
            return np.sqrt(((mapped - ref) ** 2).sum(axis=1).mean())

        best = rmse(t.scale, t.rotation, t.translation)
        rng = np.random.default_rng(6)
        for _ in range(50):
            ds = 1.0 + rng.normal() * 0.01
            drot = Rotation.from_rotvec(rng.normal(size=3) * 0.01).as_matrix()
            dt = rng.normal(size=3) * 0.01
            assert rmse(t.scale * ds, drot @ t.rotation, t.translation + dt) >= best - 1e-12

    def test_collinear_rejected(self):
        line = np.outer(np.arange(5, dtype=float), np.array([1.0, 0, 0]))
        with pytest.raises(DegenerateConfiguration):
            align_poses(line, line)

    def test_too_few_rejected(self):
        pts = random_centers(2, seed=7)
        with pytest.raises(DegenerateConfiguration):
            align_poses(pts, pts)


def make_pose_set(n, seed=0):
    rng = np.random.default_rng(seed)
    mats = np.tile(np.eye(4), (n, 1, 1))
    mats[:, :3, :3] = Rotation.random(n, random_state=rng).as_matrix()
    mats[:, :3, 3] = rng.normal(size=(n, 3)) * 3.0
    return mats


class TestPoseErrors:
    def test_identical_sets(self):
        poses = make_pose_set(8)
        rep = pose_errors(poses, poses)
        assert rep.mean_rotation_deg < 1e-4
        assert rep.mean_translation < 1e-9

    def test_single_ten_degree_outlier(self):
        poses = make_pose_set(8, seed=1)
        est = poses.copy()
        bump = Rotation.from_euler("z", 10.0, degrees=True).as_matrix()
        est[0, :3, :3] = bump @ est[0, :3, :3]
        rep = pose_errors(est, poses)
        assert abs(rep.mean_rotation_deg - 1.25) < 1e-6
        assert abs(rep.rotation_deg[0] - 10.0) < 1e-6

    def test_invariant_under_global_similarity(self):
        ref = make_pose_set(10, seed=2)
        est = make_pose_set(10, seed=3)
        base = pose_errors(est, ref)
        scale, rot, trans = random_similarity(seed=4)
        moved = est.copy()
        moved[:, :3, :3] = rot @ est[:, :3, :3]
        moved[:, :3, 3] = scale * est[:, :3, 3] @ rot.T + trans
        after = pose_errors(moved, ref)
        assert abs(after.mean_rotation_deg - base.mean_rotation_deg) < 1e-6
        assert abs(after.mean_translation - base.mean_translation) < 1e-6

    def test_report_serializes(self):
        poses = make_pose_set(6, seed=5)
        d = pose_errors(poses, poses).to_dict()
        assert "mean_rotation_deg" in d and "translation_units" in d


class TestSelectTestViews:
    @staticmethod
    def poses_from_dirs(dirs):
        # Build c2w matrices whose camera forward (-z) equals each direction.
        mats = []
        up = np.array([0.0, 0.0, 1.0])
        for d in dirs:
            d = d / np.linalg.norm(d)
            z = -d
            helper = up if abs(z @ up) < 0.99 else np.array([0.0, 1.0, 0.0])
            x = np.cross(helper, z)
            x = x / np.linalg.norm(x)
            y = np.cross(z, x)
            m = np.eye(4)
            m[:3, :3] = np.stack([x, y, z], axis=-1)
            mats.append(m)
        return np.stack(mats)

    def test_k_equals_n_returns_all(self):
        poses = make_pose_set(6, seed=0)
        assert sorted(select_test_views(poses, 6)) == list(range(6))

    def test_antipodal_pair_selected(self):
        dirs = [np.array([1.0, 0, 0]), np.array([-1.0, 0, 0]), np.array([1.0, 0.001, 0])]
        poses = self.poses_from_dirs(dirs)
        sel = select_test_views(poses, 2)
        assert set(sel) <= {0, 1, 2} and ((0 in sel or 2 in sel) and 1 in sel)

    def test_deterministic(self):
        poses = make_pose_set(12, seed=6)
        assert select_test_views(poses, 5) == select_test_views(poses, 5)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            select_test_views(make_pose_set(3, seed=7), 4)


class TestEstimatePose:
    def _setup(self):
        torch.manual_seed(0)
        from posefield.adversarial import InversionConfig, InversionNet
        from posefield.field import FieldConfig, RadianceField
        from posefield.geometry import Intrinsics

        intr = Intrinsics(70.0, 70.0, 32.0, 32.0, 64, 64)
        cfg = FieldConfig(pos_levels=2, dir_levels=0, width=8, depth=2, skip_layers=(),
                          n_coarse=4, n_fine=4)
        field = RadianceField(cfg)
        inv = InversionNet(InversionConfig(width=16, depth=1, heads=2))
        g = torch.Generator().manual_seed(1)
        image = torch.rand(64, 64, 3, generator=g)
        return image, inv, field, intr, cfg

    def test_zero_refine_equals_inversion_output(self):
        image, inv, field, intr, cfg = self._setup()
        from posefield.adversarial import inversion_forward
        from posefield.sampling import extract_patch, static_patch

        pose = estimate_pose(image, inv, None, intr, refine_iters=0)
        with torch.no_grad():
            want = inversion_forward(inv, extract_patch(image, static_patch(64, 64)).unsqueeze(0))[0]
        assert torch.equal(pose, want)

    def test_refinement_never_increases_loss(self):
        image, inv, field, intr, cfg = self._setup()
        from posefield.field import render_rays
        from posefield.geometry import camera_rays
        from posefield.sampling import extract_patch, static_patch

        raw = estimate_pose(image, inv, None, intr, refine_iters=0)
        refined = estimate_pose(image, inv, field, intr, cfg, 2.0, 6.0,
                                refine_iters=5, refine_rays=64, seed=3)

        spec = static_patch(64, 64)
        patch = extract_patch(image, spec)
        gen = torch.Generator().manual_seed(3)
        coords = spec.coords.reshape(-1, 2)
        sel = torch.randperm(coords.shape[0], generator=gen)[:64]
        coords, target = coords[sel], patch.reshape(-1, 3)[sel]

        def loss_at(p):
            with torch.no_grad():
                out = render_rays(field, camera_rays(p, intr, coords, 2.0, 6.0), cfg, None)
            return float(((out.rgb - target) ** 2).mean())

        assert loss_at(refined) <= loss_at(raw) + 1e-9
