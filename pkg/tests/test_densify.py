import math

import numpy as np
import pytest

from mvsplat.core import GaussianCloud, InvalidInputError, logit
from mvsplat.densify import (DensifySchedule, densify_and_prune, reset_opacity)
from mvsplat.surface import PruneMode, SurfaceCloud
from mvsplat.trainer import OptimizerState

from conftest import make_random_cloud


def covering_surface(cloud):
    """Surface points at every center, so knn pruning keeps everything."""
    return SurfaceCloud(points=cloud.centers.copy())


def schedule(**kw):
    base = dict(start_step=1000, interval=200, stop_step=8000, total_steps=10000,
                grad_threshold=0.05, split_scale_threshold=0.01,
                opacity_reset_interval=3000)
    base.update(kw)
    return DensifySchedule(**base)


class TestSchedule:
    def test_default_event_steps(self):
        s = DensifySchedule()
        assert s.densify_steps() == list(range(1000, 8001, 200))

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            DensifySchedule(interval=0)
        with pytest.raises(InvalidInputError):
            DensifySchedule(start_step=0)
        with pytest.raises(InvalidInputError):
            DensifySchedule(start_step=900, stop_step=800)
        with pytest.raises(InvalidInputError):
            DensifySchedule(grad_threshold=0.0)

    def test_opacity_reset_cadence(self):
        s = DensifySchedule()
        fires = [t for t in range(1, 10001) if s.reset_due(t)]
        assert fires == [3000, 6000]   # 9000 is past stop_step


class TestDensifyAndPrune:
    def test_noop_when_nothing_triggers(self, rng):
        cloud = make_random_cloud(rng, 12, opacity_range=(0.3, 0.9))
        surf = covering_surface(cloud)
        before = cloud.centers.copy()
        rep = densify_and_prune(cloud, surf, schedule(), 1000,
                                np.random.default_rng(0))
        assert (rep.cloned, rep.split, rep.opacity_pruned, rep.surface_pruned) == (0, 0, 0, 0)
        np.testing.assert_array_equal(cloud.centers, before)

    def test_off_schedule_is_warning_noop(self, rng):
        cloud = make_random_cloud(rng, 5)
        rep = densify_and_prune(cloud, covering_surface(cloud), schedule(), 1001,
                                np.random.default_rng(0))
        assert rep.skipped and len(cloud) == 5

    def test_small_high_gradient_gaussian_cloned(self, rng):
        cloud = make_random_cloud(rng, 8, scale_range=(0.004, 0.008),
                                  opacity_range=(0.3, 0.9))
        cloud.grad_accum[3] = 10.0
        cloud.grad_count[3] = 1.0
        surf = covering_surface(cloud)
        rep = densify_and_prune(cloud, surf, schedule(), 1000, np.random.default_rng(0))
        assert rep.cloned == 1 and rep.split == 0
        assert len(cloud) == 9

    def test_large_high_gradient_gaussian_split(self, rng):
        cloud = make_random_cloud(rng, 6, scale_range=(0.05, 0.2),
                                  opacity_range=(0.3, 0.9))
        cloud.grad_accum[2] = 5.0
        cloud.grad_count[2] = 1.0
        parent_logs = cloud.log_scales[2].copy()
        parent_id = cloud.ids[2]
        surf = SurfaceCloud(points=np.concatenate([cloud.centers,
                                                   cloud.centers + 0.001]))
        rep = densify_and_prune(cloud, surf, schedule(), 1200, np.random.default_rng(0))
        assert rep.split == 1
        assert parent_id not in cloud.ids
        children = np.flatnonzero(cloud.ids >= 6)
        assert len(children) == 2
        expected = parent_logs - math.log(1.6)
        for c in children:
            np.testing.assert_allclose(cloud.log_scales[c], expected, atol=1e-6)

    def test_opacity_pruning(self, rng):
        cloud = make_random_cloud(rng, 10, opacity_range=(0.3, 0.9))
        cloud.logit_opacities[4] = logit(0.01)
        rep = densify_and_prune(cloud, covering_surface(cloud), schedule(), 1000,
                                np.random.default_rng(0))
        assert rep.opacity_pruned == 1 and len(cloud) == 9

    def test_grad_stats_reset_after_event(self, rng):
        cloud = make_random_cloud(rng, 6, opacity_range=(0.3, 0.9))
        cloud.grad_accum[:] = 1.0
        cloud.grad_count[:] = 2.0
        densify_and_prune(cloud, covering_surface(cloud), schedule(), 1400,
                          np.random.default_rng(0))
        assert np.all(cloud.grad_accum == 0) and np.all(cloud.grad_count == 0)

    def test_row_state_tracks_surgery(self, rng):
        cloud = make_random_cloud(rng, 10, scale_range=(0.004, 0.008),
                                  opacity_range=(0.3, 0.9))
        opt = OptimizerState(cloud)
        opt.m["centers"][:] = 7.0
        cloud.grad_accum[1] = 10.0
        cloud.grad_count[1] = 1.0
        cloud.logit_opacities[5] = logit(0.001)
        rep = densify_and_prune(cloud, covering_surface(cloud), schedule(), 1000,
                                np.random.default_rng(0), row_state=opt)
        n = len(cloud)
        for name in OptimizerState.CLOUD_GROUPS:
            assert opt.m[name].shape[0] == n
            assert opt.v[name].shape[0] == n
        # the cloned row starts with zero moments
        assert np.all(opt.m["centers"][-1] == 0.0)

    def test_children_quaternions_unit(self, rng):
        cloud = make_random_cloud(rng, 6, scale_range=(0.05, 0.2),
                                  opacity_range=(0.4, 0.9))
        cloud.grad_accum[:] = 10.0
        cloud.grad_count[:] = 1.0
        densify_and_prune(cloud, covering_surface(cloud), schedule(), 1000,
                          np.random.default_rng(0))
        norms = np.linalg.norm(cloud.quats, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)
        assert np.all(np.isfinite(cloud.centers))

    def test_infinite_threshold_is_identity(self, rng):
        cloud = make_random_cloud(rng, 9, opacity_range=(0.3, 0.9))
        cloud.grad_accum[:] = 100.0
        cloud.grad_count[:] = 1.0
        before = cloud.centers.copy()
        rep = densify_and_prune(cloud, covering_surface(cloud),
                                schedule(grad_threshold=float("inf")), 1000,
                                np.random.default_rng(0))
        assert len(cloud) == 9 and rep.cloned == rep.split == 0
        np.testing.assert_array_equal(cloud.centers, before)

    def test_arrays_stay_length_matched(self, rng):
        cloud = make_random_cloud(rng, 30, opacity_range=(0.02, 0.9))
        cloud.grad_accum[:] = rng.uniform(0, 0.2, size=30)
        cloud.grad_count[:] = 1.0
        opt = OptimizerState(cloud)
        densify_and_prune(cloud, covering_surface(cloud), schedule(grad_threshold=0.1),
                          1000, np.random.default_rng(0), row_state=opt)
        n = len(cloud)
        assert len(cloud.grad_accum) == len(cloud.grad_count) == len(cloud.ids) == n
        assert all(opt.m[k].shape[0] == n for k in OptimizerState.CLOUD_GROUPS)


class TestResetOpacity:
    def test_clamps_above_cap(self):
        cloud = make_random_cloud(np.random.default_rng(0), 2)
        cloud.logit_opacities = logit(np.array([0.9, 0.005]))
        reset_opacity(cloud, cap=0.01)
        np.testing.assert_allclose(cloud.opacities, [0.01, 0.005], atol=1e-12)

    def test_untouched_when_below(self):
        cloud = make_random_cloud(np.random.default_rng(0), 3)
        cloud.logit_opacities = logit(np.array([0.002, 0.009, 0.01]))
        before = cloud.logit_opacities.copy()
        reset_opacity(cloud, cap=0.01)
        np.testing.assert_array_equal(cloud.logit_opacities, before)

    def test_render_alpha_drops_after_reset(self):
        # single opaque splat per pixel region: alpha falls below 0.05
        from mvsplat.rasterizer import render
        from conftest import side_camera
        cloud = GaussianCloud(
            centers=np.zeros((1, 3)), log_scales=np.log(np.full((1, 3), 0.3)),
            quats=np.array([[1.0, 0, 0, 0]]), colors=np.full((1, 3), 1.0),
            logit_opacities=np.array([logit(0.95)]))
        cam = side_camera()
        before = render(cloud, cam, np.zeros(3)).alpha.max()
        assert before > 0.9
        reset_opacity(cloud, cap=0.01)
        after = render(cloud, cam, np.zeros(3)).alpha
        assert np.all(after < 0.05)

    def test_cap_validation(self):
        cloud = make_random_cloud(np.random.default_rng(0), 2)
        with pytest.raises(InvalidInputError):
            reset_opacity(cloud, cap=0.0)
        with pytest.raises(InvalidInputError):
            reset_opacity(cloud, cap=1.0)
