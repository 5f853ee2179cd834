import math

import numpy as np
import pytest

from mvsplat.core import Camera, InvalidInputError
from mvsplat.metrics import MetricsWriter, psnr, read_metrics
from mvsplat.scenes import SceneSpec, _sdf, render_target, turntable_cameras


class TestSceneSpec:
    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidInputError):
            SceneSpec(kind="cylinder")

    def test_color_stays_in_unit_interval(self, rng):
        spec = SceneSpec()
        n = rng.normal(size=(500, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        c = spec.surface_color(n)
        assert c.min() >= 0.0 and c.max() <= 1.0


class TestSdf:
    def test_sphere_distance(self):
        spec = SceneSpec(kind="sphere", radius=0.5)
        assert abs(_sdf(spec, np.array([[1.0, 0, 0]]))[0] - 0.5) < 1e-12
        assert abs(_sdf(spec, np.array([[0.0, 0, 0]]))[0] + 0.5) < 1e-12

    def test_box_inside_outside(self):
        spec = SceneSpec(kind="box", half_extents=(0.5, 0.5, 0.5))
        assert _sdf(spec, np.array([[0.0, 0, 0]]))[0] < 0
        assert abs(_sdf(spec, np.array([[1.0, 0, 0]]))[0] - 0.5) < 1e-12

    def test_torus_ring(self):
        spec = SceneSpec(kind="torus", radius=0.5, minor_radius=0.1)
        on_ring = np.array([[0.5, 0.0, 0.1]])
        assert abs(_sdf(spec, on_ring)[0]) < 1e-12


class TestRenderTarget:
    def _camera(self, w=32, h=32):
        return Camera.look_at((2.0, 0.3, 0.4), (0, 0, 0), width=w, height=h,
                              fov_deg=45)

    def test_background_fills_miss_region(self):
        cam = self._camera()
        bg = np.array([0.1, 0.9, 0.4])
        img = render_target(cam, bg, SceneSpec(kind="sphere", radius=0.3), 1)
        np.testing.assert_allclose(img[0, 0], bg, atol=1e-12)

    def test_sphere_silhouette_radius(self):
        # angular silhouette size matches the analytic sphere
        cam = Camera.look_at((2.0, 0, 0), (0, 0, 0), width=129, height=129,
                             fov_deg=45)
        spec = SceneSpec(kind="sphere", radius=0.4)
        img = render_target(cam, np.zeros(3), spec, 1)
        hit = np.abs(img.sum(axis=2)) > 1e-9
        rows = np.nonzero(hit.any(axis=1))[0]
        measured = (rows.max() - rows.min() + 1) / 2.0
        f = cam.fx
        expected = math.tan(math.asin(0.4 / 2.0)) * f
        assert abs(measured - expected) < 2.0

    def test_supersampling_smooths_edges(self):
        cam = self._camera()
        spec = SceneSpec(kind="sphere", radius=0.4)
        img1 = render_target(cam, np.zeros(3), spec, 1)
        img3 = render_target(cam, np.zeros(3), spec, 3)
        frac1 = np.isin(img1.sum(axis=2), [0.0]).mean()
        partial = ((img3.sum(axis=2) > 0) & (img3.sum(axis=2)
                                             < np.quantile(img3.sum(axis=2), 0.999))).mean()
        assert partial > 0  # anti-aliased transition pixels exist
        np.testing.assert_allclose(img1.mean(), img3.mean(), atol=0.02)

    def test_box_and_torus_trace(self):
        cam = self._camera(48, 48)
        for kind in ("box", "torus"):
            img = render_target(cam, np.ones(3), SceneSpec(kind=kind), 1)
            assert np.any(img < 0.99)  # object visible
            assert np.all(np.isfinite(img))


class TestTurntable:
    def test_even_spacing_and_count(self):
        cams = turntable_cameras(15, 2.5, 15.0, 32, 32, 40.0)
        assert len(cams) == 15
        pos = np.array([c.position for c in cams])
        az = np.degrees(np.arctan2(pos[:, 1], pos[:, 0]))
        gaps = np.diff(np.unwrap(np.radians(az)))
        np.testing.assert_allclose(np.degrees(gaps), 24.0, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(pos, axis=1), 2.5, atol=1e-9)


class TestPsnr:
    def test_exact_match_is_inf(self, rng):
        img = rng.uniform(size=(8, 8, 3))
        assert math.isinf(psnr(img, img))

    def test_uniform_one_over_255_error(self):
        # closed form: 10 log10(255^2) = 48.1308 dB
        a = np.full((16, 16, 3), 0.5)
        b = a + 1.0 / 255.0
        np.testing.assert_allclose(psnr(a, b), 48.1308, atol=0.01)

    def test_metrics_writer_roundtrip(self, tmp_path):
        path = tmp_path / "m.jsonl"
        with MetricsWriter(path) as mw:
            mw.write({"step": 1, "loss": 0.5})
            mw.write({"step": 2, "loss": 0.25})
        records = read_metrics(path)
        assert records == [{"step": 1, "loss": 0.5}, {"step": 2, "loss": 0.25}]

    def test_metrics_append_mode(self, tmp_path):
        path = tmp_path / "m.jsonl"
        with MetricsWriter(path) as mw:
            mw.write({"step": 1})
        with MetricsWriter(path, append=True) as mw:
            mw.write({"step": 2})
        assert [r["step"] for r in read_metrics(path)] == [1, 2]
