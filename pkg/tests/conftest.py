import numpy as np
import pytest

from mvsplat.core import Camera, GaussianCloud, logit, normalize_quaternions
from mvsplat.rasterizer import RasterConfig


def make_random_cloud(rng, n, spread=0.5, scale_range=(0.05, 0.25),
                      opacity_range=(0.2, 0.9)) -> GaussianCloud:
    return GaussianCloud(
        centers=rng.uniform(-spread, spread, size=(n, 3)),
        log_scales=np.log(rng.uniform(*scale_range, size=(n, 3))),
        quats=normalize_quaternions(rng.normal(size=(n, 4))),
        colors=rng.uniform(0.1, 0.9, size=(n, 3)),
        logit_opacities=logit(rng.uniform(*opacity_range, size=n)),
    )


def smooth_raster_config() -> RasterConfig:
    """Rasterizer constants with cutoffs disabled so finite differences see
    a smooth function; the analytic backward is the exact adjoint for any
    config, so checking here validates the production code path too."""
    return RasterConfig(alpha_cutoff=1e-12, transmittance_floor=0.0,
                        radius_sigma=6.0)


def central_difference(fn, arr, h):
    """Gradient of scalar fn() w.r.t. every element of arr (edited in place)."""
    out = np.zeros_like(arr, dtype=float)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        orig = arr[ix]
        arr[ix] = orig + h
        fp = fn()
        arr[ix] = orig - h
        fm = fn()
        arr[ix] = orig
        out[ix] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic, fd):
    scale = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-12)
    return np.abs(analytic - fd).max() / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def side_camera(width=24, height=20, fov=45.0, distance=2.2) -> Camera:
    return Camera.look_at((distance, 0.4, 0.6), (0, 0, 0),
                          width=width, height=height, fov_deg=fov)
