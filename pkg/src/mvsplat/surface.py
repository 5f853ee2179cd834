"""Pseudo-surface construction from rendered depth, and pruning against it.

The surface is the set of backprojected depth pixels from a ring of views,
density-filtered and voxel-downsampled. It drives the alignment losses and
the surface pruning rules (k-NN keep, percentile, epsilon threshold).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import Camera, GaussianCloud, InvalidInputError, SceneConfig
from .rasterizer import RasterConfig, render

log = logging.getLogger(__name__)


@dataclass
class SurfaceCloud:
    """Fused, downsampled surface point set with an exact spatial index."""
    points: np.ndarray                 # (M, 3)
    built_step: int = -1
    empty_warning: bool = False
    _tree: cKDTree = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            if len(self.points) == 0:
                raise InvalidInputError("empty surface has no spatial index")
            self._tree = cKDTree(self.points)
        return self._tree

    def nearest_distance(self, queries: np.ndarray) -> np.ndarray:
        d, _ = self.tree.query(queries, k=1)
        return d

    def save_ascii(self, path) -> None:
        """One 'x y z' triple per line, for debugging in point-cloud viewers."""
        np.savetxt(path, self.points, fmt="%.8g")


# ---------------------------------------------------------------------------
# Backprojection
# ---------------------------------------------------------------------------

def backproject_points(uv: np.ndarray, depth: np.ndarray, camera: Camera) -> np.ndarray:
    """World points from continuous pixel coordinates and z-depth.

    P = R^-1 (K^-1 (u, v, 1)^T d - t). `uv` is (M, 2) in pixel units,
    `depth` is (M,).
    """
    uv = np.asarray(uv, dtype=float)
    d = np.asarray(depth, dtype=float)
    xc = np.empty((len(uv), 3))
    xc[:, 0] = (uv[:, 0] - camera.cx) / camera.fx * d
    xc[:, 1] = (uv[:, 1] - camera.cy) / camera.fy * d
    xc[:, 2] = d
    return (xc - camera.t) @ camera.R


def project_points(points: np.ndarray, camera: Camera):
    """Continuous (u, v) pixel coordinates and z-depth of world points."""
    xc = np.asarray(points, dtype=float) @ camera.R.T + camera.t
    z = xc[:, 2]
    u = camera.fx * xc[:, 0] / z + camera.cx
    v = camera.fy * xc[:, 1] / z + camera.cy
    return np.stack([u, v], axis=1), z


def backproject(depth: np.ndarray, camera: Camera) -> np.ndarray:
    """Backproject every valid pixel (depth > 0) of a depth map.

    Pixel (row, col) is treated as the ray through its center
    (col + 0.5, row + 0.5). Returns (M, 3) world points.
    """
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (camera.height, camera.width):
        raise InvalidInputError(
            f"depth shape {depth.shape} does not match camera "
            f"{(camera.height, camera.width)}")
    rows, cols = np.nonzero(depth > 0)
    if len(rows) == 0:
        return np.zeros((0, 3))
    uv = np.stack([cols + 0.5, rows + 0.5], axis=1)
    return backproject_points(uv, depth[rows, cols], camera)


# ---------------------------------------------------------------------------
# Point-set operations
# ---------------------------------------------------------------------------

def remove_low_density_points(points: np.ndarray, min_neighbors: int,
                              radius: float) -> np.ndarray:
    """Drop points with fewer than min_neighbors other points within radius."""
    if len(points) == 0:
        return points
    tree = cKDTree(points)
    counts = tree.query_ball_point(points, r=radius, return_length=True)
    return points[counts - 1 >= min_neighbors]  # exclude the point itself


def voxel_downsample(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Average points per occupied voxel of edge voxel_size.

    Output rows are ordered by voxel key; sums run in input order, so the
    result is deterministic for a fixed input.
    """
    if voxel_size <= 0:
        raise InvalidInputError("voxel_size must be positive")
    if len(points) == 0:
        return points
    keys = np.floor(points / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    counts = np.bincount(inverse)
    out = np.stack([np.bincount(inverse, weights=points[:, k]) for k in range(3)],
                   axis=1)
    return out / counts[:, None]


def ring_cameras(n_views: int, scene: SceneConfig, rng: np.random.Generator,
                 look_at=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Azimuths uniformly spread around the object, random elevation each."""
    lo, hi = scene.elevation_range_deg
    cams = []
    for i in range(n_views):
        az = 360.0 * i / n_views
        el = float(rng.uniform(lo, hi))
        cams.append(_orbit_camera(az, el, scene, look_at))
    return cams


def _orbit_camera(azimuth_deg: float, elevation_deg: float, scene: SceneConfig,
                  look_at=(0.0, 0.0, 0.0)) -> Camera:
    r = scene.camera_radius
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    pos = np.array([r * math.cos(el) * math.cos(az),
                    r * math.cos(el) * math.sin(az),
                    r * math.sin(el)])
    return Camera.look_at(pos + np.asarray(look_at), look_at,
                          width=scene.render_width, height=scene.render_height,
                          fov_deg=scene.fov_deg, near=scene.near, far=scene.far)


def build_surface(cloud: GaussianCloud, n_views: int, scene: SceneConfig,
                  voxel_size: float | None = None,
                  density_min_neighbors: int = 4,
                  density_radius: float | None = None,
                  rng: np.random.Generator | None = None,
                  extra_cameras: list[Camera] | None = None,
                  raster_config: RasterConfig | None = None,
                  step: int = -1) -> SurfaceCloud:
    """Render depth from a view ring, backproject, fuse and downsample.

    Low-density stragglers (floaters seen from single views) are removed
    before voxel averaging. An all-invalid depth set yields an empty surface
    with `empty_warning` set rather than an error.
    """
    if n_views < 1:
        raise InvalidInputError("need at least one view")
    if voxel_size is None:
        voxel_size = 0.01 * scene.scene_extent
    if density_radius is None:
        density_radius = 2.0 * voxel_size
    rng = rng or np.random.default_rng(0)
    cams = ring_cameras(n_views, scene, rng)
    if extra_cameras:
        cams = cams + list(extra_cameras)
    bg = np.zeros(3)
    chunks = []
    for cam in cams:
        out = render(cloud, cam, bg, raster_config)
        pts = backproject(out.depth, cam)
        if len(pts):
            chunks.append(pts)
    if not chunks:
        log.warning("surface build produced no valid depth; returning empty surface")
        return SurfaceCloud(points=np.zeros((0, 3)), built_step=step, empty_warning=True)
    points = np.concatenate(chunks)
    points = remove_low_density_points(points, density_min_neighbors, density_radius)
    points = voxel_downsample(points, voxel_size) if len(points) else points
    if len(points) == 0:
        log.warning("surface empty after density filtering")
        return SurfaceCloud(points=np.zeros((0, 3)), built_step=step, empty_warning=True)
    return SurfaceCloud(points=points, built_step=step)


# ---------------------------------------------------------------------------
# Distances and pruning
# ---------------------------------------------------------------------------

def gaussian_surface_distance(cloud: GaussianCloud, surface: SurfaceCloud) -> np.ndarray:
    """D_g = min_i |mu_g - P_i| for every Gaussian (exact)."""
    if len(surface) == 0:
        raise InvalidInputError("surface is empty")
    return surface.nearest_distance(cloud.centers)


@dataclass(frozen=True)
class PruneMode:
    """Surface pruning rule: knn keeps each point's k nearest centers,
    percentile prunes the top (100 - p)% of distances, epsilon prunes
    distances above an absolute threshold."""
    kind: str
    k: int = 5
    p: float = 90.0
    eps: float = 0.0

    @staticmethod
    def knn(k: int = 5) -> "PruneMode":
        if k < 1:
            raise InvalidInputError("knn mode needs k >= 1")
        return PruneMode(kind="knn", k=k)

    @staticmethod
    def percentile(p: float) -> "PruneMode":
        if not (0.0 < p < 100.0):
            raise InvalidInputError("percentile must lie in (0, 100)")
        return PruneMode(kind="percentile", p=p)

    @staticmethod
    def epsilon(eps: float) -> "PruneMode":
        if eps <= 0:
            raise InvalidInputError("epsilon must be positive")
        return PruneMode(kind="epsilon", eps=eps)

    @staticmethod
    def none() -> "PruneMode":
        return PruneMode(kind="none")


def surface_prune(cloud: GaussianCloud, surface: SurfaceCloud,
                  mode: PruneMode) -> np.ndarray:
    """Boolean mask of Gaussians to prune. Never marks the whole cloud."""
    if mode.kind == "none":
        return np.zeros(len(cloud), dtype=bool)
    if len(surface) == 0:
        raise InvalidInputError("surface is empty")
    n = len(cloud)
    if mode.kind == "knn":
        center_tree = cKDTree(cloud.centers)
        k = min(mode.k, n)
        _, idx = center_tree.query(surface.points, k=k)
        keep = np.zeros(n, dtype=bool)
        keep[np.unique(idx)] = True
        prune = ~keep
    elif mode.kind == "percentile":
        d = gaussian_surface_distance(cloud, surface)
        prune = d > np.percentile(d, mode.p)
    elif mode.kind == "epsilon":
        d = gaussian_surface_distance(cloud, surface)
        prune = d > mode.eps
    else:
        raise InvalidInputError(f"unknown prune mode {mode.kind!r}")
    if prune.all():
        d = gaussian_surface_distance(cloud, surface)
        prune[np.argmin(d)] = False
        log.warning("surface pruning would empty the cloud; keeping the closest Gaussian")
    return prune
