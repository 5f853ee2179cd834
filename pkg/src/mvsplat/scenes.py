"""Analytic reference scenes rendered by ray tracing.

This renderer is the independent oracle used for photometric guidance
targets and for evaluation ground truth. It never touches the splatting
code path: spheres intersect in closed form, boxes and tori are sphere
traced against their signed distance functions, and colors are smooth
polynomials of the surface normal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Camera, InvalidInputError


@dataclass
class SceneSpec:
    """Analytic scene: kind in {sphere, box, torus} with a procedural color."""
    kind: str = "sphere"
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.55            # sphere radius / torus major radius
    minor_radius: float = 0.18      # torus tube radius
    half_extents: tuple = (0.45, 0.45, 0.45)  # box
    color_linear: float = 0.30      # weight of n in the color
    color_quadratic: float = 0.25   # weight of (n_x n_y, n_y n_z, n_z n_x)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "torus"):
            raise InvalidInputError(f"unknown scene kind {self.kind!r}")
        if self.radius <= 0:
            raise InvalidInputError("radius must be positive")

    def surface_color(self, normals: np.ndarray) -> np.ndarray:
        """Smooth RGB from unit normals, kept inside (0, 1)."""
        n = normals
        quad = np.stack([n[:, 0] * n[:, 1], n[:, 1] * n[:, 2], n[:, 2] * n[:, 0]],
                        axis=1)
        c = 0.5 + self.color_linear * n + self.color_quadratic * quad
        return np.clip(c, 0.02, 0.98)


def _sdf(spec: SceneSpec, p: np.ndarray) -> np.ndarray:
    q = p - np.asarray(spec.center)
    if spec.kind == "sphere":
        return np.linalg.norm(q, axis=-1) - spec.radius
    if spec.kind == "box":
        h = np.asarray(spec.half_extents)
        d = np.abs(q) - h
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(np.max(d, axis=-1), 0.0)
        return outside + inside
    # torus around the z axis
    ring = np.hypot(q[..., 0], q[..., 1]) - spec.radius
    return np.hypot(ring, q[..., 2]) - spec.minor_radius


def _sdf_normal(spec: SceneSpec, p: np.ndarray, h: float = 1e-6) -> np.ndarray:
    n = np.zeros_like(p)
    for k in range(3):
        dp = np.zeros(3)
        dp[k] = h
        n[:, k] = _sdf(spec, p + dp) - _sdf(spec, p - dp)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(norm, 1e-12)


def _trace(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray,
           t_max: float, iters: int = 192, eps: float = 1e-6):
    """Sphere tracing. Returns (hit mask, t values)."""
    if spec.kind == "sphere":
        # closed form
        c = np.asarray(spec.center)
        oc = origins - c
        b = np.sum(oc * dirs, axis=1)
        cc = np.sum(oc * oc, axis=1) - spec.radius**2
        disc = b * b - cc
        hit = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t = -b - sq
        hit &= t > 0
        return hit, t
    t = np.zeros(len(origins))
    done = np.zeros(len(origins), dtype=bool)
    for _ in range(iters):
        p = origins + t[:, None] * dirs
        d = _sdf(spec, p)
        close = np.abs(d) < eps
        done |= close
        t = np.where(done, t, t + d)
        if done.all() or np.all(t[~done] > t_max):
            break
    hit = done & (t > 0) & (t <= t_max)
    return hit, t


def render_target(camera: Camera, background, spec: SceneSpec,
                  supersample: int = 2) -> np.ndarray:
    """Ray-traced RGB image of the analytic scene composited on `background`.

    `supersample` jitters a regular subpixel grid; edges come out
    anti-aliased, matching what a well-converged splat render can represent.
    """
    bg = np.asarray(background, dtype=float).reshape(3)
    H, W, ss = camera.height, camera.width, max(1, int(supersample))
    sub = (np.arange(ss) + 0.5) / ss
    us = (np.arange(W)[:, None] + sub[None, :]).reshape(-1)   # W*ss
    vs = (np.arange(H)[:, None] + sub[None, :]).reshape(-1)   # H*ss
    uu, vv = np.meshgrid(us, vs)                               # (H*ss, W*ss)
    dirs_cam = np.stack([(uu - camera.cx) / camera.fx,
                         (vv - camera.cy) / camera.fy,
                         np.ones_like(uu)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ camera.R               # R^T applied to rows
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape)

    hit, t = _trace(spec, origins, dirs, t_max=camera.far)
    color = np.tile(bg, (len(dirs), 1))
    if hit.any():
        p = origins[hit] + t[hit, None] * dirs[hit]
        n = _sdf_normal(spec, p) if spec.kind != "sphere" else (
            (p - np.asarray(spec.center)) / spec.radius)
        color[hit] = spec.surface_color(n)
    img = color.reshape(H, ss, W, ss, 3).mean(axis=(1, 3))
    return img


def turntable_cameras(n_views: int, radius: float, elevation_deg: float,
                      width: int, height: int, fov_deg: float,
                      near: float = 0.01, far: float = 100.0,
                      azimuth_offset_deg: float = 0.0) -> list[Camera]:
    """Evenly spaced azimuth ring at fixed elevation, looking at the origin."""
    cams = []
    el = math.radians(elevation_deg)
    for i in range(n_views):
        az = math.radians(azimuth_offset_deg + 360.0 * i / n_views)
        pos = (radius * math.cos(el) * math.cos(az),
               radius * math.cos(el) * math.sin(az),
               radius * math.sin(el))
        cams.append(Camera.look_at(pos, (0, 0, 0), width=width, height=height,
                                   fov_deg=fov_deg, near=near, far=far))
    return cams
