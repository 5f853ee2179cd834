"""Core domain types: Gaussian clouds, cameras, scene configuration.

Parameterization follows common splatting practice: scales are stored in
log space and opacities as pre-sigmoid logits so the optimizer works on
unconstrained variables. Quaternions use the (w, x, y, z) Hamilton
convention and are kept unit-norm by renormalizing after each optimizer
step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments violating its contract."""


# ---------------------------------------------------------------------------
# Quaternion helpers (w, x, y, z convention)
# ---------------------------------------------------------------------------

def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Return unit quaternions. q: (..., 4)."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InvalidInputError("zero-norm quaternion")
    return q / n

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions. q: (..., 4) -> (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R

def rotmat_grad_wrt_quat(q: np.ndarray) -> np.ndarray:
    """dR/dq for the polynomial rotation formula above.

    q: (..., 4) unit quaternions -> (..., 4, 3, 3) where [..., k, :, :] is
    the derivative of R with respect to component k of the (unnormalized)
    argument. Use together with the normalization Jacobian when the stored
    quaternion is not exactly unit.
    """
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    D = np.empty(q.shape[:-1] + (4, 3, 3), dtype=q.dtype)
    # dR/dw
    D[..., 0, 0, 0] = zero;      D[..., 0, 0, 1] = -2 * z;  D[..., 0, 0, 2] = 2 * y
    D[..., 0, 1, 0] = 2 * z;     D[..., 0, 1, 1] = zero;    D[..., 0, 1, 2] = -2 * x
    D[..., 0, 2, 0] = -2 * y;    D[..., 0, 2, 1] = 2 * x;   D[..., 0, 2, 2] = zero
    # dR/dx
    D[..., 1, 0, 0] = zero;      D[..., 1, 0, 1] = 2 * y;   D[..., 1, 0, 2] = 2 * z
    D[..., 1, 1, 0] = 2 * y;     D[..., 1, 1, 1] = -4 * x;  D[..., 1, 1, 2] = -2 * w
    D[..., 1, 2, 0] = 2 * z;     D[..., 1, 2, 1] = 2 * w;   D[..., 1, 2, 2] = -4 * x
    # dR/dy
    D[..., 2, 0, 0] = -4 * y;    D[..., 2, 0, 1] = 2 * x;   D[..., 2, 0, 2] = 2 * w
    D[..., 2, 1, 0] = 2 * x;     D[..., 2, 1, 1] = zero;    D[..., 2, 1, 2] = 2 * z
    D[..., 2, 2, 0] = -2 * w;    D[..., 2, 2, 1] = 2 * z;   D[..., 2, 2, 2] = -4 * y
    # dR/dz
    D[..., 3, 0, 0] = -4 * z;    D[..., 3, 0, 1] = -2 * w;  D[..., 3, 0, 2] = 2 * x
    D[..., 3, 1, 0] = 2 * w;     D[..., 3, 1, 1] = -4 * z;  D[..., 3, 1, 2] = 2 * y
    D[..., 3, 2, 0] = 2 * x;     D[..., 3, 2, 1] = 2 * y;   D[..., 3, 2, 2] = zero
    return D

def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out

def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# Covariance construction
# ---------------------------------------------------------------------------

def build_covariance(s: np.ndarray, q: np.ndarray, unit_tol: float = 1e-6) -> np.ndarray:
    """Sigma = R(q) diag(s)^2 R(q)^T for positive scales and a unit quaternion.

    Accepts batched input: s (..., 3), q (..., 4). Raises if any scale is
    non-positive or any quaternion norm deviates from 1 beyond unit_tol.
    """
    s = np.asarray(s, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any(s <= 0):
        raise InvalidInputError("scales must be strictly positive")
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > unit_tol):
        raise InvalidInputError("quaternion norm deviates from 1 beyond tolerance")
    R = quat_to_rotmat(q / norms[..., None])
    RS = R * (s[..., None, :] ** 2)           # R @ diag(s^2)
    return RS @ np.swapaxes(R, -1, -2)


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera: x_cam = R @ x_world + t, u = fx*x/z + cx, v = fy*y/z + cy.

    Axes follow the OpenCV convention (x right, y down, z forward).
    """
    K: np.ndarray          # (3, 3) intrinsics
    R: np.ndarray          # (3, 3) world-to-camera rotation
    t: np.ndarray          # (3,) translation
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise InvalidInputError("require 0 < near < far")
        if np.max(np.abs(self.R @ self.R.T - np.eye(3))) > 1e-6:
            raise InvalidInputError("R is not orthonormal within 1e-6")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def camera_to_world(self) -> np.ndarray:
        """4x4 camera-to-world matrix."""
        M = np.eye(4)
        M[:3, :3] = self.R.T
        M[:3, 3] = self.position
        return M

    @staticmethod
    def look_at(position, target, width: int, height: int, fov_deg: float,
                up=(0.0, 0.0, 1.0), near: float = 0.01, far: float = 100.0) -> "Camera":
        """Camera at `position` looking toward `target`, z-up world."""
        position = np.asarray(position, dtype=float)
        forward = np.asarray(target, dtype=float) - position
        fn = np.linalg.norm(forward)
        if fn < 1e-12:
            raise InvalidInputError("camera position coincides with target")
        forward = forward / fn
        up = np.asarray(up, dtype=float)
        right = np.cross(forward, up)
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            raise InvalidInputError("view direction parallel to up vector")
        right = right / rn
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        t = -R @ position
        f = 0.5 * height / math.tan(math.radians(fov_deg) / 2.0)
        K = np.array([[f, 0.0, width / 2.0],
                      [0.0, f, height / 2.0],
                      [0.0, 0.0, 1.0]])
        return Camera(K=K, R=R, t=t, width=width, height=height, near=near, far=far)


# ---------------------------------------------------------------------------
# Scene configuration
# ---------------------------------------------------------------------------

@dataclass
class SceneConfig:
    """Scene-level knobs shared by the trainer and the surface builder."""
    scene_extent: float = 1.0
    background: tuple = (1.0, 1.0, 1.0)     # used when background_mode == "fixed"
    background_mode: str = "random"          # "fixed" | "random"
    camera_radius_factor: float = 2.5        # camera distance = factor * scene_extent
    elevation_range_deg: tuple = (-10.0, 45.0)
    fov_deg: float = 40.0
    render_width: int = 64
    render_height: int = 64
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if self.scene_extent <= 0:
            raise InvalidInputError("scene_extent must be positive")
        lo, hi = self.elevation_range_deg
        if not (-90.0 < lo <= hi < 90.0):
            raise InvalidInputError("elevation interval must lie inside (-90, 90)")
        if self.background_mode not in ("fixed", "random"):
            raise InvalidInputError(f"unknown background_mode {self.background_mode!r}")

    @property
    def camera_radius(self) -> float:
        return self.camera_radius_factor * self.scene_extent


# ---------------------------------------------------------------------------
# Gaussian cloud
# ---------------------------------------------------------------------------

@dataclass
class GaussianCloud:
    """Optimizable splat parameters plus densification bookkeeping.

    Internally stores log-scales and logit-opacities; the `scales` and
    `opacities` properties expose the constrained values. `ids` are
    persistent per-Gaussian identities used for deterministic tie-breaking;
    `id_counter` is the next unused id.
    """
    centers: np.ndarray            # (N, 3)
    log_scales: np.ndarray         # (N, 3)
    quats: np.ndarray              # (N, 4), (w, x, y, z), unit norm
    colors: np.ndarray             # (N, 3) in [0, 1]
    logit_opacities: np.ndarray    # (N,)
    grad_accum: np.ndarray = None  # (N,) accumulated screen-space grad norms
    grad_count: np.ndarray = None  # (N,) observation counter
    ids: np.ndarray = None         # (N,) int64
    id_counter: int = 0

    PARAM_GROUPS = ("centers", "log_scales", "quats", "colors", "logit_opacities")

    def __post_init__(self):
        n = len(self.centers)
        if n < 1:
            raise InvalidInputError("cloud must hold at least one Gaussian")
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n)
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
            self.id_counter = n

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.logit_opacities)

    @property
    def unit_quats(self) -> np.ndarray:
        return normalize_quaternions(self.quats)

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_rotmat(self.unit_quats)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.scales, self.unit_quats)

    def renormalize_quaternions(self) -> None:
        self.quats = normalize_quaternions(self.quats)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            centers=self.centers.copy(), log_scales=self.log_scales.copy(),
            quats=self.quats.copy(), colors=self.colors.copy(),
            logit_opacities=self.logit_opacities.copy(),
            grad_accum=self.grad_accum.copy(), grad_count=self.grad_count.copy(),
            ids=self.ids.copy(), id_counter=self.id_counter)

    def keep(self, mask: np.ndarray) -> None:
        """Drop Gaussians where mask is False (in place)."""
        if not np.any(mask):
            raise InvalidInputError("refusing to drop every Gaussian")
        for name in self.PARAM_GROUPS:
            setattr(self, name, getattr(self, name)[mask])
        self.grad_accum = self.grad_accum[mask]
        self.grad_count = self.grad_count[mask]
        self.ids = self.ids[mask]

    def append(self, centers, log_scales, quats, colors, logit_opacities) -> np.ndarray:
        """Add Gaussians, assigning fresh ids. Returns the new ids."""
        m = len(centers)
        new_ids = np.arange(self.id_counter, self.id_counter + m, dtype=np.int64)
        self.id_counter += m
        self.centers = np.concatenate([self.centers, centers])
        self.log_scales = np.concatenate([self.log_scales, log_scales])
        self.quats = np.concatenate([self.quats, quats])
        self.colors = np.concatenate([self.colors, colors])
        self.logit_opacities = np.concatenate([self.logit_opacities, logit_opacities])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(m)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(m)])
        self.ids = np.concatenate([self.ids, new_ids])
        return new_ids

    def reset_grad_stats(self) -> None:
        self.grad_accum = np.zeros(len(self))
        self.grad_count = np.zeros(len(self))

    def accumulate_screen_grads(self, norms: np.ndarray, observed: np.ndarray) -> None:
        """Add per-view screen-space gradient norms and bump observation counts."""
        self.grad_accum = self.grad_accum + norms
        self.grad_count = self.grad_count + observed.astype(float)

    def mean_screen_grad(self) -> np.ndarray:
        return self.grad_accum / np.maximum(self.grad_count, 1.0)


def init_cloud(n: int, extent: float, seed: int) -> GaussianCloud:
    """Random cloud inside the sphere of radius `extent`.

    Centers are uniform in the ball; every Gaussian starts isotropic with
    scale equal to the mean nearest-neighbor distance of the sampled centers
    (clamped to [1e-4, 0.1] * extent), identity rotation, uniform random
    color and opacity 0.1. Deterministic for a given seed.
    """
    if n < 1:
        raise InvalidInputError("need at least one Gaussian")
    if extent <= 0:
        raise InvalidInputError("extent must be positive")
    rng = np.random.default_rng(seed)
    # uniform in ball: direction * extent * cbrt(u)
    vec = rng.normal(size=(n, 3))
    vec /= np.maximum(np.linalg.norm(vec, axis=1, keepdims=True), 1e-12)
    radii = extent * np.cbrt(rng.uniform(size=(n, 1)))
    centers = vec * radii

    if n >= 2:
        tree = cKDTree(centers)
        dists, _ = tree.query(centers, k=2)
        mean_nn = float(np.mean(dists[:, 1]))
    else:
        mean_nn = 0.1 * extent
    scale = float(np.clip(mean_nn, 1e-4 * extent, 0.1 * extent))

    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    colors = rng.uniform(size=(n, 3))
    opac = np.full(n, logit(0.1))
    return GaussianCloud(
        centers=centers,
        log_scales=np.full((n, 3), math.log(scale)),
        quats=quats,
        colors=colors,
        logit_opacities=opac,
    )
