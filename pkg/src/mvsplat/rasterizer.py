"""Differentiable splatting: forward rendering and the exact analytic adjoint.

The rasterizer is CPU-vectorized: every Gaussian is expanded into
(gaussian, pixel) pairs over its screen-space footprint, pairs are sorted
into per-pixel depth-ordered segments, and compositing plus its backward
pass run as flat segment reductions (cumulative sums/products over the pair
stream). The depth sort is total — ascending camera z with ties broken by
persistent Gaussian id — so renders are bit-identical under any permutation
of the input cloud.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, GaussianCloud, InvalidInputError, quat_to_rotmat, rotmat_grad_wrt_quat


@dataclass
class RasterConfig:
    """Rasterization constants.

    The defaults follow standard splatting practice; gradient-check code may
    widen `radius_sigma` and drop the cutoffs so the rendered function is
    smooth at finite-difference resolution.
    """
    dilation: float = 0.3            # px^2 added to cov2d diagonal
    alpha_clamp: float = 0.999       # per-splat opacity ceiling
    alpha_cutoff: float = 1.0 / 255.0  # contributors below this are skipped
    transmittance_floor: float = 1e-4  # stop compositing when T would drop below
    radius_sigma: float = 3.0        # footprint radius in units of sqrt(lambda_max)
    depth_alpha_min: float = 0.5     # depth is valid where accumulated alpha >= this


@dataclass
class ProjectedGaussians:
    """Screen-space Gaussians surviving frustum and footprint culling.

    Struct-of-arrays: `indices` maps each entry back to its row in the cloud.
    `cov2d` and `inv_cov2d` hold the symmetric components (c11, c12, c22).
    """
    indices: np.ndarray    # (M,) int
    mean2d: np.ndarray     # (M, 2) pixel coordinates
    cov2d: np.ndarray      # (M, 3) symmetric components, dilation included
    inv_cov2d: np.ndarray  # (M, 3)
    z: np.ndarray          # (M,) camera-space depth
    radius: np.ndarray     # (M,) footprint radius in pixels

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class ParamGradients:
    """Per-Gaussian gradients in storage space (log scales, logit opacities)."""
    d_centers: np.ndarray          # (N, 3)
    d_log_scales: np.ndarray       # (N, 3)
    d_quats: np.ndarray            # (N, 4)
    d_colors: np.ndarray           # (N, 3)
    d_logit_opacities: np.ndarray  # (N,)
    screen_grad_norm: np.ndarray   # (N,) |dL/d mean2d| per Gaussian for this view
    observed: np.ndarray           # (N,) bool, had at least one surviving contributor

    @staticmethod
    def zeros(n: int) -> "ParamGradients":
        return ParamGradients(
            d_centers=np.zeros((n, 3)), d_log_scales=np.zeros((n, 3)),
            d_quats=np.zeros((n, 4)), d_colors=np.zeros((n, 3)),
            d_logit_opacities=np.zeros(n), screen_grad_norm=np.zeros(n),
            observed=np.zeros(n, dtype=bool))

    def add_(self, other: "ParamGradients") -> None:
        self.d_centers += other.d_centers
        self.d_log_scales += other.d_log_scales
        self.d_quats += other.d_quats
        self.d_colors += other.d_colors
        self.d_logit_opacities += other.d_logit_opacities
        self.screen_grad_norm += other.screen_grad_norm
        self.observed |= other.observed

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (
            self.d_centers, self.d_log_scales, self.d_quats,
            self.d_colors, self.d_logit_opacities))


@dataclass
class RenderOutput:
    """Forward result for one view plus the state the backward pass needs."""
    color: np.ndarray   # (H, W, 3) in [0, 1] range of inputs
    depth: np.ndarray   # (H, W) z-depth, 0 where alpha < depth_alpha_min
    alpha: np.ndarray   # (H, W) accumulated opacity
    background: np.ndarray
    config: RasterConfig
    # per-pixel contributor stream, depth-sorted within each pixel segment
    pair_pixel: np.ndarray = field(repr=False, default=None)   # (P,) flat pixel id
    pair_gauss: np.ndarray = field(repr=False, default=None)   # (P,) index into proj
    pair_alpha: np.ndarray = field(repr=False, default=None)   # (P,) post-clamp alpha
    pair_t_excl: np.ndarray = field(repr=False, default=None)  # (P,) transmittance before pair
    pair_alive: np.ndarray = field(repr=False, default=None)   # (P,) survived termination
    pair_clamped: np.ndarray = field(repr=False, default=None)  # (P,) alpha hit the ceiling
    t_end: np.ndarray = field(repr=False, default=None)        # (HW,) final transmittance
    proj: ProjectedGaussians = field(repr=False, default=None)  # z-sorted projection

    def contributors(self, row: int, col: int):
        """Ordered (cloud indices, blending weights) for one pixel."""
        pid = row * self.color.shape[1] + col
        lo = np.searchsorted(self.pair_pixel, pid, side="left")
        hi = np.searchsorted(self.pair_pixel, pid, side="right")
        sl = slice(lo, hi)
        alive = self.pair_alive[sl]
        w = self.pair_alpha[sl] * self.pair_t_excl[sl] * alive
        idx = self.proj.indices[self.pair_gauss[sl]]
        return idx[alive], w[alive]


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def _camera_space(cloud: GaussianCloud, camera: Camera):
    xc = cloud.centers @ camera.R.T + camera.t
    return xc


def _perspective_jacobian(xc: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Local affine Jacobian of (u, v) with respect to camera-space position."""
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    J = np.zeros((len(xc), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2
    return J


def project(cloud: GaussianCloud, camera: Camera,
            config: RasterConfig | None = None) -> ProjectedGaussians:
    """Project the cloud to screen space, culling out-of-frustum Gaussians.

    cov2d is the upper-left 2x2 of J W Sigma W^T J^T plus the diagonal
    dilation; Gaussians whose footprint misses the image are dropped.
    """
    cfg = config or RasterConfig()
    xc_all = _camera_space(cloud, camera)
    z_all = xc_all[:, 2]
    in_depth = (z_all > camera.near) & (z_all < camera.far)
    idx = np.flatnonzero(in_depth)
    if len(idx) == 0:
        return ProjectedGaussians(idx, np.zeros((0, 2)), np.zeros((0, 3)),
                                  np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    xc = xc_all[idx]
    z = xc[:, 2]
    u = camera.fx * xc[:, 0] / z + camera.cx
    v = camera.fy * xc[:, 1] / z + camera.cy

    R3 = quat_to_rotmat(cloud.unit_quats[idx])
    s2 = cloud.scales[idx] ** 2
    sigma = (R3 * s2[:, None, :]) @ np.swapaxes(R3, 1, 2)
    sigma_cam = np.einsum("ij,njk,lk->nil", camera.R, sigma, camera.R)
    J = _perspective_jacobian(xc, camera.fx, camera.fy)
    cov = np.einsum("nij,njk,nlk->nil", J, sigma_cam, J)
    c11 = cov[:, 0, 0] + cfg.dilation
    c12 = cov[:, 0, 1]
    c22 = cov[:, 1, 1] + cfg.dilation

    det = c11 * c22 - c12**2
    inv = np.stack([c22 / det, -c12 / det, c11 / det], axis=1)
    lam_max = 0.5 * (c11 + c22) + np.sqrt(0.25 * (c11 - c22) ** 2 + c12**2)
    radius = cfg.radius_sigma * np.sqrt(lam_max)

    on_screen = ((u + radius >= 0.5) & (u - radius <= camera.width - 0.5) &
                 (v + radius >= 0.5) & (v - radius <= camera.height - 0.5))
    keep = np.flatnonzero(on_screen)
    return ProjectedGaussians(
        indices=idx[keep],
        mean2d=np.stack([u, v], axis=1)[keep],
        cov2d=np.stack([c11, c12, c22], axis=1)[keep],
        inv_cov2d=inv[keep],
        z=z[keep],
        radius=radius[keep],
    )


# ---------------------------------------------------------------------------
# Forward rendering
# ---------------------------------------------------------------------------

def _expand_pairs(proj: ProjectedGaussians, cloud: GaussianCloud, camera: Camera,
                  cfg: RasterConfig):
    """Depth-ordered (gaussian, pixel) pair stream with per-pair alpha.

    Returns arrays sorted by (pixel, z, id); dead weight below the alpha
    cutoff is already removed.
    """
    W, H = camera.width, camera.height
    # canonical depth order: ascending z, ties by persistent id
    order = np.lexsort((cloud.ids[proj.indices], proj.z))
    u = proj.mean2d[order, 0]
    v = proj.mean2d[order, 1]
    r = proj.radius[order]
    inv = proj.inv_cov2d[order]
    opac = cloud.opacities[proj.indices[order]]

    x0 = np.ceil(u - r - 0.5).astype(np.int64)
    x1 = np.floor(u + r - 0.5).astype(np.int64)
    y0 = np.ceil(v - r - 0.5).astype(np.int64)
    y1 = np.floor(v + r - 0.5).astype(np.int64)
    np.clip(x0, 0, W - 1, out=x0)
    np.clip(x1, 0, W - 1, out=x1)
    np.clip(y0, 0, H - 1, out=y0)
    np.clip(y1, 0, H - 1, out=y1)
    bw = x1 - x0 + 1
    bh = y1 - y0 + 1
    counts = bw * bh
    total = int(counts.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return order, empty, empty, np.zeros(0), np.zeros(0, dtype=bool)

    offsets = np.concatenate([[0], np.cumsum(counts)])
    g = np.repeat(np.arange(len(u)), counts)           # position in z-sorted proj
    local = np.arange(total) - offsets[g]
    px = x0[g] + local % bw[g]
    py = y0[g] + local // bw[g]

    ddx = px + 0.5 - u[g]
    ddy = py + 0.5 - v[g]
    qf = inv[g, 0] * ddx**2 + 2.0 * inv[g, 1] * ddx * ddy + inv[g, 2] * ddy**2
    alpha = opac[g] * np.exp(-0.5 * qf)
    clamped = alpha > cfg.alpha_clamp
    alpha = np.where(clamped, cfg.alpha_clamp, alpha)
    keep = alpha > cfg.alpha_cutoff

    pix = (py * W + px)[keep]
    g = g[keep]
    alpha = alpha[keep]
    clamped = clamped[keep]
    # pairs were generated in depth order, so a stable sort on pixel id alone
    # yields per-pixel segments already ordered by (z, id)
    srt = np.argsort(pix, kind="stable")
    return order, pix[srt], g[srt], alpha[srt], clamped[srt]


def _segment_fields(pix: np.ndarray):
    """Segment bookkeeping over a pixel-sorted pair stream."""
    P = len(pix)
    seg_new = np.empty(P, dtype=bool)
    seg_new[0] = True
    seg_new[1:] = pix[1:] != pix[:-1]
    seg_id = np.cumsum(seg_new) - 1
    seg_start = np.flatnonzero(seg_new)
    seg_end = np.concatenate([seg_start[1:], [P]]) - 1
    return seg_id, seg_start, seg_end


def _segment_excl_cumsum(vals: np.ndarray, seg_id, seg_start):
    c = np.cumsum(vals)
    excl = c - vals
    return excl - excl[seg_start][seg_id]


def _segment_incl_cumsum(vals: np.ndarray, seg_id, seg_start):
    c = np.cumsum(vals)
    return c - (c - vals)[seg_start][seg_id]


def render(cloud: GaussianCloud, camera: Camera, background,
           config: RasterConfig | None = None) -> RenderOutput:
    """Front-to-back alpha compositing of the projected cloud.

    Per pixel: C = sum_i c_i a_i prod_{j<i}(1 - a_j) + bg * prod_j(1 - a_j),
    alpha = sum_i a_i prod_{j<i}(1 - a_j), and depth is the alpha-weighted
    mean z where alpha >= depth_alpha_min (0 elsewhere).
    """
    cfg = config or RasterConfig()
    bg = np.asarray(background, dtype=float).reshape(3)
    W, H = camera.width, camera.height
    HW = H * W

    proj_raw = project(cloud, camera, cfg)
    out_color = np.tile(bg, (H, W, 1))
    out = RenderOutput(color=out_color, depth=np.zeros((H, W)),
                       alpha=np.zeros((H, W)), background=bg, config=cfg)
    if len(proj_raw) == 0:
        out.pair_pixel = np.zeros(0, dtype=np.int64)
        out.pair_gauss = np.zeros(0, dtype=np.int64)
        out.pair_alpha = np.zeros(0)
        out.pair_t_excl = np.zeros(0)
        out.pair_alive = np.zeros(0, dtype=bool)
        out.pair_clamped = np.zeros(0, dtype=bool)
        out.t_end = np.ones(HW)
        out.proj = proj_raw
        return out

    order, pix, g, alpha, clamped = _expand_pairs(proj_raw, cloud, camera, cfg)
    proj = ProjectedGaussians(
        indices=proj_raw.indices[order], mean2d=proj_raw.mean2d[order],
        cov2d=proj_raw.cov2d[order], inv_cov2d=proj_raw.inv_cov2d[order],
        z=proj_raw.z[order], radius=proj_raw.radius[order])

    if len(pix) == 0:
        out.pair_pixel = pix
        out.pair_gauss = g
        out.pair_alpha = alpha
        out.pair_t_excl = np.zeros(0)
        out.pair_alive = np.zeros(0, dtype=bool)
        out.pair_clamped = clamped
        out.t_end = np.ones(HW)
        out.proj = proj
        return out

    seg_id, seg_start, seg_end = _segment_fields(pix)
    log1m = np.log1p(-alpha)
    log_t_excl = _segment_excl_cumsum(log1m, seg_id, seg_start)
    t_excl = np.exp(log_t_excl)
    t_incl = t_excl * (1.0 - alpha)
    # the contributor that would drop T below the floor terminates its pixel
    stop = t_incl < cfg.transmittance_floor
    stops_before = _segment_excl_cumsum(stop.astype(np.int64), seg_id, seg_start)
    alive = (stops_before == 0) & ~stop

    w = alpha * t_excl * alive
    zg = proj.z[g]
    colors = cloud.colors[proj.indices[g]]

    A = np.bincount(pix, weights=w, minlength=HW)
    log_t_end = np.bincount(pix, weights=log1m * alive, minlength=HW)
    t_end = np.exp(log_t_end)
    C = np.stack([np.bincount(pix, weights=w * colors[:, k], minlength=HW)
                  for k in range(3)], axis=1)
    Sz = np.bincount(pix, weights=w * zg, minlength=HW)

    color = C + t_end[:, None] * bg[None, :]
    valid = A >= cfg.depth_alpha_min
    depth = np.where(valid, Sz / np.where(valid, A, 1.0), 0.0)

    out.color = color.reshape(H, W, 3)
    out.depth = depth.reshape(H, W)
    out.alpha = A.reshape(H, W)
    out.pair_pixel = pix
    out.pair_gauss = g
    out.pair_alpha = alpha
    out.pair_t_excl = t_excl
    out.pair_alive = alive
    out.pair_clamped = clamped
    out.t_end = t_end
    out.proj = proj
    return out


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def render_backward(cloud: GaussianCloud, camera: Camera, output: RenderOutput,
                    dL_dcolor: np.ndarray, dL_ddepth: np.ndarray | None = None
                    ) -> ParamGradients:
    """Exact adjoint of `render` with respect to every cloud parameter.

    `output` must come from `render` on this exact cloud and camera.
    Gradients are reported in storage space (log scale, logit opacity,
    unnormalized quaternion) and include the per-Gaussian screen-space
    positional gradient norms used by densification.
    """
    H, W = output.color.shape[:2]
    if dL_dcolor.shape != (H, W, 3):
        raise InvalidInputError(f"dL_dcolor shape {dL_dcolor.shape} != {(H, W, 3)}")
    if dL_ddepth is not None and dL_ddepth.shape != (H, W):
        raise InvalidInputError(f"dL_ddepth shape {dL_ddepth.shape} != {(H, W)}")
    if camera.width != W or camera.height != H:
        raise InvalidInputError("camera does not match render output")

    n = len(cloud)
    grads = ParamGradients.zeros(n)
    proj = output.proj
    if proj is None or len(proj) == 0 or len(output.pair_pixel) == 0:
        return grads
    cfg = output.config
    HW = H * W

    pix = output.pair_pixel
    g = output.pair_gauss
    alpha = output.pair_alpha
    t_excl = output.pair_t_excl
    alive = output.pair_alive
    clamped = output.pair_clamped
    M = len(proj)

    cloud_idx = proj.indices
    zs = proj.z
    cols = cloud.colors[cloud_idx]
    opac = cloud.opacities[cloud_idx]

    dC = dL_dcolor.reshape(HW, 3)
    dD = None if dL_ddepth is None else dL_ddepth.reshape(HW)

    seg_id, seg_start, seg_end = _segment_fields(pix)
    w = alpha * t_excl * alive
    one_minus = 1.0 - alpha

    A_px = output.alpha.reshape(HW)
    t_end_px = output.t_end
    depth_px = output.depth.reshape(HW)
    valid_px = A_px >= cfg.depth_alpha_min

    def suffix(vals):
        incl = _segment_incl_cumsum(vals, seg_id, seg_start)
        total = incl[seg_end][seg_id]
        return total - incl

    zg = zs[g]
    cg = cols[g]
    bg = output.background

    # d(pixel outputs)/d(alpha_i) via per-segment suffix sums
    SA = suffix(w)
    SZ = suffix(w * zg)
    dc_pix = dC[pix]
    g_alpha = np.zeros(len(pix))
    for k in range(3):
        SCk = suffix(w * cg[:, k])
        dCk_dalpha = cg[:, k] * t_excl - (SCk + bg[k] * t_end_px[pix]) / one_minus
        g_alpha += dc_pix[:, k] * dCk_dalpha
    g_color_pair = dc_pix * w[:, None]

    g_z_pair = np.zeros(len(pix))
    if dD is not None:
        dd_pix = dD[pix]
        vmask = valid_px[pix]
        A_safe = np.where(vmask, A_px[pix], 1.0)
        dA_dalpha = t_excl - SA / one_minus
        dSz_dalpha = zg * t_excl - SZ / one_minus
        dDp = np.where(vmask, (dSz_dalpha - depth_px[pix] * dA_dalpha) / A_safe, 0.0)
        g_alpha += dd_pix * dDp
        g_z_pair = dd_pix * np.where(vmask, w / A_safe, 0.0)

    g_alpha *= alive & ~clamped

    # alpha = opacity * exp(-q/2): chain into opacity, mean2d and inv-cov
    G_exp = alpha / opac[g]
    g_sigma_pair = g_alpha * G_exp
    g_quadform = -0.5 * g_alpha * alpha

    u = proj.mean2d[g, 0]
    v = proj.mean2d[g, 1]
    ddx = (pix % W) + 0.5 - u
    ddy = (pix // W) + 0.5 - v
    m11 = proj.inv_cov2d[g, 0]
    m12 = proj.inv_cov2d[g, 1]
    m22 = proj.inv_cov2d[g, 2]
    Md1 = m11 * ddx + m12 * ddy
    Md2 = m12 * ddx + m22 * ddy
    g_mu_u = -2.0 * g_quadform * Md1
    g_mu_v = -2.0 * g_quadform * Md2
    g_m11 = g_quadform * ddx**2
    g_m12 = 2.0 * g_quadform * ddx * ddy
    g_m22 = g_quadform * ddy**2

    def reduce_pair(vals):
        return np.bincount(g, weights=vals, minlength=M)

    Gmu = np.stack([reduce_pair(g_mu_u), reduce_pair(g_mu_v)], axis=1)
    Gm = np.stack([reduce_pair(g_m11), reduce_pair(g_m12), reduce_pair(g_m22)], axis=1)
    Gc = np.stack([reduce_pair(g_color_pair[:, k]) for k in range(3)], axis=1)
    Gz = reduce_pair(g_z_pair * alive)
    Gsig = reduce_pair(g_sigma_pair)
    pair_counts = np.bincount(g, minlength=M)

    # --- chain per projected Gaussian back to 3D parameters -----------------
    xc = (cloud.centers[cloud_idx] @ camera.R.T + camera.t)
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    fx, fy = camera.fx, camera.fy

    # inv(cov2d) -> cov2d (full-matrix Frobenius convention)
    GM_full = np.empty((M, 2, 2))
    GM_full[:, 0, 0] = Gm[:, 0]
    GM_full[:, 0, 1] = GM_full[:, 1, 0] = 0.5 * Gm[:, 1]
    GM_full[:, 1, 1] = Gm[:, 2]
    Minv = np.empty((M, 2, 2))
    Minv[:, 0, 0] = proj.inv_cov2d[:, 0]
    Minv[:, 0, 1] = Minv[:, 1, 0] = proj.inv_cov2d[:, 1]
    Minv[:, 1, 1] = proj.inv_cov2d[:, 2]
    Gcov = -Minv @ GM_full @ Minv

    # cov2d = V Sigma V^T + dilation, V = J R_cam
    J = _perspective_jacobian(xc, fx, fy)
    V = J @ camera.R
    q_unit = cloud.unit_quats[cloud_idx]
    R3 = quat_to_rotmat(q_unit)
    s = cloud.scales[cloud_idx]
    sigma3 = (R3 * (s**2)[:, None, :]) @ np.swapaxes(R3, 1, 2)

    P3 = np.einsum("nij,nik,nkl->njl", V, Gcov, V)            # V^T Gcov V
    GV = 2.0 * np.einsum("nij,njk,nkl->nil", Gcov, V, sigma3)  # 2 Gcov V Sigma
    GJ = GV @ camera.R.T

    g_xcam = np.einsum("nij,ni->nj", J, Gmu)
    g_xcam[:, 2] += Gz
    inv_z2 = 1.0 / z**2
    g_xcam[:, 0] += GJ[:, 0, 2] * (-fx * inv_z2)
    g_xcam[:, 1] += GJ[:, 1, 2] * (-fy * inv_z2)
    g_xcam[:, 2] += (GJ[:, 0, 0] * (-fx * inv_z2) + GJ[:, 1, 1] * (-fy * inv_z2)
                     + GJ[:, 0, 2] * (2.0 * fx * x / z**3)
                     + GJ[:, 1, 2] * (2.0 * fy * y / z**3))
    g_centers = g_xcam @ camera.R

    # Sigma = R diag(s^2) R^T
    Ps = 0.5 * (P3 + np.swapaxes(P3, 1, 2))
    GR = 2.0 * (Ps @ R3) * (s**2)[:, None, :]
    diagB = np.einsum("nik,nij,njk->nk", R3, Ps, R3)
    g_log_scales = 2.0 * s**2 * diagB

    D4 = rotmat_grad_wrt_quat(q_unit)
    g_qhat = np.einsum("nij,nkij->nk", GR, D4)
    q_raw = cloud.quats[cloud_idx]
    q_norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    g_quats = (g_qhat - q_unit * np.sum(q_unit * g_qhat, axis=1, keepdims=True)) / q_norm

    sig = opac
    g_logit = Gsig * sig * (1.0 - sig)

    grads.d_centers[cloud_idx] = g_centers
    grads.d_log_scales[cloud_idx] = g_log_scales
    grads.d_quats[cloud_idx] = g_quats
    grads.d_colors[cloud_idx] = Gc
    grads.d_logit_opacities[cloud_idx] = g_logit
    grads.screen_grad_norm[cloud_idx] = np.hypot(Gmu[:, 0], Gmu[:, 1])
    grads.observed[cloud_idx] = pair_counts > 0
    return grads
