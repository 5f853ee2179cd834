"""Surface-alignment losses and the homoscedastic uncertainty combiner.

Both geometric losses use the eigenstructure of the splat covariance
analytically: for Sigma = R diag(s)^2 R^T the eigenvalues are s_k^2 and the
eigenvectors are the columns of R, so no numeric eigensolver (or its
gradient) is ever needed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import GaussianCloud, InvalidInputError, quat_to_rotmat, rotmat_grad_wrt_quat
from .surface import SurfaceCloud

LAMBDA_FLOOR = 1e-7
DEFAULT_CANDIDATES = 16
DEFAULT_SAMPLE_BUDGET = 16384


@dataclass
class LossWeights:
    """Learnable log-variances eta_k = log w_k^2 for (sds, flatten, proximity)."""
    eta: np.ndarray = None

    def __post_init__(self):
        if self.eta is None:
            self.eta = np.zeros(3)
        self.eta = np.asarray(self.eta, dtype=float).reshape(3)

    @property
    def weights(self) -> np.ndarray:
        """w_k = exp(eta_k / 2), always positive."""
        return np.exp(0.5 * self.eta)

    def copy(self) -> "LossWeights":
        return LossWeights(eta=self.eta.copy())


@dataclass
class PairedSurfaceSample:
    point: np.ndarray      # surface point x
    gaussian: int          # index of the argmax-influence Gaussian
    influence: float


@dataclass
class RegularizerGrads:
    d_centers: np.ndarray
    d_log_scales: np.ndarray | None = None
    d_quats: np.ndarray | None = None


def _influence_scores(points: np.ndarray, cloud: GaussianCloud,
                      cand: np.ndarray) -> np.ndarray:
    """Eq.-style influence of each candidate Gaussian at each point.

    points (M, 3), cand (M, K) -> scores (M, K):
    sigma_g * exp(-1/2 (x - mu)^T Sigma^-1 (x - mu)) via the analytic
    eigendecomposition.
    """
    mu = cloud.centers[cand]                      # (M, K, 3)
    R3 = quat_to_rotmat(cloud.unit_quats[cand])   # (M, K, 3, 3)
    s = cloud.scales[cand]                        # (M, K, 3)
    diff = points[:, None, :] - mu
    local = np.einsum("mkij,mkj->mki", np.swapaxes(R3, -1, -2), diff)  # R^T diff
    qf = np.sum((local / s) ** 2, axis=-1)
    return cloud.opacities[cand] * np.exp(-0.5 * qf)


def _argmax_lowest_id(scores: np.ndarray, cand: np.ndarray,
                      ids: np.ndarray) -> np.ndarray:
    """Row-wise argmax of scores; exact ties resolved by lowest Gaussian id."""
    best = scores.max(axis=1, keepdims=True)
    tie_ids = np.where(scores == best, ids[cand], np.iinfo(np.int64).max)
    pick = np.argmin(tie_ids, axis=1)
    return cand[np.arange(len(cand)), pick]


def match_influential_gaussian(x: np.ndarray, cloud: GaussianCloud,
                               candidates: np.ndarray) -> PairedSurfaceSample:
    """Most influential Gaussian for a surface point among the candidates."""
    if len(cloud) == 0:
        raise InvalidInputError("empty cloud")
    candidates = np.asarray(candidates, dtype=np.int64).reshape(1, -1)
    if candidates.shape[1] == 0:
        raise InvalidInputError("candidate set is empty")
    x = np.asarray(x, dtype=float).reshape(1, 3)
    scores = _influence_scores(x, cloud, candidates)
    g = int(_argmax_lowest_id(scores, candidates, cloud.ids)[0])
    pos = int(np.flatnonzero(candidates[0] == g)[0])
    return PairedSurfaceSample(point=x[0], gaussian=g, influence=float(scores[0, pos]))


def match_surface_points(points: np.ndarray, cloud: GaussianCloud,
                         k: int = DEFAULT_CANDIDATES) -> np.ndarray:
    """Argmax-influence Gaussian index per point, candidates = k nearest centers."""
    k = min(k, len(cloud))
    tree = cKDTree(cloud.centers)
    _, cand = tree.query(points, k=k)
    cand = cand.reshape(len(points), k)
    scores = _influence_scores(points, cloud, cand)
    return _argmax_lowest_id(scores, cand, cloud.ids)


def _sample_indices(n_total: int, budget: int, rng: np.random.Generator | None):
    if n_total <= budget:
        return np.arange(n_total)
    if rng is None:
        # deterministic even-stride subset when no rng is supplied
        return np.linspace(0, n_total - 1, budget).astype(np.int64)
    return rng.choice(n_total, size=budget, replace=False)


def flatten_loss(cloud: GaussianCloud, surface: SurfaceCloud,
                 sample_budget: int = DEFAULT_SAMPLE_BUDGET,
                 rng: np.random.Generator | None = None,
                 candidates_k: int = DEFAULT_CANDIDATES):
    """Flatness penalty: squared offset of each surface sample along its
    matched Gaussian's thinnest axis, scaled by 1/lambda_min.

    Returns (loss, RegularizerGrads, warn_empty). The per-sample term is
    (1/lambda) ((x - mu)^T v)^2 with lambda = max(s_min^2, LAMBDA_FLOOR) and
    v the rotation column of the smallest scale; gradients are exact in
    centers, log scales and quaternions (argmax matches and the axis choice
    are piecewise constant).
    """
    n = len(cloud)
    zeros = RegularizerGrads(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)))
    if len(surface) == 0:
        return 0.0, zeros, True

    sel = _sample_indices(len(surface), sample_budget, rng)
    pts = surface.points[sel]
    g = match_surface_points(pts, cloud, candidates_k)
    m = len(pts)

    s = cloud.scales[g]                      # (m, 3)
    k_min = np.argmin(s, axis=1)
    s_min = s[np.arange(m), k_min]
    lam = np.maximum(s_min**2, LAMBDA_FLOOR)
    clamped = s_min**2 < LAMBDA_FLOOR

    q_unit = cloud.unit_quats[g]
    R3 = quat_to_rotmat(q_unit)
    v = R3[np.arange(m), :, k_min]           # (m, 3) column k_min of R
    diff = pts - cloud.centers[g]
    proj = np.sum(diff * v, axis=1)
    terms = proj**2 / lam
    loss = float(terms.mean())

    inv_m = 1.0 / m
    coef = 2.0 * proj / lam * inv_m          # d(term)/d(proj) / m
    d_mu_s = -coef[:, None] * v              # per-sample center gradient
    d_v_s = coef[:, None] * diff             # per-sample gradient w.r.t. v
    d_logs_min = np.where(clamped, 0.0, -2.0 * terms * inv_m)

    # v = R(q_hat) e_k: chain through dR/dq_hat, then the normalization
    D4 = rotmat_grad_wrt_quat(q_unit)        # (m, 4, 3, 3)
    dv_dqhat = D4[np.arange(m), :, :, k_min]  # (m, 4, 3)
    d_qhat_s = np.einsum("mki,mi->mk", dv_dqhat, d_v_s)

    d_centers = np.zeros((n, 3))
    d_log_scales = np.zeros((n, 3))
    d_qhat = np.zeros((n, 4))
    np.add.at(d_centers, g, d_mu_s)
    np.add.at(d_log_scales, (g, k_min), d_logs_min)
    np.add.at(d_qhat, g, d_qhat_s)

    q_raw = cloud.quats
    q_norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    qh = q_raw / q_norm
    d_quats = (d_qhat - qh * np.sum(qh * d_qhat, axis=1, keepdims=True)) / q_norm

    return loss, RegularizerGrads(d_centers, d_log_scales, d_quats), False


def proximity_loss(cloud: GaussianCloud, surface: SurfaceCloud, tau: float,
                   sample_budgets=(DEFAULT_SAMPLE_BUDGET, DEFAULT_SAMPLE_BUDGET),
                   rng: np.random.Generator | None = None):
    """Soft-assignment squared distance between centers and surface points.

    alpha_gi = softmax_i(-|p_i - mu_g|^2 / tau) over the sampled points,
    L_p = mean_g sum_i alpha_gi |p_i - mu_g|^2. Returns (loss,
    RegularizerGrads with d_centers only, warn_empty); the gradient is exact
    through both the weights and the distances.
    """
    if tau <= 0:
        raise InvalidInputError("temperature must be positive")
    n = len(cloud)
    zeros = RegularizerGrads(np.zeros((n, 3)))
    if len(surface) == 0:
        return 0.0, zeros, True

    g_budget, p_budget = sample_budgets
    gi = _sample_indices(n, g_budget, rng)
    pi = _sample_indices(len(surface), p_budget, rng)
    mu = cloud.centers[gi]                   # (G, 3)
    p = surface.points[pi]                   # (P, 3)

    diff = mu[:, None, :] - p[None, :, :]    # (G, P, 3)
    d2 = np.sum(diff * diff, axis=-1)
    u = -d2 / tau
    u -= u.max(axis=1, keepdims=True)
    e = np.exp(u)
    w = e / e.sum(axis=1, keepdims=True)     # alpha_gi, rows sum to 1

    term = np.sum(w * d2, axis=1)            # (G,)
    loss = float(term.mean())

    # d(term)/d(d2_k) = w_k (1 - (d2_k - term)/tau); d(d2_k)/d(mu) = 2 diff_k
    coef = w * (1.0 - (d2 - term[:, None]) / tau)
    d_mu = 2.0 * np.einsum("gp,gpi->gi", coef, diff) / len(gi)

    d_centers = np.zeros((n, 3))
    d_centers[gi] = d_mu
    return loss, RegularizerGrads(d_centers), False


@dataclass
class CombinedLoss:
    total: float
    d_eta: np.ndarray        # (3,) gradient of the total w.r.t. eta
    grad_scales: np.ndarray  # (3,) factor applied to each loss's parameter grads


def combine_losses(l_sds: float, l_s: float, l_p: float,
                   weights: LossWeights) -> CombinedLoss:
    """Uncertainty-weighted total:
    L = sum_k L_k / (2 w_k^2) + log(w_sds w_s w_p), with eta_k = log w_k^2.

    dL/deta_k = -L_k e^{-eta_k}/2 + 1/2, and each loss's parameter gradients
    scale by e^{-eta_k}/2. The stationary point is w_k^2 = L_k.
    """
    losses = np.array([l_sds, l_s, l_p], dtype=float)
    if np.any(~np.isfinite(losses)) or np.any(losses < 0):
        raise InvalidInputError("losses must be finite and non-negative")
    inv_2w2 = 0.5 * np.exp(-weights.eta)
    total = float(np.sum(losses * inv_2w2) + 0.5 * np.sum(weights.eta))
    d_eta = -losses * inv_2w2 + 0.5
    return CombinedLoss(total=total, d_eta=d_eta, grad_scales=inv_2w2)
