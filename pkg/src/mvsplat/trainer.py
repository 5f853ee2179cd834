"""End-to-end optimization loop: camera sampling, guidance, loss assembly,
optimizer stepping and schedule dispatch.

The guidance contract is a narrow interface (views in, scalar loss plus
per-pixel image-space color gradients out); the built-in photometric oracle
and the remote wire-protocol client both implement it, and the trainer
never looks behind it.
"""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import Camera, GaussianCloud, InvalidInputError, SceneConfig
from .densify import DensifySchedule, MutationReport, RowStateMixin, densify_and_prune, reset_opacity
from .rasterizer import ParamGradients, RasterConfig, RenderOutput, render, render_backward
from .regularizers import LossWeights, combine_losses, flatten_loss, proximity_loss
from .scenes import SceneSpec, render_target
from .surface import SurfaceCloud, build_surface

log = logging.getLogger(__name__)

ETA_CLAMP = 12.0  # |eta| bound; guards the 1/(2 w^2) factor against blow-up


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class LRRange:
    init: float
    final: float

    def value(self, step: int, total_steps: int) -> float:
        """Log-linear interpolation; value(0) = init, value(total) = final."""
        if self.init <= 0.0:
            return 0.0
        frac = min(max(step / total_steps, 0.0), 1.0)
        return self.init * (self.final / self.init) ** frac


DEFAULT_LR = {
    "centers": LRRange(1.6e-4, 1.6e-6),
    "colors": LRRange(3e-3, 2.5e-3),
    "logit_opacities": LRRange(0.1, 0.05),
    "log_scales": LRRange(5e-3, 1e-3),
    "quats": LRRange(1e-3, 2e-4),
}
ETA_LR = 1e-3


class OptimizerState(RowStateMixin):
    """Adam moments for every cloud parameter group plus the loss weights.

    betas = (0.9, 0.999), eps = 1e-15; rows track the cloud through
    densification surgery (new rows zero, pruned rows dropped).
    """

    CLOUD_GROUPS = GaussianCloud.PARAM_GROUPS

    def __init__(self, cloud: GaussianCloud, betas=(0.9, 0.999), eps: float = 1e-15):
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}
        for name in self.CLOUD_GROUPS:
            shape = getattr(cloud, name).shape
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
        self.m["eta"] = np.zeros(3)
        self.v["eta"] = np.zeros(3)

    def _update(self, name: str, grad: np.ndarray, lr: float) -> np.ndarray:
        b1, b2 = self.betas
        self.m[name] = b1 * self.m[name] + (1 - b1) * grad
        self.v[name] = b2 * self.v[name] + (1 - b2) * grad * grad
        mhat = self.m[name] / (1 - b1**self.t)
        vhat = self.v[name] / (1 - b2**self.t)
        return lr * mhat / (np.sqrt(vhat) + self.eps)

    def step(self, cloud: GaussianCloud, grads: ParamGradients,
             weights: LossWeights, d_eta: np.ndarray, lrs: dict, eta_lr: float) -> None:
        self.t += 1
        cloud.centers = cloud.centers - self._update("centers", grads.d_centers, lrs["centers"])
        cloud.log_scales = cloud.log_scales - self._update("log_scales", grads.d_log_scales, lrs["log_scales"])
        cloud.quats = cloud.quats - self._update("quats", grads.d_quats, lrs["quats"])
        cloud.colors = cloud.colors - self._update("colors", grads.d_colors, lrs["colors"])
        cloud.logit_opacities = cloud.logit_opacities - self._update(
            "logit_opacities", grads.d_logit_opacities, lrs["logit_opacities"])
        weights.eta = weights.eta - self._update("eta", d_eta, eta_lr)

    def keep_rows(self, mask: np.ndarray) -> None:
        for name in self.CLOUD_GROUPS:
            self.m[name] = self.m[name][mask]
            self.v[name] = self.v[name][mask]

    def append_rows(self, count: int) -> None:
        for name in self.CLOUD_GROUPS:
            pad = np.zeros((count,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad])


# ---------------------------------------------------------------------------
# Guidance contract
# ---------------------------------------------------------------------------

@dataclass
class ViewRecord:
    """One rendered view handed to guidance."""
    image: np.ndarray        # (H, W, 3)
    camera: Camera
    azimuth_deg: float
    elevation_deg: float
    background: np.ndarray   # (3,)


@dataclass
class GuidanceContext:
    prompt: str = ""
    negative_prompt: str = ""
    guidance_scale: float = 50.0
    t_range: tuple = (0.02, 0.98)
    seed: int = 0


class GuidanceInterface:
    """evaluate(views, context) -> (loss >= 0, [dL/dcolor per view])."""

    def evaluate(self, views: list[ViewRecord], context: GuidanceContext):
        raise NotImplementedError

    def close(self) -> None:
        pass


class PhotometricGuidance(GuidanceInterface):
    """Desk-scale stand-in: mean squared color error against ray-traced
    targets of an analytic scene, rendered for the exact requested cameras.
    """

    def __init__(self, spec: SceneSpec, supersample: int = 2):
        self.spec = spec
        self.supersample = supersample

    def target(self, camera: Camera, background) -> np.ndarray:
        return render_target(camera, background, self.spec, self.supersample)

    def evaluate(self, views: list[ViewRecord], context: GuidanceContext):
        total = 0.0
        grads = []
        count = sum(v.image.size for v in views)
        for v in views:
            tgt = self.target(v.camera, v.background)
            diff = v.image - tgt
            total += float(np.sum(diff * diff))
            grads.append(2.0 * diff / count)
        return total / count, grads


class CallableGuidance(GuidanceInterface):
    """Adapter wrapping a plain function, handy for tests and mocks."""

    def __init__(self, fn):
        self.fn = fn

    def evaluate(self, views, context):
        return self.fn(views, context)


# ---------------------------------------------------------------------------
# Camera sampling
# ---------------------------------------------------------------------------

def _sample_poses(scene: SceneConfig, rng: np.random.Generator):
    """Four orbit poses 90 degrees apart at one random azimuth/elevation."""
    phi = float(rng.uniform(0.0, 360.0))
    lo, hi = scene.elevation_range_deg
    elev = float(rng.uniform(lo, hi))
    poses = []
    for k in range(4):
        az = (phi + 90.0 * k) % 360.0
        r = scene.camera_radius
        az_r, el_r = math.radians(az), math.radians(elev)
        pos = (r * math.cos(el_r) * math.cos(az_r),
               r * math.cos(el_r) * math.sin(az_r),
               r * math.sin(el_r))
        cam = Camera.look_at(pos, (0, 0, 0), width=scene.render_width,
                             height=scene.render_height, fov_deg=scene.fov_deg,
                             near=scene.near, far=scene.far)
        poses.append((cam, az, elev))
    return poses


def sample_cameras(step: int, scene: SceneConfig, rng: np.random.Generator) -> list[Camera]:
    """The four training cameras for one step."""
    return [cam for cam, _, _ in _sample_poses(scene, rng)]


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class RegularizerSettings:
    flatten: bool = True
    proximity: bool = True
    flatten_budget: int = 16384
    proximity_gaussian_budget: int = 16384
    proximity_point_budget: int = 16384
    candidates_k: int = 16
    tau: float | None = None   # None -> (0.05 * scene_extent)^2
    start_step: int = 0        # alignment losses stay off before this step

    def resolved_tau(self, extent: float) -> float:
        return self.tau if self.tau is not None else (0.05 * extent) ** 2


@dataclass
class TrainSettings:
    total_steps: int = 10000
    surface_refresh_interval: int = 100
    surface_views: int = 8
    surface_voxel_size: float | None = None
    surface_density_min_neighbors: int = 4
    surface_density_radius: float | None = None
    eta_lr: float = ETA_LR
    guidance_timeout: float = 120.0
    lr: dict = field(default_factory=lambda: {k: LRRange(v.init, v.final)
                                              for k, v in DEFAULT_LR.items()})


@dataclass
class StepReport:
    step: int
    l_sds: float = 0.0
    l_s: float = 0.0
    l_p: float = 0.0
    l_total: float = 0.0
    weights: tuple = (1.0, 1.0, 1.0)
    n_gaussians: int = 0
    grad_norm: float = 0.0
    duration: float = 0.0
    aborted: bool = False
    diagnostics: str = ""
    densify: MutationReport | None = None
    opacity_reset: bool = False

    def record(self, include_timing: bool = True) -> dict:
        rec = {
            "step": self.step, "l_sds": self.l_sds, "l_s": self.l_s,
            "l_p": self.l_p, "l_total": self.l_total,
            "w_sds": self.weights[0], "w_s": self.weights[1], "w_p": self.weights[2],
            "n": self.n_gaussians, "grad_norm": self.grad_norm,
            "aborted": self.aborted,
        }
        if include_timing:
            # wall-clock timing is inherently run-dependent; deterministic-mode
            # metrics omit it so bit-identical runs write bit-identical files
            rec["duration"] = round(self.duration, 6)
        if self.densify is not None and not self.densify.skipped:
            rec["densify"] = {
                "cloned": self.densify.cloned, "split": self.densify.split,
                "opacity_pruned": self.densify.opacity_pruned,
                "surface_pruned": self.densify.surface_pruned,
            }
        if self.opacity_reset:
            rec["opacity_reset"] = True
        return rec


def _thread_count() -> int:
    raw = os.environ.get("MVGS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


class Trainer:
    """Owns the cloud, optimizer, loss weights and surface cache, and runs
    the per-step pipeline: render 4 views -> guidance -> regularizers ->
    uncertainty-weighted backward -> Adam step -> schedule events.
    """

    def __init__(self, cloud: GaussianCloud, scene: SceneConfig,
                 schedule: DensifySchedule, guidance: GuidanceInterface,
                 regularizers: RegularizerSettings | None = None,
                 settings: TrainSettings | None = None,
                 context: GuidanceContext | None = None,
                 raster_config: RasterConfig | None = None,
                 seed: int = 0):
        self.cloud = cloud
        self.scene = scene
        self.schedule = schedule
        self.guidance = guidance
        self.reg = regularizers or RegularizerSettings()
        self.settings = settings or TrainSettings()
        self.context = context or GuidanceContext()
        self.raster_config = raster_config or RasterConfig()
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.weights = LossWeights()
        self.opt = OptimizerState(cloud)
        self.surface: SurfaceCloud | None = None
        self.step_count = 0
        self.threads = _thread_count()

    # -- helpers -----------------------------------------------------------

    def _map_views(self, fn, items):
        if self.threads <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    def _current_lrs(self, step: int) -> dict:
        return {name: rng.value(step, self.settings.total_steps)
                for name, rng in self.settings.lr.items()}

    def _refresh_surface(self, step: int, train_cams: list[Camera]) -> None:
        child = np.random.default_rng((self.seed, step))
        self.surface = build_surface(
            self.cloud, self.settings.surface_views, self.scene,
            voxel_size=self.settings.surface_voxel_size,
            density_min_neighbors=self.settings.surface_density_min_neighbors,
            density_radius=self.settings.surface_density_radius,
            rng=child, extra_cameras=train_cams,
            raster_config=self.raster_config, step=step)

    def _surface_due(self, step: int) -> bool:
        return step % self.settings.surface_refresh_interval == 0

    # -- the step ----------------------------------------------------------

    def train_step(self, step: int) -> StepReport:
        t0 = time.perf_counter()
        report = StepReport(step=step, n_gaussians=len(self.cloud))
        poses = _sample_poses(self.scene, self.rng)
        if self.scene.background_mode == "random":
            bg = self.rng.uniform(size=3)
        else:
            bg = np.asarray(self.scene.background, dtype=float)
        guidance_seed = int(self.rng.integers(0, 2**63 - 1))

        cams = [p[0] for p in poses]
        outputs: list[RenderOutput] = self._map_views(
            lambda cam: render(self.cloud, cam, bg, self.raster_config), cams)
        views = [ViewRecord(image=o.color, camera=c, azimuth_deg=az,
                            elevation_deg=el, background=bg)
                 for o, (c, az, el) in zip(outputs, poses)]

        ctx = GuidanceContext(
            prompt=self.context.prompt, negative_prompt=self.context.negative_prompt,
            guidance_scale=self.context.guidance_scale, t_range=self.context.t_range,
            seed=guidance_seed)
        l_sds, color_grads = self.guidance.evaluate(views, ctx)
        if len(color_grads) != len(views) or any(
                g.shape != v.image.shape for g, v in zip(color_grads, views)):
            raise InvalidInputError("guidance returned mismatched gradient shapes")
        if (not np.isfinite(l_sds) or l_sds < 0
                or any(not np.all(np.isfinite(g)) for g in color_grads)):
            report.aborted = True
            report.diagnostics = "non-finite or negative guidance result; step skipped"
            log.error("step %d aborted: %s", step, report.diagnostics)
            report.duration = time.perf_counter() - t0
            return report

        if self._surface_due(step):
            self._refresh_surface(step, cams)

        n = len(self.cloud)
        l_s, l_p = 0.0, 0.0
        flat_grads = prox_grads = None
        have_surface = self.surface is not None and len(self.surface) > 0
        regs_active = have_surface and step >= self.reg.start_step
        if regs_active and self.reg.flatten:
            l_s, flat_grads, _ = flatten_loss(
                self.cloud, self.surface, self.reg.flatten_budget,
                rng=self.rng, candidates_k=self.reg.candidates_k)
        if regs_active and self.reg.proximity:
            l_p, prox_grads, _ = proximity_loss(
                self.cloud, self.surface, self.reg.resolved_tau(self.scene.scene_extent),
                sample_budgets=(self.reg.proximity_gaussian_budget,
                                self.reg.proximity_point_budget),
                rng=self.rng)

        combined = combine_losses(l_sds, l_s, l_p, self.weights)
        s_sds, s_s, s_p = combined.grad_scales

        total = ParamGradients.zeros(n)
        scaled = [g * s_sds for g in color_grads]
        results = self._map_views(
            lambda pair: render_backward(self.cloud, pair[0], pair[1], pair[2]),
            [(cam, out, g) for cam, out, g in zip(cams, outputs, scaled)])
        for pg in results:
            total.add_(pg)

        if flat_grads is not None:
            total.d_centers += s_s * flat_grads.d_centers
            total.d_log_scales += s_s * flat_grads.d_log_scales
            total.d_quats += s_s * flat_grads.d_quats
        if prox_grads is not None:
            total.d_centers += s_p * prox_grads.d_centers

        finite = (total.all_finite() and np.all(np.isfinite(combined.d_eta))
                  and np.isfinite(combined.total))
        if not finite:
            report.aborted = True
            report.diagnostics = "non-finite loss or gradient; step skipped"
            log.error("step %d aborted: %s", step, report.diagnostics)
            report.duration = time.perf_counter() - t0
            return report

        self.cloud.accumulate_screen_grads(total.screen_grad_norm, total.observed)
        self.opt.step(self.cloud, total, self.weights, combined.d_eta,
                      self._current_lrs(step), self.settings.eta_lr)
        self.cloud.renormalize_quaternions()
        np.clip(self.cloud.colors, 0.0, 1.0, out=self.cloud.colors)
        np.clip(self.weights.eta, -ETA_CLAMP, ETA_CLAMP, out=self.weights.eta)

        if self.schedule.densify_due(step):
            report.densify = densify_and_prune(
                self.cloud, self.surface if have_surface else None,
                self.schedule, step, self.rng, row_state=self.opt)
        if self.schedule.reset_due(step):
            reset_opacity(self.cloud, self.schedule.opacity_reset_cap)
            report.opacity_reset = True

        w = self.weights.weights
        report.l_sds, report.l_s, report.l_p = l_sds, l_s, l_p
        report.l_total = combined.total
        report.weights = (float(w[0]), float(w[1]), float(w[2]))
        report.n_gaussians = len(self.cloud)
        report.grad_norm = float(np.linalg.norm(total.d_centers))
        report.duration = time.perf_counter() - t0
        self.step_count = step
        return report

    def run(self, on_step=None, start_step: int = 0,
            total_steps: int | None = None) -> list[StepReport]:
        total = total_steps or self.settings.total_steps
        reports = []
        for step in range(start_step + 1, total + 1):
            rep = self.train_step(step)
            reports.append(rep)
            if on_step is not None:
                on_step(rep)
        return reports
