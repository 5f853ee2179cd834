"""Adaptive density control: clone/split on accumulated screen gradients,
opacity pruning, opacity resets, and surface pruning, sequenced by a schedule.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import GaussianCloud, InvalidInputError, logit, quat_to_rotmat
from .surface import PruneMode, SurfaceCloud, surface_prune

log = logging.getLogger(__name__)


@dataclass
class DensifySchedule:
    """When densification runs and with what thresholds.

    Defaults: start at step 1000, repeat every 200, stop after 8000 within a
    10000-step run; clone/split Gaussians whose mean accumulated screen-space
    gradient exceeds 0.05; prune opacities below 0.05.
    """
    start_step: int = 1000
    interval: int = 200
    stop_step: int = 8000
    total_steps: int = 10000
    grad_threshold: float = 0.05
    opacity_prune_threshold: float = 0.05
    opacity_reset_interval: int = 3000
    opacity_reset_cap: float = 0.01
    split_scale_threshold: float = 0.01   # absolute; callers scale by extent
    split_factor: float = 1.6
    surface_prune_mode: PruneMode = field(default_factory=PruneMode.knn)

    def __post_init__(self):
        if not (0 < self.start_step < self.stop_step <= self.total_steps):
            raise InvalidInputError("require 0 < start_step < stop_step <= total_steps")
        if self.interval < 1:
            raise InvalidInputError("interval must be >= 1")
        for name in ("grad_threshold", "opacity_prune_threshold",
                     "split_scale_threshold", "split_factor"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")

    def densify_due(self, step: int) -> bool:
        return (self.start_step <= step <= self.stop_step
                and step % self.interval == 0)

    def reset_due(self, step: int) -> bool:
        return (self.opacity_reset_interval > 0
                and step % self.opacity_reset_interval == 0
                and 0 < step <= self.stop_step)

    def densify_steps(self) -> list[int]:
        """All steps at which densification fires over a full run."""
        return [s for s in range(1, self.total_steps + 1) if self.densify_due(s)]


@dataclass
class MutationReport:
    step: int
    cloned: int = 0
    split: int = 0
    opacity_pruned: int = 0
    surface_pruned: int = 0
    new_total: int = 0
    skipped: bool = False

    def log_line(self) -> str:
        return (f"densify step={self.step} cloned={self.cloned} split={self.split} "
                f"opacity_pruned={self.opacity_pruned} "
                f"surface_pruned={self.surface_pruned} new_total={self.new_total}")


def _sample_offsets(cloud: GaussianCloud, idx: np.ndarray, draws: np.ndarray) -> np.ndarray:
    """Offsets distributed like the selected Gaussians: R diag(s) eps."""
    R3 = quat_to_rotmat(cloud.unit_quats[idx])
    return np.einsum("nij,nj->ni", R3, cloud.scales[idx] * draws)


class RowStateMixin:
    """State holders that mirror cloud rows implement keep/append surgery."""

    def keep_rows(self, mask: np.ndarray) -> None:
        raise NotImplementedError

    def append_rows(self, count: int) -> None:
        raise NotImplementedError


def densify_and_prune(cloud: GaussianCloud, surface: SurfaceCloud | None,
                      schedule: DensifySchedule, step: int,
                      rng: np.random.Generator,
                      row_state: RowStateMixin | None = None) -> MutationReport:
    """One densification event: clone small / split large high-gradient
    Gaussians, prune low-opacity ones, then prune against the surface.

    Called off-schedule this is a warning no-op, keeping the trainer loop
    simple. `row_state` (optimizer moments) is kept row-aligned: new rows are
    zero-initialized, pruned rows removed. Gradient statistics reset at the
    end of the event.
    """
    report = MutationReport(step=step, new_total=len(cloud))
    if not schedule.densify_due(step):
        log.warning("densify_and_prune called off-schedule at step %d; skipping", step)
        report.skipped = True
        return report

    mean_grad = cloud.mean_screen_grad()
    candidates = mean_grad > schedule.grad_threshold
    max_scale = cloud.scales.max(axis=1)
    small = candidates & (max_scale <= schedule.split_scale_threshold)
    large = candidates & (max_scale > schedule.split_scale_threshold)

    clone_idx = np.flatnonzero(small)
    split_idx = np.flatnonzero(large)
    report.cloned = len(clone_idx)
    report.split = len(split_idx)

    new_centers, new_logs, new_quats, new_colors, new_lo = [], [], [], [], []
    if len(clone_idx):
        draws = rng.standard_normal((len(clone_idx), 3))
        new_centers.append(cloud.centers[clone_idx] + _sample_offsets(cloud, clone_idx, draws))
        new_logs.append(cloud.log_scales[clone_idx])
        new_quats.append(cloud.quats[clone_idx])
        new_colors.append(cloud.colors[clone_idx])
        new_lo.append(cloud.logit_opacities[clone_idx])
    if len(split_idx):
        draws = rng.standard_normal((len(split_idx), 2, 3))
        child_logs = cloud.log_scales[split_idx] - math.log(schedule.split_factor)
        for c in range(2):
            new_centers.append(cloud.centers[split_idx]
                               + _sample_offsets(cloud, split_idx, draws[:, c]))
            new_logs.append(child_logs)
            new_quats.append(cloud.quats[split_idx])
            new_colors.append(cloud.colors[split_idx])
            new_lo.append(cloud.logit_opacities[split_idx])

    if new_centers:
        added = len(np.concatenate(new_centers))
        cloud.append(np.concatenate(new_centers), np.concatenate(new_logs),
                     np.concatenate(new_quats), np.concatenate(new_colors),
                     np.concatenate(new_lo))
        if row_state is not None:
            row_state.append_rows(added)

    # split parents are removed together with the opacity prune
    remove = np.zeros(len(cloud), dtype=bool)
    remove[split_idx] = True
    low_opacity = cloud.opacities < schedule.opacity_prune_threshold
    report.opacity_pruned = int(np.count_nonzero(low_opacity & ~remove))
    remove |= low_opacity
    _apply_removal(cloud, remove, row_state)

    if surface is not None and len(surface) and schedule.surface_prune_mode.kind != "none":
        prune = surface_prune(cloud, surface, schedule.surface_prune_mode)
        report.surface_pruned = int(prune.sum())
        _apply_removal(cloud, prune, row_state)

    cloud.reset_grad_stats()
    report.new_total = len(cloud)
    log.info(report.log_line())
    return report


def _apply_removal(cloud: GaussianCloud, remove: np.ndarray,
                   row_state: RowStateMixin | None) -> None:
    if not remove.any():
        return
    keep = ~remove
    if not keep.any():
        # never empty the cloud; retain one survivor deterministically
        keep[0] = True
        log.warning("pruning would empty the cloud; keeping one Gaussian")
    cloud.keep(keep)
    if row_state is not None:
        row_state.keep_rows(keep)


def reset_opacity(cloud: GaussianCloud, cap: float = 0.01) -> None:
    """Clamp every opacity above `cap` down to `cap` (logit storage updated)."""
    if not (0 < cap < 1):
        raise InvalidInputError("cap must lie in (0, 1)")
    over = cloud.opacities > cap
    if np.any(over):
        cloud.logit_opacities = np.where(over, logit(cap), cloud.logit_opacities)
