"""Adaptive density control: clone/split, opacity pruning and the late
size-based prune-only phase."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import CloudGradients, GaussianCloud, logit
from .errors import DegenerateCollapseError, ParameterError
from .geometry import quaternion_to_matrix

NONE = "none"
DENSIFY_PRUNE = "densify_prune"
PRUNE_ONLY = "prune_only"


@dataclass
class DensifyConfig:
    enabled: bool = True
    start_iter: int = 300
    end_iter: int = 2100
    interval: int = 300
    prune_phase_start: int = 2400
    prune_phase_end: int = 3300
    prune_phase_interval: int = 300
    grad_threshold: float = 2e-4
    scale_split_threshold: float = 0.01
    split_factor: float = 1.6
    min_opacity: float = 0.005
    size_prune_threshold: float = 0.008
    opacity_reset: bool = False
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.01

    def validate(self):
        problems = []
        if self.start_iter > self.end_iter:
            problems.append("densify.start_iter: must not exceed end_iter")
        if self.prune_phase_start > self.prune_phase_end:
            problems.append("densify.prune_phase_start: must not exceed prune_phase_end")
        for name in ("interval", "prune_phase_interval", "opacity_reset_interval"):
            if getattr(self, name) <= 0:
                problems.append(f"densify.{name}: must be positive")
        for name in ("grad_threshold", "scale_split_threshold", "min_opacity",
                     "size_prune_threshold"):
            if not getattr(self, name) > 0:
                problems.append(f"densify.{name}: must be positive")
        if not self.split_factor > 1:
            problems.append("densify.split_factor: must exceed 1")
        return problems


def schedule_gate(iteration: int, config: DensifyConfig) -> str:
    if iteration < 0:
        raise ParameterError("iteration must be >= 0")
    if not config.enabled:
        return NONE
    if (config.start_iter <= iteration <= config.end_iter
            and (iteration - config.start_iter) % config.interval == 0):
        return DENSIFY_PRUNE
    if (config.prune_phase_start <= iteration <= config.prune_phase_end
            and (iteration - config.prune_phase_start) % config.prune_phase_interval == 0):
        return PRUNE_ONLY
    return NONE


def _take(cloud: GaussianCloud, origin: np.ndarray, extra: list[GaussianCloud]):
    # every Gaussian may have been split, leaving no kept rows
    parts = [cloud.subset(origin)] if origin.size else []
    parts += [c for c in extra if c is not None]
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    return out


def densify_and_prune(cloud: GaussianCloud, gradients: CloudGradients, config: DensifyConfig,
                      scene_extent: float, rng=None, return_index: bool = False):
    """Clone small / split large high-gradient Gaussians, then drop faint ones.

    With ``return_index`` also returns ``origin``: for every output row the
    input row it continues, or -1 for newly created Gaussians.
    """
    rng = np.random.default_rng(rng)
    n = len(cloud)
    if len(gradients) != n:
        raise ParameterError(f"gradient buffers have {len(gradients)} rows, cloud has {n}")
    hits = gradients.hit_count
    mean_grad = np.where(hits > 0, gradients.grad2d_accum / np.maximum(hits, 1), 0.0)
    selected = mean_grad > config.grad_threshold
    max_scale = cloud.scales.max(axis=1)
    small = max_scale <= config.scale_split_threshold * scene_extent
    clone = np.flatnonzero(selected & small)
    split = np.flatnonzero(selected & ~small)

    clones = None
    if clone.size:
        clones = cloud.subset(clone).copy()
        direction = -gradients.means_accum[clone]
        norm = np.linalg.norm(direction, axis=1, keepdims=True)
        step = np.where(norm > 0, direction / np.where(norm > 0, norm, 1.0), 0.0)
        clones.means += step * max_scale[clone, None]

    children = None
    if split.size:
        parent = cloud.subset(np.repeat(split, 2))
        stds = parent.scales
        rot = quaternion_to_matrix(parent.quats)
        offsets = np.einsum("nij,nj->ni", rot, rng.standard_normal(stds.shape) * stds)
        children = parent.copy()
        children.means = parent.means + offsets
        children.log_scales = np.log(stds / config.split_factor)

    keep = np.setdiff1d(np.arange(n), split)
    origin = np.concatenate([keep, np.full(clone.size + 2 * split.size, -1)])
    grown = _take(cloud, keep, [clones, children])

    alive = grown.opacities >= config.min_opacity
    if not alive.any():
        raise DegenerateCollapseError("opacity pruning removed every Gaussian")
    out = grown.subset(alive)
    origin = origin[alive]
    gradients.reset(len(out))
    return (out, origin) if return_index else out


def prune_by_size(cloud: GaussianCloud, threshold: float, return_index: bool = False):
    """Remove Gaussians whose largest activated scale exceeds ``threshold``."""
    if not threshold > 0:
        raise ParameterError("size threshold must be positive")
    keep = np.flatnonzero(cloud.scales.max(axis=1) <= threshold)
    if keep.size == 0:
        raise DegenerateCollapseError(f"every Gaussian exceeds the size threshold {threshold}")
    out = cloud.subset(keep)
    return (out, keep) if return_index else out


def reset_opacity(cloud: GaussianCloud, value: float) -> GaussianCloud:
    out = cloud.copy()
    out.opacity_logits = np.minimum(out.opacity_logits, logit(value))
    return out
