"""Training loop: camera sampling, Adam updates, guidance steps, density
control and checkpoints."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .body import BodyModel, PosedBody, PoseParams, init_cloud, pose_body, render_skeleton, \
    view_class
from .cloud import CloudGradients, GaussianCloud, read_ply, write_ply
from .density import DENSIFY_PRUNE, PRUNE_ONLY, DensifyConfig, densify_and_prune, \
    prune_by_size, reset_opacity, schedule_gate
from .errors import ConfigError, NumericalError, ParameterError, ProviderError, TransportError
from .geometry import Camera, camera_from_spherical
from .guidance import GuidanceConfig, NoiseSchedule, StepInfo, dual_branch_step

log = logging.getLogger(__name__)

PARAM_GROUPS = GaussianCloud.PARAMS
PROVIDER_RETRIES = 3
MAX_SKIPPED_STEPS = 5  # consecutive skipped iterations before giving up


@dataclass
class TrainConfig:
    iterations: int = 3600
    batch: int = 8
    resolution: int = 1024
    num_gaussians: int = 100_000
    lr_means: float = 5e-5
    lr_scales: float = 1e-3
    lr_quats: float = 1e-2
    lr_colors: float = 1.25e-2
    lr_opacity: float = 1e-2
    betas: tuple = (0.9, 0.99)
    adam_eps: float = 1e-15
    means_lr_decay: bool = False
    means_lr_final_factor: float = 0.01
    distance_range: tuple = (1.5, 2.0)
    fovy_range: tuple = (40.0, 70.0)
    elevation_range: tuple = (-30.0, 30.0)
    azimuth_range: tuple = (-180.0, 180.0)
    head_zoom_prob: float = 0.25
    head_zoom_start: int = 1200
    head_zoom_end: int = 3600
    head_zoom_distance: tuple = (0.4, 0.6)
    seed: int = 0
    prompt: str = ""
    negative_prompt: str = ""
    prompt_augment: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    depth_norm: str = "minmax"
    depth_range: tuple = (0.5, 3.0)
    checkpoint_every: int = 300
    num_train_timesteps: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Laptop-sized profile: 256^2, batch 2, 10k Gaussians."""
        base = dict(resolution=256, batch=2, num_gaussians=10_000)
        base.update(overrides)
        return cls(**base)

    def learning_rates(self, iteration: int = 0) -> dict:
        lr_means = self.lr_means
        if self.means_lr_decay:
            frac = min(max(iteration / max(self.iterations, 1), 0.0), 1.0)
            lr_means = self.lr_means * self.means_lr_final_factor ** frac
        return {"means": lr_means, "log_scales": self.lr_scales, "quats": self.lr_quats,
                "f_dc": self.lr_colors, "opacity_logits": self.lr_opacity}

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.num_train_timesteps, self.beta_start, self.beta_end,
                             weighting=self.guidance.weighting)

    def validate(self) -> list:
        problems = []
        for name in ("iterations", "batch", "resolution", "num_gaussians", "checkpoint_every"):
            if getattr(self, name) < 1:
                problems.append(f"train.{name}: must be >= 1")
        for name in ("distance_range", "fovy_range", "elevation_range", "azimuth_range",
                     "head_zoom_distance", "depth_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                problems.append(f"train.{name}: empty range [{lo}, {hi}]")
        if self.distance_range[0] <= 0 or self.head_zoom_distance[0] <= 0:
            problems.append("train.distance_range/head_zoom_distance: must be positive")
        if not (0 < self.fovy_range[0] and self.fovy_range[1] < 180):
            problems.append("train.fovy_range: must lie inside (0, 180)")
        if not 0 <= self.head_zoom_prob <= 1:
            problems.append("train.head_zoom_prob: must lie in [0, 1]")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            problems.append("train.betas: need two values in [0, 1)")
        if self.depth_norm not in ("minmax", "nearfar"):
            problems.append("train.depth_norm: must be 'minmax' or 'nearfar'")
        for name in ("lr_means", "lr_scales", "lr_quats", "lr_colors", "lr_opacity"):
            if getattr(self, name) < 0:
                problems.append(f"train.{name}: must be >= 0")
        problems += self.guidance.validate(self.num_train_timesteps)
        problems += self.densify.validate()
        return problems


class AdamState:
    """Per-group first/second moments with a shared step counter."""

    def __init__(self, cloud: GaussianCloud):
        self.m = {k: np.zeros_like(v) for k, v in cloud.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in cloud.params().items()}
        self.step = 0

    def remap(self, origin: np.ndarray):
        """Reindex rows after a structural edit; rows with origin -1 start at zero."""
        fresh = origin < 0
        src = np.where(fresh, 0, origin)
        for table in (self.m, self.v):
            for k, arr in table.items():
                out = arr[src].copy()
                out[fresh] = 0.0
                table[k] = out

    def rows(self) -> int:
        return self.m["means"].shape[0]


def adam_step(params: dict, grads: dict, state: AdamState, lrs: dict,
              betas=(0.9, 0.99), eps: float = 1e-15):
    """Bias-corrected Adam update, in place, one learning rate per group."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter group {name!r}")
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape or state.m[name].shape != p.shape:
            raise ParameterError(f"shape mismatch in group {name!r}: param {p.shape}, "
                                 f"grad {g.shape}, state {state.m[name].shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lrs[name] * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def sample_camera(config: TrainConfig, iteration: int, body: PosedBody, rng) -> Camera:
    """Random orbit camera; inside the zoom window it may frame the head.

    Draws a fixed number of variates per call, so the stream stays aligned
    whether or not a zoom happens.
    """
    distance = rng.uniform(*config.distance_range)
    fovy = rng.uniform(*config.fovy_range)
    elevation = rng.uniform(*config.elevation_range)
    azimuth = rng.uniform(*config.azimuth_range)
    coin = rng.random()
    zoom_distance = rng.uniform(*config.head_zoom_distance)
    zoom = (config.head_zoom_start <= iteration < config.head_zoom_end
            and coin < config.head_zoom_prob)
    target = body.head if zoom else body.center
    return camera_from_spherical(zoom_distance if zoom else distance, elevation, azimuth, fovy,
                                 target, config.resolution, config.resolution)


@dataclass
class TrainResult:
    cloud: GaussianCloud
    metrics: list
    iteration: int


@dataclass
class _Run:
    cloud: GaussianCloud
    adam: AdamState
    stats: CloudGradients
    rng: np.random.Generator
    iteration: int
    scene_extent: float


def _init_run(config, model, pose, init) -> _Run:
    rng = np.random.default_rng(config.seed)
    cloud = init if init is not None else init_cloud(model, pose, config.num_gaussians, rng)
    cloud = cloud.copy()
    extent = float(np.linalg.norm(cloud.means.max(0) - cloud.means.min(0)))
    return _Run(cloud, AdamState(cloud), CloudGradients.zeros(len(cloud)), rng, 0, extent)


def save_checkpoint(run: _Run, directory, config_dict: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ply(run.cloud, directory / "cloud.ply")
    arrays = {f"param_{k}": v for k, v in run.cloud.params().items()}
    arrays.update({f"m_{k}": v for k, v in run.adam.m.items()})
    arrays.update({f"v_{k}": v for k, v in run.adam.v.items()})
    arrays.update({f"stat_{k}": getattr(run.stats, k)
                   for k in ("grad2d_accum", "hit_count", "means_accum")})
    meta = {"iteration": run.iteration, "adam_step": run.adam.step,
            "scene_extent": run.scene_extent, "rng_state": run.rng.bit_generator.state}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    tmp = directory / "state.tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, directory / "state.npz")
    with open(directory / "config.json", "w") as fh:
        json.dump(config_dict, fh, indent=2, sort_keys=True)
    return directory


def load_checkpoint(directory) -> _Run:
    directory = Path(directory)
    with np.load(directory / "state.npz") as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        cloud = GaussianCloud(*(data[f"param_{k}"] for k in PARAM_GROUPS))
        adam = AdamState(cloud)
        adam.m = {k: data[f"m_{k}"].copy() for k in PARAM_GROUPS}
        adam.v = {k: data[f"v_{k}"].copy() for k in PARAM_GROUPS}
        adam.step = int(meta["adam_step"])
        stats = CloudGradients.zeros(len(cloud))
        for k in ("grad2d_accum", "hit_count", "means_accum"):
            setattr(stats, k, data[f"stat_{k}"].copy())
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return _Run(cloud, adam, stats, rng, int(meta["iteration"]), float(meta["scene_extent"]))


def checkpoint_config(directory) -> dict:
    with open(Path(directory) / "config.json") as fh:
        return json.load(fh)


def config_to_dict(config: TrainConfig) -> dict:
    """Sectioned layout shared with run-config files."""
    train = asdict(config)
    guidance = train.pop("guidance")
    densify = train.pop("densify")
    return {"train": train, "guidance": guidance, "densify": densify}


def _grad_norms(grads: CloudGradients) -> dict:
    return {k: float(np.linalg.norm(v)) for k, v in grads.param_grads().items()}


def train(config: TrainConfig, model: BodyModel, provider, *, pose: PoseParams | None = None,
          views=None, init: GaussianCloud | None = None, out_dir=None, resume_from=None,
          evaluate=None, eval_every: int = 0, config_dict: dict | None = None,
          stop_at: int | None = None) -> TrainResult:
    """Optimize a Gaussian cloud against ``provider``.

    ``views`` (a list of cameras) replaces random orbit sampling with a fixed
    camera pool whose indices are passed to the provider as ``view_ids``.
    ``evaluate(cloud) -> dict`` is merged into the metrics every
    ``eval_every`` iterations and at the end. ``stop_at`` ends the loop early
    (the schedule still refers to ``config.iterations``).
    """
    problems = config.validate()
    if problems:
        raise ConfigError(problems)
    body = pose_body(model, pose)
    run = load_checkpoint(resume_from) if resume_from else _init_run(config, model, pose, init)
    schedule = config.schedule()
    cfg_dict = config_dict if config_dict is not None else config_to_dict(config)
    out_dir = Path(out_dir) if out_dir else None
    metrics_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a" if resume_from else "w")
    metrics = []
    skipped = 0
    last = min(config.iterations, stop_at) if stop_at else config.iterations
    try:
        for it in range(run.iteration + 1, last + 1):
            record = _train_iteration(run, it, config, body, model, pose, provider, schedule,
                                      views)
            if evaluate is not None and eval_every and (it % eval_every == 0 or it == last):
                record.update(evaluate(run.cloud))
            metrics.append(record)
            skipped = skipped + 1 if record.get("skipped") else 0
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if out_dir and (it % config.checkpoint_every == 0 or it == last):
                save_checkpoint(run, out_dir / "checkpoints" / f"iter_{it:05d}", cfg_dict)
            if skipped >= MAX_SKIPPED_STEPS:
                raise ProviderError(f"provider unreachable for {skipped} consecutive iterations")
    except Exception:
        if out_dir and run.iteration > 0:
            save_checkpoint(run, out_dir / "checkpoints" / "abort", cfg_dict)
        raise
    finally:
        if metrics_fh:
            metrics_fh.close()
    return TrainResult(run.cloud, metrics, run.iteration)


def _train_iteration(run: _Run, it, config, body, model, pose, provider, schedule, views):
    rng = run.rng
    if views is not None:
        view_ids = rng.integers(0, len(views), size=config.batch)
        cameras = [views[i] for i in view_ids]
    else:
        view_ids = None
        cameras = [sample_camera(config, it, body, rng) for _ in range(config.batch)]
    pose_maps = None
    if getattr(provider, "needs_pose_map", False):
        pose_maps = np.stack([render_skeleton(model, pose, cam, body=body) for cam in cameras])
        pose_maps = pose_maps.astype(np.float64) / 255.0
    prompt = config.prompt
    if config.prompt_augment and cameras:
        prompt = f"{prompt}, {view_class(cameras[0].azimuth)} view"
    info = StepInfo()
    record = {"iteration": it}
    grads = None
    for attempt in range(PROVIDER_RETRIES):
        try:
            grads = dual_branch_step(run.cloud, cameras, provider, schedule, config.guidance, rng,
                                     config.background, prompt, config.negative_prompt,
                                     pose_maps, view_ids, config.depth_norm, info)
            break
        except TransportError as exc:
            log.warning("iteration %d: provider attempt %d failed: %s", it, attempt + 1, exc)
    if grads is None:
        record["skipped"] = True
    else:
        run.stats.add_stats_(grads)
        adam_step(run.cloud.params(), grads.param_grads(), run.adam,
                  config.learning_rates(it), config.betas, config.adam_eps)
        record.update(t=info.t, adjoint_rgb=info.adjoint_rgb, adjoint_depth=info.adjoint_depth,
                      grad_norm=_grad_norms(grads))
    action = schedule_gate(it, config.densify)
    if action == DENSIFY_PRUNE:
        cloud, origin = densify_and_prune(run.cloud, run.stats, config.densify, run.scene_extent,
                                          rng, return_index=True)
        run.adam.remap(origin)
        run.cloud = cloud
        if config.densify.opacity_reset and it % config.densify.opacity_reset_interval == 0:
            run.cloud = reset_opacity(run.cloud, config.densify.opacity_reset_value)
    elif action == PRUNE_ONLY:
        cloud, keep = prune_by_size(run.cloud, config.densify.size_prune_threshold,
                                    return_index=True)
        run.adam.remap(keep)
        run.cloud = cloud
        run.stats.reset(len(cloud))
    record["action"] = action
    record["num_gaussians"] = len(run.cloud)
    record["max_scale"] = float(np.exp(run.cloud.log_scales.max()))
    run.iteration = it
    return record
