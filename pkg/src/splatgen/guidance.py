"""Noise schedule, score providers and the score-distillation algebra.

Every ``*_delta`` function returns the adjoint that is fed to
``render_backward`` as dL/d(image): the gradient w.r.t. parameters is
delta * d(image)/d(theta), summed over pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ParameterError
from .rasterizer import render, render_backward

GUIDANCE_MODES = ("vanilla", "cfg", "annealed_negative")
WEIGHTINGS = ("uniform", "sigma2", "snr_inv")
TAU2_MODES = ("step", "ramp")


class NoiseSchedule:
    """Variance-preserving schedule over ``T`` discrete steps.

    By default scaled-linear betas from 8.5e-4 to 1.2e-2 over 1000 steps.
    ``alphas_cumprod`` may be passed directly instead.
    """

    def __init__(self, num_steps: int = 1000, beta_start: float = 8.5e-4,
                 beta_end: float = 1.2e-2, alphas_cumprod=None, weighting: str = "uniform"):
        if alphas_cumprod is None:
            betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), num_steps) ** 2
            alphas_cumprod = np.cumprod(1.0 - betas)
        acp = np.asarray(alphas_cumprod, dtype=np.float64)
        if acp.ndim != 1 or acp.size < 1:
            raise ParameterError("alphas_cumprod must be a non-empty 1-D table")
        if np.any(np.diff(acp) >= 0) or acp[0] > 1 or acp[-1] <= 0:
            raise ParameterError("alphas_cumprod must decrease strictly within (0, 1]")
        if weighting not in WEIGHTINGS:
            raise ParameterError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
        self.alphas_cumprod = acp
        self.alphas = np.sqrt(acp)
        self.sigmas = np.sqrt(1.0 - acp)
        self.weighting = weighting

    @property
    def num_steps(self) -> int:
        return self.alphas_cumprod.size

    def alpha(self, t) -> float:
        return self.alphas[t]

    def sigma(self, t) -> float:
        return self.sigmas[t]

    def weight(self, t) -> float:
        if self.weighting == "uniform":
            return 1.0
        if self.weighting == "sigma2":
            return self.sigmas[t] ** 2
        return self.sigmas[t] / self.alphas[t]

    def add_noise(self, x, noise, t):
        return self.alphas[t] * x + self.sigmas[t] * noise


def v_to_eps(v, x_t, t, schedule: NoiseSchedule):
    return schedule.alpha(t) * np.asarray(v) + schedule.sigma(t) * np.asarray(x_t)


def eps_to_x0(eps, x_t, t, schedule: NoiseSchedule):
    """Clean-sample estimate from an eps-prediction."""
    return (np.asarray(x_t) - schedule.sigma(t) * np.asarray(eps)) / schedule.alpha(t)


def v_to_x0(v, x_t, t, schedule: NoiseSchedule):
    return schedule.alpha(t) * np.asarray(x_t) - schedule.sigma(t) * np.asarray(v)


def v_target(x, eps, t, schedule: NoiseSchedule):
    """v = alpha_t * eps - sigma_t * x, the v-prediction regression target."""
    return schedule.alpha(t) * np.asarray(eps) - schedule.sigma(t) * np.asarray(x)


def sds_delta(eps_pred, eps_noise, w_t):
    return w_t * (np.asarray(eps_pred) - np.asarray(eps_noise))


def decompose_cfg(eps_cond, eps_uncond, eps_noise, tau):
    """Split the CFG residual into generative and classifier scores."""
    delta_g = eps_cond - eps_noise
    delta_c = eps_cond - eps_uncond
    return delta_g, delta_c, delta_g + tau * delta_c


def negative_classifier_delta(eps_cond, eps_uncond, eps_neg):
    delta_c = eps_cond - eps_uncond
    delta_n = eps_neg - eps_uncond
    return delta_c, delta_n, delta_c - delta_n


@dataclass
class GuidanceConfig:
    mode: str = "annealed_negative"
    tau1: float = 7.5
    tau2_mode: str = "step"
    tau2_start: int = 200
    tau2_ramp_end: int = 400
    lambda_rgb: float = 0.5
    lambda_depth: float = 0.5
    t_min: int = 20
    t_max: int = 980
    weighting: str = "uniform"

    def validate(self, num_steps: int = 1000):
        problems = []
        if self.mode not in GUIDANCE_MODES:
            problems.append(f"guidance.mode: must be one of {GUIDANCE_MODES}")
        if not self.tau1 > 0:
            problems.append("guidance.tau1: must be positive")
        if self.tau2_mode not in TAU2_MODES:
            problems.append(f"guidance.tau2_mode: must be one of {TAU2_MODES}")
        if self.tau2_mode == "ramp" and not self.tau2_ramp_end > self.tau2_start:
            problems.append("guidance.tau2_ramp_end: must exceed tau2_start")
        if self.lambda_rgb < 0 or self.lambda_depth < 0:
            problems.append("guidance.lambda_rgb/lambda_depth: must be >= 0")
        if not 1 <= self.t_min < self.t_max <= num_steps:
            problems.append(f"guidance.t_min/t_max: need 1 <= t_min < t_max <= {num_steps}")
        if self.weighting not in WEIGHTINGS:
            problems.append(f"guidance.weighting: must be one of {WEIGHTINGS}")
        return problems

    def tau2(self, t) -> float:
        """Negative-score weight: 0 at low noise, 1 from ``tau2_start`` on."""
        if self.tau2_mode == "step":
            return 1.0 if t >= self.tau2_start else 0.0
        span = self.tau2_ramp_end - self.tau2_start
        return float(np.clip((t - self.tau2_start) / span, 0.0, 1.0))


def anneal_weight(t, config: GuidanceConfig) -> float:
    return config.tau2(t)


def annealed_delta(delta_c, delta_n, t, config: GuidanceConfig, w_t: float = 1.0):
    return w_t * (config.tau1 * delta_c - anneal_weight(t, config) * delta_n)


@dataclass
class ScoreRequest:
    x_t: np.ndarray           # (B, H, W, 3)
    d_t: np.ndarray           # (B, H, W, 1)
    t: int
    prompt: str = ""
    negative_prompt: str = ""
    pose: np.ndarray | None = None   # (B, H, W, 3) in [0, 1]
    view_ids: np.ndarray | None = None  # in-process only; not on the wire

    @property
    def batch(self):
        return self.x_t.shape[0]


@dataclass
class ScoreResponse:
    eps_cond: np.ndarray
    eps_uncond: np.ndarray
    eps_neg: np.ndarray
    eps_cond_depth: np.ndarray
    eps_uncond_depth: np.ndarray
    eps_neg_depth: np.ndarray

    def check(self, request: ScoreRequest):
        for name in ("eps_cond", "eps_uncond", "eps_neg"):
            arr = getattr(self, name)
            if arr.shape != request.x_t.shape:
                raise ParameterError(f"{name} shape {arr.shape} != request {request.x_t.shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite values in image branch ({name})")
        for name in ("eps_cond_depth", "eps_uncond_depth", "eps_neg_depth"):
            arr = getattr(self, name)
            if arr.shape != request.d_t.shape:
                raise ParameterError(f"{name} shape {arr.shape} != request {request.d_t.shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite values in depth branch ({name})")


class ScoreProvider:
    """Anything that maps a ScoreRequest to a ScoreResponse."""

    needs_pose_map = False

    def score(self, request: ScoreRequest, schedule: NoiseSchedule) -> ScoreResponse:
        raise NotImplementedError


class DiracProvider(ScoreProvider):
    """Exact denoiser for a point-mass data distribution at a target image.

    eps(x_t) = (x_t - alpha_t * target) / sigma_t. The conditional branch
    points at the target; the unconditional one at a uniform gray image and
    the negative one at the inverted target, unless given explicitly.
    Targets are (H, W, C) or stacked per view (V, H, W, C), in which case
    requests must carry ``view_ids``.
    """

    def __init__(self, target_rgb, target_depth, uncond_rgb=None, uncond_depth=None,
                 neg_rgb=None, neg_depth=None):
        self.target_rgb = self._as_target(target_rgb, 3)
        self.target_depth = self._as_target(target_depth, 1)
        self.uncond_rgb = (np.full_like(self.target_rgb, 0.5) if uncond_rgb is None
                           else self._as_target(uncond_rgb, 3))
        self.uncond_depth = (np.full_like(self.target_depth, 0.5) if uncond_depth is None
                             else self._as_target(uncond_depth, 1))
        self.neg_rgb = 1.0 - self.target_rgb if neg_rgb is None else self._as_target(neg_rgb, 3)
        self.neg_depth = (1.0 - self.target_depth if neg_depth is None
                          else self._as_target(neg_depth, 1))

    @staticmethod
    def _as_target(arr, channels):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape[-1] != channels:
            arr = arr[..., None]
        if arr.shape[-1] != channels or arr.ndim not in (3, 4):
            raise ParameterError(f"target must be (H, W, {channels}) or (V, H, W, {channels})")
        return arr

    def _pick(self, table, request):
        if table.ndim == 3:
            return table[None]
        if request.view_ids is None:
            raise ParameterError("multi-view Dirac provider needs request.view_ids")
        return table[np.asarray(request.view_ids)]

    def score(self, request, schedule):
        a, s = schedule.alpha(request.t), schedule.sigma(request.t)
        if s == 0:
            raise ParameterError("Dirac provider is undefined at sigma_t = 0")

        def eps(x_t, table):
            return (x_t - a * self._pick(table, request)) / s

        return ScoreResponse(
            eps(request.x_t, self.target_rgb), eps(request.x_t, self.uncond_rgb),
            eps(request.x_t, self.neg_rgb), eps(request.d_t, self.target_depth),
            eps(request.d_t, self.uncond_depth), eps(request.d_t, self.neg_depth))


def dirac_provider(target_rgb, target_depth, **kwargs) -> DiracProvider:
    return DiracProvider(target_rgb, target_depth, **kwargs)


def branch_adjoint(eps_cond, eps_uncond, eps_neg, eps_noise, t, schedule, config):
    w_t = schedule.weight(t)
    if config.mode == "vanilla":
        return sds_delta(eps_cond, eps_noise, w_t)
    if config.mode == "cfg":
        return w_t * decompose_cfg(eps_cond, eps_uncond, eps_noise, config.tau1)[2]
    delta_c, delta_n, _ = negative_classifier_delta(eps_cond, eps_uncond, eps_neg)
    return annealed_delta(delta_c, delta_n, t, config, w_t)


def dual_branch_delta(response: "ScoreResponse", eps_x, eps_d, t, schedule, config):
    """Weighted (image, depth) adjoints for one response."""
    adj_x = branch_adjoint(response.eps_cond, response.eps_uncond, response.eps_neg, eps_x,
                           t, schedule, config)
    adj_d = branch_adjoint(response.eps_cond_depth, response.eps_uncond_depth,
                           response.eps_neg_depth, eps_d, t, schedule, config)
    return config.lambda_rgb * adj_x, config.lambda_depth * adj_d


@dataclass
class StepInfo:
    t: int = 0
    adjoint_rgb: float = 0.0
    adjoint_depth: float = 0.0
    outputs: list = field(default_factory=list)


def dual_branch_step(cloud, cameras, provider: ScoreProvider, schedule: NoiseSchedule,
                     config: GuidanceConfig, rng, background=(0.0, 0.0, 0.0),
                     prompt="", negative_prompt="", pose_maps=None, view_ids=None,
                     depth_norm="minmax", info: StepInfo | None = None):
    """One score-distillation gradient for a batch of cameras (averaged)."""
    if not isinstance(cameras, (list, tuple)):
        cameras = [cameras]
    outputs = [render(cloud, cam, background, depth_norm=depth_norm) for cam in cameras]
    x = np.stack([o.rgb for o in outputs])
    d = np.stack([o.depth for o in outputs])[..., None]
    t = int(rng.integers(config.t_min, config.t_max))
    eps_x = rng.standard_normal(x.shape)
    eps_d = rng.standard_normal(d.shape)
    request = ScoreRequest(schedule.add_noise(x, eps_x, t), schedule.add_noise(d, eps_d, t), t,
                           prompt, negative_prompt,
                           None if pose_maps is None else np.asarray(pose_maps),
                           None if view_ids is None else np.asarray(view_ids))
    response = provider.score(request, schedule)
    response.check(request)
    adj_x, adj_d = dual_branch_delta(response, eps_x, eps_d, t, schedule, config)
    total = None
    for b, (cam, out) in enumerate(zip(cameras, outputs)):
        g = render_backward(cloud, cam, out, adj_x[b], adj_d[b, ..., 0] if config.lambda_depth
                            else None)
        total = g if total is None else total.add_(g)
    total.scale_params(1.0 / len(cameras))
    if info is not None:
        info.t = t
        info.adjoint_rgb = float(np.abs(adj_x).mean())
        info.adjoint_depth = float(np.abs(adj_d).mean())
        info.outputs = outputs
    return total
