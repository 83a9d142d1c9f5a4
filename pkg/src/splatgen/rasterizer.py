"""Tile-based splatting of a GaussianCloud into RGB, depth and alpha.

Each Gaussian's screen footprint is its 3-sigma ellipse; inside it the
density alpha_i * G(p) is blended front to back, sorted by view depth with
ties broken by Gaussian index. The outer band (2.5 to 3 sigma) is faded
to zero with a smoothstep so the footprint edge stays differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .cloud import CloudGradients, GaussianCloud
from .errors import ParameterError
from .geometry import COV2D_FLOOR, Camera

TILE = K.TILE
DEPTH_NORM_MODES = ("minmax", "nearfar")


@dataclass
class Projected:
    xy: np.ndarray
    conic: np.ndarray
    extent: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    rgb: np.ndarray
    valid: np.ndarray


@dataclass
class TileBins:
    """Intersections sorted by (tile, view depth, Gaussian index)."""

    tiles_x: int
    tiles_y: int
    gids: np.ndarray
    tile_of: np.ndarray
    start: np.ndarray
    end: np.ndarray

    def bin(self, tx: int, ty: int):
        t = ty * self.tiles_x + tx
        return self.gids[self.start[t]:self.end[t]]


@dataclass
class BlendState:
    projected: Projected
    bins: TileBins
    final_t: np.ndarray
    last_idx: np.ndarray
    background: np.ndarray
    depth_norm: str
    depth_range: tuple[float, float]
    fg_mask: np.ndarray
    expected_depth: np.ndarray
    depth_lo: int
    depth_hi: int


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth_raw: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    blend_state: BlendState


def project_cloud(cloud: GaussianCloud, camera: Camera) -> Projected:
    n = len(cloud)
    out = Projected(np.zeros((n, 2)), np.zeros((n, 3)), np.zeros((n, 2)), np.zeros(n),
                    np.zeros(n), np.zeros((n, 3)), np.zeros(n, dtype=np.bool_))
    cx, cy = camera.principal_point
    K.preprocess(cloud.means, cloud.log_scales, cloud.quats, cloud.f_dc, cloud.opacity_logits,
                 np.ascontiguousarray(camera.rotation), np.ascontiguousarray(camera.position),
                 camera.focal, cx, cy, camera.near, COV2D_FLOOR,
                 out.xy, out.conic, out.extent, out.depth, out.opacity, out.rgb, out.valid)
    return out


def bin_gaussians(proj: Projected, width: int, height: int) -> TileBins:
    tiles_x = -(-width // TILE)
    tiles_y = -(-height // TILE)
    idx = np.flatnonzero(proj.valid)
    x, y = proj.xy[idx, 0], proj.xy[idx, 1]
    ex, ey = proj.extent[idx, 0], proj.extent[idx, 1]
    with np.errstate(invalid="ignore"):
        x0 = np.floor(np.clip((x - ex) / TILE, -1, tiles_x)).astype(np.int64)
        x1 = np.floor(np.clip((x + ex) / TILE, -1, tiles_x)).astype(np.int64)
        y0 = np.floor(np.clip((y - ey) / TILE, -1, tiles_y)).astype(np.int64)
        y1 = np.floor(np.clip((y + ey) / TILE, -1, tiles_y)).astype(np.int64)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    x1 = np.minimum(x1, tiles_x - 1)
    y1 = np.minimum(y1, tiles_y - 1)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    gids = np.repeat(idx, counts)
    local = np.arange(gids.size) - np.repeat(np.cumsum(counts) - counts, counts)
    nxr = np.repeat(nx, counts)
    tile = (np.repeat(y0, counts) + local // np.maximum(nxr, 1)) * tiles_x \
        + np.repeat(x0, counts) + local % np.maximum(nxr, 1)
    order = np.lexsort((gids, proj.depth[gids], tile))
    gids = np.ascontiguousarray(gids[order])
    tile = np.ascontiguousarray(tile[order])
    all_tiles = np.arange(tiles_x * tiles_y)
    start = np.searchsorted(tile, all_tiles, side="left").astype(np.int64)
    end = np.searchsorted(tile, all_tiles, side="right").astype(np.int64)
    return TileBins(tiles_x, tiles_y, gids, tile, start, end)


def _normalize_depth(depth_raw, alpha, mode, depth_range):
    fg = alpha > 0.5
    expected = np.where(fg, depth_raw / np.where(fg, alpha, 1.0), 0.0)
    depth = np.ones_like(depth_raw)
    lo = hi = -1
    if mode == "minmax":
        if fg.any():
            flat = np.where(fg, expected, np.inf).ravel()
            lo = int(np.argmin(flat))
            hi = int(np.argmax(np.where(fg, expected, -np.inf).ravel()))
            dmin, dmax = flat[lo], flat[hi]
            if dmax - dmin > 1e-12:
                depth[fg] = (expected[fg] - dmin) / (dmax - dmin)
            else:
                depth[fg] = 0.5
                lo = hi = -1
    else:
        near, far = depth_range
        depth[fg] = np.clip((expected[fg] - near) / (far - near), 0.0, 1.0)
    return depth, fg, expected, lo, hi


def render(cloud: GaussianCloud, camera: Camera, background=(0.0, 0.0, 0.0),
           depth_norm: str = "minmax", depth_range=(0.5, 3.0)) -> RenderOutput:
    if depth_norm not in DEPTH_NORM_MODES:
        raise ParameterError(f"depth_norm must be one of {DEPTH_NORM_MODES}, got {depth_norm!r}")
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    w, h = camera.width, camera.height
    proj = project_cloud(cloud, camera)
    bins = bin_gaussians(proj, w, h)
    rgb = np.empty((h, w, 3))
    depth_raw = np.empty((h, w))
    alpha = np.empty((h, w))
    final_t = np.empty((h, w))
    last_idx = np.empty((h, w), dtype=np.int64)
    K.rasterize_forward(bins.start, bins.end, bins.gids, proj.xy, proj.conic, proj.opacity,
                        proj.rgb, proj.depth, w, h, bins.tiles_x, bg,
                        rgb, depth_raw, alpha, final_t, last_idx)
    depth, fg, expected, lo, hi = _normalize_depth(depth_raw, alpha, depth_norm, depth_range)
    state = BlendState(proj, bins, final_t, last_idx, bg, depth_norm, tuple(depth_range),
                       fg, expected, lo, hi)
    return RenderOutput(rgb, depth_raw, depth, alpha, state)


def _depth_adjoint(state: BlendState, depth_raw, alpha, g_depth):
    """Map dL/d(normalized depth) to dL/d(depth_raw) and extra dL/d(alpha)."""
    fg = state.fg_mask
    e = state.expected_depth
    g_e = np.zeros_like(e)
    if state.depth_norm == "minmax":
        if state.depth_lo >= 0:
            lo = np.unravel_index(state.depth_lo, e.shape)
            hi = np.unravel_index(state.depth_hi, e.shape)
            e_lo, e_hi = e[lo], e[hi]
            span = e_hi - e_lo
            gn = np.where(fg, g_depth, 0.0)
            g_e = gn / span
            g_e[lo] += np.sum(gn * (e - e_hi)) / span**2
            g_e[hi] -= np.sum(gn * (e - e_lo)) / span**2
            g_e = np.where(fg, g_e, 0.0)
    else:
        near, far = state.depth_range
        inside = fg & (e > near) & (e < far)
        g_e = np.where(inside, g_depth / (far - near), 0.0)
    safe_alpha = np.where(fg, alpha, 1.0)
    g_raw = np.where(fg, g_e / safe_alpha, 0.0)
    g_alpha = np.where(fg, -g_e * depth_raw / safe_alpha**2, 0.0)
    return g_raw, g_alpha


def _as_adjoint(arr, shape, name):
    if arr is None:
        return np.zeros(shape)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape == shape + (1,):
        arr = arr[..., 0]
    if arr.shape != shape:
        raise ParameterError(f"{name} has shape {arr.shape}, expected {shape}")
    return np.ascontiguousarray(arr)


def render_backward(cloud: GaussianCloud, camera: Camera, output: RenderOutput,
                    dL_drgb=None, dL_ddepth=None, dL_dalpha=None,
                    dL_ddepth_raw=None) -> CloudGradients:
    """Exact gradients of a scalar loss w.r.t. the cloud's raw parameters.

    ``dL_ddepth`` is the adjoint of the normalized depth; ``dL_ddepth_raw``
    optionally adds an adjoint for the un-normalized blended depth.
    """
    h, w = camera.height, camera.width
    if output.rgb.shape != (h, w, 3):
        raise ParameterError("render output does not match the camera resolution")
    n = len(cloud)
    state = output.blend_state
    if state.projected.xy.shape[0] != n:
        raise ParameterError("render output was produced for a different cloud size")
    g_rgb = _as_adjoint(dL_drgb, (h, w, 3), "dL_drgb")
    g_norm = _as_adjoint(dL_ddepth, (h, w), "dL_ddepth")
    g_alpha = _as_adjoint(dL_dalpha, (h, w), "dL_dalpha").copy()
    g_raw = _as_adjoint(dL_ddepth_raw, (h, w), "dL_ddepth_raw").copy()
    if np.any(g_norm):
        extra_raw, extra_alpha = _depth_adjoint(state, output.depth_raw, output.alpha, g_norm)
        g_raw += extra_raw
        g_alpha += extra_alpha

    proj, bins = state.projected, state.bins
    m = bins.gids.size
    s_xy = np.zeros((m, 2))
    s_conic = np.zeros((m, 3))
    s_opac = np.zeros(m)
    s_rgb = np.zeros((m, 3))
    s_depth = np.zeros(m)
    K.rasterize_backward(bins.start, bins.end, bins.gids, proj.xy, proj.conic, proj.opacity,
                         proj.rgb, proj.depth, w, h, bins.tiles_x, state.background,
                         state.final_t, state.last_idx, g_rgb, g_raw, g_alpha,
                         s_xy, s_conic, s_opac, s_rgb, s_depth)
    g_xy = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_col = np.zeros((n, 3))
    g_dep = np.zeros(n)
    K.reduce_slots(bins.gids, s_xy, s_conic, s_opac, s_rgb, s_depth,
                   g_xy, g_conic, g_opac, g_col, g_dep)

    grads = CloudGradients.zeros(n)
    K.preprocess_backward(cloud.means, cloud.log_scales, cloud.quats, cloud.f_dc,
                          np.ascontiguousarray(camera.rotation),
                          np.ascontiguousarray(camera.position), camera.focal, COV2D_FLOOR,
                          proj.valid, proj.opacity, g_xy, g_conic, g_opac, g_col, g_dep,
                          grads.means, grads.log_scales, grads.quats, grads.f_dc,
                          grads.opacity_logits)
    # densification statistic: screen-space position gradient in NDC units
    hit = np.zeros(n, dtype=bool)
    hit[bins.gids] = True
    ndc = g_xy * np.array([0.5 * w, 0.5 * h])
    grads.grad2d_accum[hit] = np.hypot(ndc[hit, 0], ndc[hit, 1])
    grads.hit_count[hit] = 1
    grads.means_accum[:] = grads.means
    return grads
