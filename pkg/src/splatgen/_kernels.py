"""Numba kernels behind the tile rasterizer.

All loops are scalar float64 code; parallel loops only ever write to
disjoint slots, and every cross-slot reduction runs serially in a fixed
order, so results do not depend on the thread count.
"""

import math

import numpy as np
from numba import njit, prange

TILE = 16
# footprint: Mahalanobis^2 beyond CUTOFF contributes nothing; between
# TAPER_START and CUTOFF the Gaussian is faded out with a C1 smoothstep
CUTOFF = 9.0
TAPER_START = 6.25
MAX_SIGMA = 0.99
T_STOP = 1e-4
MAX_CONTRIB = 1024
SH_C0 = 0.28209479177387814


@njit(cache=True, inline="always")
def _footprint(m):
    """Return (window, d window / d m) for squared Mahalanobis distance m."""
    if m <= TAPER_START:
        return 1.0, 0.0
    s = (m - TAPER_START) / (CUTOFF - TAPER_START)
    w = 1.0 - s * s * (3.0 - 2.0 * s)
    dw = -6.0 * s * (1.0 - s) / (CUTOFF - TAPER_START)
    return w, dw


@njit(cache=True, inline="always")
def _row_candidates(s, e, gids, xy, conic, py, x_lo_tile, x_hi_tile, cand, lo, hi):
    """Collect list positions whose 3-sigma ellipse meets row py inside the tile.

    The x-interval is padded, so the exact cutoff test stays the only
    decision that matters; this is purely a conservative prefilter.
    """
    n = 0
    for k in range(s, e):
        g = gids[k]
        dy = py - xy[g, 1]
        a = conic[g, 0]
        bdy = conic[g, 1] * dy
        disc = bdy * bdy - a * (conic[g, 2] * dy * dy - CUTOFF)
        if disc < 0.0:
            continue
        r = math.sqrt(disc)
        pad = 1e-6 * (1.0 + abs(xy[g, 0]))
        x0 = xy[g, 0] + (-bdy - r) / a - pad
        x1 = xy[g, 0] + (-bdy + r) / a + pad
        if x1 < x_lo_tile or x0 > x_hi_tile:
            continue
        cand[n] = k
        lo[n] = x0
        hi[n] = x1
        n += 1
    return n


@njit(cache=True, inline="always")
def _quat_rot(qw, qx, qy, qz, out):
    n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    w = qw / n
    x = qx / n
    y = qy / n
    z = qz / n
    out[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[0, 1] = 2.0 * (x * y - w * z)
    out[0, 2] = 2.0 * (x * z + w * y)
    out[1, 0] = 2.0 * (x * y + w * z)
    out[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[1, 2] = 2.0 * (y * z - w * x)
    out[2, 0] = 2.0 * (x * z - w * y)
    out[2, 1] = 2.0 * (y * z + w * x)
    out[2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return n


@njit(cache=True, parallel=True)
def preprocess(means, log_scales, quats, f_dc, opacity_logits, view_rot, cam_pos,
               focal, cx, cy, near, floor,
               xy, conic, extent, depth, opac, rgb, valid):
    n = means.shape[0]
    for i in prange(n):
        px = means[i, 0] - cam_pos[0]
        py = means[i, 1] - cam_pos[1]
        pz = means[i, 2] - cam_pos[2]
        tx = view_rot[0, 0] * px + view_rot[0, 1] * py + view_rot[0, 2] * pz
        ty = view_rot[1, 0] * px + view_rot[1, 1] * py + view_rot[1, 2] * pz
        tz = view_rot[2, 0] * px + view_rot[2, 1] * py + view_rot[2, 2] * pz
        depth[i] = tz
        opac[i] = 1.0 / (1.0 + math.exp(-opacity_logits[i]))
        for c in range(3):
            v = 0.5 + SH_C0 * f_dc[i, c]
            rgb[i, c] = min(max(v, 0.0), 1.0)
        if not tz > near:
            valid[i] = False
            continue
        rq = np.empty((3, 3))
        _quat_rot(quats[i, 0], quats[i, 1], quats[i, 2], quats[i, 3], rq)
        # M = Rq diag(s); Sigma3 = M M^T
        m = np.empty((3, 3))
        for r in range(3):
            for k in range(3):
                m[r, k] = rq[r, k] * math.exp(log_scales[i, k])
        # T = J W  (2x3)
        j00 = focal / tz
        j02 = -focal * tx / (tz * tz)
        j11 = focal / tz
        j12 = -focal * ty / (tz * tz)
        t = np.empty((2, 3))
        for k in range(3):
            t[0, k] = j00 * view_rot[0, k] + j02 * view_rot[2, k]
            t[1, k] = j11 * view_rot[1, k] + j12 * view_rot[2, k]
        # TM = T M (2x3) -> Sigma2 = TM TM^T
        a = 0.0
        b = 0.0
        c = 0.0
        for k in range(3):
            u0 = t[0, 0] * m[0, k] + t[0, 1] * m[1, k] + t[0, 2] * m[2, k]
            u1 = t[1, 0] * m[0, k] + t[1, 1] * m[1, k] + t[1, 2] * m[2, k]
            a += u0 * u0
            b += u0 * u1
            c += u1 * u1
        a += floor
        c += floor
        det = a * c - b * b
        if not det > 0.0:
            valid[i] = False
            continue
        conic[i, 0] = c / det
        conic[i, 1] = -b / det
        conic[i, 2] = a / det
        xy[i, 0] = focal * tx / tz + cx
        xy[i, 1] = focal * ty / tz + cy
        extent[i, 0] = 3.0 * math.sqrt(a) * (1.0 + 1e-9)
        extent[i, 1] = 3.0 * math.sqrt(c) * (1.0 + 1e-9)
        valid[i] = True


@njit(cache=True, parallel=True)
def rasterize_forward(tile_start, tile_end, gids, xy, conic, opac, rgb, depth,
                      width, height, tiles_x, bg,
                      out_rgb, out_depth, out_alpha, final_t, last_idx):
    n_tiles = tile_start.shape[0]
    for tile in prange(n_tiles):
        tyi = tile // tiles_x
        txi = tile - tyi * tiles_x
        s = tile_start[tile]
        e = tile_end[tile]
        cand = np.empty(e - s, dtype=np.int64)
        lo = np.empty(e - s)
        hi = np.empty(e - s)
        x_first = txi * TILE
        x_last = min((txi + 1) * TILE, width) - 1
        for py in range(tyi * TILE, min((tyi + 1) * TILE, height)):
            nc = _row_candidates(s, e, gids, xy, conic, py, x_first, x_last, cand, lo, hi)
            for px in range(x_first, x_last + 1):
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                count = 0
                last = s
                for j in range(nc):
                    if px < lo[j] or px > hi[j]:
                        continue
                    k = cand[j]
                    g = gids[k]
                    dx = px - xy[g, 0]
                    dy = py - xy[g, 1]
                    m = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if m >= CUTOFF:
                        continue
                    w, _ = _footprint(m)
                    sig = opac[g] * math.exp(-0.5 * m) * w
                    if sig > MAX_SIGMA:
                        sig = MAX_SIGMA
                    wt = sig * trans
                    c0 += rgb[g, 0] * wt
                    c1 += rgb[g, 1] * wt
                    c2 += rgb[g, 2] * wt
                    d += depth[g] * wt
                    trans *= 1.0 - sig
                    count += 1
                    last = k + 1
                    if trans < T_STOP or count >= MAX_CONTRIB:
                        break
                out_rgb[py, px, 0] = c0 + trans * bg[0]
                out_rgb[py, px, 1] = c1 + trans * bg[1]
                out_rgb[py, px, 2] = c2 + trans * bg[2]
                out_depth[py, px] = d
                out_alpha[py, px] = 1.0 - trans
                final_t[py, px] = trans
                last_idx[py, px] = last


@njit(cache=True, parallel=True)
def rasterize_backward(tile_start, tile_end, gids, xy, conic, opac, rgb, depth,
                       width, height, tiles_x, bg, final_t, last_idx,
                       g_rgb, g_depth, g_alpha,
                       s_xy, s_conic, s_opac, s_rgb, s_depth):
    """Per-intersection adjoints; slot k belongs to exactly one tile."""
    n_tiles = tile_start.shape[0]
    for tile in prange(n_tiles):
        tyi = tile // tiles_x
        txi = tile - tyi * tiles_x
        s = tile_start[tile]
        e = tile_end[tile]
        cand = np.empty(e - s, dtype=np.int64)
        lo = np.empty(e - s)
        hi = np.empty(e - s)
        x_first = txi * TILE
        x_last = min((txi + 1) * TILE, width) - 1
        for py in range(tyi * TILE, min((tyi + 1) * TILE, height)):
            nc = _row_candidates(s, e, gids, xy, conic, py, x_first, x_last, cand, lo, hi)
            for px in range(x_first, x_last + 1):
                gr0 = g_rgb[py, px, 0]
                gr1 = g_rgb[py, px, 1]
                gr2 = g_rgb[py, px, 2]
                gd = g_depth[py, px]
                ga = g_alpha[py, px]
                if gr0 == 0.0 and gr1 == 0.0 and gr2 == 0.0 and gd == 0.0 and ga == 0.0:
                    continue
                trans = final_t[py, px]
                b0 = bg[0]
                b1 = bg[1]
                b2 = bg[2]
                bd = 0.0
                ba = 0.0
                stop = last_idx[py, px]
                for j in range(nc - 1, -1, -1):
                    k = cand[j]
                    if k >= stop or px < lo[j] or px > hi[j]:
                        continue
                    g = gids[k]
                    dx = px - xy[g, 0]
                    dy = py - xy[g, 1]
                    m = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if m >= CUTOFF:
                        continue
                    w, dw = _footprint(m)
                    gauss = math.exp(-0.5 * m)
                    sig = opac[g] * gauss * w
                    clamped = sig > MAX_SIGMA
                    if clamped:
                        sig = MAX_SIGMA
                    t_i = trans / (1.0 - sig)
                    wt = sig * t_i
                    s_rgb[k, 0] += gr0 * wt
                    s_rgb[k, 1] += gr1 * wt
                    s_rgb[k, 2] += gr2 * wt
                    s_depth[k] += gd * wt
                    dsig = t_i * (gr0 * (rgb[g, 0] - b0) + gr1 * (rgb[g, 1] - b1)
                                  + gr2 * (rgb[g, 2] - b2) + gd * (depth[g] - bd)
                                  + ga * (1.0 - ba))
                    b0 = sig * rgb[g, 0] + (1.0 - sig) * b0
                    b1 = sig * rgb[g, 1] + (1.0 - sig) * b1
                    b2 = sig * rgb[g, 2] + (1.0 - sig) * b2
                    bd = sig * depth[g] + (1.0 - sig) * bd
                    ba = sig + (1.0 - sig) * ba
                    trans = t_i
                    if clamped:
                        continue
                    s_opac[k] += dsig * gauss * w
                    dm = dsig * opac[g] * gauss * (dw - 0.5 * w)
                    s_conic[k, 0] += dm * dx * dx
                    s_conic[k, 1] += dm * 2.0 * dx * dy
                    s_conic[k, 2] += dm * dy * dy
                    s_xy[k, 0] -= dm * 2.0 * (conic[g, 0] * dx + conic[g, 1] * dy)
                    s_xy[k, 1] -= dm * 2.0 * (conic[g, 1] * dx + conic[g, 2] * dy)


@njit(cache=True)
def reduce_slots(gids, s_xy, s_conic, s_opac, s_rgb, s_depth,
                 g_xy, g_conic, g_opac, g_rgb, g_depth):
    for k in range(gids.shape[0]):
        g = gids[k]
        g_xy[g, 0] += s_xy[k, 0]
        g_xy[g, 1] += s_xy[k, 1]
        g_conic[g, 0] += s_conic[k, 0]
        g_conic[g, 1] += s_conic[k, 1]
        g_conic[g, 2] += s_conic[k, 2]
        g_opac[g] += s_opac[k]
        g_rgb[g, 0] += s_rgb[k, 0]
        g_rgb[g, 1] += s_rgb[k, 1]
        g_rgb[g, 2] += s_rgb[k, 2]
        g_depth[g] += s_depth[k]


@njit(cache=True, parallel=True)
def preprocess_backward(means, log_scales, quats, f_dc, view_rot, cam_pos, focal, floor,
                        valid, opac, g_xy, g_conic, g_opac, g_rgb, g_depth,
                        d_means, d_log_scales, d_quats, d_f_dc, d_logits):
    n = means.shape[0]
    for i in prange(n):
        d_logits[i] = g_opac[i] * opac[i] * (1.0 - opac[i])
        for c in range(3):
            v = 0.5 + SH_C0 * f_dc[i, c]
            d_f_dc[i, c] = g_rgb[i, c] * SH_C0 if (v > 0.0 and v < 1.0) else 0.0
        if not valid[i]:
            continue
        px = means[i, 0] - cam_pos[0]
        py = means[i, 1] - cam_pos[1]
        pz = means[i, 2] - cam_pos[2]
        tx = view_rot[0, 0] * px + view_rot[0, 1] * py + view_rot[0, 2] * pz
        ty = view_rot[1, 0] * px + view_rot[1, 1] * py + view_rot[1, 2] * pz
        tz = view_rot[2, 0] * px + view_rot[2, 1] * py + view_rot[2, 2] * pz

        rq = np.empty((3, 3))
        qn = _quat_rot(quats[i, 0], quats[i, 1], quats[i, 2], quats[i, 3], rq)
        sc = np.empty(3)
        for k in range(3):
            sc[k] = math.exp(log_scales[i, k])
        m = np.empty((3, 3))
        for r in range(3):
            for k in range(3):
                m[r, k] = rq[r, k] * sc[k]
        sig3 = np.zeros((3, 3))
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += m[r, k] * m[c, k]
                sig3[r, c] = acc
        iz = 1.0 / tz
        j00 = focal * iz
        j02 = -focal * tx * iz * iz
        j11 = focal * iz
        j12 = -focal * ty * iz * iz
        t = np.empty((2, 3))
        for k in range(3):
            t[0, k] = j00 * view_rot[0, k] + j02 * view_rot[2, k]
            t[1, k] = j11 * view_rot[1, k] + j12 * view_rot[2, k]
        ts = np.zeros((2, 3))  # T Sigma3
        for r in range(2):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += t[r, k] * sig3[k, c]
                ts[r, c] = acc
        a = floor
        b = 0.0
        c_ = floor
        for k in range(3):
            a += ts[0, k] * t[0, k]
            b += ts[0, k] * t[1, k]
            c_ += ts[1, k] * t[1, k]
        det = a * c_ - b * b
        k00 = c_ / det
        k01 = -b / det
        k11 = a / det
        # dL/dK as a symmetric matrix, then dL/dSigma2 = -K G K
        h00 = g_conic[i, 0]
        h01 = 0.5 * g_conic[i, 1]
        h11 = g_conic[i, 2]
        kh00 = k00 * h00 + k01 * h01
        kh01 = k00 * h01 + k01 * h11
        kh10 = k01 * h00 + k11 * h01
        kh11 = k01 * h01 + k11 * h11
        s00 = -(kh00 * k00 + kh01 * k01)
        s01 = -(kh00 * k01 + kh01 * k11)
        s11 = -(kh10 * k01 + kh11 * k11)
        gs2 = np.empty((2, 2))
        gs2[0, 0] = s00
        gs2[0, 1] = s01
        gs2[1, 0] = s01
        gs2[1, 1] = s11
        # dL/dSigma3 = T^T G T ; dL/dT = 2 G T Sigma3
        gs3 = np.zeros((3, 3))
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for p in range(2):
                    for q in range(2):
                        acc += t[p, r] * gs2[p, q] * t[q, c]
                gs3[r, c] = acc
        gt = np.empty((2, 3))
        for r in range(2):
            for c in range(3):
                gt[r, c] = 2.0 * (gs2[r, 0] * ts[0, c] + gs2[r, 1] * ts[1, c])
        # dL/dJ = dL/dT W^T
        gj00 = 0.0
        gj02 = 0.0
        gj11 = 0.0
        gj12 = 0.0
        for k in range(3):
            gj00 += gt[0, k] * view_rot[0, k]
            gj02 += gt[0, k] * view_rot[2, k]
            gj11 += gt[1, k] * view_rot[1, k]
            gj12 += gt[1, k] * view_rot[2, k]
        gu = g_xy[i, 0]
        gv = g_xy[i, 1]
        gtx = gu * focal * iz - gj02 * focal * iz * iz
        gty = gv * focal * iz - gj12 * focal * iz * iz
        gtz = (-gu * focal * tx * iz * iz - gv * focal * ty * iz * iz + g_depth[i]
               - (gj00 + gj11) * focal * iz * iz
               + 2.0 * focal * iz * iz * iz * (gj02 * tx + gj12 * ty))
        for k in range(3):
            d_means[i, k] = view_rot[0, k] * gtx + view_rot[1, k] * gty + view_rot[2, k] * gtz
        # Sigma3 = M M^T -> dL/dM = 2 G3 M
        gm = np.empty((3, 3))
        for r in range(3):
            for k in range(3):
                gm[r, k] = 2.0 * (gs3[r, 0] * m[0, k] + gs3[r, 1] * m[1, k] + gs3[r, 2] * m[2, k])
        grq = np.empty((3, 3))
        for k in range(3):
            ds = 0.0
            for r in range(3):
                ds += gm[r, k] * rq[r, k]
                grq[r, k] = gm[r, k] * sc[k]
            d_log_scales[i, k] = ds * sc[k]
        w = quats[i, 0] / qn
        x = quats[i, 1] / qn
        y = quats[i, 2] / qn
        z = quats[i, 3] / qn
        gw = 2.0 * (-z * grq[0, 1] + y * grq[0, 2] + z * grq[1, 0] - x * grq[1, 2]
                    - y * grq[2, 0] + x * grq[2, 1])
        gx = 2.0 * (y * grq[0, 1] + z * grq[0, 2] + y * grq[1, 0] - 2.0 * x * grq[1, 1]
                    - w * grq[1, 2] + z * grq[2, 0] + w * grq[2, 1] - 2.0 * x * grq[2, 2])
        gy = 2.0 * (-2.0 * y * grq[0, 0] + x * grq[0, 1] + w * grq[0, 2] + x * grq[1, 0]
                    + z * grq[1, 2] - w * grq[2, 0] + z * grq[2, 1] - 2.0 * y * grq[2, 2])
        gz = 2.0 * (-2.0 * z * grq[0, 0] - w * grq[0, 1] + x * grq[0, 2] + w * grq[1, 0]
                    - 2.0 * z * grq[1, 1] + y * grq[1, 2] + x * grq[2, 0] + y * grq[2, 1])
        dot = w * gw + x * gx + y * gy + z * gz
        d_quats[i, 0] = (gw - w * dot) / qn
        d_quats[i, 1] = (gx - x * dot) / qn
        d_quats[i, 2] = (gy - y * dot) / qn
        d_quats[i, 3] = (gz - z * dot) / qn
