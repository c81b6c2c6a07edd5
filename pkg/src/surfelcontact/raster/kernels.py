"""numba kernels for the tile rasterizer.

Per pixel the candidate surfels of the pixel's tile are intersected with the
pixel ray, sorted by (depth, index) and composited front to back. The backward
kernel recomputes each pixel's list instead of storing it.
"""
import math

import numpy as np
from numba import njit

ALPHA_MAX = 0.99
T_MIN = 1e-4
CUTOFF_RHO = 9.0  # 3 sigma, squared
FILTER_INV_VAR = 4.0  # 1 / 0.5px^2
PARALLEL_EPS = 1e-9


@njit(cache=True)
def bin_tiles(bbox, valid, n_tx, n_ty, tile):
    """Return (offsets, ids): surfel ids per tile in ascending id order."""
    n = bbox.shape[0]
    counts = np.zeros(n_tx * n_ty, dtype=np.int64)
    for k in range(n):
        if not valid[k]:
            continue
        tx0 = bbox[k, 0] // tile
        tx1 = bbox[k, 2] // tile
        ty0 = bbox[k, 1] // tile
        ty1 = bbox[k, 3] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * n_tx + tx] += 1
    offsets = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
    for i in range(n_tx * n_ty):
        offsets[i + 1] = offsets[i] + counts[i]
    ids = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for k in range(n):
        if not valid[k]:
            continue
        tx0 = bbox[k, 0] // tile
        tx1 = bbox[k, 2] // tile
        ty0 = bbox[k, 1] // tile
        ty1 = bbox[k, 3] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * n_tx + tx
                ids[fill[t]] = k
                fill[t] += 1
    return offsets, ids


@njit(cache=True)
def _gather(px, py, o, d, ids, lo, hi, bbox, means, tu, tv, nrm, su, sv, mu2d, zc, near,
            out_idx, out_z):
    """Collect contributing candidates of one pixel, sorted by (depth, id)."""
    m = 0
    for j in range(lo, hi):
        k = ids[j]
        if px < bbox[k, 0] or px > bbox[k, 2] or py < bbox[k, 1] or py > bbox[k, 3]:
            continue
        hit, rho, t, u, v, e0, e1, e2, b, plane = _intersect(px, py, o, d, k, means, tu, tv,
                                                              nrm, su, sv, mu2d, zc, near)
        if not hit:
            continue
        out_idx[m] = k
        out_z[m] = t
        m += 1
    order = np.argsort(out_z[:m], kind="mergesort")
    return m, order


@njit(cache=True)
def _intersect(px, py, o, d, k, means, tu, tv, nrm, su, sv, mu2d, zc, near):
    """Weight argument and depth of surfel ``k`` on one pixel ray.

    Returns ``(hit, rho, depth, u, v, e0, e1, e2, b, plane)``. ``plane`` is False
    when the screen-space filter wins; the depth is then the center's camera depth.
    """
    w0 = means[k, 0] - o[0]
    w1 = means[k, 1] - o[1]
    w2 = means[k, 2] - o[2]
    a = nrm[k, 0] * w0 + nrm[k, 1] * w1 + nrm[k, 2] * w2
    b = nrm[k, 0] * d[0] + nrm[k, 1] * d[1] + nrm[k, 2] * d[2]
    dn = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    t = 0.0
    u = 0.0
    v = 0.0
    e0 = 0.0
    e1 = 0.0
    e2 = 0.0
    rho3 = np.inf
    if abs(b) >= PARALLEL_EPS * dn:
        t = a / b
        if t > near:
            e0 = t * d[0] - w0
            e1 = t * d[1] - w1
            e2 = t * d[2] - w2
            u = (tu[k, 0] * e0 + tu[k, 1] * e1 + tu[k, 2] * e2) / su[k]
            v = (tv[k, 0] * e0 + tv[k, 1] * e1 + tv[k, 2] * e2) / sv[k]
            rho3 = u * u + v * v
    dx = px - mu2d[k, 0]
    dy = py - mu2d[k, 1]
    rho2 = FILTER_INV_VAR * (dx * dx + dy * dy)
    plane = rho3 <= rho2
    if plane:
        rho = rho3
        z = t
    else:
        rho = rho2
        z = zc[k]
    if rho > CUTOFF_RHO:
        return False, rho, z, u, v, e0, e1, e2, b, plane
    return True, rho, z, u, v, e0, e1, e2, b, plane


@njit(cache=True)
def _ray(px, py, Rwc, fx, fy, cx, cy, d):
    a = (px - cx) / fx
    c = (py - cy) / fy
    for i in range(3):
        d[i] = Rwc[0, i] * a + Rwc[1, i] * c + Rwc[2, i]


@njit(cache=True)
def forward(means, tu, tv, nrm, nsign, su, sv, opac, colors, mu2d, zc, bbox, offsets, ids,
            Rwc, o, fx, fy, cx, cy, width, height, tile, near, bg):
    n_tx = (width + tile - 1) // tile
    color = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    depth = np.zeros((height, width))
    normal = np.zeros((height, width, 3))
    dist = np.zeros((height, width))
    trans = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    touched = np.zeros(means.shape[0], dtype=np.int64)
    d = np.empty(3)
    max_list = 0
    for i in range(offsets.shape[0] - 1):
        max_list = max(max_list, offsets[i + 1] - offsets[i])
    buf_idx = np.empty(max_list, dtype=np.int64)
    buf_z = np.empty(max_list)
    for ti in range(offsets.shape[0] - 1):
        lo = offsets[ti]
        hi = offsets[ti + 1]
        ty = ti // n_tx
        tx = ti - ty * n_tx
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                _ray(px, py, Rwc, fx, fy, cx, cy, d)
                m, order = _gather(px, py, o, d, ids, lo, hi, bbox, means, tu, tv, nrm, su,
                                   sv, mu2d, zc, near, buf_idx, buf_z)
                T = 1.0
                wsum = 0.0
                zsum = 0.0
                dacc = 0.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                cnt = 0
                for jj in range(m):
                    k = buf_idx[order[jj]]
                    hit, rho, t, u, v, e0, e1, e2, b, plane = _intersect(
                        px, py, o, d, k, means, tu, tv, nrm, su, sv, mu2d, zc, near)
                    a = opac[k] * math.exp(-0.5 * rho)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    test_T = T * (1.0 - a)
                    if test_T < T_MIN:
                        break
                    w = a * T
                    dacc += w * (t * wsum - zsum)
                    wsum += w
                    zsum += w * t
                    c0 += w * colors[k, 0]
                    c1 += w * colors[k, 1]
                    c2 += w * colors[k, 2]
                    s = nsign[k]
                    n0 += w * s * nrm[k, 0]
                    n1 += w * s * nrm[k, 1]
                    n2 += w * s * nrm[k, 2]
                    T = test_T
                    touched[k] += 1
                    cnt += 1
                color[py, px, 0] = c0 + T * bg[0]
                color[py, px, 1] = c1 + T * bg[1]
                color[py, px, 2] = c2 + T * bg[2]
                alpha[py, px] = wsum
                depth[py, px] = zsum / wsum if wsum > 0.0 else 0.0
                normal[py, px, 0] = n0
                normal[py, px, 1] = n1
                normal[py, px, 2] = n2
                dist[py, px] = dacc
                trans[py, px] = T
                n_contrib[py, px] = cnt
    return color, alpha, depth, normal, dist, trans, n_contrib, touched


@njit(cache=True)
def backward(means, tu, tv, nrm, nsign, su, sv, opac, colors, mu2d, zc, bbox, offsets, ids,
             Rwc, o, fx, fy, cx, cy, width, height, tile, near, bg, n_contrib, trans,
             g_color, g_alpha, g_depth, g_normal, g_dist):
    n = means.shape[0]
    n_tx = (width + tile - 1) // tile
    g_means = np.zeros((n, 3))
    g_tu = np.zeros((n, 3))
    g_tv = np.zeros((n, 3))
    g_su = np.zeros(n)
    g_sv = np.zeros(n)
    g_op = np.zeros(n)
    g_col = np.zeros((n, 3))
    g_mu = np.zeros((n, 2))
    d = np.empty(3)
    max_list = 0
    for i in range(offsets.shape[0] - 1):
        max_list = max(max_list, offsets[i + 1] - offsets[i])
    buf_idx = np.empty(max_list, dtype=np.int64)
    buf_z = np.empty(max_list)
    seq = np.empty(max_list, dtype=np.int64)
    s_w = np.empty(max_list)
    s_T = np.empty(max_list)
    s_a = np.empty(max_list)
    s_z = np.empty(max_list)
    s_wl = np.empty(max_list)
    s_zl = np.empty(max_list)
    for ti in range(offsets.shape[0] - 1):
        lo = offsets[ti]
        hi = offsets[ti + 1]
        ty = ti // n_tx
        tx = ti - ty * n_tx
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                cnt = n_contrib[py, px]
                if cnt == 0:
                    continue
                _ray(px, py, Rwc, fx, fy, cx, cy, d)
                m, order = _gather(px, py, o, d, ids, lo, hi, bbox, means, tu, tv, nrm, su,
                                   sv, mu2d, zc, near, buf_idx, buf_z)
                T = 1.0
                wsum = 0.0
                zsum = 0.0
                for jj in range(cnt):
                    k = buf_idx[order[jj]]
                    hit, rho, t, u, v, e0, e1, e2, b, plane = _intersect(
                        px, py, o, d, k, means, tu, tv, nrm, su, sv, mu2d, zc, near)
                    a = opac[k] * math.exp(-0.5 * rho)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    seq[jj] = k
                    s_a[jj] = a
                    s_T[jj] = T
                    s_w[jj] = a * T
                    s_z[jj] = t
                    s_wl[jj] = wsum
                    s_zl[jj] = zsum
                    wsum += a * T
                    zsum += a * T * t
                    T = T * (1.0 - a)
                T_final = trans[py, px]
                dep = zsum / wsum if wsum > 0.0 else 0.0
                gC0 = g_color[py, px, 0]
                gC1 = g_color[py, px, 1]
                gC2 = g_color[py, px, 2]
                gA = g_alpha[py, px]
                gD = g_depth[py, px] / wsum if wsum > 0.0 else 0.0
                gN0 = g_normal[py, px, 0]
                gN1 = g_normal[py, px, 1]
                gN2 = g_normal[py, px, 2]
                gDist = g_dist[py, px]
                S = (gC0 * bg[0] + gC1 * bg[1] + gC2 * bg[2]) * T_final
                for jj in range(cnt - 1, -1, -1):
                    k = seq[jj]
                    w = s_w[jj]
                    z = s_z[jj]
                    wl = s_wl[jj]
                    zl = s_zl[jj]
                    wg = wsum - wl - w
                    zg = zsum - zl - w * z
                    sk = nsign[k]
                    gw = (gC0 * colors[k, 0] + gC1 * colors[k, 1] + gC2 * colors[k, 2] + gA
                          + gD * (z - dep)
                          + sk * (gN0 * nrm[k, 0] + gN1 * nrm[k, 1] + gN2 * nrm[k, 2])
                          + gDist * (z * wl - zl + zg - z * wg))
                    gz = gD * w + gDist * w * (wl - wg)
                    a = s_a[jj]
                    ga = gw * s_T[jj] - S / (1.0 - a)
                    S += gw * w
                    g_col[k, 0] += gC0 * w
                    g_col[k, 1] += gC1 * w
                    g_col[k, 2] += gC2 * w

                    hit, rho, t, u, v, e0, e1, e2, b, plane = _intersect(
                        px, py, o, d, k, means, tu, tv, nrm, su, sv, mu2d, zc, near)
                    G = math.exp(-0.5 * rho)
                    gu = 0.0
                    gv = 0.0
                    if opac[k] * G <= ALPHA_MAX:
                        g_op[k] += ga * G
                        grho = -0.5 * G * opac[k] * ga
                        if plane:
                            gu = grho * 2.0 * u
                            gv = grho * 2.0 * v
                        else:
                            dx = px - mu2d[k, 0]
                            dy = py - mu2d[k, 1]
                            g_mu[k, 0] += -2.0 * FILTER_INV_VAR * dx * grho
                            g_mu[k, 1] += -2.0 * FILTER_INV_VAR * dy * grho
                    if plane:
                        # geometry chain: u, v, t -> mean, tangents, scales
                        ge0 = gu * tu[k, 0] / su[k] + gv * tv[k, 0] / sv[k]
                        ge1 = gu * tu[k, 1] / su[k] + gv * tv[k, 1] / sv[k]
                        ge2 = gu * tu[k, 2] / su[k] + gv * tv[k, 2] / sv[k]
                        gt = gz + ge0 * d[0] + ge1 * d[1] + ge2 * d[2]
                        g_means[k, 0] += -ge0 + gt * nrm[k, 0] / b
                        g_means[k, 1] += -ge1 + gt * nrm[k, 1] / b
                        g_means[k, 2] += -ge2 + gt * nrm[k, 2] / b
                    else:
                        # center depth: z = camera axis . (mean - origin)
                        gt = 0.0
                        g_means[k, 0] += gz * Rwc[2, 0]
                        g_means[k, 1] += gz * Rwc[2, 1]
                        g_means[k, 2] += gz * Rwc[2, 2]
                        b = 1.0
                    gn0 = -gt * e0 / b + sk * w * gN0
                    gn1 = -gt * e1 / b + sk * w * gN1
                    gn2 = -gt * e2 / b + sk * w * gN2
                    # n = tu x tv
                    g_tu[k, 0] += gu * e0 / su[k] + (tv[k, 1] * gn2 - tv[k, 2] * gn1)
                    g_tu[k, 1] += gu * e1 / su[k] + (tv[k, 2] * gn0 - tv[k, 0] * gn2)
                    g_tu[k, 2] += gu * e2 / su[k] + (tv[k, 0] * gn1 - tv[k, 1] * gn0)
                    g_tv[k, 0] += gv * e0 / sv[k] + (gn1 * tu[k, 2] - gn2 * tu[k, 1])
                    g_tv[k, 1] += gv * e1 / sv[k] + (gn2 * tu[k, 0] - gn0 * tu[k, 2])
                    g_tv[k, 2] += gv * e2 / sv[k] + (gn0 * tu[k, 1] - gn1 * tu[k, 0])
                    g_su[k] += -gu * u / su[k]
                    g_sv[k] += -gv * v / sv[k]
    return g_means, g_tu, g_tv, g_su, g_sv, g_op, g_col, g_mu
