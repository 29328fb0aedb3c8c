"""Per-pixel splat blending kernels (numba).

All splat arrays are indexed by *sorted position* (front to back). ``M`` holds
the 3x3 block of the world-to-screen x UV-to-world transform row-major, rows
being the screen x, y and depth rows and columns (u, v, centre).

No fastmath anywhere: the tiled and the reference paths must agree bit for bit.
"""

import math

import numpy as np
from numba import njit, prange

N_SLOT = 16  # dM (9), d normal (3), d colour (3), d opacity (1)


@njit(cache=True)
def _intersect(M, cen, j, x, y, rho_cut, z_near):
    m00 = M[j, 0]
    m01 = M[j, 1]
    m02 = M[j, 2]
    m10 = M[j, 3]
    m11 = M[j, 4]
    m12 = M[j, 5]
    m20 = M[j, 6]
    m21 = M[j, 7]
    m22 = M[j, 8]
    k0 = x * m20 - m00
    k1 = x * m21 - m01
    k2 = x * m22 - m02
    l0 = y * m20 - m10
    l1 = y * m21 - m11
    l2 = y * m22 - m12
    den = k0 * l1 - k1 * l0
    if abs(den) < 1e-12:
        return False, 0.0, 0.0, 0.0, 0.0, False
    u = (k1 * l2 - k2 * l1) / den
    v = (k2 * l0 - k0 * l2) / den
    rho3 = u * u + v * v
    dx = cen[j, 0] - x
    dy = cen[j, 1] - y
    rho2 = 2.0 * (dx * dx + dy * dy)
    if rho3 <= rho2:
        rho = rho3
        z = m20 * u + m21 * v + m22
        is3d = True
    else:
        rho = rho2
        z = m22
        is3d = False
    if rho > rho_cut or z < z_near:
        return False, 0.0, 0.0, 0.0, 0.0, False
    return True, math.exp(-0.5 * rho), u, v, z, is3d


@njit(cache=True)
def _distortion(zs, ws, n):
    # insertion sort by depth, then sum_{i<j} w_i w_j (z_j - z_i) with running sums
    for i in range(1, n):
        z = zs[i]
        w = ws[i]
        k = i - 1
        while k >= 0 and zs[k] > z:
            zs[k + 1] = zs[k]
            ws[k + 1] = ws[k]
            k -= 1
        zs[k + 1] = z
        ws[k + 1] = w
    acc_w = 0.0
    acc_wz = 0.0
    total = 0.0
    for i in range(n):
        total += ws[i] * (zs[i] * acc_w - acc_wz)
        acc_w += ws[i]
        acc_wz += ws[i] * zs[i]
    return total


@njit(cache=True)
def _shade_pixel(px, py, ent, s0, s1, use_bbox, M, cen, opac, col, nrm, bbox, rho_cut, z_near, t_min, eps,
                 zs, ws, out_color, out_depth, out_weight, out_normal, out_dist, n_contrib, last_pos, t_final):
    x = float(px)
    y = float(py)
    T = 1.0
    wsum = 0.0
    zsum = 0.0
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    n0 = 0.0
    n1 = 0.0
    n2 = 0.0
    cnt = 0
    last = s0 - 1
    for pos in range(s0, s1):
        j = ent[pos]
        if use_bbox:
            if px < bbox[j, 0] or px > bbox[j, 1] or py < bbox[j, 2] or py > bbox[j, 3]:
                continue
        ok, G, u, v, z, is3d = _intersect(M, cen, j, x, y, rho_cut, z_near)
        if not ok:
            continue
        a = opac[j] * G
        w = T * a
        wsum += w
        zsum += w * z
        c0 += w * col[j, 0]
        c1 += w * col[j, 1]
        c2 += w * col[j, 2]
        n0 += w * nrm[j, 0]
        n1 += w * nrm[j, 1]
        n2 += w * nrm[j, 2]
        zs[cnt] = z
        ws[cnt] = w
        cnt += 1
        T = T * (1.0 - a)
        last = pos
        if T < t_min:
            break
    out_color[py, px, 0] = c0
    out_color[py, px, 1] = c1
    out_color[py, px, 2] = c2
    out_normal[py, px, 0] = n0
    out_normal[py, px, 1] = n1
    out_normal[py, px, 2] = n2
    out_weight[py, px] = wsum
    out_depth[py, px] = zsum / (wsum + eps)
    out_dist[py, px] = _distortion(zs, ws, cnt)
    n_contrib[py, px] = cnt
    last_pos[py, px] = last
    t_final[py, px] = T


@njit(cache=True)
def _grow(zs, ws, cap):
    nz = np.empty((zs.shape[0], cap))
    nw = np.empty((zs.shape[0], cap))
    nz[:, : zs.shape[1]] = zs
    nw[:, : zs.shape[1]] = ws
    return nz, nw


@njit(cache=True)
def bin_tiles(bbox, ntx, nty, tile):
    n = bbox.shape[0]
    offsets = np.zeros(ntx * nty + 1, dtype=np.int64)
    for j in range(n):
        for ty in range(bbox[j, 2] // tile, bbox[j, 3] // tile + 1):
            for tx in range(bbox[j, 0] // tile, bbox[j, 1] // tile + 1):
                offsets[ty * ntx + tx + 1] += 1
    for t in range(ntx * nty):
        offsets[t + 1] += offsets[t]
    fill = offsets[:-1].copy()
    ent = np.empty(offsets[-1], dtype=np.int64)
    for j in range(n):
        for ty in range(bbox[j, 2] // tile, bbox[j, 3] // tile + 1):
            for tx in range(bbox[j, 0] // tile, bbox[j, 1] // tile + 1):
                t = ty * ntx + tx
                ent[fill[t]] = j
                fill[t] += 1
    return offsets, ent


@njit(cache=True, parallel=True)
def forward_tiled(M, cen, opac, col, nrm, bbox, offsets, ent, width, height, tile, rho_cut, z_near, t_min, eps,
                  out_color, out_depth, out_weight, out_normal, out_dist, n_contrib, last_pos, t_final):
    # Splat-major inside a tile: each splat touches only the pixels of its
    # bbox, while every pixel still sees the splats in global depth order.
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for t in prange(ntx * nty):
        x0 = (t % ntx) * tile
        y0 = (t // ntx) * tile
        x1 = min(x0 + tile, width) - 1
        y1 = min(y0 + tile, height) - 1
        tw = x1 - x0 + 1
        npx = tw * (y1 - y0 + 1)
        s0 = offsets[t]
        s1 = offsets[t + 1]
        cap = min(max(s1 - s0, 1), 64)
        T = np.ones(npx)
        acc = np.zeros((npx, 8))  # wsum, zsum, c0, c1, c2, n0, n1, n2
        cnt = np.zeros(npx, dtype=np.int64)
        last = np.full(npx, s0 - 1, dtype=np.int64)
        done = np.zeros(npx, dtype=np.bool_)
        zs = np.empty((npx, cap))
        ws = np.empty((npx, cap))
        alive = npx
        for pos in range(s0, s1):
            if alive == 0:
                break
            j = ent[pos]
            bx0 = max(bbox[j, 0], x0)
            bx1 = min(bbox[j, 1], x1)
            by0 = max(bbox[j, 2], y0)
            by1 = min(bbox[j, 3], y1)
            for py in range(by0, by1 + 1):
                for px in range(bx0, bx1 + 1):
                    p = (py - y0) * tw + (px - x0)
                    if done[p]:
                        continue
                    ok, G, u, v, z, is3d = _intersect(M, cen, j, float(px), float(py), rho_cut, z_near)
                    if not ok:
                        continue
                    a = opac[j] * G
                    Tp = T[p]
                    w = Tp * a
                    acc[p, 0] += w
                    acc[p, 1] += w * z
                    acc[p, 2] += w * col[j, 0]
                    acc[p, 3] += w * col[j, 1]
                    acc[p, 4] += w * col[j, 2]
                    acc[p, 5] += w * nrm[j, 0]
                    acc[p, 6] += w * nrm[j, 1]
                    acc[p, 7] += w * nrm[j, 2]
                    k = cnt[p]
                    if k == cap:
                        zs, ws = _grow(zs, ws, 2 * cap)
                        cap *= 2
                    zs[p, k] = z
                    ws[p, k] = w
                    cnt[p] = k + 1
                    Tp = Tp * (1.0 - a)
                    T[p] = Tp
                    last[p] = pos
                    if Tp < t_min:
                        done[p] = True
                        alive -= 1
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                p = (py - y0) * tw + (px - x0)
                out_color[py, px, 0] = acc[p, 2]
                out_color[py, px, 1] = acc[p, 3]
                out_color[py, px, 2] = acc[p, 4]
                out_normal[py, px, 0] = acc[p, 5]
                out_normal[py, px, 1] = acc[p, 6]
                out_normal[py, px, 2] = acc[p, 7]
                out_weight[py, px] = acc[p, 0]
                out_depth[py, px] = acc[p, 1] / (acc[p, 0] + eps)
                out_dist[py, px] = _distortion(zs[p], ws[p], cnt[p])
                n_contrib[py, px] = cnt[p]
                last_pos[py, px] = last[p]
                t_final[py, px] = T[p]


@njit(cache=True)
def forward_reference(M, cen, opac, col, nrm, bbox, order, width, height, rho_cut, z_near, t_min, eps,
                      out_color, out_depth, out_weight, out_normal, out_dist, n_contrib, last_pos, t_final):
    n = order.shape[0]
    zs = np.empty(max(n, 1))
    ws = np.empty(max(n, 1))
    for py in range(height):
        for px in range(width):
            _shade_pixel(px, py, order, 0, n, False, M, cen, opac, col, nrm, bbox, rho_cut, z_near, t_min, eps,
                         zs, ws, out_color, out_depth, out_weight, out_normal, out_dist, n_contrib, last_pos, t_final)


@njit(cache=True, parallel=True)
def backward_tiled(M, cen, opac, col, nrm, bbox, offsets, ent, width, height, tile, rho_cut, z_near, eps,
                   out_depth, out_weight, last_pos, n_contrib,
                   g_color, g_depth, g_weight, g_normal, g_dist, slots, errors):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for t in prange(ntx * nty):
        x0 = (t % ntx) * tile
        y0 = (t // ntx) * tile
        x1 = min(x0 + tile, width) - 1
        y1 = min(y0 + tile, height) - 1
        tw = x1 - x0 + 1
        npx = tw * (y1 - y0 + 1)
        s0 = offsets[t]
        s1 = offsets[t + 1]

        # pixels that need a backward pass, and how long their lists are
        active = np.zeros(npx, dtype=np.bool_)
        kmax = 1
        stop = s0
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                if n_contrib[py, px] == 0:
                    continue
                if (g_color[py, px, 0] == 0.0 and g_color[py, px, 1] == 0.0 and g_color[py, px, 2] == 0.0
                        and g_normal[py, px, 0] == 0.0 and g_normal[py, px, 1] == 0.0
                        and g_normal[py, px, 2] == 0.0 and g_depth[py, px] == 0.0 and g_weight[py, px] == 0.0
                        and g_dist[py, px] == 0.0):
                    continue
                p = (py - y0) * tw + (px - x0)
                active[p] = True
                kmax = max(kmax, n_contrib[py, px])
                stop = max(stop, last_pos[py, px] + 1)
        if stop == s0:
            continue

        # replay the forward traversal, splat-major as in forward_tiled
        Tcur = np.ones(npx)
        cnt = np.zeros(npx, dtype=np.int64)
        r_pos = np.empty((npx, kmax), dtype=np.int64)
        r_a = np.empty((npx, kmax))
        r_T = np.empty((npx, kmax))
        r_w = np.empty((npx, kmax))
        r_z = np.empty((npx, kmax))
        r_u = np.empty((npx, kmax))
        r_v = np.empty((npx, kmax))
        r_G = np.empty((npx, kmax))
        r_3d = np.empty((npx, kmax), dtype=np.bool_)
        for pos in range(s0, stop):
            j = ent[pos]
            bx0 = max(bbox[j, 0], x0)
            bx1 = min(bbox[j, 1], x1)
            by0 = max(bbox[j, 2], y0)
            by1 = min(bbox[j, 3], y1)
            for py in range(by0, by1 + 1):
                for px in range(bx0, bx1 + 1):
                    p = (py - y0) * tw + (px - x0)
                    if not active[p] or pos > last_pos[py, px]:
                        continue
                    ok, G, u, v, z, is3d = _intersect(M, cen, j, float(px), float(py), rho_cut, z_near)
                    if not ok:
                        continue
                    k = cnt[p]
                    if k >= kmax:
                        errors[t] = 1
                        active[p] = False
                        continue
                    a = opac[j] * G
                    T = Tcur[p]
                    r_pos[p, k] = pos
                    r_a[p, k] = a
                    r_T[p, k] = T
                    r_w[p, k] = T * a
                    r_z[p, k] = z
                    r_u[p, k] = u
                    r_v[p, k] = v
                    r_G[p, k] = G
                    r_3d[p, k] = is3d
                    cnt[p] = k + 1
                    Tcur[p] = T * (1.0 - a)

        perm = np.empty(kmax, dtype=np.int64)
        d_abs = np.zeros(kmax)
        d_sgn = np.zeros(kmax)
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                p = (py - y0) * tw + (px - x0)
                if not active[p]:
                    continue
                if cnt[p] != n_contrib[py, px]:
                    errors[t] = 1
                    continue
                x = float(px)
                y = float(py)
                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                gn0 = g_normal[py, px, 0]
                gn1 = g_normal[py, px, 1]
                gn2 = g_normal[py, px, 2]
                gD = g_depth[py, px]
                gW = g_weight[py, px]
                gd = g_dist[py, px]
                n = cnt[p]

                if gd != 0.0:
                    # per intersection: sum_j w_j |z_k - z_j| and sum_j w_j sign(z_k - z_j)
                    for i in range(n):
                        perm[i] = i
                    for i in range(1, n):
                        q = perm[i]
                        k = i - 1
                        while k >= 0 and r_z[p, perm[k]] > r_z[p, q]:
                            perm[k + 1] = perm[k]
                            k -= 1
                        perm[k + 1] = q
                    tot_w = 0.0
                    tot_wz = 0.0
                    for i in range(n):
                        tot_w += r_w[p, i]
                        tot_wz += r_w[p, i] * r_z[p, i]
                    acc_w = 0.0
                    acc_wz = 0.0
                    for i in range(n):
                        q = perm[i]
                        zk = r_z[p, q]
                        wk = r_w[p, q]
                        after_w = tot_w - acc_w - wk
                        after_wz = tot_wz - acc_wz - wk * zk
                        d_abs[q] = (zk * acc_w - acc_wz) + (after_wz - zk * after_w)
                        d_sgn[q] = acc_w - after_w
                        acc_w += wk
                        acc_wz += wk * zk
                else:
                    for i in range(n):
                        d_abs[i] = 0.0
                        d_sgn[i] = 0.0

                Wp = out_weight[py, px]
                Dp = out_depth[py, px]
                inv = 1.0 / (Wp + eps)
                R = 0.0
                for i in range(n - 1, -1, -1):
                    pos = r_pos[p, i]
                    j = ent[pos]
                    w = r_w[p, i]
                    z = r_z[p, i]
                    gamma = (gc0 * col[j, 0] + gc1 * col[j, 1] + gc2 * col[j, 2] + gW + gD * (z - Dp) * inv
                             + gn0 * nrm[j, 0] + gn1 * nrm[j, 1] + gn2 * nrm[j, 2] + gd * d_abs[i])
                    gz = gD * w * inv + gd * w * d_sgn[i]
                    a = r_a[p, i]
                    ga = r_T[p, i] * (gamma - R)
                    R = a * gamma + (1.0 - a) * R
                    G = r_G[p, i]
                    gG = ga * opac[j]
                    grho = -0.5 * G * gG

                    s = slots[pos]
                    s[9] += w * gn0
                    s[10] += w * gn1
                    s[11] += w * gn2
                    s[12] += w * gc0
                    s[13] += w * gc1
                    s[14] += w * gc2
                    s[15] += ga * G

                    if r_3d[p, i]:
                        u = r_u[p, i]
                        v = r_v[p, i]
                        m00 = M[j, 0]
                        m01 = M[j, 1]
                        m02 = M[j, 2]
                        m10 = M[j, 3]
                        m11 = M[j, 4]
                        m12 = M[j, 5]
                        m20 = M[j, 6]
                        m21 = M[j, 7]
                        m22 = M[j, 8]
                        k0 = x * m20 - m00
                        k1 = x * m21 - m01
                        k2 = x * m22 - m02
                        l0 = y * m20 - m10
                        l1 = y * m21 - m11
                        l2 = y * m22 - m12
                        den = k0 * l1 - k1 * l0
                        gu = grho * 2.0 * u + gz * m20
                        gv = grho * 2.0 * v + gz * m21
                        # depth row of M directly
                        s[6] += gz * u
                        s[7] += gz * v
                        s[8] += gz
                        # (u, v) = (c0, c1) / c2 with c = k x l
                        q0 = gu / den
                        q1 = gv / den
                        q2 = -(gu * u + gv * v) / den
                        # gk = l x q ; gl = q x k
                        gk0 = l1 * q2 - l2 * q1
                        gk1 = l2 * q0 - l0 * q2
                        gk2 = l0 * q1 - l1 * q0
                        gl0 = q1 * k2 - q2 * k1
                        gl1 = q2 * k0 - q0 * k2
                        gl2 = q0 * k1 - q1 * k0
                        s[0] -= gk0
                        s[1] -= gk1
                        s[2] -= gk2
                        s[3] -= gl0
                        s[4] -= gl1
                        s[5] -= gl2
                        s[6] += x * gk0 + y * gl0
                        s[7] += x * gk1 + y * gl1
                        s[8] += x * gk2 + y * gl2
                    else:
                        m22 = M[j, 8]
                        cx = cen[j, 0]
                        cy = cen[j, 1]
                        gcx = grho * 4.0 * (cx - x)
                        gcy = grho * 4.0 * (cy - y)
                        s[2] += gcx / m22
                        s[5] += gcy / m22
                        s[8] += gz - (gcx * cx + gcy * cy) / m22


@njit(cache=True)
def reduce_slots(ent, slots, n):
    out = np.zeros((n, slots.shape[1]))
    for pos in range(ent.shape[0]):
        j = ent[pos]
        for c in range(slots.shape[1]):
            out[j, c] += slots[pos, c]
    return out
