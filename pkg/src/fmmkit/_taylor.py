"""Cartesian Taylor machinery shared by the kernel and tree modules.

Multi-indices m = (mx, my, mz) are stored in a fixed graded-lexicographic
order: ascending total degree, and within one degree descending in mx then
my.  An expansion of order p keeps every coefficient with |m| < p, i.e.
p(p+1)(p+2)/6 of them.

Derivative tensors D_m(r) = d^m (1/|r|) are generated on the fly by a
degree-by-degree recurrence (pivot on the first axis with a nonzero index):

    r^2 D_k = -(2 k_i - 1) x_i D_{k-e_i} - (k_i - 1)^2 D_{k-2e_i}
              - sum_{j != i} [ 2 k_j x_j D_{k-e_j} + k_j (k_j - 1) D_{k-2e_j} ]

which only touches lower-degree entries and stays numerically benign, so no
translation matrices are ever precomputed or stored.
"""

from __future__ import annotations

import numpy as np
from numba import njit

TMAX = 12  # largest total degree the tables cover (expansion orders 1..TMAX)


def _build_tables(tmax: int):
    mi = []
    for d in range(tmax + 1):
        for mx in range(d, -1, -1):
            for my in range(d - mx, -1, -1):
                mi.append((mx, my, d - mx - my))
    MI = np.array(mi, dtype=np.int64)
    IDX3 = np.full((tmax + 2, tmax + 2, tmax + 2), -1, dtype=np.int64)
    for idx, (a, b, c) in enumerate(mi):
        IDX3[a, b, c] = idx
    DEG = MI.sum(axis=1)
    fact = np.ones(tmax + 2, dtype=np.float64)
    for d in range(1, tmax + 2):
        fact[d] = fact[d - 1] * d
    MFACT = np.array([fact[a] * fact[b] * fact[c] for a, b, c in mi])
    OFFSET = np.array([d * (d + 1) * (d + 2) // 6 for d in range(tmax + 3)], dtype=np.int64)
    return MI, IDX3, DEG, MFACT, OFFSET


MI, IDX3, DEG, MFACT, OFFSET = _build_tables(TMAX)


def ncoef(p: int) -> int:
    """Coefficient count of an order-p expansion: p(p+1)(p+2)/6."""
    return int(OFFSET[p])


# ----------------------------------------------------------------------------
# derivative tensors
# ----------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _d_tensors(rx, ry, rz, deg, D):
    """Fill D[k] for all |k| <= deg at the offset r = (rx, ry, rz)."""
    r2 = rx * rx + ry * ry + rz * rz
    inv_r2 = 1.0 / r2
    D[0] = np.sqrt(inv_r2)
    for idx in range(1, OFFSET[deg + 1]):
        kx = MI[idx, 0]
        ky = MI[idx, 1]
        kz = MI[idx, 2]
        acc = 0.0
        if kx > 0:
            # pivot on x
            acc -= (2.0 * kx - 1.0) * rx * D[IDX3[kx - 1, ky, kz]]
            if kx > 1:
                acc -= (kx - 1.0) * (kx - 1.0) * D[IDX3[kx - 2, ky, kz]]
            if ky > 0:
                acc -= 2.0 * ky * ry * D[IDX3[kx, ky - 1, kz]]
                if ky > 1:
                    acc -= ky * (ky - 1.0) * D[IDX3[kx, ky - 2, kz]]
            if kz > 0:
                acc -= 2.0 * kz * rz * D[IDX3[kx, ky, kz - 1]]
                if kz > 1:
                    acc -= kz * (kz - 1.0) * D[IDX3[kx, ky, kz - 2]]
        elif ky > 0:
            # pivot on y
            acc -= (2.0 * ky - 1.0) * ry * D[IDX3[kx, ky - 1, kz]]
            if ky > 1:
                acc -= (ky - 1.0) * (ky - 1.0) * D[IDX3[kx, ky - 2, kz]]
            if kz > 0:
                acc -= 2.0 * kz * rz * D[IDX3[kx, ky, kz - 1]]
                if kz > 1:
                    acc -= kz * (kz - 1.0) * D[IDX3[kx, ky, kz - 2]]
        else:
            # pivot on z
            acc -= (2.0 * kz - 1.0) * rz * D[IDX3[kx, ky, kz - 1]]
            if kz > 1:
                acc -= (kz - 1.0) * (kz - 1.0) * D[IDX3[kx, ky, kz - 2]]
        D[idx] = acc * inv_r2


# ----------------------------------------------------------------------------
# expansion kernels (array cores)
# ----------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _pow_over_fact(dx, dy, dz, p, out):
    """out[k] = d^k / k! for |k| < p, via out[k] = out[k - e_i] * d_i / k_i."""
    out[0] = 1.0
    for idx in range(1, OFFSET[p]):
        kx = MI[idx, 0]
        ky = MI[idx, 1]
        kz = MI[idx, 2]
        if kx > 0:
            out[idx] = out[IDX3[kx - 1, ky, kz]] * dx / kx
        elif ky > 0:
            out[idx] = out[IDX3[kx, ky - 1, kz]] * dy / ky
        else:
            out[idx] = out[IDX3[kx, ky, kz - 1]] * dz / kz


@njit(cache=True, nogil=True)
def _pow_plain(ux, uy, uz, p, out):
    """out[k] = u^k for |k| < p."""
    out[0] = 1.0
    for idx in range(1, OFFSET[p]):
        kx = MI[idx, 0]
        ky = MI[idx, 1]
        kz = MI[idx, 2]
        if kx > 0:
            out[idx] = out[IDX3[kx - 1, ky, kz]] * ux
        elif ky > 0:
            out[idx] = out[IDX3[kx, ky - 1, kz]] * uy
        else:
            out[idx] = out[IDX3[kx, ky, kz - 1]] * uz


@njit(cache=True, nogil=True)
def _p2m(x, y, z, q, i0, i1, cx, cy, cz, p, M):
    """Accumulate moments M_m += sum_j q_j (x_j - c)^m / m! over bodies [i0, i1)."""
    nc = OFFSET[p]
    work = np.empty(nc, dtype=np.float64)
    for j in range(i0, i1):
        _pow_over_fact(x[j] - cx, y[j] - cy, z[j] - cz, p, work)
        qj = q[j]
        for k in range(nc):
            M[k] += qj * work[k]


@njit(cache=True, nogil=True)
def _m2m(Msrc, tx, ty, tz, p, Mdst):
    """Shift moments to a new center; t = old_center - new_center.

    Mdst[m] += sum_{k <= m} Msrc[k] t^{m-k} / (m-k)!  (exact for |m| < p).
    """
    nc = OFFSET[p]
    work = np.empty(nc, dtype=np.float64)
    _pow_over_fact(tx, ty, tz, p, work)
    for mi in range(nc):
        mx = MI[mi, 0]
        my = MI[mi, 1]
        mz = MI[mi, 2]
        acc = 0.0
        for ki in range(OFFSET[DEG[mi] + 1]):
            kx = MI[ki, 0]
            ky = MI[ki, 1]
            kz = MI[ki, 2]
            if kx <= mx and ky <= my and kz <= mz:
                acc += Msrc[ki] * work[IDX3[mx - kx, my - ky, mz - kz]]
        Mdst[mi] += acc


@njit(cache=True, nogil=True)
def _m2l(Msrc, rx, ry, rz, p, Ldst, D):
    """Convert moments into a local expansion at offset r = target_c - source_c.

    Ldst[n] += (1/n!) sum_{|m| < p - |n|} (-1)^|m| Msrc[m] D_{m+n}(r).
    D must have room for all |k| < p (filled here).
    """
    _d_tensors(rx, ry, rz, p - 1, D)
    for ni in range(OFFSET[p]):
        nx = MI[ni, 0]
        ny = MI[ni, 1]
        nz = MI[ni, 2]
        acc = 0.0
        for mi in range(OFFSET[p - DEG[ni]]):
            t = Msrc[mi] * D[IDX3[nx + MI[mi, 0], ny + MI[mi, 1], nz + MI[mi, 2]]]
            if DEG[mi] & 1:
                acc -= t
            else:
                acc += t
        Ldst[ni] += acc / MFACT[ni]


@njit(cache=True, nogil=True)
def _m2l_mutual(MA, MB, rx, ry, rz, p, LA, LB, D):
    """Symmetric M2L for the unordered cell pair (A, B); r = c_A - c_B.

    Reuses one derivative-tensor evaluation for both directions via the
    parity relation D_k(-r) = (-1)^|k| D_k(r): on the reversed direction
    the conversion's (-1)^|m| and the tensor parity (-1)^|m+n| collapse
    into a single (-1)^|n| on the finished coefficient.
    """
    _d_tensors(rx, ry, rz, p - 1, D)
    for ni in range(OFFSET[p]):
        nx = MI[ni, 0]
        ny = MI[ni, 1]
        nz = MI[ni, 2]
        acc_a = 0.0
        acc_b = 0.0
        for mi in range(OFFSET[p - DEG[ni]]):
            d = D[IDX3[nx + MI[mi, 0], ny + MI[mi, 1], nz + MI[mi, 2]]]
            if DEG[mi] & 1:
                acc_a -= MB[mi] * d
            else:
                acc_a += MB[mi] * d
            acc_b += MA[mi] * d
        if DEG[ni] & 1:
            acc_b = -acc_b
        LA[ni] += acc_a / MFACT[ni]
        LB[ni] += acc_b / MFACT[ni]


@njit(cache=True, nogil=True)
def _l2l(Lsrc, tx, ty, tz, p, Ldst):
    """Re-center a local expansion; t = new_center - old_center.

    Ldst[k] += sum_{n >= k} Lsrc[n] C(n, k) t^{n-k}  (exact for |n| < p).
    """
    nc = OFFSET[p]
    work = np.empty(nc, dtype=np.float64)
    _pow_over_fact(tx, ty, tz, p, work)
    for ki in range(nc):
        kx = MI[ki, 0]
        ky = MI[ki, 1]
        kz = MI[ki, 2]
        acc = 0.0
        for ni in range(nc):
            nx = MI[ni, 0]
            ny = MI[ni, 1]
            nz = MI[ni, 2]
            if nx >= kx and ny >= ky and nz >= kz:
                acc += Lsrc[ni] * MFACT[ni] * work[IDX3[nx - kx, ny - ky, nz - kz]]
        Ldst[ki] += acc / MFACT[ki]


@njit(cache=True, nogil=True)
def _l2p(L, cx, cy, cz, p, x, y, z, phi, fx, fy, fz, i0, i1):
    """Evaluate a local expansion at bodies [i0, i1): phi and f = -grad(phi)."""
    nc = OFFSET[p]
    work = np.empty(nc, dtype=np.float64)
    for j in range(i0, i1):
        _pow_plain(x[j] - cx, y[j] - cy, z[j] - cz, p, work)
        pot = 0.0
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for ki in range(nc):
            lk = L[ki]
            pot += lk * work[ki]
            kx = MI[ki, 0]
            ky = MI[ki, 1]
            kz = MI[ki, 2]
            if kx > 0:
                gx += lk * kx * work[IDX3[kx - 1, ky, kz]]
            if ky > 0:
                gy += lk * ky * work[IDX3[kx, ky - 1, kz]]
            if kz > 0:
                gz += lk * kz * work[IDX3[kx, ky, kz - 1]]
        phi[j] += pot
        fx[j] -= gx
        fy[j] -= gy
        fz[j] -= gz


@njit(cache=True, nogil=True)
def _m2p(M, cx, cy, cz, p, x, y, z, phi, fx, fy, fz, i0, i1, D):
    """Evaluate moments directly at bodies [i0, i1) (treecode far field).

    phi(y)  = sum_{|m| < p} (-1)^|m| M_m D_m(y - c)
    f_i(y)  = -sum_{|m| < p} (-1)^|m| M_m D_{m+e_i}(y - c)

    D must have room for all |k| <= p.
    """
    nc = OFFSET[p]
    for j in range(i0, i1):
        rx = x[j] - cx
        ry = y[j] - cy
        rz = z[j] - cz
        if rx * rx + ry * ry + rz * rz == 0.0:
            continue  # singular evaluation point; the public wrapper rejects this
        _d_tensors(rx, ry, rz, p, D)
        pot = 0.0
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for mi in range(nc):
            mmx = MI[mi, 0]
            mmy = MI[mi, 1]
            mmz = MI[mi, 2]
            mm = M[mi]
            if DEG[mi] & 1:
                mm = -mm
            pot += mm * D[mi]
            gx += mm * D[IDX3[mmx + 1, mmy, mmz]]
            gy += mm * D[IDX3[mmx, mmy + 1, mmz]]
            gz += mm * D[IDX3[mmx, mmy, mmz + 1]]
        phi[j] += pot
        fx[j] -= gx
        fy[j] -= gy
        fz[j] -= gz


# ----------------------------------------------------------------------------
# particle-particle cores
# ----------------------------------------------------------------------------

P2P_FLOPS_PER_PAIR = 20  # direct-summation cost model: potential + force
_LANES = 8


@njit(cache=True, nogil=True, inline="always")
def _rinv(r2, use_rsqrt):
    if use_rsqrt:
        # single-precision approximate reciprocal square root (<= ~1.2e-7 rel)
        return np.float64(np.float32(1.0) / np.sqrt(np.float32(r2)))
    return 1.0 / np.sqrt(r2)


@njit(cache=True, nogil=True)
def _p2p_scalar(x, y, z, q, phi, fx, fy, fz, t0, t1, s0, s1, same, use_rsqrt, stats):
    """Reference path: plain loops, one target at a time, sources in order."""
    pairs = 0
    skipped = 0
    for i in range(t0, t1):
        xi = x[i]
        yi = y[i]
        zi = z[i]
        pot = 0.0
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for j in range(s0, s1):
            if same and i == j:
                continue
            dx = xi - x[j]
            dy = yi - y[j]
            dz = zi - z[j]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 == 0.0:
                skipped += 1
                continue
            rinv = _rinv(r2, use_rsqrt)
            qr = q[j] * rinv
            qr3 = qr * rinv * rinv
            pot += qr
            gx += qr3 * dx
            gy += qr3 * dy
            gz += qr3 * dz
            pairs += 1
        phi[i] += pot
        fx[i] += gx
        fy[i] += gy
        fz[i] += gz
    stats[0] += pairs
    stats[1] += skipped
    stats[2] += pairs * P2P_FLOPS_PER_PAIR


@njit(cache=True, nogil=True)
def _p2p_batched(x, y, z, q, phi, fx, fy, fz, t0, t1, s0, s1, same, use_rsqrt, stats):
    """Targets in fixed-width lane batches over the SoA arrays.

    Per-target source order matches the scalar path, so on zeroed
    accumulators the two paths agree bitwise when use_rsqrt is off.
    """
    pairs = 0
    skipped = 0
    i = t0
    while i < t1:
        w = t1 - i
        if w > _LANES:
            w = _LANES
        for j in range(s0, s1):
            xj = x[j]
            yj = y[j]
            zj = z[j]
            qj = q[j]
            for l in range(w):
                ii = i + l
                if same and ii == j:
                    continue
                dx = x[ii] - xj
                dy = y[ii] - yj
                dz = z[ii] - zj
                r2 = dx * dx + dy * dy + dz * dz
                if r2 == 0.0:
                    skipped += 1
                    continue
                rinv = _rinv(r2, use_rsqrt)
                qr = qj * rinv
                qr3 = qr * rinv * rinv
                phi[ii] += qr
                fx[ii] += qr3 * dx
                fy[ii] += qr3 * dy
                fz[ii] += qr3 * dz
                pairs += 1
        i += w
    stats[0] += pairs
    stats[1] += skipped
    stats[2] += pairs * P2P_FLOPS_PER_PAIR


@njit(cache=True, nogil=True)
def _p2p_mutual(x, y, z, q, phi, fx, fy, fz, t0, t1, s0, s1, use_rsqrt, stats):
    """Symmetric updates for two disjoint body ranges (one sqrt per pair)."""
    pairs = 0
    skipped = 0
    for i in range(t0, t1):
        xi = x[i]
        yi = y[i]
        zi = z[i]
        qi = q[i]
        pot = 0.0
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for j in range(s0, s1):
            dx = xi - x[j]
            dy = yi - y[j]
            dz = zi - z[j]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 == 0.0:
                skipped += 2
                continue
            rinv = _rinv(r2, use_rsqrt)
            r3 = rinv * rinv * rinv
            qj = q[j]
            pot += qj * rinv
            gx += qj * r3 * dx
            gy += qj * r3 * dy
            gz += qj * r3 * dz
            phi[j] += qi * rinv
            fx[j] -= qi * r3 * dx
            fy[j] -= qi * r3 * dy
            fz[j] -= qi * r3 * dz
            pairs += 2
        phi[i] += pot
        fx[i] += gx
        fy[i] += gy
        fz[i] += gz
    stats[0] += pairs
    stats[1] += skipped
    stats[2] += pairs * P2P_FLOPS_PER_PAIR


@njit(cache=True, nogil=True)
def _p2p_mutual_self(x, y, z, q, phi, fx, fy, fz, t0, t1, use_rsqrt, stats):
    """Symmetric updates within one body range (each unordered pair once)."""
    pairs = 0
    skipped = 0
    for i in range(t0, t1):
        xi = x[i]
        yi = y[i]
        zi = z[i]
        qi = q[i]
        pot = 0.0
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for j in range(i + 1, t1):
            dx = xi - x[j]
            dy = yi - y[j]
            dz = zi - z[j]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 == 0.0:
                skipped += 2
                continue
            rinv = _rinv(r2, use_rsqrt)
            r3 = rinv * rinv * rinv
            qj = q[j]
            pot += qj * rinv
            gx += qj * r3 * dx
            gy += qj * r3 * dy
            gz += qj * r3 * dz
            phi[j] += qi * rinv
            fx[j] -= qi * r3 * dx
            fy[j] -= qi * r3 * dy
            fz[j] -= qi * r3 * dz
            pairs += 2
        phi[i] += pot
        fx[i] += gx
        fy[i] += gy
        fz[i] += gz
    stats[0] += pairs
    stats[1] += skipped
    stats[2] += pairs * P2P_FLOPS_PER_PAIR


@njit(cache=True, nogil=True)
def _direct_subset(x, y, z, q, tidx, phi, fx, fy, fz):
    """Scalar direct summation onto the selected target indices."""
    n = x.shape[0]
    for t in range(tidx.shape[0]):
        i = tidx[t]
        xi = x[i]
        yi = y[i]
        zi = z[i]
        pot = 0.0
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for j in range(n):
            if j == i:
                continue
            dx = xi - x[j]
            dy = yi - y[j]
            dz = zi - z[j]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 == 0.0:
                continue
            rinv = 1.0 / np.sqrt(r2)
            qr = q[j] * rinv
            qr3 = qr * rinv * rinv
            pot += qr
            gx += qr3 * dx
            gy += qr3 * dy
            gz += qr3 * dz
        phi[t] = pot
        fx[t] = gx
        fy[t] = gy
        fz[t] = gz
