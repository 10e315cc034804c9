# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: lattice collision sums and linear-operator assembly."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline int _imax(int a, int b) nogil:
    return a if a > b else b


cdef inline int _imin(int a, int b) nogil:
    return a if a < b else b


def collide(double[:, :, :, ::1] F1, double[:, :, :, ::1] F2,
            long[:, ::1] mi, long[:, ::1] ni, double[::1] w,
            int kz_start=0, int n_threads=1):
    """Lattice gain and loss-frequency sums on rows k >= kz_start."""
    cdef int n = F1.shape[0]
    cdef int E = F1.shape[3]
    cdef int nk = n - kz_start
    cdef int P = mi.shape[0]
    gain_arr = np.zeros((n, n, nk, E))
    loss_arr = np.zeros((n, n, nk, E))
    cdef double[:, :, :, ::1] gain = gain_arr
    cdef double[:, :, :, ::1] loss = loss_arr
    cdef int i, j, k, e, p
    cdef int m0, m1, m2, q0, q1, q2, s0, s1, s2
    cdef int jlo, jhi, klo, khi
    cdef double wp
    for i in prange(n, nogil=True, num_threads=n_threads, schedule="static"):
        for p in range(P):
            m0 = mi[p, 0]; m1 = mi[p, 1]; m2 = mi[p, 2]
            q0 = ni[p, 0]; q1 = ni[p, 1]; q2 = ni[p, 2]
            s0 = m0 + q0; s1 = m1 + q1; s2 = m2 + q2
            if i + m0 < 0 or i + m0 >= n or i + q0 < 0 or i + q0 >= n or i + s0 < 0 or i + s0 >= n:
                continue
            jlo = _imax(_imax(0, -m1), _imax(-q1, -s1))
            jhi = _imin(_imin(n, n - m1), _imin(n - q1, n - s1))
            klo = _imax(_imax(kz_start, -m2), _imax(-q2, -s2))
            khi = _imin(_imin(n, n - m2), _imin(n - q2, n - s2))
            wp = w[p]
            for j in range(jlo, jhi):
                for k in range(klo, khi):
                    for e in range(E):
                        gain[i, j, k - kz_start, e] += wp * F1[i + m0, j + m1, k + m2, e] * F2[i + q0, j + q1, k + q2, e]
                        loss[i, j, k - kz_start, e] += wp * F1[i + s0, j + s1, k + s2, e]
    return gain_arr, loss_arr


def assemble_linear(double[:, :, ::1] mu, long[:, ::1] mi, long[:, ::1] ni, double[::1] w,
                    bint fold, int n_threads=1):
    """CSR arrays of A f = Q(mu, f) + Q(f, mu), optionally folded onto v_z >= 0."""
    cdef int n = mu.shape[0]
    cdef int half = n // 2
    cdef int kz0 = half if fold else 0
    cdef int nk = n - kz0
    cdef int size = n * n * nk
    cdef int P = mi.shape[0]
    cdef double *acc = <double *> malloc(size * sizeof(double))
    cdef int *touched = <int *> malloc(size * sizeof(int))
    cdef char *seen = <char *> malloc(size * sizeof(char))
    cdef int i, j, k, p, t, nt, c, r
    cdef int m0, m1, m2, q0, q1, q2, s0, s1, s2
    cdef double wp
    for t in range(size):
        acc[t] = 0.0
        seen[t] = 0
    indptr = np.zeros(size + 1, dtype=np.int64)
    chunks_idx = []
    chunks_val = []
    cdef long[::1] ip = indptr
    cdef long total = 0
    cdef int[::1] row_idx
    cdef double[::1] row_val
    try:
        for i in range(n):
            for j in range(n):
                for k in range(kz0, n):
                    r = (i * n + j) * nk + (k - kz0)
                    nt = 0
                    for p in range(P):
                        m0 = mi[p, 0]; m1 = mi[p, 1]; m2 = mi[p, 2]
                        q0 = ni[p, 0]; q1 = ni[p, 1]; q2 = ni[p, 2]
                        s0 = m0 + q0; s1 = m1 + q1; s2 = m2 + q2
                        if (i + m0 < 0 or i + m0 >= n or j + m1 < 0 or j + m1 >= n or k + m2 < 0 or k + m2 >= n
                                or i + q0 < 0 or i + q0 >= n or j + q1 < 0 or j + q1 >= n or k + q2 < 0 or k + q2 >= n
                                or i + s0 < 0 or i + s0 >= n or j + s1 < 0 or j + s1 >= n or k + s2 < 0 or k + s2 >= n):
                            continue
                        wp = w[p]
                        c = _col(i + q0, j + q1, k + q2, n, nk, half, fold)
                        if not seen[c]:
                            seen[c] = 1; touched[nt] = c; nt += 1
                        acc[c] += wp * mu[i + m0, j + m1, k + m2]
                        c = _col(i + m0, j + m1, k + m2, n, nk, half, fold)
                        if not seen[c]:
                            seen[c] = 1; touched[nt] = c; nt += 1
                        acc[c] += wp * mu[i + q0, j + q1, k + q2]
                        c = _col(i, j, k, n, nk, half, fold)
                        if not seen[c]:
                            seen[c] = 1; touched[nt] = c; nt += 1
                        acc[c] -= wp * mu[i + s0, j + s1, k + s2]
                        c = _col(i + s0, j + s1, k + s2, n, nk, half, fold)
                        if not seen[c]:
                            seen[c] = 1; touched[nt] = c; nt += 1
                        acc[c] -= wp * mu[i, j, k]
                    row_idx_arr = np.empty(nt, dtype=np.int32)
                    row_val_arr = np.empty(nt, dtype=np.float64)
                    row_idx = row_idx_arr
                    row_val = row_val_arr
                    for t in range(nt):
                        c = touched[t]
                        row_idx[t] = c
                        row_val[t] = acc[c]
                        acc[c] = 0.0
                        seen[c] = 0
                    order = np.argsort(row_idx_arr, kind="stable")
                    chunks_idx.append(row_idx_arr[order])
                    chunks_val.append(row_val_arr[order])
                    total += nt
                    ip[r + 1] = total
    finally:
        free(acc)
        free(touched)
        free(seen)
    if chunks_idx:
        indices = np.concatenate(chunks_idx)
        data = np.concatenate(chunks_val)
    else:
        indices = np.zeros(0, dtype=np.int32)
        data = np.zeros(0)
    return indptr, indices, data, size


cdef inline int _col(int i, int j, int k, int n, int nk, int half, bint fold) nogil:
    if fold:
        if k < half:
            k = n - 1 - k
        k = k - half
    return (i * n + j) * nk + k


# ---------------------------------------------------------------------------
# transport operator along exact characteristics

from libc.math cimport sqrt, log1p, exp, floor, ceil, fabs

cdef double ETA_CAP = 1.0 - 1e-12


cdef inline double _gdiff(double z1, double z2, double inv, double c) nogil:
    cdef double d = z1 - z2
    cdef double s = z1 + z2
    return d * (inv * inv * s / (z1 * z1 * z2 * z2) + c * c * s) + 4.0 * inv * c * log1p(d / z2)


cdef double _turning(double eta, double veta, double vphi, double c) nogil:
    cdef double z0 = 1.0 - eta
    cdef double inv = z0 * vphi - c * z0 * z0
    cdef double v2 = veta * veta
    cdef double lo = eta, hi = ETA_CAP, mid, x, vp, slope, cand, r
    cdef int it
    if v2 + _gdiff(1.0 - hi, z0, inv, c) > 0.0:
        return ETA_CAP
    if v2 == 0.0:
        return eta
    for it in range(60):
        mid = 0.5 * (lo + hi)
        if v2 + _gdiff(1.0 - mid, z0, inv, c) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 0.25e-12:
            break
    x = 0.5 * (lo + hi)
    for it in range(2):
        vp = inv / (1.0 - x) + c * (1.0 - x)
        slope = 2.0 * vp * vp / (1.0 - x)
        if slope > 0.0:
            cand = x + (v2 + _gdiff(1.0 - x, z0, inv, c)) / slope
            if cand >= lo and cand <= hi:
                x = cand
    return x


cdef inline double _nu_interp(double speed, double[::1] tab, double dr) nogil:
    cdef double r = speed / dr
    cdef int K = tab.shape[0]
    cdef int k = <int> floor(r)
    cdef double t, f0, f1, f2, f3
    if k < 0:
        k = 0
    if k > K - 3:
        k = K - 3
    t = r - k
    f0 = tab[k - 1] if k >= 1 else tab[1]
    f1 = tab[k]
    f2 = tab[k + 1]
    f3 = tab[k + 2] if k + 2 < K else tab[K - 1]
    return (-t * (t - 1.0) * (t - 2.0) / 6.0 * f0
            + (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0 * f1
            - (t + 1.0) * t * (t - 2.0) / 2.0 * f2
            + (t + 1.0) * t * (t - 1.0) / 6.0 * f3)


cdef struct PathCtx:
    double inv
    double c
    double z2
    double r0
    double eta_plus
    double vz2
    double shift        # eps - lambda
    double aw           # weighted-absorption coefficient (alpha/eta1) * ell, or 0
    double dr


cdef inline void _state(PathCtx *P, double u, double sgn, double *ve, double *vp, double *g) nogil:
    cdef double d = u * u
    cdef double z1 = P.z2 + d
    cdef double s = z1 + P.z2
    cdef double lg, q, v2
    if d > 0.0:
        lg = log1p(d / P.z2) / d
    else:
        lg = 1.0 / P.z2
    q = P.inv * P.inv * s / (z1 * z1 * P.z2 * P.z2) + P.c * P.c * s + 4.0 * P.inv * P.c * lg
    v2 = P.r0 + d * q
    if v2 < 0.0:
        v2 = 0.0
    g[0] = 2.0 * u / sqrt(v2)
    ve[0] = sgn * sqrt(v2)
    vp[0] = P.inv / z1 + P.c * z1


cdef inline double _absorb(PathCtx *P, double ve, double vp, double[::1] tab) nogil:
    cdef double sp2 = ve * ve + vp * vp + P.vz2
    cdef double a = P.shift + _nu_interp(sqrt(sp2), tab, P.dr)
    if P.aw != 0.0:
        a += P.aw * ve * vp / (1.0 + sp2)
    return a


def transport_level(double vz, double[::1] v1d, double[::1] eta_nodes, double c,
                    double shift, double aw, double[::1] nu_tab, double nu_dr,
                    double[::1] gx, double[::1] gw):
    """Sparse backward-characteristic operator for one v_z level.

    Rows and columns are ordered (i_eta_velocity, j_phi_velocity, e).  Returns
    (indptr, indices, data, attenuation, exit_wall, exit_velocity).
    """
    cdef int n = v1d.shape[0]
    cdef int E = eta_nodes.shape[0]
    cdef int N = E - 1
    cdef int ng = gx.shape[0]
    cdef double deta = eta_nodes[1] - eta_nodes[0]
    cdef double eta1 = eta_nodes[E - 1]
    cdef double vmin = v1d[0]
    cdef double hv = v1d[1] - v1d[0]
    cdef int size = n * n * E
    cdef double *acc = <double *> malloc(size * sizeof(double))
    cdef int *touched = <int *> malloc(size * sizeof(int))
    cdef char *seen = <char *> malloc(size * sizeof(char))
    cdef PathCtx P
    cdef int i, j, e, r, nt, t, leg, nlegs, m, q, qq, a, b, guard
    cdef int e0, i0, j0, ci, cj, col
    cdef double eta, veta, vphi, z0, ep, tau, Xs, Xe, sgn, cur, nxt, ua, ub, half, uq, wq
    cdef double ve, vp, gg, tq, us, hs, ur, ve2, vp2, g2, fx, fi, fj, te, ti, tj, wgt, wi, wj, we
    cdef double legs_s[2]
    cdef double legs_e[2]
    cdef double legs_g[2]
    indptr = np.zeros(size + 1, dtype=np.int64)
    att_arr = np.zeros(size)
    wall_arr = np.zeros(size, dtype=np.int8)
    vexit_arr = np.zeros((size, 2))
    cdef long[::1] ip = indptr
    cdef double[::1] att = att_arr
    cdef signed char[::1] wall = wall_arr
    cdef double[:, ::1] vexit = vexit_arr
    cdef int[::1] row_idx
    cdef double[::1] row_val
    cdef long total = 0
    chunks_idx = []
    chunks_val = []
    P.c = c
    P.vz2 = vz * vz
    P.shift = shift
    P.aw = aw
    P.dr = nu_dr
    for t in range(size):
        acc[t] = 0.0
        seen[t] = 0
    try:
        for i in range(n):
            for j in range(n):
                for e in range(E):
                    r = (i * n + j) * E + e
                    eta = eta_nodes[e]
                    veta = v1d[i]
                    vphi = v1d[j]
                    z0 = 1.0 - eta
                    P.inv = z0 * vphi - c * z0 * z0
                    ep = _turning(eta, veta, vphi, c)
                    P.eta_plus = ep
                    P.z2 = 1.0 - ep
                    P.r0 = veta * veta + _gdiff(P.z2, z0, P.inv, c)
                    if P.r0 < 0.0:
                        P.r0 = 0.0
                    # legs in backward-time order: (X_start, X_end, sign of V_eta)
                    if veta >= 0.0:
                        nlegs = 1
                        legs_s[0] = eta; legs_e[0] = 0.0; legs_g[0] = 1.0
                        wall[r] = 0
                    elif ep <= eta1:
                        nlegs = 2
                        legs_s[0] = eta; legs_e[0] = ep; legs_g[0] = -1.0
                        legs_s[1] = ep; legs_e[1] = 0.0; legs_g[1] = 1.0
                        wall[r] = 0
                    else:
                        nlegs = 1
                        legs_s[0] = eta; legs_e[0] = eta1; legs_g[0] = -1.0
                        wall[r] = 1
                    tau = 0.0
                    nt = 0
                    for leg in range(nlegs):
                        Xs = legs_s[leg]
                        Xe = legs_e[leg]
                        sgn = legs_g[leg]
                        cur = Xs
                        guard = 0
                        while fabs(cur - Xe) > 0.0 and guard < 4 * E + 4:
                            guard += 1
                            if Xe < cur:
                                m = <int> ceil(cur / deta - 1e-9) - 1
                                if m > N - 1:
                                    m = N - 1
                                if m < 0:
                                    m = 0
                                nxt = eta_nodes[m]
                                if nxt < Xe:
                                    nxt = Xe
                            else:
                                m = <int> floor(cur / deta + 1e-9)
                                if m > N - 1:
                                    m = N - 1
                                if m < 0:
                                    m = 0
                                nxt = eta_nodes[m + 1]
                                if nxt > Xe:
                                    nxt = Xe
                            if nxt == cur:
                                break
                            ua = sqrt(ep - cur) if ep > cur else 0.0
                            ub = sqrt(ep - nxt) if ep > nxt else 0.0
                            half = 0.5 * (ub - ua)
                            for q in range(ng):
                                uq = ua + half * (gx[q] + 1.0)
                                _state(&P, uq, sgn, &ve, &vp, &gg)
                                # optical depth from the piece start to this node
                                hs = 0.5 * (uq - ua)
                                tq = 0.0
                                for qq in range(ng):
                                    ur = ua + hs * (gx[qq] + 1.0)
                                    _state(&P, ur, sgn, &ve2, &vp2, &g2)
                                    tq += gw[qq] * _absorb(&P, ve2, vp2, nu_tab) * g2
                                tq = tau + fabs(hs) * tq
                                wgt = fabs(half) * gw[q] * gg * exp(-tq)
                                fx = (ep - uq * uq) / deta
                                e0 = <int> floor(fx)
                                if e0 > N - 1:
                                    e0 = N - 1
                                if e0 < 0:
                                    e0 = 0
                                te = fx - e0
                                fi = (ve - vmin) / hv
                                fj = (vp - vmin) / hv
                                i0 = <int> floor(fi)
                                j0 = <int> floor(fj)
                                ti = fi - i0
                                tj = fj - j0
                                for a in range(2):
                                    ci = i0 + a
                                    if ci < 0 or ci >= n:
                                        continue
                                    wi = ti if a == 1 else 1.0 - ti
                                    for b in range(2):
                                        cj = j0 + b
                                        if cj < 0 or cj >= n:
                                            continue
                                        wj = tj if b == 1 else 1.0 - tj
                                        col = (ci * n + cj) * E + e0
                                        we = wgt * wi * wj * (1.0 - te)
                                        if not seen[col]:
                                            seen[col] = 1; touched[nt] = col; nt += 1
                                        acc[col] += we
                                        col = col + 1
                                        we = wgt * wi * wj * te
                                        if not seen[col]:
                                            seen[col] = 1; touched[nt] = col; nt += 1
                                        acc[col] += we
                            # full-piece optical depth
                            tq = 0.0
                            for q in range(ng):
                                uq = ua + half * (gx[q] + 1.0)
                                _state(&P, uq, sgn, &ve, &vp, &gg)
                                tq += gw[q] * _absorb(&P, ve, vp, nu_tab) * gg
                            tau += fabs(half) * tq
                            cur = nxt
                    att[r] = exp(-tau)
                    if nlegs == 1 and legs_s[0] == legs_e[0]:
                        vexit[r, 0] = veta
                        vexit[r, 1] = vphi
                    else:
                        Xe = legs_e[nlegs - 1]
                        ua = sqrt(ep - Xe) if ep > Xe else 0.0
                        _state(&P, ua, legs_g[nlegs - 1], &ve, &vp, &gg)
                        vexit[r, 0] = ve
                        vexit[r, 1] = vp
                    row_idx_arr = np.empty(nt, dtype=np.int32)
                    row_val_arr = np.empty(nt, dtype=np.float64)
                    row_idx = row_idx_arr
                    row_val = row_val_arr
                    for t in range(nt):
                        col = touched[t]
                        row_idx[t] = col
                        row_val[t] = acc[col]
                        acc[col] = 0.0
                        seen[col] = 0
                    order = np.argsort(row_idx_arr, kind="stable")
                    chunks_idx.append(row_idx_arr[order])
                    chunks_val.append(row_val_arr[order])
                    total += nt
                    ip[r + 1] = total
    finally:
        free(acc)
        free(touched)
        free(seen)
    indices = np.concatenate(chunks_idx) if chunks_idx else np.zeros(0, dtype=np.int32)
    data = np.concatenate(chunks_val) if chunks_val else np.zeros(0)
    return indptr, indices, data, att_arr, wall_arr, vexit_arr
