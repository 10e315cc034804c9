"""Pure NumPy versions of the compiled kernels.

Each function mirrors the signature of its counterpart in ``_kernels.pyx``
and returns bit-for-bit comparable results up to summation order.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _box(shift_lists, n):
    """Index range [lo, hi) along one axis keeping every shifted index inside [0, n)."""
    lo = max(0, *(-s for s in shift_lists))
    hi = min(n, *(n - s for s in shift_lists))
    return lo, hi


def collide(F1, F2, mi, ni, w, kz_start: int = 0, n_threads: int = 1):
    """Lattice gain and loss-frequency sums.

    F1, F2: arrays (n, n, n, E).  Returns (gain, lossfreq) on rows k >= kz_start:
    gain(v) = sum_p w_p F1(v+m_p) F2(v+n_p),  lossfreq(v) = sum_p w_p F1(v+m_p+n_p).
    """
    n = F1.shape[0]
    E = F1.shape[3]
    nk = n - kz_start
    gain = np.zeros((n, n, nk, E))
    loss = np.zeros((n, n, nk, E))
    for p in range(mi.shape[0]):
        m = mi[p]
        q = ni[p]
        s = m + q
        rng = []
        for ax in range(3):
            lo, hi = _box((0, int(m[ax]), int(q[ax]), int(s[ax])), n)
            if ax == 2:
                lo = max(lo, kz_start)
            rng.append((lo, hi))
        if any(hi <= lo for lo, hi in rng):
            continue
        (a0, a1), (b0, b1), (c0, c1) = rng
        out = (slice(a0, a1), slice(b0, b1), slice(c0 - kz_start, c1 - kz_start))
        sm = (slice(a0 + m[0], a1 + m[0]), slice(b0 + m[1], b1 + m[1]), slice(c0 + m[2], c1 + m[2]))
        sq = (slice(a0 + q[0], a1 + q[0]), slice(b0 + q[1], b1 + q[1]), slice(c0 + q[2], c1 + q[2]))
        ss = (slice(a0 + s[0], a1 + s[0]), slice(b0 + s[1], b1 + s[1]), slice(c0 + s[2], c1 + s[2]))
        gain[out] += w[p] * (F1[sm] * F2[sq])
        loss[out] += w[p] * F1[ss]
    return gain, loss


def assemble_linear(mu, mi, ni, w, fold: bool, n_threads: int = 1):
    """CSR arrays of A f = Q(mu, f) + Q(f, mu).

    With fold=True only rows k >= n/2 are built and columns are folded onto
    that half, giving the operator restricted to functions even in v_z.
    """
    n = mu.shape[0]
    half = n // 2
    kz0 = half if fold else 0
    nk = n - kz0
    rows = []
    cols = []
    vals = []
    idx = np.arange(n)

    def col_index(i, j, k):
        if fold:
            k = np.where(k < half, n - 1 - k, k) - half
        return (i * n + j) * nk + k

    for p in range(mi.shape[0]):
        m = mi[p]
        q = ni[p]
        s = m + q
        rng = []
        for ax in range(3):
            lo, hi = _box((0, int(m[ax]), int(q[ax]), int(s[ax])), n)
            if ax == 2:
                lo = max(lo, kz0)
            rng.append((lo, hi))
        if any(hi <= lo for lo, hi in rng):
            continue
        I, J, K = np.meshgrid(idx[rng[0][0]:rng[0][1]], idx[rng[1][0]:rng[1][1]], idx[rng[2][0]:rng[2][1]], indexing="ij")
        I = I.ravel()
        J = J.ravel()
        K = K.ravel()
        r = (I * n + J) * nk + (K - kz0)
        mu_m = mu[I + m[0], J + m[1], K + m[2]]
        mu_q = mu[I + q[0], J + q[1], K + q[2]]
        mu_s = mu[I + s[0], J + s[1], K + s[2]]
        mu_v = mu[I, J, K]
        rows += [r, r, r, r]
        cols += [
            col_index(I + q[0], J + q[1], K + q[2]),
            col_index(I + m[0], J + m[1], K + m[2]),
            col_index(I, J, K),
            col_index(I + s[0], J + s[1], K + s[2]),
        ]
        vals += [w[p] * mu_m, w[p] * mu_q, -w[p] * mu_s, -w[p] * mu_v]
    size = n * n * nk
    if rows:
        rows_a = np.concatenate(rows)
        cols_a = np.concatenate(cols)
        vals_a = np.concatenate(vals)
    else:
        rows_a = cols_a = np.zeros(0, dtype=np.int64)
        vals_a = np.zeros(0)
    mat = sp.csr_matrix((vals_a, (rows_a, cols_a)), shape=(size, size))
    mat.sum_duplicates()
    mat.sort_indices()
    return mat.indptr.astype(np.int64), mat.indices.astype(np.int32), mat.data, size


# ---------------------------------------------------------------------------
# transport operator along exact characteristics

ETA_CAP = 1.0 - 1e-12


def _gdiff(z1, z2, inv, c):
    d = z1 - z2
    s = z1 + z2
    return d * (inv * inv * s / (z1 * z1 * z2 * z2) + c * c * s) + 4.0 * inv * c * np.log1p(d / z2)


def _turning(eta, veta, vphi, c):
    z0 = 1.0 - eta
    inv = z0 * vphi - c * z0 * z0
    v2 = veta * veta
    lo = eta.copy()
    hi = np.full_like(eta, ETA_CAP)
    no_root = v2 + _gdiff(1.0 - hi, z0, inv, c) > 0.0
    active = np.ones(eta.shape, dtype=bool)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        pos = v2 + _gdiff(1.0 - mid, z0, inv, c) > 0.0
        lo = np.where(active & pos, mid, lo)
        hi = np.where(active & ~pos, mid, hi)
        active &= ~(hi - lo <= 0.25e-12)
        if not active.any():
            break
    x = 0.5 * (lo + hi)
    for _ in range(2):
        vp = inv / (1.0 - x) + c * (1.0 - x)
        slope = 2.0 * vp * vp / (1.0 - x)
        step = np.divide(v2 + _gdiff(1.0 - x, z0, inv, c), slope, out=np.zeros_like(x), where=slope > 0.0)
        cand = x + step
        x = np.where((slope > 0.0) & (cand >= lo) & (cand <= hi), cand, x)
    x = np.where(v2 == 0.0, eta, x)
    return np.where(no_root, ETA_CAP, x)


def _nu_interp(speed, tab, dr):
    r = speed / dr
    K = tab.shape[0]
    k = np.clip(np.floor(r).astype(np.int64), 0, K - 3)
    t = r - k
    f0 = tab[np.where(k >= 1, k - 1, 1)]
    f3 = tab[np.minimum(k + 2, K - 1)]
    return (
        -t * (t - 1.0) * (t - 2.0) / 6.0 * f0
        + (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0 * tab[k]
        - (t + 1.0) * t * (t - 2.0) / 2.0 * tab[k + 1]
        + (t + 1.0) * t * (t - 1.0) / 6.0 * f3
    )


def _state(u, sgn, inv, c, z2, r0):
    d = u * u
    z1 = z2 + d
    s = z1 + z2
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.where(d > 0.0, np.log1p(d / z2) / np.where(d > 0.0, d, 1.0), 1.0 / z2)
    q = inv * inv * s / (z1 * z1 * z2 * z2) + c * c * s + 4.0 * inv * c * lg
    v2 = np.maximum(r0 + d * q, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = 2.0 * u / np.sqrt(v2)
    return sgn * np.sqrt(v2), inv / z1 + c * z1, g


def transport_level(vz, v1d, eta_nodes, c, shift, aw, nu_tab, nu_dr, gx, gw, chunk: int = 2048):
    """NumPy twin of the compiled transport_level (same row order and outputs)."""
    v1d = np.asarray(v1d, dtype=float)
    eta_nodes = np.asarray(eta_nodes, dtype=float)
    nu_tab = np.asarray(nu_tab, dtype=float)
    gx = np.asarray(gx, dtype=float)
    gw = np.asarray(gw, dtype=float)
    n = v1d.size
    E = eta_nodes.size
    N = E - 1
    deta = eta_nodes[1] - eta_nodes[0]
    eta1 = eta_nodes[-1]
    vmin = v1d[0]
    hv = v1d[1] - v1d[0]
    size = n * n * E
    I, J, Ee = np.meshgrid(np.arange(n), np.arange(n), np.arange(E), indexing="ij")
    I, J, Ee = I.ravel(), J.ravel(), Ee.ravel()
    att = np.zeros(size)
    wall = np.zeros(size, dtype=np.int8)
    vexit = np.zeros((size, 2))
    mats = []

    def absorb(ve, vp):
        sp2 = ve * ve + vp * vp + vz * vz
        a = shift + _nu_interp(np.sqrt(sp2), nu_tab, nu_dr)
        if aw != 0.0:
            a = a + aw * ve * vp / (1.0 + sp2)
        return a

    for start in range(0, size, chunk):
        sl = slice(start, min(size, start + chunk))
        R = sl.stop - sl.start
        eta = eta_nodes[Ee[sl]]
        veta = v1d[I[sl]]
        vphi = v1d[J[sl]]
        z0 = 1.0 - eta
        inv = z0 * vphi - c * z0 * z0
        ep = _turning(eta, veta, vphi, c)
        z2 = 1.0 - ep
        r0 = np.maximum(veta * veta + _gdiff(z2, z0, inv, c), 0.0)
        a1 = veta >= 0.0
        a2 = (~a1) & (ep <= eta1)
        a3 = ~(a1 | a2)
        nlegs = np.where(a2, 2, 1)
        ls = np.stack([eta, np.where(a2, ep, 0.0)], axis=1)
        le = np.stack([np.where(a1, 0.0, np.where(a2, ep, eta1)), np.zeros(R)], axis=1)
        lg = np.stack([np.where(a1, 1.0, -1.0), np.ones(R)], axis=1)
        wall[sl] = np.where(a3, 1, 0)
        tau = np.zeros(R)
        rows_l, cols_l, vals_l = [], [], []
        local = np.arange(R)
        for leg in range(2):
            live_leg = nlegs > leg
            Xs, Xe, sgn = ls[:, leg], le[:, leg], lg[:, leg]
            cur = Xs.copy()
            for _ in range(4 * E + 4):
                live = live_leg & (cur != Xe)
                if not live.any():
                    break
                down = Xe < cur
                m_dn = np.clip(np.ceil(cur / deta - 1e-9).astype(np.int64) - 1, 0, N - 1)
                m_up = np.clip(np.floor(cur / deta + 1e-9).astype(np.int64), 0, N - 1)
                nxt = np.where(down, np.maximum(eta_nodes[m_dn], Xe), np.minimum(eta_nodes[m_up + 1], Xe))
                live &= nxt != cur
                if not live.any():
                    break
                idx = local[live]
                cu, nx, epl = cur[live], nxt[live], ep[live]
                ua = np.where(epl > cu, np.sqrt(np.maximum(epl - cu, 0.0)), 0.0)
                ub = np.where(epl > nx, np.sqrt(np.maximum(epl - nx, 0.0)), 0.0)
                half = 0.5 * (ub - ua)
                args = (sgn[live], inv[live], c, z2[live], r0[live])
                full = np.zeros(idx.size)
                for q in range(gx.size):
                    uq = ua + half * (gx[q] + 1.0)
                    ve, vp, gg = _state(uq, *args)
                    hs = 0.5 * (uq - ua)
                    tq = np.zeros(idx.size)
                    for qq in range(gx.size):
                        ve2, vp2, g2 = _state(ua + hs * (gx[qq] + 1.0), *args)
                        tq += gw[qq] * absorb(ve2, vp2) * g2
                    tq = tau[live] + np.abs(hs) * tq
                    wgt = np.abs(half) * gw[q] * gg * np.exp(-tq)
                    full += gw[q] * absorb(ve, vp) * gg
                    fx = (epl - uq * uq) / deta
                    e0 = np.clip(np.floor(fx).astype(np.int64), 0, N - 1)
                    te = fx - e0
                    fi = (ve - vmin) / hv
                    fj = (vp - vmin) / hv
                    i0 = np.floor(fi).astype(np.int64)
                    j0 = np.floor(fj).astype(np.int64)
                    ti = fi - i0
                    tj = fj - j0
                    for a in range(2):
                        ci = i0 + a
                        wi = ti if a == 1 else 1.0 - ti
                        for b in range(2):
                            cj = j0 + b
                            wj = tj if b == 1 else 1.0 - tj
                            ok = (ci >= 0) & (ci < n) & (cj >= 0) & (cj < n)
                            col = (ci * n + cj) * E + e0
                            base = wgt * wi * wj
                            rows_l += [idx[ok], idx[ok]]
                            cols_l += [col[ok], col[ok] + 1]
                            vals_l += [(base * (1.0 - te))[ok], (base * te)[ok]]
                tau[live] += np.abs(half) * full
                cur = np.where(live, nxt, cur)
        att[sl] = np.exp(-tau)
        last = np.where(a2, 1, 0)
        Xl = le[local, last]
        gl = lg[local, last]
        ua = np.where(ep > Xl, np.sqrt(np.maximum(ep - Xl, 0.0)), 0.0)
        ve, vp, _ = _state(ua, gl, inv, c, z2, r0)
        zero_len = (nlegs == 1) & (ls[:, 0] == le[:, 0])
        vexit[sl, 0] = np.where(zero_len, veta, ve)
        vexit[sl, 1] = np.where(zero_len, vphi, vp)
        if rows_l:
            rr = np.concatenate(rows_l)
            cc = np.concatenate(cols_l)
            vv = np.concatenate(vals_l)
        else:
            rr = cc = np.zeros(0, dtype=np.int64)
            vv = np.zeros(0)
        block = sp.csr_matrix((vv, (rr, cc)), shape=(R, size))
        block.sum_duplicates()
        mats.append(block)
    mat = sp.vstack(mats, format="csr")
    mat.sort_indices()
    return mat.indptr.astype(np.int64), mat.indices.astype(np.int32), mat.data, att, wall, vexit
