"""Time-dependent problem in the shear frame by a semi-Lagrangian gain/loss scheme.

One step of size dt:

    G_{n+1} = [SL(G_n) + dt Q+(G_n, G_n)] / [1 + dt R(G_n)]

where SL(G) is G at the foot of the backward characteristic through each
node (or the diffuse wall value if the path leaves the annulus within dt),
Q+ is the gain part of the collision operator and R(G) = sum W G(v*) the
loss frequency.  Every term is nonnegative for nonnegative G.

When a steady profile is supplied the step is well balanced: the residual
r = (1 + dt R_st) G_st - SL(G_st) - dt Q+_st of the steady profile is
added back as r+ in the numerator and r- / G_st in the denominator, which
makes G_st an exact fixed point while keeping the ratio structure.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericError, PreconditionError
from .geometry import AnnulusGeometry, leg_time, rk4_characteristic, turning_point, veta2_at, vphi_at
from .kinetic_core import MU0, CollisionModel, VelocityGrid
from .transport import SpatialGrid, level_info, outgoing_flux

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeStepperConfig:
    """dt=None selects 0.1 / max R(mu) on the grid when the problem is built."""

    dt: float | None = None
    t_end: float = 8.0
    scheme: str = "gain-loss"
    positivity_tol: float = 1e-12
    history_stride: int = 1
    well_balanced: bool = True
    renormalize_mass: bool = True
    growth_limit: float = 10.0

    def __post_init__(self) -> None:
        if self.dt is not None and not self.dt > 0.0:
            raise ConfigError("dt must be positive")
        if not self.t_end > 0.0:
            raise ConfigError("t_end must be positive")
        if self.scheme != "gain-loss":
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if not 0.0 <= self.positivity_tol <= 1e-10:
            raise ConfigError("positivity_tol must lie in [0, 1e-10]")
        if self.history_stride < 1:
            raise ConfigError("history_stride must be >= 1")

    @property
    def n_steps(self) -> int:
        if self.dt is None:
            raise ConfigError("dt is not resolved yet")
        return int(math.ceil(self.t_end / self.dt - 1e-9))


@dataclass
class DecayFit:
    times: np.ndarray
    sup_norm_history: np.ndarray
    lambda0_hat: float | None
    fit_window: tuple[float, float] | None
    r_squared: float | None
    intercept: float | None = None
    extra: dict = field(default_factory=dict)

    def predicted(self, t: float) -> float | None:
        if self.lambda0_hat is None:
            return None
        return float(math.exp(self.intercept - self.lambda0_hat * t))


# ---------------------------------------------------------------------------
# semi-Lagrangian operator


def backward_exit_time(eta, v_eta, v_phi, geom: AnnulusGeometry, n_sub: int = 8):
    """(time to reach the wall backward, wall index, eta_plus) for arrays of nodes."""
    c = geom.shear_c
    eta1 = geom.eta1
    eta = np.asarray(eta, dtype=float)
    ep = turning_point(eta, v_eta, v_phi, c)
    up = v_eta < 0.0
    a3 = up & (ep >= eta1)
    a2 = up & ~a3
    t = np.zeros(eta.shape)
    if np.any(~up):
        m = ~up
        t[m] = leg_time(0.0, eta[m], eta[m], v_eta[m], v_phi[m], c, ep[m], n_sub)
    if np.any(a2):
        m = a2
        t[m] = leg_time(eta[m], ep[m], eta[m], v_eta[m], v_phi[m], c, ep[m], n_sub) + leg_time(
            0.0, ep[m], eta[m], v_eta[m], v_phi[m], c, ep[m], n_sub
        )
    if np.any(a3):
        m = a3
        t[m] = leg_time(eta[m], eta1, eta[m], v_eta[m], v_phi[m], c, ep[m], n_sub)
    wall = np.where(a3, 1, 0).astype(np.int8)
    return t, wall, ep


def characteristic_feet(eta, v_eta, v_phi, v_z, dt: float, geom: AnnulusGeometry, n_rk: int | None = None):
    """Backward feet after time dt for nodes whose path stays inside.

    RK4 gives the position and the sign of V_eta; V_phi is then restored from
    the angular invariant and |V_eta| from the closed form at that position.
    """
    c = geom.shear_c
    speed = float(np.max(np.sqrt(v_eta**2 + v_phi**2 + v_z**2))) if np.size(eta) else 0.0
    if n_rk is None:
        n_rk = max(8, int(math.ceil(40.0 * dt * max(speed, 1.0))))
    state = np.stack([eta, v_eta, v_phi, v_z], axis=-1)
    y = rk4_characteristic(state, -dt, n_rk, geom.alpha, geom.eta1)
    X = np.clip(y[..., 0], 0.0, geom.eta1)
    vp = vphi_at(X, eta, v_phi, c)
    ve2 = np.maximum(veta2_at(X, eta, v_eta, v_phi, c), 0.0)
    ve = np.copysign(np.sqrt(ve2), y[..., 1])
    return X, ve, vp


@dataclass
class SemiLagrangianOperator:
    """SL(G) = P G + prof0 J0(G) + prof1 J1(G) on folded fields (n, n, nk, E).

    The (eta, v_eta, v_phi) characteristics do not involve v_z, so a single
    interpolation matrix P acts on every v_z level.
    """

    matrix: sp.csr_matrix
    prof0: np.ndarray
    prof1: np.ndarray
    grid: VelocityGrid
    shape: tuple
    exit_time: np.ndarray

    def interpolate(self, G: np.ndarray) -> np.ndarray:
        """Interior part P G (zero on rows whose path reaches a wall)."""
        n, _, nk, E = self.shape
        flat = np.moveaxis(G, 2, 3).reshape(n * n * E, nk)
        return np.moveaxis((self.matrix @ flat).reshape(n, n, E, nk), 3, 2)

    def apply(self, G: np.ndarray, ref: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
        """SL(G); with ref = (G_ref, base) the interior part is base * P(G / G_ref).

        With base = G_ref the reference is moved exactly up to the O(dt)
        change of G_ref along the path (left to the well-balancing residual),
        and interpolation only acts on the relative perturbation, which stays
        smooth where G itself is a steep Gaussian.
        """
        if ref is None:
            out = self.interpolate(G)
        else:
            G_ref, base = ref
            out = base * self.interpolate(G / G_ref)
        J0 = outgoing_flux(G[..., 0], self.grid, 0, "G-form")
        J1 = outgoing_flux(G[..., -1], self.grid, 1, "G-form")
        return out + self.prof0 * J0 + self.prof1 * J1


def build_sl_operator(grid: VelocityGrid, sgrid: SpatialGrid, geom: AnnulusGeometry, dt: float) -> SemiLagrangianOperator:
    n = grid.n
    k0 = grid.kz_half
    nk = n - k0
    E = sgrid.n_nodes
    v1 = grid.nodes1d
    deta = sgrid.d_eta
    c_w = grid.wall_constant
    ie, ip, ee = np.meshgrid(np.arange(n), np.arange(n), np.arange(E), indexing="ij")
    ie, ip, ee = ie.ravel(), ip.ravel(), ee.ravel()
    eta = sgrid.nodes[ee]
    ve0, vp0 = v1[ie], v1[ip]
    rows_all = (ie * n + ip) * E + ee
    size = n * n * E
    tstar, wall, _ = backward_exit_time(eta, ve0, vp0, geom)
    leaves = tstar <= dt
    prof0 = np.zeros((n, n, nk, E))
    prof1 = np.zeros((n, n, nk, E))
    # diffuse wall values c_w mu(V_exit) J at the exit point
    if np.any(leaves):
        X_w = np.where(wall[leaves] == 1, geom.eta1, 0.0)
        vp_w = vphi_at(X_w, eta[leaves], vp0[leaves], geom.shear_c)
        ve2_w = np.maximum(veta2_at(X_w, eta[leaves], ve0[leaves], vp0[leaves], geom.shear_c), 0.0)
        vz2 = v1[k0:] ** 2
        val = c_w * MU0 * np.exp(-0.5 * (ve2_w + vp_w**2)[:, None] - 0.5 * vz2[None, :])
        i, j, e = ie[leaves], ip[leaves], ee[leaves]
        w0 = wall[leaves] == 0
        prof0[i[w0], j[w0], :, e[w0]] = val[w0]
        prof1[i[~w0], j[~w0], :, e[~w0]] = val[~w0]
    inside = ~leaves
    X, ve, vp = characteristic_feet(eta[inside], ve0[inside], vp0[inside], np.zeros(inside.sum()), dt, geom,
                                    n_rk=max(8, int(math.ceil(40.0 * dt * math.sqrt(2.0) * grid.v_max))))
    # linear in eta, bilinear in (v_eta, v_phi), zero outside the velocity box
    fe = X / deta
    e0 = np.clip(np.floor(fe).astype(np.int64), 0, E - 2)
    te = fe - e0
    fi = (ve + grid.v_max) / grid.h
    fj = (vp + grid.v_max) / grid.h
    i0 = np.floor(fi).astype(np.int64)
    j0 = np.floor(fj).astype(np.int64)
    ti, tj = fi - i0, fj - j0
    rows = rows_all[inside]
    R, C, D = [], [], []
    for a in (0, 1):
        for b in (0, 1):
            ci, cj = i0 + a, j0 + b
            ok = (ci >= 0) & (ci < n) & (cj >= 0) & (cj < n)
            wv = (ti if a else 1.0 - ti) * (tj if b else 1.0 - tj)
            for d in (0, 1):
                we = wv * (te if d else 1.0 - te)
                keep = ok & (we != 0.0)
                R.append(rows[keep])
                C.append(((ci[keep] * n + cj[keep]) * E) + e0[keep] + d)
                D.append(we[keep])
    mat = sp.csr_matrix((np.concatenate(D), (np.concatenate(R), np.concatenate(C))), shape=(size, size))
    mat.sum_duplicates()
    t_exit = np.broadcast_to(tstar.reshape(n, n, 1, E), (n, n, nk, E))
    return SemiLagrangianOperator(mat, prof0, prof1, grid, (n, n, nk, E), t_exit)


# ---------------------------------------------------------------------------
# stepping


def default_dt(cm: CollisionModel) -> float:
    """0.1 / max R(mu): the explicit gain term moves at most a tenth of the loss scale per step."""
    return 0.1 / float(np.max(cm.loss_frequency_mu))


class UnsteadyProblem:
    """Grids, collision model and the cached SL operator for one dt."""

    def __init__(
        self,
        geom: AnnulusGeometry,
        grid: VelocityGrid,
        sgrid: SpatialGrid,
        cm: CollisionModel,
        cfg: TimeStepperConfig,
        ell: float = 8.0,
    ) -> None:
        self.geom = geom
        self.grid = grid
        self.sgrid = sgrid
        self.cm = cm
        if cfg.dt is None:
            cfg = replace(cfg, dt=default_dt(cm))
        self.cfg = cfg
        self.ell = ell
        k0 = grid.kz_half
        self.shape = (grid.n, grid.n, grid.n - k0, sgrid.n_nodes)
        self.w = grid.weight(ell)[:, :, k0:, None]
        self.mu = grid.mu[:, :, k0:, None]
        _, self.mult = level_info(grid, grid.n - k0)
        t0 = time.perf_counter()
        self.sl = build_sl_operator(grid, sgrid, geom, cfg.dt)
        self.build_seconds = time.perf_counter() - t0
        self._balance: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
        self._ref: tuple[np.ndarray, np.ndarray] | None = None

    def mass(self, G: np.ndarray) -> float:
        per_eta = np.sum(G, axis=(0, 1, 2)) * self.grid.quad_weight * self.mult
        return float(2.0 * math.pi * np.dot(per_eta, self.sgrid.jacobian_weights))

    def wsup(self, f: np.ndarray) -> float:
        return float(np.max(np.abs(self.w * f)))

    def collision_parts(self, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        full = self.grid.unfold_even(G)
        return self.cm.collide_parts(full, full, half=True)

    def raw_update(self, G: np.ndarray):
        """(numerator, denominator) of the unbalanced gain/loss step."""
        dt = self.cfg.dt
        gain, rate = self.collision_parts(G)
        return self.sl.apply(G, self._ref) + dt * gain, 1.0 + dt * rate, rate

    def set_reference(self, G_st: np.ndarray | None) -> dict:
        """Precompute the well-balancing residual of a steady profile.

        The profile also becomes the ratio reference of the interpolation when
        it is positive everywhere.
        """
        self._balance = None
        self._ref = None
        if G_st is None:
            return {}
        positive = bool(np.all(G_st > 0.0))
        if positive:
            self._ref = (G_st, G_st)
        num, den, _ = self.raw_update(G_st)
        r = den * G_st - num
        floor = np.where(G_st > 0.0, G_st, np.inf)
        rp = np.maximum(r, 0.0)
        rm = np.maximum(-r, 0.0) / floor
        self._balance = (G_st, rp, rm)
        return {
            "balance_residual_wsup": self.wsup(r),
            "balance_residual_relative": self.wsup(r) / max(self.wsup(G_st), 1e-300),
            "nonpositive_reference_nodes": int(np.sum(G_st <= 0.0)),
            "ratio_interpolation": positive,
        }


def time_step(G_n: np.ndarray, dt: float | None, problem: UnsteadyProblem) -> tuple[np.ndarray, dict]:
    """One gain/loss step; returns (G_{n+1}, step report).

    dt must match the problem's configured dt (the SL operator is built for it).
    """
    cfg = problem.cfg
    if dt is not None and abs(dt - cfg.dt) > 1e-15 * cfg.dt:
        raise ConfigError(f"dt={dt} differs from the operator's dt={cfg.dt}")
    mn = float(np.min(G_n))
    if mn < -cfg.positivity_tol:
        raise PreconditionError(f"negative input: min G = {mn:.3e}")
    G_in = np.maximum(G_n, 0.0)
    num, den, rate = problem.raw_update(G_in)
    if problem._balance is not None:
        _, rp, rm = problem._balance
        num = num + rp
        den = den + rm
    G = num / den
    m_in = problem.mass(G_in)
    m_out = problem.mass(G)
    report = {
        "mass_in": m_in,
        "mass_defect": m_out - m_in,
        "min_G": float(np.min(G)),
        "clamped": float(max(0.0, -mn)),
        "dt_max_R": float(cfg.dt * np.max(rate)),
    }
    if cfg.renormalize_mass and m_out != 0.0:
        G = G * (m_in / m_out)
    return G, report


# ---------------------------------------------------------------------------
# perturbations and fits


def perturbation_recipe(G_st: np.ndarray, problem: UnsteadyProblem, amplitude: float = 0.05, shape: str = "heat") -> np.ndarray:
    """Zero-mass perturbation kappa mu [q(eta)(|v|^2 - 3) - m] scaled to the given weighted-sup fraction.

    q(eta) = 1 + cos(pi eta / eta1) >= 0, m makes the mass vanish and kappa gives
    ||w (G0 - G_st)||_inf = amplitude ||w G_st||_inf.
    """
    grid = problem.grid
    k0 = grid.kz_half
    eta = problem.sgrid.nodes
    if shape != "heat":
        raise ConfigError(f"unknown perturbation shape {shape!r}")
    q = 1.0 + np.cos(math.pi * eta / problem.geom.eta1)
    s2 = grid.speed2[:, :, k0:, None]
    p = problem.mu * (s2 - 3.0) * q[None, None, None, :]
    m = problem.mass(p) / problem.mass(np.broadcast_to(problem.mu, problem.shape))
    p = p - m * problem.mu
    kappa = amplitude * problem.wsup(G_st) / problem.wsup(p)
    return G_st + kappa * p


def fit_decay(times: np.ndarray, hist: np.ndarray, tail_fraction: float = 0.5) -> DecayFit:
    """Least-squares log-linear fit on the last tail_fraction of the history."""
    times = np.asarray(times, dtype=float)
    hist = np.asarray(hist, dtype=float)
    if hist.size < 4 or hist[0] <= 0.0 or np.any(hist <= 0.0):
        return DecayFit(times, hist, None, None, None)
    if math.log(hist[0] / hist[-1]) < 2.0:
        return DecayFit(times, hist, None, None, None, extra={"reason": "fewer than 2 e-foldings"})
    start = int(math.floor((1.0 - tail_fraction) * (hist.size - 1)))
    t = times[start:]
    y = np.log(hist[start:])
    A = np.stack([np.ones_like(t), t], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0.0 else 1.0
    return DecayFit(times, hist, float(-coef[1]), (float(t[0]), float(t[-1])), r2, float(coef[0]))


def smoothed_monotone(hist: np.ndarray, window: int = 5, skip_fraction: float = 0.2) -> bool:
    """Moving average over window samples is nonincreasing after the initial transient."""
    h = np.asarray(hist, dtype=float)
    if h.size < window + 2:
        return True
    sm = np.convolve(h, np.ones(window) / window, mode="valid")
    start = int(skip_fraction * sm.size)
    d = np.diff(sm[start:])
    return bool(np.all(d <= 1e-12 * max(sm[0], 1e-300)))


def evolve_and_fit(
    G0: np.ndarray,
    G_st: np.ndarray,
    problem: UnsteadyProblem,
    mass_tol: float = 1e-8,
    eps0: float | None = None,
    callback=None,
) -> DecayFit:
    """March to t_end from G0 and fit the decay of ||w (G - G_st)||_inf."""
    cfg = problem.cfg
    if float(np.min(G0)) < -cfg.positivity_tol:
        raise PreconditionError("initial data must be nonnegative")
    m0, m_st = problem.mass(G0), problem.mass(G_st)
    if abs(m0 - m_st) > mass_tol * max(abs(m_st), 1e-300):
        raise PreconditionError(f"(M1) violated: mass(G0) - mass(G_st) = {m0 - m_st:.3e}")
    d0 = problem.wsup(G0 - G_st)
    if eps0 is not None and d0 > eps0:
        raise PreconditionError(f"initial distance {d0:.3e} exceeds eps0 = {eps0:.3e}")
    balance = problem.set_reference(G_st if cfg.well_balanced else None)
    times = [0.0]
    hist = [d0]
    rows = [(0.0, d0, l2_norm(G0 - G_st, problem), m0, float(np.min(G0)))]
    G = np.maximum(G0, 0.0)
    raw_defect = 0.0
    max_dtR = 0.0
    min_G = float(np.min(G))
    clamped = 0.0
    if d0 == 0.0:
        return DecayFit(np.array(times), np.array(hist), None, None, None, extra={"reason": "steady initial data"})
    t0 = time.perf_counter()
    for step in range(1, cfg.n_steps + 1):
        G, rep = time_step(G, cfg.dt, problem)
        raw_defect += rep["mass_defect"]
        max_dtR = max(max_dtR, rep["dt_max_R"])
        min_G = min(min_G, rep["min_G"])
        clamped = max(clamped, rep["clamped"])
        t = step * cfg.dt
        d = problem.wsup(G - G_st)
        if d > cfg.growth_limit * d0:
            raise NumericError(f"instability: distance grew to {d:.3e} (initial {d0:.3e}) at t={t:g}")
        if step % cfg.history_stride == 0 or step == cfg.n_steps:
            times.append(t)
            hist.append(d)
            rows.append((t, d, l2_norm(G - G_st, problem), problem.mass(G), float(np.min(G))))
        if callback is not None:
            callback(step, t, G, d)
    fit = fit_decay(np.array(times), np.array(hist))
    fit.extra.update(
        balance,
        raw_mass_defect=raw_defect,
        raw_mass_defect_relative=raw_defect / max(abs(m0), 1e-300),
        final_mass_drift_relative=(problem.mass(G) - m0) / max(abs(m0), 1e-300),
        min_G=min_G,
        max_clamped=clamped,
        dt_max_R=max_dtR,
        terminal_distance=hist[-1],
        initial_distance=d0,
        monotone_envelope=smoothed_monotone(np.array(hist)),
        seconds=time.perf_counter() - t0,
        sl_build_seconds=problem.build_seconds,
        rows=rows,
        final_field=G,
    )
    return fit


def l2_norm(f: np.ndarray, problem: UnsteadyProblem) -> float:
    """(2 pi int (1 - eta) int |f|^2)^{1/2} for a folded field."""
    return math.sqrt(max(problem.mass(f * f), 0.0))
