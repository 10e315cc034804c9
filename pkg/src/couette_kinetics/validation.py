"""Property checks behind the `validate` command.

Each check returns a Check record (name, passed, measured value, tolerance,
details).  All randomness comes from one numpy Generator seeded from the
run configuration, so repeated runs are identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .geometry import (
    AnnulusGeometry,
    PhasePoint,
    angular_invariant,
    exit_details,
    rk4_characteristic,
    turning_point,
    veta2_at,
    vphi_at,
    wall_return_velocities,
)
from .kinetic_core import CollisionModel, KineticConfig, VelocityGrid, collision_frequency
from .transport import SpatialGrid, TransportCoeffs, TransportOperator


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": float(self.value), "tolerance": float(self.tolerance)} | {
            k: v for k, v in self.details.items()
        }


# ---------------------------------------------------------------------------
# characteristics


def characteristic_samples(rng: np.random.Generator, n: int, alpha_max: float = 0.1):
    """Random (r1, alpha, eta, v) with backward travel times inside the exit time."""
    r1 = rng.uniform(0.2, 0.8, n)
    alpha = rng.uniform(0.0, alpha_max, n)
    eta1 = 1.0 - r1
    eta = rng.uniform(0.05, 0.95, n) * eta1
    v = rng.uniform(-3.0, 3.0, (n, 3))
    frac = rng.uniform(0.1, 0.9, n)
    return r1, alpha, eta, v, frac


def check_characteristics(rng: np.random.Generator, n: int = 1000, n_steps: int = 4000) -> list[Check]:
    """Closed-form states against RK4 integration of the characteristic system."""
    r1, alpha, eta, v, frac = characteristic_samples(rng, n)
    s = np.empty(n)
    for i in range(n):
        geom = AnnulusGeometry(float(r1[i]), float(alpha[i]), alpha_cap=0.1)
        s[i] = frac[i] * exit_details(PhasePoint(float(eta[i]), *map(float, v[i])), geom).t_star
    eta1 = 1.0 - r1
    c = alpha / (2.0 * eta1)
    # all samples integrated together, each with its own step, shear and gap
    y = rk4_characteristic(np.column_stack([eta, v]), -s, n_steps, alpha, eta1)
    X, ve_rk, vp_rk = y[:, 0], y[:, 1], y[:, 2]
    vp = vphi_at(X, eta, v[:, 1], c)
    ve = np.copysign(np.sqrt(np.maximum(veta2_at(X, eta, v[:, 0], v[:, 1], c), 0.0)), ve_rk)
    scale = np.sqrt(ve_rk**2 + vp_rk**2 + v[:, 2] ** 2)
    rel = np.hypot(ve - ve_rk, vp - vp_rk) / scale
    inv0 = angular_invariant(eta, v[:, 1], c)
    drift = np.abs(angular_invariant(X, vp_rk, c) - inv0) / np.maximum(np.abs(inv0), 1.0)
    # alpha = 0: closed-form speed along the path
    X = rng.uniform(0.0, 0.99, n)
    sp = np.zeros(n)
    for i in range(n):
        e, ve, vp, vz = eta[i], v[i, 0], v[i, 1], v[i, 2]
        v2 = float(veta2_at(X[i], e, ve, vp, 0.0))
        if v2 < 0.0:
            continue
        V2 = v2 + float(vphi_at(X[i], e, vp, 0.0)) ** 2 + vz * vz
        sp[i] = abs(V2 - (ve * ve + vp * vp + vz * vz)) / (ve * ve + vp * vp + vz * vz)
    return [
        Check("characteristics_closed_form_vs_rk4", bool(rel.max() <= 1e-8), float(rel.max()), 1e-8, {"samples": n}),
        Check("characteristics_angular_drift", bool(drift.max() <= 1e-10), float(drift.max()), 1e-10),
        Check("characteristics_speed_alpha0", bool(sp.max() <= 1e-12), float(sp.max()), 1e-12),
    ]


def check_wall_return(rng: np.random.Generator, r1: float = 0.5, alphas=(0.01, 0.02, 0.05), n: int = 400) -> list[Check]:
    """(V1) identity and the (V3) energy-ratio bounds with the measured constant."""
    eta1 = 1.0 - r1
    # (V1): from the outer wall, turning before eta1
    v1_err = 0.0
    count = 0
    for a in alphas:
        geom = AnnulusGeometry(r1, a, alpha_cap=max(0.05, a))
        c = geom.shear_c
        v = np.array([(-rng.uniform(0.05, 2.0), rng.uniform(-3.0, 3.0), rng.uniform(-2.0, 2.0)) for _ in range(n)])
        a2 = turning_point(np.zeros(n), v[:, 0], v[:, 1], c) <= eta1
        v = v[a2]
        count += len(v)
        ret = wall_return_velocities(0.0, v, geom)
        # independent closed-form evaluation at X = 0 on the post-turn branch
        ve = np.sqrt(np.maximum(veta2_at(0.0, 0.0, v[:, 0], v[:, 1], c), 0.0))
        vp = vphi_at(0.0, 0.0, v[:, 1], c)
        errs = [np.abs(ret[:, 0] - ve), np.abs(ret[:, 1] - vp), np.abs(ve + v[:, 0]), np.abs(vp - v[:, 1])]
        v1_err = max([v1_err] + [float(e.max(initial=0.0)) for e in errs])
    checks = [Check("wall_return_V1", bool(v1_err <= 1e-10), v1_err, 1e-10, {"samples": count})]
    lows, consts = [], []
    for a in alphas:
        geom = AnnulusGeometry(r1, a, alpha_cap=max(0.05, a))
        ratios = []
        for wall in (0.0, eta1):
            s = -1.0 if wall == 0.0 else 1.0
            v = np.array([(s * rng.uniform(0.1, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-2.0, 2.0)) for _ in range(n)])
            w = wall_return_velocities(wall, v, geom)
            ratios.append((1.0 + np.sum(w * w, axis=1)) / (1.0 + np.sum(v * v, axis=1)))
        r = np.concatenate(ratios)
        lows.append(float(r.min()))
        consts.append(float((r.max() - 1.0) / a))
    spread = (max(consts) - min(consts)) / max(np.mean(consts), 1e-300)
    low_ok = min(lows) >= 1.0 - 1e-12
    checks.append(Check("wall_return_V3_upper_constant_stable", bool(spread <= 0.2), spread, 0.2, {"C": consts}))
    checks.append(Check("wall_return_V3_lower_bound", bool(low_ok), min(lows), 1.0, {"min_ratio_per_alpha": lows}))
    return checks


# ---------------------------------------------------------------------------
# collisions


def check_collisions(rng: np.random.Generator, grid: VelocityGrid, kcfg: KineticConfig, cm: CollisionModel | None = None) -> list[Check]:
    cm = cm or CollisionModel(grid, kcfg)
    mu = grid.mu
    w = grid.weight(kcfg.ell)
    q_mumu = float(np.max(np.abs(w * cm.q(mu, mu))))
    # random positive field, symmetric Q(F, F): five moments
    F = mu * (1.0 + 0.3 * rng.uniform(-1.0, 1.0, mu.shape))
    q = cm.q(F, F)
    ve, vp, vz = grid.components
    mom = [np.sum(q * b) * grid.quad_weight for b in (np.ones_like(mu), ve, vp, vz, grid.speed2)]
    scale = float(np.sum(np.abs(q) * (1.0 + grid.speed2)) * grid.quad_weight)
    mom_err = max(abs(float(m)) for m in mom) / max(scale, 1e-300)
    checks = [
        Check("collision_Q_mu_mu", bool(q_mumu <= 1e-6), q_mumu, 1e-6),
        Check("collision_invariants", bool(mom_err <= 1e-6), mom_err, 1e-6),
    ]
    small = VelocityGrid(grid.v_max, 9)
    cms = CollisionModel(small, KineticConfig(kcfg.gamma, kcfg.b0_norm, kcfg.ell, kcfg.M_cut, kcfg.collision_range))
    N = small.n**3
    eye = np.eye(N).reshape(small.n, small.n, small.n, N)
    L, _ = cms.linearized_L(eye)
    L = L.reshape(N, N)
    sym = float(np.max(np.abs(L - L.T)) / max(np.max(np.abs(L)), 1e-300))
    lam_min = float(np.linalg.eigvalsh(0.5 * (L + L.T)).min())
    checks.append(Check("collision_L_symmetric", bool(sym <= 1e-8), sym, 1e-8))
    checks.append(Check("collision_L_psd", bool(lam_min >= -1e-8), lam_min, -1e-8))
    nu0 = collision_frequency(grid.nodes, KineticConfig(gamma=0.0, b0_norm=kcfg.b0_norm))
    err = float(np.max(np.abs(nu0 - 2.0 * math.pi * kcfg.b0_norm)))
    checks.append(Check("collision_nu_gamma0", bool(err <= 1e-6), err, 1e-6))
    return checks


# ---------------------------------------------------------------------------
# transport order by a manufactured source


def _mms_source(eta, ve, vp):
    return (np.cos(3.0 * eta) + eta * eta) * (1.0 + 0.3 * ve - 0.2 * vp + 0.1 * ve * vp)


def mms_reference(p: PhasePoint, geom: AnnulusGeometry, nu_fn, eps: float) -> float:
    """Backward integral of exp(-optical depth) S by adaptive ODE integration to the wall."""
    k = geom.alpha / geom.eta1
    eta1 = geom.eta1

    def rhs(_s, y):
        X, ve, vp, tau, _ = y
        z = 1.0 - X
        sp = math.sqrt(ve * ve + vp * vp + p.v_z * p.v_z)
        return [-ve, vp * vp / z, -(ve * vp / z - k * ve), eps + nu_fn(sp), math.exp(-tau) * float(_mms_source(X, ve, vp))]

    def hit0(_s, y):
        return y[0]

    def hit1(_s, y):
        return eta1 - y[0]

    hit0.terminal = hit1.terminal = True
    hit0.direction = hit1.direction = -1.0
    t_star = exit_details(p, geom).t_star
    sol = solve_ivp(rhs, (0.0, 2.0 * t_star + 1.0), [p.eta, p.v_eta, p.v_phi, 0.0, 0.0], method="DOP853",
                    rtol=1e-12, atol=1e-14, events=(hit0, hit1))
    return float(sol.y[4, -1])


def mms_transport(
    seed: int = 0,
    n_v: int = 12,
    v_max: float = 6.0,
    cells=(8, 16, 32, 64),
    r1: float = 0.5,
    alpha: float = 0.02,
    eps: float = 0.0,
    n_sample: int = 120,
    speed_cap: float = 0.6,
) -> dict:
    """Error of the transport operator against the ODE reference as eta is refined.

    The source is bilinear in (v_eta, v_phi), so the velocity interpolation is
    exact while the path stays in the velocity box; what remains is the
    eta interpolation and the quadrature along the path.
    """
    rng = np.random.default_rng(seed)
    geom = AnnulusGeometry(r1, alpha)
    grid = VelocityGrid(v_max, n_v)
    cm = CollisionModel(grid, KineticConfig())
    table = cm.nu_table
    k0 = grid.kz_half
    ve = grid.nodes1d
    coarse = SpatialGrid(geom.eta1, cells[0])
    # sample nodes on the coarsest eta grid (shared by all refinements), interior only
    cand = []
    for e in range(1, coarse.n_nodes - 1):
        for i in range(grid.n):
            for j in range(grid.n):
                for kk in range(grid.n - k0):
                    if math.sqrt(ve[i] ** 2 + ve[j] ** 2 + ve[k0 + kk] ** 2) <= speed_cap * v_max:
                        cand.append((e, i, j, kk))
    pick = rng.choice(len(cand), size=min(n_sample, len(cand)), replace=False)
    sample = [cand[t] for t in sorted(pick)]
    ref = np.array([
        mms_reference(PhasePoint(coarse.nodes[e], ve[i], ve[j], ve[k0 + kk]), geom, lambda s: float(table(np.array(s))), eps)
        for e, i, j, kk in sample
    ])
    errs = []
    for nc in cells:
        sg = SpatialGrid(geom.eta1, nc)
        op = TransportOperator(grid, sg, geom, TransportCoeffs(epsilon=eps), table, n_gauss=4, folded=True)
        E, VE, VP = np.meshgrid(sg.nodes, ve, ve, indexing="ij")
        S = _mms_source(E, VE, VP).transpose(1, 2, 0)[:, :, None, :]
        S = np.broadcast_to(S, (grid.n, grid.n, grid.n - k0, sg.n_nodes)).copy()
        u = op.apply(S)
        r = nc // cells[0]
        num = np.array([u[i, j, kk, e * r] for e, i, j, kk in sample])
        errs.append(float(np.max(np.abs(num - ref)) / np.max(np.abs(ref))))
    orders = [math.log(errs[k] / errs[k + 1]) / math.log(cells[k + 1] / cells[k]) for k in range(len(errs) - 1)]
    return {"cells": list(cells), "errors": errs, "orders": orders, "samples": len(sample)}


def check_transport_order(seed: int) -> list[Check]:
    res = mms_transport(seed)
    order = min(res["orders"])
    return [Check("transport_mms_order", bool(order >= 0.9), order, 0.9, {"errors": res["errors"], "orders": res["orders"]})]


# ---------------------------------------------------------------------------
# equilibrium fixed points


def check_equilibrium(grid: VelocityGrid, sgrid: SpatialGrid, kcfg: KineticConfig, r1: float, cm: CollisionModel, dt: float | None = None) -> list[Check]:
    """alpha = 0: the steady solve returns g = 0 and one time step keeps M0 mu."""
    from .steady_solver import SteadyProblem, solve_nonlinear
    from .unsteady_solver import TimeStepperConfig, UnsteadyProblem, time_step

    geom = AnnulusGeometry(r1, 0.0)
    pr = SteadyProblem(geom, grid, sgrid, kcfg)
    prof = solve_nonlinear(pr)
    g_sup = pr.wsup(prof.g1, prof.g2)
    eq_err = float(np.max(np.abs(prof.G_st - prof.M_tilde * pr.mu)))
    b2 = float(np.max(np.abs(prof.moments[2])))
    up = UnsteadyProblem(geom, grid, sgrid, cm, TimeStepperConfig(dt=dt), kcfg.ell)
    dt = up.cfg.dt
    G0 = prof.M_tilde * up.mu * np.ones(up.shape)
    up.set_reference(G0)
    G1, _ = time_step(G0, dt, up)
    step = up.wsup(G1 - G0)
    up.set_reference(None)
    G1u, _ = time_step(G0, dt, up)
    return [
        Check("equilibrium_steady_g", bool(g_sup <= 1e-8), g_sup, 1e-8),
        Check("equilibrium_steady_profile", bool(eq_err <= 1e-12 and b2 <= 1e-10), max(eq_err, b2), 1e-10),
        Check("equilibrium_unsteady_step", bool(step <= 1e-10), step, 1e-10, {"unbalanced_step_change": up.wsup(G1u - G0)}),
    ]
