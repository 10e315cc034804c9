"""Characteristic geometry of the rotating annulus.

Coordinates are eta = 1 - r in [0, eta1] and the rotated, sign-flipped
velocity (v_eta, v_phi, v_z).  Along a characteristic

    dX/ds = V_eta,  dV_eta/ds = -V_phi^2/(1-X),
    dV_phi/ds = V_eta V_phi/(1-X) - (alpha/eta1) V_eta,  dV_z/ds = 0,

the quantity I = (1-X) V_phi - c (1-X)^2 with c = alpha/(2 eta1) is
conserved, which gives V_phi and V_eta^2 in closed form as functions of X.
All functions here are pure.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BranchError, ConfigError, DomainError, GrazingError, NumericError

GRAZING_TOL = 1e-14
ETA_PLUS_CAP = 1.0 - 1e-12
BISECT_TOL = 1e-12
DEFAULT_K_MAX = 32
SQRT_2PI = math.sqrt(2.0 * math.pi)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


@dataclass(frozen=True)
class PhasePoint:
    eta: float
    v_eta: float
    v_phi: float
    v_z: float = 0.0

    @property
    def velocity(self) -> tuple[float, float, float]:
        return (self.v_eta, self.v_phi, self.v_z)


@dataclass(frozen=True)
class AnnulusGeometry:
    r1: float
    alpha: float = 0.0
    alpha_cap: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 < self.r1 < 1.0:
            raise ConfigError(f"r1 must lie in (0, 1), got {self.r1}")
        if self.alpha < 0.0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.alpha > self.alpha_cap:
            raise ConfigError(f"alpha={self.alpha} exceeds the smallness cap {self.alpha_cap}")

    @property
    def eta1(self) -> float:
        return 1.0 - self.r1

    @property
    def shear_c(self) -> float:
        """c = alpha / (2 eta1)."""
        return self.alpha / (2.0 * self.eta1)

    def shear_profile(self, eta):
        """Frame velocity u_phi(eta) = alpha (eta1 - eta) / eta1."""
        return self.alpha * (self.eta1 - np.asarray(eta, dtype=float)) / self.eta1


class RegionTag(str, enum.Enum):
    A1 = "A1"
    A2 = "A2"
    A3 = "A3"


# ---------------------------------------------------------------------------
# vectorized closed forms


def angular_invariant(eta, v_phi, c):
    z = 1.0 - np.asarray(eta, dtype=float)
    return z * np.asarray(v_phi, dtype=float) - c * z * z


def vphi_at(X, eta, v_phi, c):
    inv = angular_invariant(eta, v_phi, c)
    z = 1.0 - np.asarray(X, dtype=float)
    return inv / z + c * z


def gdiff(z1, z2, inv, c):
    """G(z1) - G(z2) for G(z) = -I^2/z^2 + 4 I c ln z + c^2 z^2, free of cancellation."""
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    d = z1 - z2
    s = z1 + z2
    return d * (inv * inv * s / (z1 * z1 * z2 * z2) + c * c * s) + 4.0 * inv * c * np.log1p(d / z2)


def veta2_at(X, eta, v_eta, v_phi, c):
    """V_eta^2 at radial position X on the characteristic through (eta, v)."""
    inv = angular_invariant(eta, v_phi, c)
    return np.asarray(v_eta, dtype=float) ** 2 + gdiff(1.0 - np.asarray(X, dtype=float), 1.0 - np.asarray(eta, dtype=float), inv, c)


def turning_point(eta, v_eta, v_phi, c):
    """Root of V_eta^2(X) = 0 on [eta, 1), capped at 1 - 1e-12 when none exists.

    V_eta^2 is nonincreasing in X, so bisection is safe; two guarded Newton
    steps polish the bracket midpoint.
    """
    eta = np.asarray(eta, dtype=float)
    v_eta = np.asarray(v_eta, dtype=float)
    v_phi = np.asarray(v_phi, dtype=float)
    eta, v_eta, v_phi = np.broadcast_arrays(eta, v_eta, v_phi)
    inv = angular_invariant(eta, v_phi, c)
    v2 = v_eta * v_eta

    def resid(X):
        return v2 + gdiff(1.0 - X, 1.0 - eta, inv, c)

    lo = eta.astype(float).copy()
    hi = np.full_like(lo, ETA_PLUS_CAP)
    no_root = resid(hi) > 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        pos = resid(mid) > 0.0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
        if np.all(hi - lo <= 0.25 * BISECT_TOL):
            break
    x = 0.5 * (lo + hi)
    for _ in range(2):
        vp = vphi_at(x, eta, v_phi, c)
        slope = 2.0 * vp * vp / (1.0 - x)
        step = np.divide(resid(x), slope, out=np.zeros_like(x), where=slope > 0.0)
        cand = x + step
        x = np.where((cand >= lo) & (cand <= hi), cand, x)
    x = np.where(no_root, ETA_PLUS_CAP, x)
    x = np.where(v2 == 0.0, np.where(no_root, ETA_PLUS_CAP, eta), x)
    return x


def leg_time(a, b, eta, v_eta, v_phi, c, eta_plus=None, n_sub: int = 8):
    """Travel time int_a^b dX / |V_eta| for 0 <= a <= b <= eta_plus.

    Uses X = eta_plus - u^2 so the turning-point singularity disappears.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if eta_plus is None:
        eta_plus = turning_point(eta, v_eta, v_phi, c)
    a, b, eta, v_eta, v_phi, eta_plus = np.broadcast_arrays(a, b, eta, v_eta, v_phi, eta_plus)
    inv = angular_invariant(eta, v_phi, c)
    r0 = np.maximum(veta2_at(eta_plus, eta, v_eta, v_phi, c), 0.0)
    ua = np.sqrt(np.maximum(eta_plus - a, 0.0))
    ub = np.sqrt(np.maximum(eta_plus - b, 0.0))
    width = (ua - ub) / n_sub
    total = np.zeros(a.shape)
    z2 = 1.0 - eta_plus
    for k in range(n_sub):
        left = ub + k * width
        for node, weight in zip(_GL_NODES, _GL_WEIGHTS):
            u = left + 0.5 * width * (node + 1.0)
            total = total + 0.5 * width * weight * _u_integrand(u, z2, inv, c, r0)
    return total


def _u_integrand(u, z2, inv, c, r0):
    d = u * u
    z1 = z2 + d
    s = z1 + z2
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.where(d > 0.0, np.log1p(d / z2) / np.where(d > 0.0, d, 1.0), 1.0 / z2)
    q = inv * inv * s / (z1 * z1 * z2 * z2) + c * c * s + 4.0 * inv * c * lg
    return 2.0 * u / np.sqrt(r0 + d * q)


# ---------------------------------------------------------------------------
# public operations


def annulus_coords(x1: float, x2: float, v: Sequence[float], r1: float) -> PhasePoint:
    r = math.hypot(x1, x2)
    if r < r1 - 1e-15 or r > 1.0 + 1e-15:
        raise DomainError(f"point ({x1}, {x2}) lies outside the annulus r1={r1} <= r <= 1")
    phi = math.atan2(x2, x1)
    t1, t2, t3 = -float(v[0]), -float(v[1]), -float(v[2])
    cphi, sphi = math.cos(phi), math.sin(phi)
    v_eta = t1 * cphi + t2 * sphi
    v_phi = -t1 * sphi + t2 * cphi
    return PhasePoint(eta=1.0 - r, v_eta=v_eta + 0.0, v_phi=v_phi + 0.0, v_z=t3 + 0.0)


def conserved_angular(p: PhasePoint, geom: AnnulusGeometry) -> float:
    return float(angular_invariant(p.eta, p.v_phi, geom.shear_c))


def char_state_at(start: PhasePoint, X: float, branch: str, geom: AnnulusGeometry) -> tuple[float, float, float]:
    """Velocity on the characteristic through `start` when it sits at radius X.

    branch "pre-turn" keeps the sign of v_eta, "post-turn" flips it.
    """
    if branch not in ("pre-turn", "post-turn"):
        raise ValueError(f"unknown branch {branch!r}")
    c = geom.shear_c
    if not 0.0 <= X < 1.0:
        raise BranchError(f"X={X} outside [0, 1)")
    v2 = float(veta2_at(X, start.eta, start.v_eta, start.v_phi, c))
    if v2 < 0.0:
        if v2 > -1e-13 * max(1.0, start.v_eta**2):
            v2 = 0.0
        else:
            raise BranchError(f"X={X} is beyond the turning point (V_eta^2={v2:.3e})")
    sign = 1.0 if start.v_eta >= 0.0 else -1.0
    if branch == "post-turn":
        sign = -sign
    if X == start.eta:
        v_eta = start.v_eta if branch == "pre-turn" else -start.v_eta
    else:
        v_eta = sign * math.sqrt(v2)
    return (v_eta, float(vphi_at(X, start.eta, start.v_phi, c)), start.v_z)


def exit_position(p: PhasePoint, geom: AnnulusGeometry) -> float:
    if p.v_eta >= 0.0:
        raise DomainError("exit_position needs v_eta < 0")
    x = float(turning_point(p.eta, p.v_eta, p.v_phi, geom.shear_c))
    if not p.eta <= x < 1.0:
        raise NumericError(f"turning point {x} not bracketed in [{p.eta}, 1)")
    return x


def classify_region(p: PhasePoint, geom: AnnulusGeometry) -> RegionTag:
    if p.v_eta >= 0.0:
        return RegionTag.A1
    if exit_position(p, geom) <= geom.eta1:
        return RegionTag.A2
    return RegionTag.A3


@dataclass(frozen=True)
class ExitInfo:
    t_star: float
    x_star: float
    region: RegionTag
    exit_velocity: tuple[float, float, float]
    turn_time: float | None = None
    eta_plus: float | None = None


def _check_grazing(p: PhasePoint, geom: AnnulusGeometry) -> None:
    on_wall = p.eta <= 0.0 or p.eta >= geom.eta1
    if on_wall and abs(p.v_eta) < GRAZING_TOL:
        raise GrazingError(f"grazing phase point at wall eta={p.eta}")


def exit_details(p: PhasePoint, geom: AnnulusGeometry) -> ExitInfo:
    """Backward exit time, wall, velocity at the wall and turning data."""
    _check_grazing(p, geom)
    c = geom.shear_c
    eta1 = geom.eta1
    ep = float(turning_point(p.eta, p.v_eta, p.v_phi, c))
    vphi0 = float(vphi_at(0.0, p.eta, p.v_phi, c))
    if p.v_eta >= 0.0:
        t = float(leg_time(0.0, p.eta, p.eta, p.v_eta, p.v_phi, c, ep))
        ve = math.sqrt(max(float(veta2_at(0.0, p.eta, p.v_eta, p.v_phi, c)), 0.0))
        return ExitInfo(t, 0.0, RegionTag.A1, (ve, vphi0, p.v_z), None, ep)
    if ep <= eta1:
        t_in = float(leg_time(p.eta, ep, p.eta, p.v_eta, p.v_phi, c, ep))
        t_out = float(leg_time(0.0, ep, p.eta, p.v_eta, p.v_phi, c, ep))
        ve = math.sqrt(max(float(veta2_at(0.0, p.eta, p.v_eta, p.v_phi, c)), 0.0))
        return ExitInfo(t_in + t_out, 0.0, RegionTag.A2, (ve, vphi0, p.v_z), t_in, ep)
    t = float(leg_time(p.eta, eta1, p.eta, p.v_eta, p.v_phi, c, ep))
    ve = -math.sqrt(max(float(veta2_at(eta1, p.eta, p.v_eta, p.v_phi, c)), 0.0))
    vphi1 = float(vphi_at(eta1, p.eta, p.v_phi, c))
    return ExitInfo(t, eta1, RegionTag.A3, (ve, vphi1, p.v_z), None, ep)


def backward_exit(p: PhasePoint, geom: AnnulusGeometry) -> tuple[float, float]:
    info = exit_details(p, geom)
    return info.t_star, info.x_star


def _in_cycle_set(x_k: float, v: Sequence[float], geom: AnnulusGeometry) -> bool:
    # outward normal is -e_eta at eta = 0 and +e_eta at eta = eta1
    return v[0] < 0.0 if x_k == 0.0 else v[0] > 0.0


def wall_return_velocities(x_k: float, V, geom: AnnulusGeometry) -> np.ndarray:
    """Return velocities for rows of V (shape (n, 3)) leaving wall x_k.

    Needs only the turning point, not the exit time, so it is cheap enough for
    sampling.  Rows must lie in the cycle half-space and away from grazing.
    """
    if x_k not in (0.0, geom.eta1):
        raise DomainError(f"x_k={x_k} is not a wall")
    V = np.atleast_2d(np.asarray(V, dtype=float))
    ve, vp, vz = V[:, 0], V[:, 1], V[:, 2]
    inward = ve < 0.0 if x_k == 0.0 else ve > 0.0
    if not np.all(inward):
        raise DomainError(f"velocities not in the cycle half-space at wall {x_k}")
    if np.any(np.abs(ve) < GRAZING_TOL):
        raise GrazingError(f"grazing phase point at wall eta={x_k}")
    c = geom.shear_c
    eta = np.full_like(ve, x_k)
    out = np.empty_like(V)
    out[:, 2] = vz
    if x_k == geom.eta1:
        # A1: back to the outer wall
        out[:, 0] = np.sqrt(np.maximum(veta2_at(0.0, eta, ve, vp, c), 0.0))
        out[:, 1] = vphi_at(0.0, eta, vp, c)
        return out
    ep = turning_point(eta, ve, vp, c)
    a2 = ep <= geom.eta1
    # A2: closed forms at X = 0 reduce to the start data exactly
    out[a2, 0] = -ve[a2]
    out[a2, 1] = vp[a2]
    a3 = ~a2
    out[a3, 0] = -np.sqrt(np.maximum(veta2_at(geom.eta1, eta[a3], ve[a3], vp[a3], c), 0.0))
    out[a3, 1] = vphi_at(geom.eta1, eta[a3], vp[a3], c)
    return out


def wall_return_velocity(x_k: float, v_k: Sequence[float], geom: AnnulusGeometry) -> tuple[float, float, float]:
    if x_k not in (0.0, geom.eta1):
        raise DomainError(f"x_k={x_k} is not a wall")
    if not _in_cycle_set(x_k, v_k, geom):
        raise DomainError(f"velocity {tuple(v_k)} is not in the cycle half-space at wall {x_k}")
    w = wall_return_velocities(x_k, [v_k], geom)[0]
    return (float(w[0]), float(w[1]), float(w[2]))


def energy_ratio(x_k: float, v_k: Sequence[float], geom: AnnulusGeometry) -> float:
    """(1 + |V(t_{k+1})|^2) / (1 + |v_k|^2)."""
    w = wall_return_velocity(x_k, v_k, geom)
    return (1.0 + sum(x * x for x in w)) / (1.0 + sum(float(x) ** 2 for x in v_k))


@dataclass
class CycleSegment:
    t: float
    x: float
    v: tuple[float, float, float]
    region: RegionTag
    turn_time: float | None
    weight: float


@dataclass
class BackwardCycle:
    segments: list[CycleSegment] = field(default_factory=list)
    end_time: float = 0.0
    end_wall: float = 0.0
    end_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def times(self) -> list[float]:
        return [s.t for s in self.segments] + [self.end_time]

    @property
    def turning_times(self) -> list[float | None]:
        return [s.turn_time for s in self.segments]

    @property
    def weights(self) -> list[float]:
        return [s.weight for s in self.segments]


def diffuse_weight(v: Sequence[float], wall_constant: float = SQRT_2PI) -> float:
    """d sigma = C mu(v) |v_eta| with C = sqrt(2 pi) in the continuum."""
    e = float(v[0]) ** 2 + float(v[1]) ** 2 + float(v[2]) ** 2
    return wall_constant * math.exp(-0.5 * e) / (2.0 * math.pi) ** 1.5 * abs(float(v[0]))


def build_cycle(
    t: float,
    p: PhasePoint,
    reflected: Sequence[Sequence[float]],
    geom: AnnulusGeometry,
    k_max: int = DEFAULT_K_MAX,
    wall_constant: float = SQRT_2PI,
) -> BackwardCycle:
    """Back-time cycle from (t, p) through diffuse reflections with chosen velocities."""
    if len(reflected) + 1 > k_max:
        raise ConfigError(f"cycle needs {len(reflected) + 1} segments, k_max={k_max}")
    cycle = BackwardCycle()
    t_k, x_k, v_k = float(t), p.eta, p.velocity
    for k in range(len(reflected) + 1):
        pk = PhasePoint(x_k, *v_k)
        info = exit_details(pk, geom)
        turn = None if info.turn_time is None else t_k - info.turn_time
        cycle.segments.append(CycleSegment(t_k, x_k, tuple(v_k), info.region, turn, diffuse_weight(v_k, wall_constant)))
        t_next, x_next = t_k - info.t_star, info.x_star
        if k == len(reflected):
            cycle.end_time, cycle.end_wall, cycle.end_velocity = t_next, x_next, info.exit_velocity
            break
        v_next = tuple(float(x) for x in reflected[k])
        if abs(v_next[0]) < GRAZING_TOL:
            raise GrazingError(f"grazing reflected velocity {v_next}")
        if not _in_cycle_set(x_next, v_next, geom):
            raise DomainError(f"reflected velocity {v_next} not admissible at wall {x_next}")
        t_k, x_k, v_k = t_next, x_next, v_next
    return cycle


def rk4_characteristic(state0, s_end: float, n_steps: int, alpha: float, eta1: float):
    """Integrate the characteristic ODE with classical RK4 (vectorized over rows).

    state0 has columns (X, V_eta, V_phi, V_z); s_end may be negative.
    s_end, alpha and eta1 may also be arrays with one entry per row.
    """
    y = np.array(state0, dtype=float, copy=True)
    k_shear = np.asarray(alpha, dtype=float) / np.asarray(eta1, dtype=float)
    hstep = np.asarray(s_end, dtype=float) / n_steps
    if hstep.ndim:
        hstep = hstep[..., None]

    def rhs(u):
        X, ve, vp = u[..., 0], u[..., 1], u[..., 2]
        out = np.zeros_like(u)
        out[..., 0] = ve
        out[..., 1] = -vp * vp / (1.0 - X)
        out[..., 2] = ve * vp / (1.0 - X) - k_shear * ve
        return out

    for _ in range(n_steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * hstep * k1)
        k3 = rhs(y + 0.5 * hstep * k2)
        k4 = rhs(y + hstep * k3)
        y = y + (hstep / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def sample_trajectory(p: PhasePoint, geom: AnnulusGeometry, n: int = 65):
    """Rows (s, X, V_eta, V_phi, V_z, invariant) along the backward path to the wall.

    s is the backward time measured from p (s = 0 at p).
    """
    info = exit_details(p, geom)
    c = geom.shear_c
    ep = info.eta_plus
    if info.region is RegionTag.A2:
        legs = [(p.eta, ep, -1.0), (ep, 0.0, 1.0)]
    elif info.region is RegionTag.A1:
        legs = [(p.eta, 0.0, 1.0)]
    else:
        legs = [(p.eta, info.x_star, -1.0)]
    rows = []
    s_base = 0.0
    for a, b, sign in legs:
        s = s_base
        for j in range(n):
            X = a + (b - a) * j / (n - 1)
            s = s_base + float(leg_time(min(a, X), max(a, X), p.eta, p.v_eta, p.v_phi, c, ep))
            v2 = max(float(veta2_at(X, p.eta, p.v_eta, p.v_phi, c)), 0.0)
            vp = float(vphi_at(X, p.eta, p.v_phi, c))
            rows.append((s, X, sign * math.sqrt(v2), vp, p.v_z, float(angular_invariant(X, vp, c))))
        s_base = s
    return rows
