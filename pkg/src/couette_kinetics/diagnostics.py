"""Norms, mass functionals, velocity-tail and near-grazing diagnostics.

Fields are arrays (n, n, nk, E) on a full (nk = n) or v_z-folded velocity
grid times the eta nodes; a 3-D array is read as a single velocity slice.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .kinetic_core import VelocityGrid, collision_frequency, KineticConfig
from .transport import SpatialGrid, level_info


@dataclass(frozen=True)
class NormReport:
    weighted_sup: float
    l2_weighted: float
    l2_nu: float
    boundary_l2: tuple[float, float, float, float]

    def as_dict(self) -> dict:
        d = asdict(self)
        d["boundary_l2"] = list(self.boundary_l2)
        return d


def _levels(grid: VelocityGrid, f: np.ndarray) -> tuple[int, float]:
    nk = f.shape[2]
    _, mult = level_info(grid, nk)
    return grid.n - nk, mult


def _space_integral(per_eta: np.ndarray, sgrid: SpatialGrid) -> float:
    return float(np.dot(per_eta, sgrid.jacobian_weights))


def velocity_integral(f: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """int f dv per eta node (scalar for a single slice)."""
    _, mult = _levels(grid, f)
    return np.sum(f, axis=(0, 1, 2)) * grid.quad_weight * mult


def norms(
    f: np.ndarray,
    ell: float,
    grid: VelocityGrid,
    sgrid: SpatialGrid,
    nu: np.ndarray | None = None,
) -> NormReport:
    """Weighted sup, (int int (1 - eta)|f|^2)^{1/2}, the nu-weighted L2 and wall L2(gamma+-) norms.

    boundary_l2 = (outgoing at eta = 0, incoming at eta = 0, outgoing at
    eta1, incoming at eta1) with measure |v_eta| dv.
    """
    f = np.asarray(f, dtype=float)
    k0, mult = _levels(grid, f)
    w = grid.weight(ell)[:, :, k0:, None]
    sup = float(np.max(np.abs(w * f))) if f.size else 0.0
    l2 = math.sqrt(max(_space_integral(velocity_integral(f * f, grid), sgrid), 0.0))
    if nu is None:
        nu = collision_frequency(grid.nodes, KineticConfig())
    nu = np.asarray(nu)[:, :, k0:, None]
    l2nu = math.sqrt(max(_space_integral(velocity_integral(nu * f * f, grid), sgrid), 0.0))
    ve = grid.nodes1d[:, None, None]
    bl = []
    for e, out_mask in ((0, ve < 0.0), (-1, ve > 0.0)):
        tr = f[..., e]
        for mask in (out_mask, ~out_mask):
            val = np.sum(np.abs(ve) * mask * tr * tr) * grid.quad_weight * mult
            bl.append(math.sqrt(max(float(val), 0.0)))
    return NormReport(sup, l2, l2nu, tuple(bl))


def mass_total(G: np.ndarray, grid: VelocityGrid, sgrid: SpatialGrid) -> float:
    """2 pi int_0^eta1 int (1 - eta) G dv deta."""
    return 2.0 * math.pi * _space_integral(velocity_integral(np.asarray(G, dtype=float), grid), sgrid)


# ---------------------------------------------------------------------------
# tails


@dataclass(frozen=True)
class TailTable:
    shell_edges: np.ndarray
    shell_speed: np.ndarray
    shell_max_weighted: np.ndarray
    shell_max_abs: np.ndarray
    slope: float | None
    window: tuple[float, float]

    def rows(self) -> list[tuple[float, float, float]]:
        return [(float(s), float(a), float(b)) for s, a, b in zip(self.shell_speed, self.shell_max_weighted, self.shell_max_abs)]


def tail_diagnostic(g1: np.ndarray, ell: float, grid: VelocityGrid, M_cut: float = 4.0, shell_width: float | None = None) -> TailTable:
    """Per |v|-shell maxima of w^ell |g1| and |g1|, and the log-log slope of |g1| on [M+1, 0.9 v_max]."""
    g1 = np.asarray(g1, dtype=float)
    if g1.ndim == 3:
        g1 = g1[..., None]
    k0, _ = _levels(grid, g1)
    speed = grid.speed[:, :, k0:]
    w = grid.weight(ell)[:, :, k0:]
    amax = np.max(np.abs(g1), axis=3)
    dw = grid.h if shell_width is None else shell_width
    edges = np.arange(0.0, float(speed.max()) + dw, dw)
    idx = np.clip(np.digitize(speed, edges) - 1, 0, edges.size - 2)
    n_sh = edges.size - 1
    mw = np.zeros(n_sh)
    ma = np.zeros(n_sh)
    mid = 0.5 * (edges[:-1] + edges[1:])
    np.maximum.at(mw, idx.ravel(), (w * amax).ravel())
    np.maximum.at(ma, idx.ravel(), amax.ravel())
    lo, hi = M_cut + 1.0, 0.9 * grid.v_max
    sel = (mid >= lo) & (mid <= hi) & (ma > 0.0)
    slope = None
    if np.count_nonzero(sel) >= 2:
        slope = float(np.polyfit(np.log(mid[sel]), np.log(ma[sel]), 1)[0])
    return TailTable(edges, mid, mw, ma, slope, (lo, hi))


def tail_bound(table: TailTable) -> float:
    """max over shells beyond M + 1 of w^ell |g1|."""
    sel = table.shell_speed >= table.window[0]
    return float(np.max(table.shell_max_weighted[sel])) if np.any(sel) else 0.0


# ---------------------------------------------------------------------------
# near-grazing flux


def grazing_flux(trace: np.ndarray, tau: float, grid: VelocityGrid, wall: int = 0) -> tuple[float, float]:
    """Outgoing flux sum |v_eta| trace h^3 split into the near-grazing set and its complement.

    The near-grazing set is {|v_eta| <= tau or |v_phi| <= tau or |v| >= 1/tau}.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    trace = np.asarray(trace, dtype=float)
    k0, mult = _levels(grid, trace)
    ve, vp, _ = (c[:, :, k0:] for c in grid.components)
    speed = grid.speed[:, :, k0:]
    out = (ve < 0.0) if wall == 0 else (ve > 0.0)
    near = (np.abs(ve) <= tau) | (np.abs(vp) <= tau) | (speed >= 1.0 / tau)
    dens = np.abs(ve) * out * trace * grid.quad_weight * mult
    g = float(np.sum(dens[near]))
    rest = float(np.sum(dens[~near]))
    return g, rest
