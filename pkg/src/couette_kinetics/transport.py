"""Linear transport along exact characteristics with diffuse-reflection walls.

For a node (eta, v) the solution of

    (eps + A(v) + d/ds) h = S,   A = nu + optional weight term - lambda

is the backward integral along the characteristic to the wall where it
entered.  Each leg is parametrized by X = eta_plus - u^2, which removes the
1/sqrt singularity at turning points, and split at the eta nodes.  Every
piece gets a Gauss rule in u; the optical depth to each Gauss node uses a
nested rule of the same order.  Sources at the feet are interpolated
linearly in eta and bilinearly in (v_eta, v_phi); v_z is constant along
characteristics so each v_z level is an independent sparse block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np
import scipy.sparse as sp

from . import _backend
from .errors import ConfigError
from .geometry import AnnulusGeometry
from .kinetic_core import MU0, NuTable, VelocityGrid

Rep = Literal["G-form", "f-form", "caflisch"]


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform radial lattice eta_e = e * eta1 / n_cells, e = 0..n_cells."""

    eta1: float
    n_cells: int = 32

    def __post_init__(self) -> None:
        if self.n_cells < 2:
            raise ConfigError("n_eta must be >= 2")
        if self.eta1 <= 0.0:
            raise ConfigError("eta1 must be positive")

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @property
    def d_eta(self) -> float:
        return self.eta1 / self.n_cells

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.eta1, self.n_nodes)

    @cached_property
    def trapezoid(self) -> np.ndarray:
        w = np.full(self.n_nodes, self.d_eta)
        w[0] = w[-1] = 0.5 * self.d_eta
        return w

    @cached_property
    def jacobian_weights(self) -> np.ndarray:
        """Trapezoid weights times the polar Jacobian (1 - eta)."""
        return self.trapezoid * (1.0 - self.nodes)


def level_info(grid: VelocityGrid, nk: int) -> tuple[np.ndarray, float]:
    """(v_z values of the stored levels, multiplicity) for a full or v_z-folded field."""
    if nk == grid.n:
        return grid.nodes1d, 1.0
    if nk == grid.n - grid.kz_half:
        return grid.nodes1d[grid.kz_half :], 2.0
    raise ValueError(f"field has {nk} v_z levels, expected {grid.n} or {grid.n - grid.kz_half}")


@dataclass(frozen=True)
class TransportCoeffs:
    epsilon: float = 0.0
    lambda_shift: float = 0.0
    use_weighted_absorption: bool = False
    alpha: float = 0.0
    ell: float = 8.0

    def __post_init__(self) -> None:
        if self.epsilon < 0.0 or self.lambda_shift < 0.0:
            raise ConfigError("epsilon and lambda_shift must be >= 0")

    def weight_coefficient(self, eta1: float) -> float:
        return self.alpha / eta1 * self.ell if self.use_weighted_absorption else 0.0


def absorption(v, nu, coeffs: TransportCoeffs, eta1: float):
    """A(v) = eps + nu(v) + [(alpha/eta1) ell v_eta v_phi / (1 + |v|^2)] - lambda."""
    v = np.asarray(v, dtype=float)
    s2 = np.sum(v * v, axis=-1)
    out = coeffs.epsilon - coeffs.lambda_shift + np.asarray(nu, dtype=float)
    aw = coeffs.weight_coefficient(eta1)
    if aw:
        out = out + aw * v[..., 0] * v[..., 1] / (1.0 + s2)
    return out


def check_absorption(grid: VelocityGrid, nu: np.ndarray, coeffs: TransportCoeffs, eta1: float) -> float:
    """min over the grid of A; raises ConfigError unless it is >= min(nu)/4."""
    a = absorption(grid.nodes, nu, coeffs, eta1)
    nu0 = float(np.min(nu))
    amin = float(np.min(a))
    if amin < 0.25 * nu0:
        raise ConfigError(
            f"absorption invariant violated: min A = {amin:.4g} < nu0/4 = {0.25 * nu0:.4g}"
            f" (alpha*ell = {coeffs.alpha * coeffs.ell:.3g}, lambda = {coeffs.lambda_shift:.3g})"
        )
    return amin


@dataclass
class WallData:
    """Incoming data at the two walls.

    Either gridded incoming slices (shape (n, n, nk) on the full velocity
    grid, only the incoming half is read) or diffuse fluxes (J0, J1) that are
    re-emitted with profile C sqrt(mu) (f-form) or C mu (G-form).
    """

    incoming0: np.ndarray | None = None
    incoming1: np.ndarray | None = None
    flux0: float = 0.0
    flux1: float = 0.0
    diffuse_rep: Rep | None = None

    @classmethod
    def zero(cls) -> "WallData":
        return cls()


class TransportOperator:
    """Precomputed backward-characteristic operator on SpatialGrid x VelocityGrid.

    Fields are arrays (n, n, nk, n_eta_nodes[, m]) with nk = n (full) or the
    v_z >= 0 half when folded=True.
    """

    def __init__(
        self,
        grid: VelocityGrid,
        sgrid: SpatialGrid,
        geom: AnnulusGeometry,
        coeffs: TransportCoeffs,
        nu_table: NuTable,
        n_gauss: int = 4,
        folded: bool = True,
        backend: str | None = None,
    ) -> None:
        if abs(sgrid.eta1 - geom.eta1) > 1e-14:
            raise ConfigError("spatial grid and geometry disagree on eta1")
        self.grid = grid
        self.sgrid = sgrid
        self.geom = geom
        self.coeffs = coeffs
        self.n_gauss = n_gauss
        self.folded = folded
        nu_nodes = nu_table(grid.speed)
        self.min_absorption = check_absorption(grid, nu_nodes, coeffs, geom.eta1)
        kern = _backend.get(backend)
        gx, gw = np.polynomial.legendre.leggauss(n_gauss)
        k0 = grid.kz_half if folded else 0
        self.levels = np.arange(k0, grid.n)
        self.vz = grid.nodes1d[self.levels]
        n, E = grid.n, sgrid.n_nodes
        nk = self.levels.size
        self.blocks: list[sp.csr_matrix] = []
        self.att = np.zeros((n, n, nk, E))
        self.exit_wall = np.zeros((n, n, nk, E), dtype=np.int8)
        self.vexit = np.zeros((n, n, nk, E, 2))
        cache: dict[float, tuple] = {}
        for kk, vz in enumerate(self.vz):
            key = abs(float(vz))
            if key not in cache:
                ip, ix, data, att, wall, vex = kern.transport_level(
                    float(vz), np.ascontiguousarray(grid.nodes1d), np.ascontiguousarray(sgrid.nodes),
                    geom.shear_c, coeffs.epsilon - coeffs.lambda_shift, coeffs.weight_coefficient(geom.eta1),
                    np.ascontiguousarray(nu_table.values), nu_table.dr, gx, gw,
                )
                size = n * n * E
                cache[key] = (sp.csr_matrix((data, ix, ip), shape=(size, size)), att, wall, vex)
            mat, att, wall, vex = cache[key]
            self.blocks.append(mat)
            self.att[:, :, kk, :] = att.reshape(n, n, E)
            self.exit_wall[:, :, kk, :] = wall.reshape(n, n, E)
            self.vexit[:, :, kk, :, :] = vex.reshape(n, n, E, 2)
        s2 = self.vexit[..., 0] ** 2 + self.vexit[..., 1] ** 2 + self.vz[None, None, :, None] ** 2
        self._mu_exit = MU0 * np.exp(-0.5 * s2)

    @property
    def nnz(self) -> int:
        seen = {}
        for b in self.blocks:
            seen[id(b)] = b.nnz
        return sum(seen.values())

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.grid.n, self.grid.n, self.levels.size, self.sgrid.n_nodes)

    def apply(self, S: np.ndarray) -> np.ndarray:
        """Source part: integral of exp(-optical depth) S along each backward path."""
        S = np.asarray(S, dtype=float)
        n, _, nk, E = self.shape
        if S.shape[:4] != self.shape:
            raise ValueError(f"source shape {S.shape} does not match {self.shape}")
        extra = S.shape[4:]
        out = np.empty(S.shape)
        for kk, mat in enumerate(self.blocks):
            src = S[:, :, kk, :].reshape(n * n * E, -1)
            out[:, :, kk, :] = (mat @ src).reshape((n, n, E) + extra)
        return out

    def wall_profile(self, rep: Rep) -> np.ndarray:
        """C * (sqrt(mu) or mu)(V_exit) per node, the diffuse re-emission shape at the entry point."""
        c_w = self.grid.wall_constant
        if rep == "G-form":
            return c_w * self._mu_exit
        return c_w * np.sqrt(self._mu_exit)

    def boundary_part(self, bc: WallData) -> np.ndarray:
        """exp(-total optical depth) times the incoming value at the entry point."""
        out = np.zeros(self.shape)
        if bc.diffuse_rep is not None:
            flux = np.where(self.exit_wall == 0, bc.flux0, bc.flux1)
            out += self.att * self.wall_profile(bc.diffuse_rep) * flux
        for wall, data in ((0, bc.incoming0), (1, bc.incoming1)):
            if data is None:
                continue
            vals = self._interp_slice(np.asarray(data, dtype=float))
            out += np.where(self.exit_wall == wall, self.att * vals, 0.0)
        return out

    def _interp_slice(self, data: np.ndarray) -> np.ndarray:
        """Bilinear (v_eta, v_phi) interpolation of wall slices at the exit velocities."""
        g = self.grid
        if data.shape[2] == g.n and self.folded:
            data = data[:, :, g.kz_half :]
        n = g.n
        fi = (self.vexit[..., 0] + g.v_max) / g.h
        fj = (self.vexit[..., 1] + g.v_max) / g.h
        i0 = np.floor(fi).astype(np.int64)
        j0 = np.floor(fj).astype(np.int64)
        ti, tj = fi - i0, fj - j0
        kk = np.broadcast_to(np.arange(self.levels.size)[None, None, :, None], i0.shape)
        out = np.zeros(i0.shape)
        for a in (0, 1):
            for b in (0, 1):
                ci, cj = i0 + a, j0 + b
                ok = (ci >= 0) & (ci < n) & (cj >= 0) & (cj < n)
                w = (ti if a else 1.0 - ti) * (tj if b else 1.0 - tj)
                vals = data[np.clip(ci, 0, n - 1), np.clip(cj, 0, n - 1), kk]
                out += np.where(ok, w * vals, 0.0)
        return out

    def sweep(self, S: np.ndarray | None, bc: WallData | None = None) -> np.ndarray:
        out = self.apply(S) if S is not None else np.zeros(self.shape)
        if bc is not None:
            out = out + self.boundary_part(bc)
        return out


def sweep_transport(S, bc: WallData, op: TransportOperator) -> np.ndarray:
    """Backward-characteristic solve with source S and incoming data bc."""
    return op.sweep(S, bc)


# ---------------------------------------------------------------------------
# wall closure


def outgoing_flux(trace: np.ndarray, grid: VelocityGrid, wall: int, rep: Rep = "G-form", trace2=None) -> float:
    """Outgoing mass flux sum |u_eta| G h^3 at one wall.

    trace has shape (n, n, nk): G for G-form, f (physical sqrt(mu) f) for
    f-form, f1 with trace2 = f2 for the Caflisch pair.
    """
    nk = trace.shape[2]
    vz, mult = level_info(grid, nk)
    ve = grid.nodes1d[:, None, None]
    out = (ve < 0.0) if wall == 0 else (ve > 0.0)
    weight = np.abs(ve) * out * grid.quad_weight * mult
    k0 = grid.n - nk
    sq = grid.sqrt_mu[:, :, k0:]
    if rep == "G-form":
        dens = trace
    elif rep == "f-form":
        dens = sq * trace
    else:
        dens = trace + (0.0 if trace2 is None else sq * trace2)
    return float(np.sum(weight * dens))


def diffuse_wall_closure(field_, grid: VelocityGrid, rep: Rep = "G-form", field2=None) -> tuple[WallData, WallData | None]:
    """Diffuse re-emission data from the outgoing traces of a field (n, n, nk, E).

    Returns (data for the field, data for the f1 channel or None).  In
    Caflisch mode the flux integrand is f1 + sqrt(mu) f2, the f2 channel gets
    C sqrt(mu) J and f1 gets zero incoming data.
    """
    F = np.asarray(field_, dtype=float)
    F2 = None if field2 is None else np.asarray(field2, dtype=float)
    J = []
    for wall, e in ((0, 0), (1, -1)):
        J.append(outgoing_flux(F[..., e], grid, wall, rep, None if F2 is None else F2[..., e]))
    emit = "G-form" if rep == "G-form" else "f-form"
    main = WallData(flux0=J[0], flux1=J[1], diffuse_rep=emit)
    if rep == "caflisch":
        return main, WallData.zero()
    return main, None


def incoming_slice(J: float, grid: VelocityGrid, wall: int, rep: Rep = "G-form", nk: int | None = None) -> np.ndarray:
    """Diffuse incoming values C (mu or sqrt(mu)) J on the incoming half-grid, zero elsewhere."""
    nk = grid.n if nk is None else nk
    k0 = grid.n - nk
    ve = grid.nodes1d[:, None, None]
    inc = (ve > 0.0) if wall == 0 else (ve < 0.0)
    prof = grid.mu if rep == "G-form" else grid.sqrt_mu
    return grid.wall_constant * prof[:, :, k0:] * inc * J


def incoming_flux(slice_: np.ndarray, grid: VelocityGrid, wall: int, rep: Rep = "G-form") -> float:
    """Incoming mass flux sum |u_eta| G h^3 of an incoming slice."""
    nk = slice_.shape[2]
    _, mult = level_info(grid, nk)
    ve = grid.nodes1d[:, None, None]
    inc = (ve > 0.0) if wall == 0 else (ve < 0.0)
    dens = slice_ if rep == "G-form" else grid.sqrt_mu[:, :, grid.n - nk :] * slice_
    return float(np.sum(np.abs(ve) * inc * dens) * grid.quad_weight * mult)
