"""Velocity lattice, reference Maxwellian and the discrete collision operator.

The collision operator is a conservative discrete-velocity model written in
Carleman form.  For lattice vectors m, n with m . n = 0 the four nodes
v, v + hm, v + hn, v + h(m+n) form a rectangle and

    Q+(F1, F2)(v) = sum W(m, n) F1(v + hm) F2(v + hn)
    Q-(F1, F2)(v) = F2(v) sum W(m, n) F1(v + h(m+n))

with W(m, n) = 2 b0 h^4 (1/gcd(m) + 1/gcd(n))/2 (h|m+n|)^(gamma-1).  A
rectangle contributes only when all four corners lie on the grid, which
makes mass, momentum and energy exact discrete invariants and Q(mu, mu)
vanish node by node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np
import scipy.sparse as sp
from scipy import integrate, special

from . import _backend
from .errors import ConfigError

TWO_PI = 2.0 * math.pi
MU0 = (2.0 * math.pi) ** -1.5


def reference_functions(v, ell: float):
    """(mu(v), w^ell(v)) for velocities with last axis of length 3."""
    v = np.asarray(v, dtype=float)
    s2 = np.sum(v * v, axis=-1)
    return MU0 * np.exp(-0.5 * s2), (1.0 + s2) ** (0.5 * ell)


def chi_cutoff(speed, M: float):
    """Smooth cutoff: 1 for |v| <= M, 0 for |v| >= M+1, cubic smoothstep between."""
    s = np.clip(np.asarray(speed, dtype=float) - M, 0.0, 1.0)
    return 1.0 - s * s * (3.0 - 2.0 * s)


@dataclass(frozen=True)
class KineticConfig:
    gamma: float = 1.0
    b0_norm: float = 1.0
    ell: float = 8.0
    M_cut: float = 4.0
    collision_range: float = 4.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.b0_norm <= 0.0:
            raise ConfigError("b0_norm must be positive")
        if self.ell <= 4.0:
            raise ConfigError(f"ell must exceed 4, got {self.ell}")
        if self.M_cut <= 0.0:
            raise ConfigError("M_cut must be positive")
        if self.collision_range < 1.0:
            raise ConfigError("collision_range must be >= 1 grid unit")


# ---------------------------------------------------------------------------
# collision frequency


def _nu_closed(r, gamma: float, b0: float):
    r = np.asarray(r, dtype=float)
    if gamma == 0.0:
        return np.full(r.shape, TWO_PI * b0)
    if gamma == 1.0:
        rs = np.where(r > 0.0, r, 1.0)
        val = math.sqrt(2.0 / math.pi) * np.exp(-0.5 * r * r) + (r + 1.0 / rs) * special.erf(r / math.sqrt(2.0))
        val = np.where(r > 0.0, val, 2.0 * math.sqrt(2.0 / math.pi))
        return TWO_PI * b0 * val
    return None


def _nu_quad(r: float, gamma: float, b0: float) -> float:
    """2 pi b0 E|r e - Z|^gamma by 1-D quadrature of the noncentral chi law."""
    if r == 0.0:
        f = lambda s: s**gamma * math.sqrt(2.0 / math.pi) * s * s * math.exp(-0.5 * s * s)
    else:
        f = lambda s: s**gamma * (s / r) / math.sqrt(2.0 * math.pi) * (
            math.exp(-0.5 * (s - r) ** 2) - math.exp(-0.5 * (s + r) ** 2)
        )
    val, _ = integrate.quad(f, 0.0, r + 40.0, points=[r] if r > 0 else None, limit=200, epsabs=1e-14, epsrel=1e-13)
    return TWO_PI * b0 * val


@dataclass(frozen=True)
class NuTable:
    """nu(|v|) on a uniform radial table, read back by 4-point Lagrange interpolation."""

    dr: float
    values: np.ndarray  # values[k] = nu(k * dr), k = 0..K

    def __call__(self, speed):
        r = np.asarray(speed, dtype=float) / self.dr
        k = np.floor(r).astype(np.int64)
        k = np.clip(k, 0, self.values.size - 3)
        t = r - k
        vals = self.values
        idx = np.abs(k - 1)  # nu is even in r, reflect the ghost node
        f0 = vals[idx]
        f1 = vals[k]
        f2 = vals[k + 1]
        f3 = vals[np.minimum(k + 2, vals.size - 1)]
        return (
            -t * (t - 1.0) * (t - 2.0) / 6.0 * f0
            + (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0 * f1
            - (t + 1.0) * t * (t - 2.0) / 2.0 * f2
            + (t + 1.0) * t * (t - 1.0) / 6.0 * f3
        )


def build_nu_table(gamma: float, b0: float, r_max: float, dr: float = 1.0 / 64.0) -> NuTable:
    K = int(math.ceil(r_max / dr)) + 4
    r = np.arange(K + 1) * dr
    closed = _nu_closed(r, gamma, b0)
    if closed is None:
        closed = np.array([_nu_quad(float(x), gamma, b0) for x in r])
    return NuTable(dr, np.asarray(closed, dtype=float))


def collision_frequency(v, cfg: KineticConfig, table: NuTable | None = None):
    """nu(v) = int int |v - v*|^gamma mu(v*) B0(cos theta) d omega dv*.

    The angular integral of b0 |cos theta| is 2 pi b0, leaving a Gaussian
    average of |v - v*|^gamma that depends on |v| only; it is evaluated by
    1-D quadrature (closed form for gamma in {0, 1}).
    """
    v = np.asarray(v, dtype=float)
    speed = np.sqrt(np.sum(v * v, axis=-1))
    if table is None:
        closed = _nu_closed(speed, cfg.gamma, cfg.b0_norm)
        if closed is not None:
            return closed
        table = build_nu_table(cfg.gamma, cfg.b0_norm, float(np.max(speed, initial=0.0)) + 1.0)
    return table(speed)


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class VelocityGrid:
    v_max: float = 6.0
    n: int = 24

    def __post_init__(self) -> None:
        if self.n < 3:
            raise ConfigError("n_v must be >= 3")
        if self.v_max <= 0.0:
            raise ConfigError("v_max must be positive")

    @property
    def h(self) -> float:
        return 2.0 * self.v_max / (self.n - 1)

    @cached_property
    def nodes1d(self) -> np.ndarray:
        return np.linspace(-self.v_max, self.v_max, self.n)

    @cached_property
    def components(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(np.meshgrid(self.nodes1d, self.nodes1d, self.nodes1d, indexing="ij"))

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.stack(self.components, axis=-1)

    @cached_property
    def speed2(self) -> np.ndarray:
        ve, vp, vz = self.components
        return ve * ve + vp * vp + vz * vz

    @cached_property
    def speed(self) -> np.ndarray:
        return np.sqrt(self.speed2)

    @property
    def quad_weight(self) -> float:
        return self.h**3

    @cached_property
    def quad_weights(self) -> np.ndarray:
        return np.full((self.n,) * 3, self.quad_weight)

    @cached_property
    def mu(self) -> np.ndarray:
        return MU0 * np.exp(-0.5 * self.speed2)

    @cached_property
    def sqrt_mu(self) -> np.ndarray:
        return np.sqrt(self.mu)

    def weight(self, ell: float) -> np.ndarray:
        return (1.0 + self.speed2) ** (0.5 * ell)

    @cached_property
    def mass_of_mu(self) -> float:
        return float(np.sum(self.mu) * self.quad_weight)

    @cached_property
    def half_flux_mu(self) -> float:
        """sum over v_eta < 0 of |v_eta| mu h^3 (equal to the v_eta > 0 sum)."""
        ve = self.components[0]
        return float(np.sum(np.where(ve < 0.0, -ve, 0.0) * self.mu) * self.quad_weight)

    @property
    def wall_constant(self) -> float:
        """Normalization making the diffuse wall Maxwellian an exact grid fixed point."""
        return 1.0 / self.half_flux_mu

    @property
    def kz_half(self) -> int:
        return self.n // 2

    def angular_nodes(self, n_theta: int = 32, n_phi: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Product Gauss-Legendre (cos theta) x trapezoid (phi) rule on the unit sphere."""
        x, wx = np.polynomial.legendre.leggauss(n_theta)
        phi = np.arange(n_phi) * (TWO_PI / n_phi)
        st = np.sqrt(1.0 - x * x)
        omega = np.stack(
            [np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)), np.outer(x, np.ones(n_phi))], axis=-1
        ).reshape(-1, 3)
        weights = np.outer(wx, np.full(n_phi, TWO_PI / n_phi)).ravel()
        return omega, weights

    def fold_even(self, f: np.ndarray) -> np.ndarray:
        """Restrict a field even in v_z to the rows k >= n/2."""
        return np.ascontiguousarray(f[:, :, self.kz_half :])

    def unfold_even(self, f_half: np.ndarray) -> np.ndarray:
        """Rebuild the full field from its v_z >= 0 half by reflection."""
        n, k0 = self.n, self.kz_half
        out = np.empty((n, n, n) + f_half.shape[3:])
        out[:, :, k0:] = f_half
        out[:, :, :k0] = f_half[:, :, (n - 1 - np.arange(k0)) - k0]
        return out


# ---------------------------------------------------------------------------
# collision pairs


def lattice_pairs(R: float, gamma: float, b0: float, h: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ordered pairs (m, n) of nonzero orthogonal lattice vectors with |m|, |n| <= R."""
    r = int(math.floor(R))
    ax = np.arange(-r, r + 1)
    vec = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    norm2 = np.sum(vec * vec, axis=1)
    vec = vec[(norm2 > 0) & (norm2 <= R * R + 1e-9)]
    dots = vec @ vec.T
    im, iq = np.nonzero(dots == 0)
    mi = np.ascontiguousarray(vec[im], dtype=np.int64)
    ni = np.ascontiguousarray(vec[iq], dtype=np.int64)
    g_m = np.gcd.reduce(np.abs(mi), axis=1)
    g_n = np.gcd.reduce(np.abs(ni), axis=1)
    rel = h * np.sqrt(np.sum((mi + ni) ** 2, axis=1))
    w = 2.0 * b0 * h**4 * 0.5 * (1.0 / g_m + 1.0 / g_n) * rel ** (gamma - 1.0)
    return mi, ni, np.ascontiguousarray(w)


def _as_field(f) -> tuple[np.ndarray, bool]:
    f = np.asarray(f, dtype=float)
    if f.ndim == 3:
        return np.ascontiguousarray(f[..., None]), True
    return np.ascontiguousarray(f), False


@dataclass
class CollisionModel:
    """Discrete collision operator on a VelocityGrid, with cached linear pieces."""

    grid: VelocityGrid
    cfg: KineticConfig
    backend: str | None = None
    n_threads: int = field(default_factory=_backend.default_threads)

    def __post_init__(self) -> None:
        if self.cfg.M_cut + 1.0 >= self.grid.v_max:
            raise ConfigError(f"M_cut + 1 = {self.cfg.M_cut + 1} must stay below v_max = {self.grid.v_max}")
        self.kernels = _backend.get(self.backend)
        self.mi, self.ni, self.w = lattice_pairs(self.cfg.collision_range, self.cfg.gamma, self.cfg.b0_norm, self.grid.h)
        self._matrices: dict[bool, sp.csr_matrix] = {}

    # -- frequencies -----------------------------------------------------
    @cached_property
    def nu_table(self) -> NuTable:
        return build_nu_table(self.cfg.gamma, self.cfg.b0_norm, 2.0 * math.sqrt(3.0) * self.grid.v_max + 2.0)

    @cached_property
    def nu(self) -> np.ndarray:
        return self.nu_table(self.grid.speed)

    @property
    def nu0(self) -> float:
        return float(self.nu.min())

    @cached_property
    def chi(self) -> np.ndarray:
        return chi_cutoff(self.grid.speed, self.cfg.M_cut)

    @cached_property
    def loss_frequency_mu(self) -> np.ndarray:
        """Lattice loss frequency R(mu)(v) = sum W mu(v + h(m+n))."""
        _, loss = self.collide_parts(self.grid.mu, self.grid.mu)
        return loss

    # -- bilinear sums ---------------------------------------------------
    def collide_parts(self, F1, F2, half: bool = False):
        """(gain, lossfreq) with gain = Q+(F1, F2), lossfreq = sum W F1(v*).

        Inputs are full fields (n, n, n[, E]); with half=True only rows v_z >= 0
        are returned.
        """
        A, squeeze = _as_field(F1)
        B, _ = _as_field(F2)
        k0 = self.grid.kz_half if half else 0
        gain, loss = self.kernels.collide(A, B, self.mi, self.ni, self.w, k0, self.n_threads)
        if squeeze:
            return gain[..., 0], loss[..., 0]
        return gain, loss

    def q_bilinear(self, F1, F2):
        """(gain, loss) of Q(F1, F2): Q = gain - loss, loss = F2 * sum W F1(v*)."""
        gain, lossfreq = self.collide_parts(F1, F2)
        return gain, np.asarray(F2, dtype=float) * lossfreq

    def q(self, F1, F2):
        gain, loss = self.q_bilinear(F1, F2)
        return gain - loss

    def gain_and_rate(self, G, half: bool = False):
        """Q+(G, G) and R(G) = sum W G(v*), the pieces of the gain/loss split."""
        return self.collide_parts(G, G, half=half)

    # -- linear operators ------------------------------------------------
    def linear_matrix(self, fold: bool = False) -> sp.csr_matrix:
        """Sparse A with A f = Q(mu, f) + Q(f, mu); fold=True acts on v_z-even halves."""
        if fold not in self._matrices:
            indptr, indices, data, size = self.kernels.assemble_linear(
                np.ascontiguousarray(self.grid.mu), self.mi, self.ni, self.w, bool(fold), self.n_threads
            )
            self._matrices[fold] = sp.csr_matrix((data, indices, indptr), shape=(size, size))
        return self._matrices[fold]

    def apply_A(self, f, fold: bool = False):
        """Q(mu, f) + Q(f, mu) for fields shaped (n, n, nk[, E])."""
        f = np.asarray(f, dtype=float)
        mat = self.linear_matrix(fold)
        flat = f.reshape(mat.shape[0], -1)
        return (mat @ flat).reshape(f.shape)

    def apply_A_direct(self, f):
        """Matrix-free Q(mu, f) + Q(f, mu) from the bilinear sums (full grid)."""
        mu = self.grid.mu
        F, squeeze = _as_field(f)
        M = np.repeat(mu[..., None], F.shape[3], axis=3)
        g1, l1 = self.kernels.collide(M, F, self.mi, self.ni, self.w, 0, self.n_threads)
        g2, l2 = self.kernels.collide(F, M, self.mi, self.ni, self.w, 0, self.n_threads)
        out = g1 + g2 - F * l1 - M * l2
        return out[..., 0] if squeeze else out

    def _mu_parts(self, fold: bool, ndim_extra: int):
        mu = self.grid.mu
        nu = self.nu
        chi = self.chi
        if fold:
            k0 = self.grid.kz_half
            mu, nu, chi = mu[:, :, k0:], nu[:, :, k0:], chi[:, :, k0:]
        shape = mu.shape + (1,) * ndim_extra
        return mu.reshape(shape), nu.reshape(shape), chi.reshape(shape)

    def linearized_L(self, f, fold: bool = False, direct: bool = False):
        """(Lf, Kf) with L f = -mu^{-1/2}[Q(mu, sqrt(mu) f) + Q(sqrt(mu) f, mu)], K f = nu f - L f."""
        f = np.asarray(f, dtype=float)
        mu, nu, _ = self._mu_parts(fold, f.ndim - 3)
        sq = np.sqrt(mu)
        Af = self.apply_A_direct(sq * f) if direct else self.apply_A(sq * f, fold)
        Lf = -Af / sq
        return Lf, nu * f - Lf

    def script_K(self, f, variant: Literal["full", "low_cut", "high_cut"] = "full", fold: bool = False, direct: bool = False):
        """sqrt(mu) K(f / sqrt(mu)) = nu f + Q(mu, f) + Q(f, mu), optionally cut by chi_M.

        low_cut returns chi_M mu^{-1/2} (script K f), high_cut (1 - chi_M) script K f.
        """
        f = np.asarray(f, dtype=float)
        mu, nu, chi = self._mu_parts(fold, f.ndim - 3)
        Af = self.apply_A_direct(f) if direct else self.apply_A(f, fold)
        kf = nu * f + Af
        if variant == "full":
            return kf
        if variant == "high_cut":
            return (1.0 - chi) * kf
        if variant == "low_cut":
            return np.where(chi > 0.0, chi * kf / np.sqrt(mu), 0.0)
        raise ValueError(f"unknown variant {variant!r}")

    def gamma_bilinear(self, f, g):
        """Gamma(f, g) = mu^{-1/2} Q(sqrt(mu) f, sqrt(mu) g) on the full grid."""
        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        mu, _, _ = self._mu_parts(False, f.ndim - 3)
        sq = np.sqrt(mu)
        return self.q(sq * f, sq * g) / sq

    def lossfreq_field(self, F, half: bool = False):
        _, loss = self.collide_parts(F, F, half=half)
        return loss


# ---------------------------------------------------------------------------
# macroscopic projections


@dataclass
class MomentProfile:
    a: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    b3: np.ndarray
    c: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.a, self.b1, self.b2, self.b3, self.c], axis=0)


def moment_basis(grid: VelocityGrid) -> np.ndarray:
    """The five functions sqrt(mu){1, v_eta, v_phi, v_z, |v|^2 - 3}, shape (5, n, n, n)."""
    sq = grid.sqrt_mu
    ve, vp, vz = grid.components
    return np.stack([sq, ve * sq, vp * sq, vz * sq, (grid.speed2 - 3.0) * sq])


@dataclass
class Projector:
    grid: VelocityGrid

    @cached_property
    def basis(self) -> np.ndarray:
        return moment_basis(self.grid)

    @cached_property
    def gram(self) -> np.ndarray:
        B = self.basis.reshape(5, -1)
        return (B @ B.T) * self.grid.quad_weight

    def coefficients(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        flat = f.reshape(self.grid.n**3, -1)
        rhs = (self.basis.reshape(5, -1) @ flat) * self.grid.quad_weight
        return np.linalg.solve(self.gram, rhs).reshape((5,) + f.shape[3:])

    def apply(self, f):
        f = np.asarray(f, dtype=float)
        coef = self.coefficients(f)
        flat = coef.reshape(5, -1)
        Pf = (self.basis.reshape(5, -1).T @ flat).reshape(f.shape)
        return coef, Pf


def project_P(f, grid: VelocityGrid) -> tuple[MomentProfile, np.ndarray, np.ndarray]:
    """Grid-Gram projection onto span{sqrt(mu), v sqrt(mu), (|v|^2-3) sqrt(mu)}.

    f has shape (n, n, n) or (n, n, n, n_eta); coefficients are per spatial node.
    """
    proj = Projector(grid)
    coef, Pf = proj.apply(f)
    prof = MomentProfile(*[np.atleast_1d(coef[i]) for i in range(5)])
    f = np.asarray(f, dtype=float)
    return prof, Pf, f - Pf


def wall_outgoing_mask(grid: VelocityGrid, wall: Literal[0, 1]) -> np.ndarray:
    """Outgoing velocities at a wall: v_eta < 0 at eta = 0, v_eta > 0 at eta = eta1."""
    ve = grid.components[0]
    return ve < 0.0 if wall == 0 else ve > 0.0


def wall_flux(trace, grid: VelocityGrid, wall: Literal[0, 1], sqrt_mu_weighted: bool = True):
    """J = sum over outgoing |u_eta| (sqrt(mu) f)(u) h^3 (or |u_eta| f if not weighted)."""
    trace = np.asarray(trace, dtype=float)
    out = wall_outgoing_mask(grid, wall)
    weight = np.abs(grid.components[0]) * out * grid.quad_weight
    if sqrt_mu_weighted:
        weight = weight * grid.sqrt_mu
    return np.tensordot(weight, trace, axes=([0, 1, 2], [0, 1, 2]))


def project_Pgamma(trace, wall: Literal[0, 1], grid: VelocityGrid):
    """Diffuse projection: incoming slice C sqrt(mu(v)) J with J the outgoing flux of sqrt(mu) f.

    C = grid.wall_constant replaces sqrt(2 pi) so the wall Maxwellian is a
    grid fixed point.  Values on the outgoing half are zero.
    """
    J = wall_flux(trace, grid, wall)
    incoming = ~wall_outgoing_mask(grid, wall)
    return grid.wall_constant * grid.sqrt_mu * incoming * J
