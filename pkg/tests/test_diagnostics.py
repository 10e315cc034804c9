import math

import numpy as np
import pytest

from couette_kinetics.diagnostics import grazing_flux, mass_total, norms, tail_bound, tail_diagnostic, velocity_integral
from couette_kinetics.kinetic_core import VelocityGrid
from couette_kinetics.transport import SpatialGrid

GRID = VelocityGrid(6.0, 24)
SG = SpatialGrid(0.5, 32)
EXACT_AREA = 0.5 - 0.125  # int_0^eta1 (1 - eta) d eta


def spread(slice_):
    return np.repeat(slice_[..., None], SG.n_nodes, axis=-1)


class TestNorms:
    def test_zero(self):
        rep = norms(np.zeros(GRID.mu.shape + (SG.n_nodes,)), 8.0, GRID, SG)
        assert rep.weighted_sup == rep.l2_weighted == rep.l2_nu == 0.0
        assert rep.boundary_l2 == (0.0, 0.0, 0.0, 0.0)

    def test_sqrt_mu(self):
        rep = norms(spread(GRID.sqrt_mu), 8.0, GRID, SG)
        assert rep.l2_weighted**2 == pytest.approx(EXACT_AREA, abs=1e-8)

    def test_inverse_weight(self):
        rep = norms(spread(1.0 / GRID.weight(8.0)), 8.0, GRID, SG)
        assert rep.weighted_sup == pytest.approx(1.0)

    def test_folded_matches_full(self):
        f = spread(GRID.sqrt_mu * (1 + GRID.components[0]))
        a = norms(f, 8.0, GRID, SG)
        b = norms(f[:, :, GRID.kz_half :], 8.0, GRID, SG)
        assert a.l2_weighted == pytest.approx(b.l2_weighted, rel=1e-12)
        assert a.boundary_l2 == pytest.approx(b.boundary_l2, rel=1e-12)

    def test_as_dict(self):
        d = norms(np.zeros((24, 24, 24, 3)), 8.0, GRID, SpatialGrid(0.5, 2)).as_dict()
        assert isinstance(d["boundary_l2"], list)


class TestMass:
    def test_maxwellian(self):
        assert mass_total(spread(GRID.mu), GRID, SG) == pytest.approx(2 * math.pi * EXACT_AREA, abs=1e-8)

    def test_linear(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((2, 24, 24, 24, SG.n_nodes))
        assert mass_total(2 * a - 3 * b, GRID, SG) == pytest.approx(2 * mass_total(a, GRID, SG) - 3 * mass_total(b, GRID, SG))

    def test_velocity_integral_single_slice(self):
        assert velocity_integral(GRID.mu, GRID) == pytest.approx(1.0, abs=1e-8)


class TestTail:
    def test_inverse_weight_slope(self):
        grid = VelocityGrid(12.0, 48)
        t = tail_diagnostic(1.0 / grid.weight(8.0), 8.0, grid)
        assert t.slope == pytest.approx(-8.0, abs=0.3)

    def test_gaussian_tail_falls(self):
        t = tail_diagnostic(GRID.sqrt_mu, 8.0, GRID)
        sel = t.shell_speed > 5.0
        vals = t.shell_max_weighted[sel]
        assert np.all(np.diff(vals[vals > 0]) < 0)

    def test_bound(self):
        t = tail_diagnostic(1.0 / GRID.weight(8.0), 8.0, GRID)
        assert tail_bound(t) == pytest.approx(1.0)
        assert len(t.rows()) == t.shell_speed.size


class TestGrazing:
    def test_partition(self):
        trace = GRID.mu
        g, rest = grazing_flux(trace, 0.1, GRID)
        ve = GRID.components[0]
        full = np.sum(np.abs(ve) * (ve < 0) * trace) * GRID.quad_weight
        assert g + rest == pytest.approx(full, rel=1e-13)

    def test_share_vanishes(self):
        grid = VelocityGrid(6.0, 48)
        shares = []
        for tau in (0.3, 0.1, 0.03):
            g, rest = grazing_flux(grid.mu, tau, grid)
            shares.append(g / (g + rest))
        assert shares[0] > shares[1] > shares[2]

    def test_support(self):
        ve, vp, _ = GRID.components
        tau = 0.2
        trace = np.where((np.abs(ve) > tau) & (np.abs(vp) > tau) & (GRID.speed < 1 / tau), 1.0, 0.0)
        assert grazing_flux(trace, tau, GRID, wall=1)[0] == 0.0

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            grazing_flux(GRID.mu, 1.5, GRID)
