import math

import numpy as np
import pytest

from couette_kinetics import _backend
from couette_kinetics.errors import ConfigError
from couette_kinetics.geometry import AnnulusGeometry, PhasePoint, exit_details
from couette_kinetics.kinetic_core import KineticConfig, VelocityGrid, build_nu_table, collision_frequency
from couette_kinetics.transport import (
    SpatialGrid,
    TransportCoeffs,
    TransportOperator,
    WallData,
    absorption,
    check_absorption,
    diffuse_wall_closure,
    incoming_flux,
    incoming_slice,
    outgoing_flux,
    sweep_transport,
)

GRID = VelocityGrid(6.0, 8)


def make_op(alpha=0.0, eps=0.1, n_cells=8, folded=True, backend=None, grid=GRID, n_gauss=4):
    geom = AnnulusGeometry(0.5, alpha)
    sg = SpatialGrid(geom.eta1, n_cells)
    table = build_nu_table(1.0, 1.0, 2 * math.sqrt(3) * grid.v_max + 2)
    return TransportOperator(grid, sg, geom, TransportCoeffs(epsilon=eps), table, n_gauss, folded, backend), geom


@pytest.fixture(scope="module")
def op0():
    return make_op()


class TestSpatialGrid:
    def test_nodes(self):
        sg = SpatialGrid(0.5, 4)
        assert sg.nodes.tolist() == [0.0, 0.125, 0.25, 0.375, 0.5]
        assert np.sum(sg.jacobian_weights) == pytest.approx(0.5 - 0.125)

    def test_rejects_single_cell(self):
        with pytest.raises(ConfigError):
            SpatialGrid(0.5, 1)


class TestAbsorption:
    def test_margin(self):
        nu = collision_frequency(GRID.nodes, KineticConfig())
        assert check_absorption(GRID, nu, TransportCoeffs(), 0.5) == pytest.approx(nu.min())
        with pytest.raises(ConfigError):
            check_absorption(GRID, nu, TransportCoeffs(use_weighted_absorption=True, alpha=5.0, ell=8.0), 0.5)

    def test_weight_term(self):
        v = np.array([1.0, 1.0, 0.0])
        a = absorption(v, 3.0, TransportCoeffs(epsilon=0.5, use_weighted_absorption=True, alpha=0.02, ell=8.0), 0.5)
        assert a == pytest.approx(3.5 + 0.04 * 8.0 / 3.0)


class TestSweep:
    def test_homogeneous(self, op0):
        op, _ = op0
        assert np.all(sweep_transport(np.zeros(op.shape), WallData.zero(), op) == 0.0)

    @pytest.mark.parametrize("n_gauss,tol", [(4, 1e-3), (8, 1e-9)])
    def test_constant_source_closed_form(self, n_gauss, tol):
        # constant S and constant absorption: h = S/A (1 - exp(-A t_star)) at every node
        # whose path stays inside the velocity box (in-plane speed <= v_max)
        op, geom = make_op(n_gauss=n_gauss)
        h = op.apply(np.ones(op.shape))
        nu = collision_frequency(GRID.nodes, KineticConfig())
        checked = 0
        for i, j, kk, e in np.ndindex(op.shape):
            k = op.levels[kk]
            eta = op.sgrid.nodes[e]
            v = GRID.nodes1d[[i, j, k]]
            if eta in (0.0, geom.eta1) and ((eta == 0.0) == (v[0] > 0.0)):
                continue
            if math.hypot(v[0], v[1]) > GRID.v_max:
                continue
            t = exit_details(PhasePoint(eta, *v), geom).t_star
            A = 0.1 + nu[i, j, k]
            assert h[i, j, kk, e] == pytest.approx((1 - math.exp(-A * t)) / A, rel=tol)
            checked += 1
        assert checked > 500

    def test_slab_limit(self):
        # nearly radial ray from the outer wall: depth eta / |v_eta|
        grid = VelocityGrid(6.0, 24)
        op, _ = make_op(grid=grid, n_cells=4)
        h = op.apply(np.ones(op.shape))
        i = np.argmin(np.abs(grid.nodes1d - 2.25))
        j = grid.n // 2
        k = 0
        ve = grid.nodes1d[i]
        A = 0.1 + collision_frequency(np.array([ve, grid.nodes1d[j], grid.nodes1d[op.levels[k]]]), KineticConfig())
        e = 2
        slab = (1 - math.exp(-A * op.sgrid.nodes[e] / ve)) / A
        assert h[i, j, k, e] == pytest.approx(slab, rel=2e-3)

    def test_shape_check(self, op0):
        op, _ = op0
        with pytest.raises(ValueError):
            op.apply(np.zeros((3, 3, 3, 3)))

    def test_eta_mismatch(self):
        geom = AnnulusGeometry(0.5)
        with pytest.raises(ConfigError):
            TransportOperator(GRID, SpatialGrid(0.4, 4), geom, TransportCoeffs(), build_nu_table(1.0, 1.0, 25.0))


class TestWallClosure:
    def test_maxwellian_invariant(self, op0):
        op, _ = op0
        mu = np.repeat(GRID.mu[:, :, GRID.kz_half :, None], op.shape[3], axis=3)
        bc, extra = diffuse_wall_closure(mu, GRID)
        assert extra is None
        for wall, J in ((0, bc.flux0), (1, bc.flux1)):
            inc = incoming_slice(J, GRID, wall, nk=op.shape[2])
            ve = GRID.nodes1d[:, None, None]
            mask = (ve > 0) if wall == 0 else (ve < 0)
            mask = np.broadcast_to(mask, inc.shape)
            assert np.allclose(inc[mask], mu[..., 0][mask], rtol=1e-13)

    def test_wall_mass_balance(self):
        rng = np.random.default_rng(5)
        F = rng.random((GRID.n, GRID.n, GRID.n - GRID.kz_half, 5))
        bc, _ = diffuse_wall_closure(F, GRID)
        for wall, e, J in ((0, 0, bc.flux0), (1, -1, bc.flux1)):
            out = outgoing_flux(F[..., e], GRID, wall)
            inc = incoming_flux(incoming_slice(J, GRID, wall, nk=F.shape[2]), GRID, wall)
            assert abs(out - inc) <= 1e-10 * abs(out)

    def test_caflisch_channel(self):
        rng = np.random.default_rng(6)
        f1, f2 = rng.random((2, GRID.n, GRID.n, GRID.n, 3))
        main, first = diffuse_wall_closure(f1, GRID, "caflisch", f2)
        assert first.incoming0 is None and first.flux0 == 0.0 and first.diffuse_rep is None
        sq = GRID.sqrt_mu
        ref = outgoing_flux(f1[..., 0] + sq * f2[..., 0], GRID, 0)
        assert main.flux0 == pytest.approx(ref, rel=1e-13)

    def test_boundary_part_of_equilibrium(self):
        # zero absorption-free check: with eps + nu the wall value decays as exp(-A t)
        op, geom = make_op(eps=0.0)
        bd = op.boundary_part(WallData(flux0=1.0, flux1=1.0, diffuse_rep="G-form"))
        prof = op.wall_profile("G-form")
        assert np.all(bd <= prof + 1e-15)
        assert np.all(bd >= 0.0)


@pytest.mark.skipif(_backend.NAME != "compiled", reason="compiled kernels not built")
def test_backends_agree():
    a, _ = make_op(alpha=0.03, backend="compiled")
    b, _ = make_op(alpha=0.03, backend="python")
    S = np.random.default_rng(7).random(a.shape)
    assert np.allclose(a.apply(S), b.apply(S), rtol=1e-12, atol=1e-15)
    assert np.array_equal(a.exit_wall, b.exit_wall)
