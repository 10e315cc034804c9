import numpy as np
import pytest

from couette_kinetics.errors import ConfigError, PreconditionError
from couette_kinetics.geometry import AnnulusGeometry
from couette_kinetics.kinetic_core import KineticConfig, VelocityGrid
from couette_kinetics.steady_solver import (
    ContinuationSchedule,
    Sources,
    SteadyProblem,
    assemble_profile,
    continue_sigma,
    limit_epsilon,
    nonlinear_sources,
    project_mass,
    reference_mass,
    residual_certificate,
    solve_linear_pair,
    solve_nonlinear,
)
from couette_kinetics.transport import SpatialGrid, WallData, outgoing_flux


def tiny(alpha=0.02, n=8, cells=4, schedule=None):
    geom = AnnulusGeometry(0.5, alpha)
    schedule = schedule or ContinuationSchedule(sigma_steps=tuple(np.linspace(0, 1, 5)), epsilon_seq=(1e-1, 1e-2, 1e-3))
    return SteadyProblem(geom, VelocityGrid(6.0, n), SpatialGrid(geom.eta1, cells), KineticConfig(collision_range=3.0), schedule)


@pytest.fixture(scope="module")
def pr():
    return tiny()


@pytest.fixture(scope="module")
def solved():
    p = tiny(n=10)
    return p, solve_nonlinear(p)


class TestSchedule:
    def test_defaults(self):
        s = ContinuationSchedule()
        assert len(s.sigma_steps) == 11 and s.epsilon_seq[-1] == 1e-4

    @pytest.mark.parametrize(
        "kw",
        [{"sigma_steps": (0.0, 0.5)}, {"sigma_steps": (0.1, 1.0)}, {"epsilon_seq": (1e-2, 1e-1)}, {"inner_tol": 0.0}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ContinuationSchedule(**kw)

    def test_uniform(self):
        assert len(ContinuationSchedule.uniform(4).sigma_steps) == 5


class TestLinear:
    def test_zero_sources(self, pr):
        z = Sources(pr.zeros(), pr.zeros())
        res = solve_linear_pair(0.1, 1.0, z, pr)
        assert not res.f1.any() and not res.f2.any()
        f1, f2, _ = continue_sigma(0.1, z, pr)
        assert not f1.any() and not f2.any()
        lim, _ = limit_epsilon(z, pr)
        assert not lim.f1.any() and not lim.f2.any()

    def test_sigma_zero_two_pass(self, pr):
        # f2 = T^-1 S2 plus diffuse walls fed by its own flux: a 2x2 system for
        # the wall fluxes; then f1 is a single sweep against f2
        rng = np.random.default_rng(1)
        S1 = rng.normal(size=pr.shape) * pr.mu
        S2 = rng.normal(size=pr.shape) * pr.sq
        eps = 0.1
        op = pr.operator(eps)
        P = op.apply(S2)
        B = [op.boundary_part(WallData(flux0=1.0, flux1=0.0, diffuse_rep="f-form")),
             op.boundary_part(WallData(flux0=0.0, flux1=1.0, diffuse_rep="f-form"))]
        flux = lambda f: np.array([outgoing_flux(f[..., 0], pr.grid, 0, "f-form"), outgoing_flux(f[..., -1], pr.grid, 1, "f-form")])
        Mx = np.column_stack([flux(B[0]), flux(B[1])])
        J = np.linalg.solve(np.eye(2) - Mx, flux(P))
        f2 = P + J[0] * B[0] + J[1] * B[1]
        c = pr.geom.alpha / (2 * pr.geom.eta1)
        f1 = op.apply(S1 - c * pr.ve * pr.vp * pr.sq * f2)
        res = solve_linear_pair(eps, 0.0, Sources(S1, S2), pr)
        scale = pr.wsup(f1, f2)
        assert pr.wsup(res.f1 - f1, res.f2 - f2) <= 1e-8 * scale

    def test_epsilon_probe(self, pr):
        src = nonlinear_sources(None, pr.geom.alpha, pr)
        sizes, prev, diffs = [], None, []
        for eps in (0.1, 0.01, 0.001):
            r = solve_linear_pair(eps, 1.0, src, pr)
            sizes.append(pr.wsup(r.f2))
            if prev is not None:
                diffs.append(pr.wsup(r.f1 - prev[0], r.f2 - prev[1]))
            prev = (r.f1, r.f2)
        assert sizes[0] < sizes[1] < sizes[2]
        assert diffs[1] < diffs[0]

    def test_sigma_grid_robustness(self):
        src_pr = tiny(schedule=ContinuationSchedule.uniform(5, epsilon_seq=(1e-1,)))
        src = nonlinear_sources(None, 0.02, src_pr)
        a1, a2, _ = continue_sigma(0.1, src, src_pr)
        b_pr = tiny(schedule=ContinuationSchedule.uniform(20, epsilon_seq=(1e-1,)))
        b1, b2, _ = continue_sigma(0.1, src, b_pr)
        scale = src_pr.wsup(a1, a2)
        assert src_pr.wsup(a1 - b1, a2 - b2) <= 10 * src_pr.schedule.inner_tol * scale

    def test_incompatible_source(self, pr):
        bad = Sources(pr.zeros(), np.broadcast_to(pr.sq, pr.shape).copy())
        with pytest.raises(PreconditionError):
            limit_epsilon(bad, pr)


class TestMass:
    def test_default_projection(self, pr):
        f1 = np.zeros(pr.shape)
        f2 = np.broadcast_to(3.0 * pr.sq, pr.shape).copy()
        g1, g2, a = project_mass(f1, f2, pr)
        assert a == pytest.approx(3.0)
        assert abs(pr.mass(g1 + pr.sq * g2)) < 1e-14

    def test_reference_mass(self, pr):
        prof = assemble_profile(pr.zeros(), pr.zeros(), 0.0, None, pr)
        assert prof.M_tilde == 1.0
        assert np.array_equal(prof.G_st, prof.G_frame)
        assert pr.mass(prof.G_st) == pytest.approx(reference_mass(pr), rel=1e-14)


class TestNonlinear:
    def test_equilibrium(self):
        p = tiny(alpha=0.0)
        prof = solve_nonlinear(p, M0=2.0)
        assert p.wsup(prof.g1, prof.g2) == 0.0
        assert prof.M_tilde == pytest.approx(2.0 / reference_mass(p))
        assert np.allclose(prof.G_st, prof.M_tilde * p.mu, rtol=1e-15)
        assert residual_certificate(prof, p)["residual"] == 0.0

    def test_profile(self, solved):
        p, prof = solved
        info = prof.info
        assert info["picard_diffs"][-1] <= p.schedule.outer_tol * p.wsup(prof.g1, prof.g2) / p.geom.alpha
        assert abs(p.mass(prof.deviation)) <= 1e-8 * p.mass(np.abs(prof.deviation))
        b = np.max(np.abs(prof.moments), axis=1)
        assert b[2] > 0 and max(b[1], b[3]) <= 1e-3 * b[2]

    def test_mass_audit(self, solved):
        p, prof = solved
        assert p.mass(prof.G_frame) == pytest.approx(prof.M0, rel=1e-8)
        # the shifted Maxwellian is summed on a coarse lattice here (h = 4/3)
        assert p.mass(prof.G_st) == pytest.approx(prof.M0, rel=1e-6)

    def test_wall_shift(self, solved):
        p, prof = solved
        shift = p.geom.shear_profile(p.sgrid.nodes)
        assert shift[0] == pytest.approx(p.geom.alpha) and shift[-1] == 0.0
        lab = assemble_profile(np.zeros(p.shape), np.zeros(p.shape), p.geom.alpha, None, p).G_st
        mu_at_wall = np.exp(-0.5 * (p.ve[..., 0] ** 2 + (p.vp[..., 0] + p.geom.alpha) ** 2 + p.vz_levels[None, None, :] ** 2))
        assert np.allclose(lab[..., 0], mu_at_wall * (2 * np.pi) ** -1.5, rtol=1e-13)
        assert np.allclose(lab[..., -1], p.mu[..., 0], rtol=1e-13)

    def test_certificate(self, solved):
        p, prof = solved
        c = residual_certificate(prof, p)
        assert c["residual"] <= 5 * p.schedule.outer_tol * c["scale"] + c["budget"]
