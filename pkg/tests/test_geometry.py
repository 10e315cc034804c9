import math

import numpy as np
import pytest

from couette_kinetics.errors import BranchError, ConfigError, DomainError, GrazingError
from couette_kinetics.geometry import (
    AnnulusGeometry,
    PhasePoint,
    RegionTag,
    annulus_coords,
    backward_exit,
    build_cycle,
    char_state_at,
    classify_region,
    conserved_angular,
    energy_ratio,
    exit_details,
    exit_position,
    rk4_characteristic,
    sample_trajectory,
    wall_return_velocities,
    wall_return_velocity,
)

# Reference values below come from a DOP853 integration (rtol 1e-13) of the
# characteristic ODE run backward with wall and turning-point events.
ODE_EXITS = [
    # (eta, v_eta, v_phi, alpha, eta1) -> (t_star, x_star, exit v_eta, exit v_phi, eta_plus or None)
    ((0.0, -0.3, 0.8, 0.05, 0.5), (0.8298273622327401, 0.0, 0.3, 0.8, 0.0641407421053663)),
    ((0.0, -1.0, 1.0, 0.0, 0.5), (1.0, 0.0, 1.0, 1.0, 0.29289321881345026)),
    ((0.0, -1.0, 0.1, 0.0, 0.5), (0.5025317919903004, 0.5, -0.9848857801796176, 0.2, None)),
    ((0.2, 0.7, -0.4, 0.03, 0.5), (0.27707637264837065, 0.0, 0.7388914161683751, -0.3092, None)),
    ((0.1, -0.6, 0.5, 0.04, 0.6), (1.9806393174208532, 0.0, 0.6388461819516519, 0.45633333333333, 0.43189950319771414)),
    ((0.5, 1.0, 0.5, 0.05, 0.5), (0.4703878389611102, 0.0, 1.0972776499485604, 0.2875, None)),
]


def geom(eta1=0.5, alpha=0.0):
    return AnnulusGeometry(1.0 - eta1, alpha)


class TestAnnulusGeometry:
    def test_rejects_bad_radius(self):
        with pytest.raises(ConfigError):
            AnnulusGeometry(1.2)

    def test_alpha_cap(self):
        with pytest.raises(ConfigError):
            AnnulusGeometry(0.5, 0.2)
        assert AnnulusGeometry(0.5, 0.2, alpha_cap=0.3).alpha == 0.2

    def test_shear_constants(self):
        g = AnnulusGeometry(0.5, 0.02)
        assert g.eta1 == 0.5
        assert g.shear_c == pytest.approx(0.02)
        assert g.shear_profile(0.0) == pytest.approx(0.02)
        assert g.shear_profile(0.5) == pytest.approx(0.0)


class TestAnnulusCoords:
    def test_outer_wall_inward(self):
        assert annulus_coords(1.0, 0.0, (-1.0, 0.0, 0.0), 0.5) == PhasePoint(0.0, 1.0, 0.0, 0.0)

    def test_axial_only(self):
        p = annulus_coords(0.0, 0.5, (0.0, 0.0, -2.0), 0.5)
        assert (p.eta, p.v_eta, p.v_z) == (0.5, 0.0, 2.0)
        assert p.v_phi == pytest.approx(0.0, abs=1e-15)

    def test_interior(self):
        p = annulus_coords(0.6, 0.0, (0.0, -1.0, 0.0), 0.5)
        assert p.eta == pytest.approx(0.4)
        assert (p.v_eta, p.v_phi, p.v_z) == pytest.approx((0.0, 1.0, 0.0))

    def test_outside(self):
        with pytest.raises(DomainError):
            annulus_coords(0.1, 0.0, (1.0, 0.0, 0.0), 0.5)


class TestConservedAngular:
    def test_shear_value(self):
        assert conserved_angular(PhasePoint(0.5, 0.0, 1.0), AnnulusGeometry(0.5, 0.1, alpha_cap=0.2)) == pytest.approx(0.475)

    def test_shear_free(self):
        assert conserved_angular(PhasePoint(0.3, 0.2, -0.7), geom()) == pytest.approx(0.7 * -0.7)

    def test_wall_value(self):
        g = AnnulusGeometry(0.5, 0.2, alpha_cap=0.3)
        assert conserved_angular(PhasePoint(0.0, 0.4, 0.0), g) == pytest.approx(-0.2)

    def test_constant_along_rk4(self):
        g = AnnulusGeometry(0.5, 0.04)
        y0 = np.array([[0.2, -0.8, 0.6, 0.0]])
        vals = []
        for s in (0.0, 0.05, 0.1, 0.15):
            y = rk4_characteristic(y0, -s, 400, g.alpha, g.eta1)[0] if s else y0[0]
            vals.append(conserved_angular(PhasePoint(y[0], y[1], y[2]), g))
        assert np.ptp(vals) < 1e-12


class TestCharStateAt:
    def test_shear_free_closed_form(self):
        v = char_state_at(PhasePoint(0.0, -1.0, 1.0), 0.2, "pre-turn", geom())
        assert v[1] == pytest.approx(1.25)
        assert v[0] == pytest.approx(-math.sqrt(0.4375))

    def test_identity(self):
        p = PhasePoint(0.3, -0.4, 0.9, 0.2)
        assert char_state_at(p, 0.3, "pre-turn", geom(alpha=0.03)) == (-0.4, pytest.approx(0.9), 0.2)

    def test_speed_conserved_without_shear(self):
        p = PhasePoint(0.1, -1.2, 0.5, 0.3)
        for X in np.linspace(0.0, 0.5, 11):
            v = char_state_at(p, float(X), "post-turn", geom())
            assert math.fsum(x * x for x in v) == pytest.approx(1.2**2 + 0.25 + 0.09, rel=1e-13)

    def test_beyond_turning_point(self):
        with pytest.raises(BranchError):
            char_state_at(PhasePoint(0.0, -0.1, 1.0), 0.4, "pre-turn", geom())

    def test_bad_branch(self):
        with pytest.raises(ValueError):
            char_state_at(PhasePoint(0.0, -1.0, 1.0), 0.1, "sideways", geom())


class TestExitPosition:
    def test_shear_free(self):
        assert exit_position(PhasePoint(0.0, -1.0, 1.0), geom()) == pytest.approx(1.0 - 1.0 / math.sqrt(2.0), rel=1e-12)

    def test_tiny_radial_speed(self):
        assert exit_position(PhasePoint(0.0, -1e-6, 1.0), geom()) < 1e-10

    def test_small_shear_perturbation(self):
        x = exit_position(PhasePoint(0.0, -0.3, 0.8), geom(alpha=0.05))
        x0 = 1.0 - 0.8 / math.sqrt(0.73)
        assert x == pytest.approx(0.0641407421053663, rel=1e-10)
        assert abs(x - x0) / x0 < 0.02

    def test_requires_inward(self):
        with pytest.raises(DomainError):
            exit_position(PhasePoint(0.1, 0.5, 0.2), geom())


class TestClassify:
    def test_regions(self):
        assert classify_region(PhasePoint(0.0, 1.0, 0.5), geom()) is RegionTag.A1
        assert classify_region(PhasePoint(0.0, -1.0, 1.0), geom(0.5)) is RegionTag.A2
        assert classify_region(PhasePoint(0.0, -1.0, 1.0), geom(0.2)) is RegionTag.A3


class TestBackwardExit:
    def test_straight_run(self):
        assert backward_exit(PhasePoint(0.5, 1.0, 0.0), geom()) == pytest.approx((0.5, 0.0))

    def test_inner_wall_exit(self):
        assert backward_exit(PhasePoint(0.0, -1.0, 0.1), geom())[1] == 0.5

    def test_chord_time(self):
        # straight chord of length sqrt(2) at speed sqrt(2)
        assert backward_exit(PhasePoint(0.0, -1.0, 1.0), geom())[0] == pytest.approx(1.0, rel=1e-10)

    @pytest.mark.parametrize("args,ref", ODE_EXITS)
    def test_against_ode(self, args, ref):
        eta, ve, vp, alpha, eta1 = args
        info = exit_details(PhasePoint(eta, ve, vp), geom(eta1, alpha))
        assert info.t_star == pytest.approx(ref[0], rel=1e-10)
        assert info.x_star == ref[1]
        assert info.exit_velocity[:2] == pytest.approx(ref[2:4], rel=1e-10)
        if ref[4] is not None:
            assert info.eta_plus == pytest.approx(ref[4], rel=1e-10)

    def test_grazing_wall_point(self):
        with pytest.raises(GrazingError):
            exit_details(PhasePoint(0.0, 0.0, 1.0), geom())

    def test_trajectory_matches_rk4(self):
        g = geom(alpha=0.04)
        p = PhasePoint(0.25, -0.7, 0.6, 0.1)
        rows = sample_trajectory(p, g, 17)
        s, X, ve, vp = rows[len(rows) // 2 + 3][:4]
        y = rk4_characteristic(np.array([[0.25, -0.7, 0.6, 0.1]]), -s, 4000, g.alpha, g.eta1)[0]
        # rk4 integrates the forward ODE: backward position and velocities
        assert y[0] == pytest.approx(X, abs=1e-9)
        assert y[2] == pytest.approx(vp, abs=1e-9)


class TestWallReturn:
    def test_inner_bounce_returns_mirror(self):
        assert wall_return_velocity(0.0, (-0.5, 0.3, 0.1), geom()) == pytest.approx((0.5, 0.3, 0.1), abs=1e-10)

    def test_speed_conserved_without_shear(self):
        w = wall_return_velocity(0.5, (1.0, 0.5, 0.2), geom())
        assert math.fsum(x * x for x in w) == pytest.approx(1.29, rel=1e-12)

    def test_energy_ratio_upper_bound(self):
        r = energy_ratio(0.5, (1.0, 0.5, 0.0), geom(alpha=0.05))
        assert 1.0 <= r <= 1.0 + 0.05

    def test_not_a_wall(self):
        with pytest.raises(DomainError):
            wall_return_velocity(0.2, (-1.0, 0.0, 0.0), geom())

    def test_wrong_half_space(self):
        with pytest.raises(DomainError):
            wall_return_velocity(0.0, (0.5, 0.0, 0.0), geom())

    @pytest.mark.parametrize("wall,sign", [(0.0, -1.0), (0.5, 1.0)])
    def test_batch_matches_exit_details(self, wall, sign):
        g = geom(alpha=0.05)
        rng = np.random.default_rng(11)
        V = np.column_stack([sign * rng.uniform(0.1, 3.0, 50), rng.uniform(-3, 3, 50), rng.uniform(-2, 2, 50)])
        W = wall_return_velocities(wall, V, g)
        for v, w in zip(V, W):
            info = exit_details(PhasePoint(wall, *v), g)
            ref = (-v[0], v[1], v[2]) if info.region is RegionTag.A2 else info.exit_velocity
            assert w == pytest.approx(ref, abs=1e-14)

    def test_batch_grazing(self):
        with pytest.raises(GrazingError):
            wall_return_velocities(0.0, [(-1e-15, 1.0, 0.0)], geom())


class TestBuildCycle:
    def test_single_segment(self):
        c = build_cycle(2.0, PhasePoint(0.2, 1.0, 0.0), [], geom())
        assert len(c.segments) == 1
        assert c.end_time == pytest.approx(1.8)
        assert c.end_wall == 0.0

    def test_radial_bouncing(self):
        g = geom()
        refl = [(-1.0, 0.01, 0.0), (1.0, 0.01, 0.0), (-1.0, 0.01, 0.0)]
        c = build_cycle(0.0, PhasePoint(0.0, 1.0, 0.01), refl, g)
        gaps = -np.diff(c.times)
        assert gaps[1:] == pytest.approx(0.5, rel=1e-3)

    def test_weights_form_probability(self):
        from couette_kinetics.kinetic_core import VelocityGrid

        grid = VelocityGrid(6.0, 24)
        ve, vp, vz = grid.components
        mu = grid.mu
        wc = grid.wall_constant
        mask = ve > 0
        total = np.sum(wc * mu * np.abs(ve) * mask) * grid.quad_weight
        assert total == pytest.approx(1.0, abs=1e-12)
        c = build_cycle(0.0, PhasePoint(0.0, 1.0, 0.0), [(-0.5, 0.2, 0.1)], geom(), wall_constant=wc)
        assert c.segments[1].weight == pytest.approx(wc * math.exp(-0.15) / (2 * math.pi) ** 1.5 * 0.5)

    def test_inadmissible_reflection(self):
        with pytest.raises(DomainError):
            build_cycle(0.0, PhasePoint(0.1, 1.0, 0.2), [(0.5, 0.0, 0.0)], geom())
