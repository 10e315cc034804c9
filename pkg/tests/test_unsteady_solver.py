import math

import numpy as np
import pytest

from couette_kinetics.errors import ConfigError, PreconditionError
from couette_kinetics.geometry import AnnulusGeometry, PhasePoint, exit_details
from couette_kinetics.kinetic_core import CollisionModel, KineticConfig, VelocityGrid
from couette_kinetics.transport import SpatialGrid
from couette_kinetics.unsteady_solver import (
    TimeStepperConfig,
    UnsteadyProblem,
    backward_exit_time,
    evolve_and_fit,
    fit_decay,
    perturbation_recipe,
    smoothed_monotone,
    time_step,
)

GRID = VelocityGrid(6.0, 8)
KC = KineticConfig(collision_range=3.0)
CM = CollisionModel(GRID, KC)


def problem(alpha=0.0, dt=0.05, t_end=0.5, cells=4, **kw):
    geom = AnnulusGeometry(0.5, alpha)
    return UnsteadyProblem(geom, GRID, SpatialGrid(geom.eta1, cells), CM, TimeStepperConfig(dt=dt, t_end=t_end, **kw))


@pytest.fixture(scope="module")
def up0():
    return problem()


def maxwellian(p):
    return np.broadcast_to(p.mu, p.shape).copy()


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [{"dt": 0.0}, {"t_end": -1.0}, {"scheme": "explicit"}, {"positivity_tol": 1e-6}, {"history_stride": 0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TimeStepperConfig(**kw)

    def test_steps(self):
        assert TimeStepperConfig(dt=0.05, t_end=8.0).n_steps == 160
        assert TimeStepperConfig(dt=0.3, t_end=1.0).n_steps == 4


class TestCharacteristics:
    def test_exit_time_matches_geometry(self):
        geom = AnnulusGeometry(0.5, 0.03)
        eta = np.array([0.1, 0.25, 0.4, 0.2])
        ve = np.array([-0.6, 0.8, -1.5, -0.2])
        vp = np.array([0.5, -0.3, 0.2, 1.4])
        t, wall, _ = backward_exit_time(eta, ve, vp, geom, n_sub=16)
        for k in range(eta.size):
            info = exit_details(PhasePoint(eta[k], ve[k], vp[k]), geom)
            assert t[k] == pytest.approx(info.t_star, rel=1e-8)
            assert wall[k] == (1 if info.x_star == geom.eta1 else 0)

    def test_interpolation_rows_partition_unity(self, up0):
        # rows whose foot lies inside the velocity box reproduce constants exactly
        P = up0.sl.matrix
        rows = np.asarray(P.sum(axis=1)).ravel()
        inside = rows > 0
        assert np.allclose(rows[inside & (rows > 1 - 1e-9)], 1.0, atol=1e-13)
        assert np.mean(np.abs(rows[inside] - 1.0) < 1e-12) > 0.8


class TestStep:
    def test_positivity(self, up0):
        rng = np.random.default_rng(3)
        G = rng.random(up0.shape) * up0.mu
        G[rng.random(up0.shape) < 0.3] = 0.0
        up0.set_reference(None)
        G1, rep = time_step(G, 0.05, up0)
        assert np.min(G1) >= 0.0 and rep["min_G"] >= 0.0

    def test_mass_renormalized(self, up0):
        rng = np.random.default_rng(4)
        G = maxwellian(up0) * (1 + 0.1 * rng.random(up0.shape))
        up0.set_reference(None)
        G1, rep = time_step(G, None, up0)
        assert up0.mass(G1) == pytest.approx(up0.mass(G), rel=1e-14)
        assert rep["mass_in"] == up0.mass(G)

    def test_equilibrium_is_fixed_point(self, up0):
        G0 = 1.3 * maxwellian(up0)
        info = up0.set_reference(G0)
        assert info["ratio_interpolation"]
        G1, _ = time_step(G0, 0.05, up0)
        assert up0.wsup(G1 - G0) <= 1e-10
        up0.set_reference(None)

    def test_rejects_negative_input(self, up0):
        G = maxwellian(up0)
        G[0, 0, 0, 0] = -1e-6
        with pytest.raises(PreconditionError):
            time_step(G, 0.05, up0)

    def test_rejects_other_dt(self, up0):
        with pytest.raises(ConfigError):
            time_step(maxwellian(up0), 0.1, up0)


class TestPerturbation:
    def test_zero_mass_and_amplitude(self, up0):
        G_st = maxwellian(up0)
        G0 = perturbation_recipe(G_st, up0, amplitude=0.05)
        assert abs(up0.mass(G0 - G_st)) <= 1e-14 * up0.mass(G_st)
        assert up0.wsup(G0 - G_st) == pytest.approx(0.05 * up0.wsup(G_st), rel=1e-12)
        assert np.min(G0) >= 0.0

    def test_unknown_shape(self, up0):
        with pytest.raises(ConfigError):
            perturbation_recipe(maxwellian(up0), up0, shape="shear")


class TestFit:
    def test_exact_exponential(self):
        t = np.linspace(0.0, 4.0, 41)
        fit = fit_decay(t, 0.3 * np.exp(-1.7 * t))
        assert fit.lambda0_hat == pytest.approx(1.7, rel=1e-12)
        assert fit.r_squared == pytest.approx(1.0)
        assert fit.predicted(2.0) == pytest.approx(0.3 * math.exp(-3.4), rel=1e-10)
        assert fit.fit_window == (2.0, 4.0)

    def test_short_history(self):
        t = np.linspace(0.0, 1.0, 11)
        fit = fit_decay(t, np.exp(-t))
        assert fit.lambda0_hat is None and fit.predicted(1.0) is None

    def test_monotone_envelope(self):
        t = np.linspace(0, 5, 101)
        h = np.exp(-t) * (1 + 0.01 * np.sin(40 * t))
        assert smoothed_monotone(h)
        assert not smoothed_monotone(np.exp(-t) + 0.5 * (t > 4))


class TestEvolve:
    def test_steady_initial_data(self, up0):
        G = maxwellian(up0)
        fit = evolve_and_fit(G, G, up0)
        assert fit.lambda0_hat is None and fit.extra["reason"] == "steady initial data"

    def test_mass_condition(self, up0):
        G = maxwellian(up0)
        with pytest.raises(PreconditionError):
            evolve_and_fit(1.01 * G, G, up0)

    def test_eps0(self, up0):
        G = maxwellian(up0)
        with pytest.raises(PreconditionError):
            evolve_and_fit(perturbation_recipe(G, up0), G, up0, eps0=1e-6)

    def test_decay_to_maxwellian(self):
        p = problem(dt=0.1, t_end=4.0)
        G_st = maxwellian(p)
        fit = evolve_and_fit(perturbation_recipe(G_st, p), G_st, p)
        ex = fit.extra
        assert fit.lambda0_hat is not None and fit.lambda0_hat > 0.0
        assert fit.r_squared >= 0.95
        assert ex["min_G"] >= 0.0
        assert abs(ex["final_mass_drift_relative"]) <= 1e-12
        assert ex["terminal_distance"] < 0.2 * ex["initial_distance"]
        assert ex["monotone_envelope"]


def test_default_dt_rule():
    p = problem()
    cfg_auto = TimeStepperConfig(t_end=1.0)
    geom = AnnulusGeometry(0.5, 0.0)
    up = UnsteadyProblem(geom, GRID, SpatialGrid(geom.eta1, 4), CM, cfg_auto)
    assert up.cfg.dt == pytest.approx(0.1 / np.max(CM.loss_frequency_mu), rel=1e-15)
    assert up.cfg.n_steps == math.ceil(1.0 / up.cfg.dt - 1e-9)
    with pytest.raises(ConfigError):
        cfg_auto.n_steps
    assert p.cfg.dt == 0.05
