"""Configuration, command dispatch and deterministic output writing.

    couette-kinetics <steady|unsteady|characteristics|validate> --config run.json [--out DIR] [--threads N]

Configs are JSON objects.  Keys may be grouped in sections (geometry,
kinetic, schedules, unsteady, characteristics, validate, output) or given
flat at the top level; unknown keys are rejected by name.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import os
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend
from .diagnostics import tail_bound, tail_diagnostic
from .errors import ConfigError, KineticsError, NonConvergenceError
from .geometry import AnnulusGeometry, PhasePoint, build_cycle, exit_details, sample_trajectory, wall_return_velocity
from .kinetic_core import CollisionModel, KineticConfig, VelocityGrid, collision_frequency
from .steady_solver import ContinuationSchedule, SteadyProblem, residual_certificate, solve_nonlinear
from .transport import SpatialGrid, TransportCoeffs, check_absorption

log = logging.getLogger(__name__)

DEFAULTS: dict = {
    "geometry": {"r1": None, "alpha": 0.0, "alpha_cap": 0.05},
    "kinetic": {
        "gamma": 1.0,
        "b0_norm": 1.0,
        "ell": 8.0,
        "M_cut": 4.0,
        "v_max": 6.0,
        "n_v": 24,
        "n_eta": 32,
        "collision_range": 4.0,
    },
    "schedules": {
        "sigma_steps": 10,
        "epsilon_seq": [1e-1, 1e-2, 1e-3, 1e-4],
        "inner_tol": 1e-10,
        "step_tol": 1e-6,
        "outer_tol": 1e-8,
        "max_inner": 400,
        "max_outer": 30,
        "restart": 80,
    },
    "unsteady": {
        "dt": "auto",
        "t_end": 8.0,
        "amplitude": 0.05,
        "shape": "heat",
        "history_stride": 1,
        "positivity_tol": 1e-12,
        "well_balanced": True,
        "renormalize_mass": True,
    },
    "characteristics": {
        "points": [[0.0, -0.5, 0.3, 0.1]],
        "reflected": [],
        "n_samples": 65,
    },
    "validate": {"n_samples": 1000},
    "output": {"directory": "out", "formats": ["csv", "json"], "seed": 0, "dump_fields": False},
}

_SECTION_OF = {key: sec for sec, body in DEFAULTS.items() for key in body}


@dataclass(frozen=True)
class RunConfig:
    geometry: dict
    kinetic: dict
    schedules: dict
    unsteady: dict
    characteristics: dict
    validate: dict
    output: dict

    def as_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in DEFAULTS}

    # -- derived objects -------------------------------------------------
    def geom(self, alpha: float | None = None) -> AnnulusGeometry:
        g = self.geometry
        return AnnulusGeometry(g["r1"], g["alpha"] if alpha is None else alpha, g["alpha_cap"])

    def velocity_grid(self, v_max: float | None = None, n_v: int | None = None) -> VelocityGrid:
        k = self.kinetic
        return VelocityGrid(k["v_max"] if v_max is None else v_max, k["n_v"] if n_v is None else n_v)

    def spatial_grid(self) -> SpatialGrid:
        return SpatialGrid(1.0 - self.geometry["r1"], self.kinetic["n_eta"])

    def kinetic_config(self) -> KineticConfig:
        k = self.kinetic
        return KineticConfig(k["gamma"], k["b0_norm"], k["ell"], k["M_cut"], k["collision_range"])

    def schedule(self) -> ContinuationSchedule:
        s = self.schedules
        sig = s["sigma_steps"]
        steps = tuple(np.linspace(0.0, 1.0, int(sig) + 1)) if isinstance(sig, int) else tuple(float(x) for x in sig)
        return ContinuationSchedule(
            sigma_steps=steps,
            epsilon_seq=tuple(float(x) for x in s["epsilon_seq"]),
            inner_tol=s["inner_tol"],
            step_tol=s["step_tol"],
            outer_tol=s["outer_tol"],
            max_inner=s["max_inner"],
            max_outer=s["max_outer"],
            restart=s["restart"],
        )

    def stepper(self, dt: float | None = None):
        from .unsteady_solver import TimeStepperConfig

        u = self.unsteady
        return TimeStepperConfig(
            dt=(None if u["dt"] == "auto" else u["dt"]) if dt is None else dt,
            t_end=u["t_end"],
            history_stride=u["history_stride"],
            positivity_tol=u["positivity_tol"],
            well_balanced=u["well_balanced"],
            renormalize_mass=u["renormalize_mass"],
        )


def _merge(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    out = copy.deepcopy(DEFAULTS)
    for key, val in raw.items():
        if key in DEFAULTS:
            if not isinstance(val, dict):
                raise ConfigError(f"section '{key}' must be an object")
            for sub, sval in val.items():
                if sub not in DEFAULTS[key]:
                    raise ConfigError(f"unknown key '{key}.{sub}'")
                out[key][sub] = sval
        elif key in _SECTION_OF:
            out[_SECTION_OF[key]][key] = val
        else:
            raise ConfigError(f"unknown key '{key}'")
    return out


def _number(sec: dict, key: str, name: str, integer: bool = False) -> None:
    v = sec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (isinstance(v, float) and not math.isfinite(v)):
        raise ConfigError(f"'{name}' must be a finite number")
    if integer:
        if int(v) != v:
            raise ConfigError(f"'{name}' must be an integer")
        sec[key] = int(v)
    else:
        sec[key] = float(v)


def validate_config(cfg: dict) -> RunConfig:
    g, k, s, u = cfg["geometry"], cfg["kinetic"], cfg["schedules"], cfg["unsteady"]
    if g["r1"] is None:
        raise ConfigError("'r1' is required")
    for key in ("r1", "alpha", "alpha_cap"):
        _number(g, key, key)
    for key in ("gamma", "b0_norm", "ell", "M_cut", "v_max", "collision_range"):
        _number(k, key, key)
    for key in ("n_v", "n_eta"):
        _number(k, key, key, integer=True)
    for key in ("inner_tol", "step_tol", "outer_tol"):
        _number(s, key, key)
    for key in ("max_inner", "max_outer", "restart"):
        _number(s, key, key, integer=True)
    if isinstance(s["sigma_steps"], list):
        s["sigma_steps"] = [float(x) for x in s["sigma_steps"]]
    else:
        _number(s, "sigma_steps", "sigma_steps", integer=True)
        if s["sigma_steps"] < 1:
            raise ConfigError("'sigma_steps' must be >= 1")
    if not isinstance(s["epsilon_seq"], list) or not s["epsilon_seq"]:
        raise ConfigError("'epsilon_seq' must be a nonempty list")
    s["epsilon_seq"] = [float(x) for x in s["epsilon_seq"]]
    if u["dt"] != "auto":
        _number(u, "dt", "dt")
    for key in ("t_end", "amplitude", "positivity_tol"):
        _number(u, key, key)
    _number(u, "history_stride", "history_stride", integer=True)
    out = cfg["output"]
    _number(out, "seed", "seed", integer=True)
    if not 0.0 <= k["gamma"] <= 1.0:
        raise ConfigError("'gamma' must lie in [0, 1] (hard potentials)")
    if k["ell"] <= 0.0:
        raise ConfigError("'ell' must be positive")
    # absorption margin of the weighted problem: alpha * ell < 1, and the
    # weighted absorption nu + (alpha/eta1) ell v_eta v_phi/(1+|v|^2) must stay above nu0/4 on the grid
    margin = g["alpha"] * k["ell"]
    if margin >= 1.0:
        raise ConfigError(
            f"absorption margin violated: alpha*ell = {margin:.3g} must be < 1 (alpha={g['alpha']}, ell={k['ell']})"
        )
    rc = RunConfig(**cfg)
    geom_probe = AnnulusGeometry(g["r1"], 0.0, max(g["alpha_cap"], g["alpha"]))
    grid = rc.velocity_grid()
    kc = rc.kinetic_config()
    if kc.M_cut + 1.0 >= grid.v_max:
        raise ConfigError(f"M_cut + 1 = {kc.M_cut + 1} must stay below v_max = {grid.v_max}")
    nu = collision_frequency(grid.nodes, kc)
    check_absorption(grid, nu, TransportCoeffs(use_weighted_absorption=True, alpha=g["alpha"], ell=k["ell"]), geom_probe.eta1)
    rc.geom()
    rc.schedule()
    rc.stepper()
    return rc


def parse_config(path) -> RunConfig:
    """Read and validate a JSON config file (or an already-decoded dict)."""
    if isinstance(path, dict):
        raw = path
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(_merge(raw))


# ---------------------------------------------------------------------------
# writers


def _clean(x):
    """JSON-safe value: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(buf.getvalue())


FIELD_MAGIC = b"CKFIELD1"


def write_field(path: Path, arr: np.ndarray) -> None:
    """Binary dump: magic, ndim (uint32 LE), dims (uint64 LE), then float64 little-endian data."""
    a = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(a.tobytes())


def read_field(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != FIELD_MAGIC:
        raise ValueError("not a field dump")
    nd = struct.unpack("<I", data[8:12])[0]
    dims = struct.unpack(f"<{nd}Q", data[12 : 12 + 8 * nd])
    return np.frombuffer(data[12 + 8 * nd :], dtype="<f8").reshape(dims).copy()


# ---------------------------------------------------------------------------
# commands


def _problem(rc: RunConfig, threads: int | None, alpha: float | None = None) -> SteadyProblem:
    return SteadyProblem(
        rc.geom(alpha), rc.velocity_grid(), rc.spatial_grid(), rc.kinetic_config(), rc.schedule(), n_threads=threads
    )


def steady_summary(prof, pr: SteadyProblem, cert: dict | None) -> dict:
    info = prof.info
    coef = prof.moments
    b = np.max(np.abs(coef), axis=1) if coef is not None else np.zeros(5)
    stages = [s for st in info.get("stages", []) for s in st]
    out = {
        "alpha": prof.alpha,
        "M_tilde": prof.M_tilde,
        "M0": prof.M0,
        "mass_G_st": pr.mass(prof.G_st),
        "mass_deviation": pr.mass(prof.deviation),
        "picard_iterations": info.get("picard_iterations", 0),
        "picard_differences": info.get("picard_diffs", []),
        "contraction_factors": info.get("contraction", []),
        "max_inner_iterations": max((s["iterations"] for s in stages), default=0),
        "total_inner_iterations": int(sum(s["iterations"] for s in stages)),
        "cauchy_differences": info.get("cauchy", [[]])[-1] if info.get("cauchy") else [],
        "removed_mass": info.get("removed_mass", [[]])[-1] if info.get("removed_mass") else [],
        "weighted_sup_g1_g2": pr.wsup(prof.g1, prof.g2),
        "moment_max_a": b[0],
        "moment_max_b1": b[1],
        "moment_max_b2": b[2],
        "moment_max_b3": b[3],
        "moment_max_c": b[4],
        "min_G_st": float(np.min(prof.G_st)),
        "status": "converged",
    }
    if cert is not None:
        out.update({f"certificate_{k}": v for k, v in cert.items()})
        tol = 5.0 * pr.schedule.outer_tol * cert["scale"] + cert["budget"]
        out["certificate_bound"] = tol
        out["certificate_passed"] = bool(cert["residual"] <= tol)
    return out


def run_steady(rc: RunConfig, out: Path, threads: int | None) -> int:
    pr = _problem(rc, threads)
    prof = solve_nonlinear(pr)
    cert = residual_certificate(prof, pr)
    tail = tail_diagnostic(prof.g1, rc.kinetic["ell"], pr.grid, rc.kinetic["M_cut"])
    summary = steady_summary(prof, pr, cert)
    summary["tail_bound"] = tail_bound(tail)
    summary["tail_slope"] = "not fitted" if tail.slope is None else tail.slope
    write_json(out / "summary.json", summary)
    coef = prof.moments
    rows = [(float(e), *[float(coef[m, i]) for m in range(5)]) for i, e in enumerate(pr.sgrid.nodes)]
    write_csv(out / "profile.csv", ["eta", "a", "b1", "b2", "b3", "c"], rows)
    write_csv(out / "tail.csv", ["speed", "max_weighted_abs_g1", "max_abs_g1"], tail.rows())
    if rc.output["dump_fields"]:
        write_field(out / "G_st.bin", prof.G_st)
        write_field(out / "g1.bin", prof.g1)
        write_field(out / "g2.bin", prof.g2)
    return 0


def run_unsteady(rc: RunConfig, out: Path, threads: int | None) -> int:
    from .unsteady_solver import UnsteadyProblem, evolve_and_fit, perturbation_recipe

    pr = _problem(rc, threads)
    prof = solve_nonlinear(pr)
    pr.drop_operators()
    up = UnsteadyProblem(pr.geom, pr.grid, pr.sgrid, pr.cm, rc.stepper(), rc.kinetic["ell"])
    G_st = prof.G_frame
    G0 = perturbation_recipe(G_st, up, rc.unsteady["amplitude"], rc.unsteady["shape"])
    fit = evolve_and_fit(G0, G_st, up)
    e = fit.extra
    write_csv(out / "history.csv", ["t", "sup_norm", "L2_norm", "mass", "min_G"], e["rows"])
    summary = {
        "lambda0_hat": fit.lambda0_hat if fit.lambda0_hat is not None else "not fitted",
        "r_squared": fit.r_squared if fit.r_squared is not None else "not fitted",
        "fit_window": list(fit.fit_window) if fit.fit_window else "none",
        "dt": up.cfg.dt,
        "t_end": rc.unsteady["t_end"],
    }
    for key in ("raw_mass_defect", "raw_mass_defect_relative", "final_mass_drift_relative", "min_G", "max_clamped",
                "dt_max_R", "terminal_distance", "initial_distance", "monotone_envelope", "balance_residual_relative",
                "ratio_interpolation"):
        if key in e:
            summary[key] = e[key]
    write_json(out / "decay.json", summary)
    return 0


def run_characteristics(rc: RunConfig, out: Path, threads: int | None) -> int:
    geom = rc.geom()
    ch = rc.characteristics
    rows_ret = []
    for idx, pt in enumerate(ch["points"]):
        if len(pt) != 4:
            raise ConfigError("characteristics.points entries are [eta, v_eta, v_phi, v_z]")
        p = PhasePoint(*map(float, pt))
        traj = sample_trajectory(p, geom, int(ch["n_samples"]))
        write_csv(out / f"trajectory_{idx}.csv", ["s", "X", "V_eta", "V_phi", "V_z", "invariant"], traj)
        info = exit_details(p, geom)
        ret = ("", "", "")
        if p.eta in (0.0, geom.eta1):
            try:
                ret = wall_return_velocity(p.eta, p.velocity, geom)
            except KineticsError:
                ret = ("", "", "")
        rows_ret.append((idx, p.eta, *p.velocity, info.region.value, info.t_star, info.x_star, *info.exit_velocity, *ret))
        if ch["reflected"]:
            cyc = build_cycle(0.0, p, ch["reflected"], geom, wall_constant=rc.velocity_grid().wall_constant)
            write_csv(
                out / f"cycle_{idx}.csv",
                ["k", "t", "x", "v_eta", "v_phi", "v_z", "region", "turn_time", "weight"],
                [(k, s.t, s.x, *s.v, s.region.value, "" if s.turn_time is None else s.turn_time, s.weight)
                 for k, s in enumerate(cyc.segments)],
            )
    write_csv(
        out / "exits.csv",
        ["point", "eta", "v_eta", "v_phi", "v_z", "region", "t_star", "x_star", "exit_v_eta", "exit_v_phi", "exit_v_z",
         "return_v_eta", "return_v_phi", "return_v_z"],
        rows_ret,
    )
    return 0


def run_validate(rc: RunConfig, out: Path, threads: int | None) -> int:
    from . import validation as V

    rng = np.random.default_rng(rc.output["seed"])
    checks = []
    checks += V.check_characteristics(rng, int(rc.validate["n_samples"]))
    checks += V.check_wall_return(rng, rc.geometry["r1"])
    grid = rc.velocity_grid()
    kc = rc.kinetic_config()
    cm = CollisionModel(grid, kc, **({} if threads is None else {"n_threads": threads}))
    checks += V.check_collisions(rng, grid, kc, cm)
    dt = rc.unsteady["dt"]
    checks += V.check_equilibrium(grid, rc.spatial_grid(), kc, rc.geometry["r1"], cm, None if dt == "auto" else dt)
    checks += V.check_transport_order(rc.output["seed"])
    report = {c.name: c.as_dict() for c in checks}
    report["all_passed"] = all(c.passed for c in checks)
    write_json(out / "validate.json", report)
    write_csv(out / "validate.csv", ["check", "passed", "value", "tolerance"],
              [(c.name, int(c.passed), float(c.value), float(c.tolerance)) for c in checks])
    return 0 if report["all_passed"] else 1


COMMANDS = {
    "steady": run_steady,
    "unsteady": run_unsteady,
    "characteristics": run_characteristics,
    "validate": run_validate,
}


def run_command(cmd: str, rc: RunConfig, out_dir=None, threads: int | None = None) -> int:
    """Run one subcommand; writes resolved_config.json plus the command's artifacts."""
    if cmd not in COMMANDS:
        raise ConfigError(f"unknown command {cmd!r}")
    out = Path(out_dir if out_dir is not None else rc.output["directory"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json", rc.as_dict())
    try:
        return COMMANDS[cmd](rc, out, threads)
    except NonConvergenceError as exc:
        write_json(out / "failure.json", {"status": "nonconverged", "message": str(exc), "stage": str(exc.stage),
                                          "history": list(exc.history)})
        return 2
    except KineticsError as exc:
        write_json(out / "failure.json", {"status": "error", "type": type(exc).__name__, "message": str(exc)})
        return 3


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="couette-kinetics", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", default=None)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = args.threads if args.threads is not None else _backend.default_threads()
    try:
        rc = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 64
    return run_command(args.command, rc, args.out, threads)
