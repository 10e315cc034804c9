import csv
import json

import numpy as np
import pytest

from couette_kinetics.cli_io import (
    DEFAULTS,
    main,
    parse_config,
    read_field,
    run_command,
    write_csv,
    write_field,
    write_json,
)
from couette_kinetics.errors import ConfigError

SMALL = {
    "r1": 0.5,
    "kinetic": {"n_v": 8, "n_eta": 4, "collision_range": 3.0},
    "schedules": {"sigma_steps": 4, "epsilon_seq": [0.1, 0.01]},
}


def small(**over):
    cfg = json.loads(json.dumps(SMALL))
    for k, v in over.items():
        cfg[k] = v
    return cfg


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestParse:
    def test_minimal_defaults(self):
        rc = parse_config({"r1": 0.5, "alpha": 0.02})
        k = rc.kinetic
        assert (k["gamma"], k["ell"], k["M_cut"], k["v_max"], k["n_v"], k["n_eta"]) == (1.0, 8.0, 4.0, 6.0, 24, 32)
        assert rc.geometry["alpha"] == 0.02
        assert rc.schedule().epsilon_seq == (1e-1, 1e-2, 1e-3, 1e-4)
        assert len(rc.schedule().sigma_steps) == 11

    def test_sectioned_form(self):
        rc = parse_config({"geometry": {"r1": 0.6}, "unsteady": {"dt": 0.02}})
        assert rc.geometry["r1"] == 0.6 and rc.stepper().dt == 0.02

    def test_absorption_margin(self):
        with pytest.raises(ConfigError, match="absorption margin"):
            parse_config({"r1": 0.5, "alpha": 0.5, "ell": 8, "alpha_cap": 1.0})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="foo"):
            parse_config({"r1": 0.5, "foo": 1})
        with pytest.raises(ConfigError, match="bar"):
            parse_config({"r1": 0.5, "kinetic": {"bar": 2}})

    def test_missing_radius(self):
        with pytest.raises(ConfigError, match="r1"):
            parse_config({"alpha": 0.01})

    def test_bad_types(self):
        with pytest.raises(ConfigError):
            parse_config({"r1": 0.5, "n_v": "many"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{r1: ")
        with pytest.raises(ConfigError):
            parse_config(bad)

    def test_defaults_table_complete(self):
        rc = parse_config({"r1": 0.5})
        assert set(rc.as_dict()) == set(DEFAULTS)


class TestWriters:
    def test_json_no_nan(self, tmp_path):
        write_json(tmp_path / "a.json", {"x": float("nan"), "y": np.float64(1.5), "z": [np.inf]})
        d = json.loads((tmp_path / "a.json").read_text())
        assert d == {"x": "nan", "y": 1.5, "z": ["inf"]}

    def test_csv_round_trip(self, tmp_path):
        write_csv(tmp_path / "a.csv", ["t", "v"], [(0.1, 1 / 3), (0.2, 2.0)])
        rows = read_rows(tmp_path / "a.csv")
        assert float(rows[0]["v"]) == 1 / 3

    def test_field_round_trip(self, tmp_path):
        a = np.random.default_rng(0).random((3, 4, 5))
        write_field(tmp_path / "f.bin", a)
        raw = (tmp_path / "f.bin").read_bytes()
        assert raw[:8] == b"CKFIELD1" and len(raw) == 8 + 4 + 3 * 8 + a.size * 8
        assert np.array_equal(read_field(tmp_path / "f.bin"), a)


class TestCommands:
    def test_steady_equilibrium(self, tmp_path):
        rc = parse_config(small(alpha=0.0))
        assert run_command("steady", rc, tmp_path) == 0
        s = json.loads((tmp_path / "summary.json").read_text())
        assert s["weighted_sup_g1_g2"] == 0.0
        rows = read_rows(tmp_path / "profile.csv")
        assert max(abs(float(r["b2"])) for r in rows) <= 1e-10
        assert (tmp_path / "resolved_config.json").exists()

    def test_steady_sheared(self, tmp_path):
        rc = parse_config(small(alpha=0.02, output={"dump_fields": True}))
        assert run_command("steady", rc, tmp_path) == 0
        s = json.loads((tmp_path / "summary.json").read_text())
        assert s["picard_iterations"] >= 2
        assert abs(s["mass_deviation"]) <= 1e-8
        assert read_field(tmp_path / "G_st.bin").shape[-1] == 5

    def test_characteristics_v1_row(self, tmp_path):
        rc = parse_config({"r1": 0.5, "characteristics": {"points": [[0.0, -0.5, 0.3, 0.1]]}})
        assert run_command("characteristics", rc, tmp_path) == 0
        row = read_rows(tmp_path / "exits.csv")[0]
        ret = [float(row[k]) for k in ("return_v_eta", "return_v_phi", "return_v_z")]
        assert ret == pytest.approx([0.5, 0.3, 0.1], abs=1e-10)
        assert len(read_rows(tmp_path / "trajectory_0.csv")) >= 65

    def test_cycle_dump(self, tmp_path):
        rc = parse_config({"r1": 0.5, "alpha": 0.01,
                           "characteristics": {"points": [[0.0, 1.0, 0.2, 0.0]], "reflected": [[-0.5, 0.2, 0.1]]}})
        assert run_command("characteristics", rc, tmp_path) == 0
        assert len(read_rows(tmp_path / "cycle_0.csv")) == 2

    def test_error_report(self, tmp_path):
        rc = parse_config({"r1": 0.5, "characteristics": {"points": [[0.0, 0.0, 1.0, 0.0]]}})
        assert run_command("characteristics", rc, tmp_path) == 3
        assert json.loads((tmp_path / "failure.json").read_text())["type"] == "GrazingError"

    def test_nonconvergence_report(self, tmp_path):
        rc = parse_config(small(alpha=0.02, schedules={"sigma_steps": 2, "epsilon_seq": [0.1], "max_inner": 2}))
        assert run_command("steady", rc, tmp_path) == 2
        assert json.loads((tmp_path / "failure.json").read_text())["status"] == "nonconverged"

    def test_unsteady(self, tmp_path):
        rc = parse_config(small(alpha=0.0, unsteady={"dt": 0.1, "t_end": 4.0}))
        assert run_command("unsteady", rc, tmp_path) == 0
        d = json.loads((tmp_path / "decay.json").read_text())
        assert d["lambda0_hat"] > 0.0
        rows = read_rows(tmp_path / "history.csv")
        assert list(rows[0]) == ["t", "sup_norm", "L2_norm", "mass", "min_G"]
        assert min(float(r["min_G"]) for r in rows) >= 0.0


class TestMain:
    def test_config_error_exit(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"r1": 0.5, "foo": 1}))
        assert main(["steady", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 64
        assert "foo" in capsys.readouterr().err

    def test_deterministic_characteristics(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"r1": 0.5, "alpha": 0.03}))
        for name in ("a", "b"):
            assert main(["characteristics", "--config", str(cfg), "--out", str(tmp_path / name), "--threads", "1"]) == 0
        for f in ("exits.csv", "trajectory_0.csv", "resolved_config.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
