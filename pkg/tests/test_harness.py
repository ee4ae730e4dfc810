import copy
import hashlib
import json
import random
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from popdyn.exceptions import ConfigError
from popdyn.harness import parse_config, run_mode
from popdyn.harness.cli import main
from popdyn.harness.config import apply_defaults, load_config, load_schema, sweep_points
from popdyn.harness.experiments import aggregate, sup_deviation
from popdyn.harness.svg import line_chart

from .conftest import Q_BAR_REF, X_STAR_REF

SMALL_SWEEP = """
mode = "sweep"
label = "tiny"
seeds = [0, 1, 2]
[finite]
N = 5
d = 1
T = 20.0
[sweep]
eta = [0.04, 1.0]
"""


def write(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_dir(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


class TestConfig:
    def test_every_property_has_default_or_is_optional(self):
        schema = load_schema()

        def walk(node):
            for key, sub in node.get("properties", {}).items():
                if key == "mode":
                    continue
                assert "default" in sub or "description" in sub, key
                if sub.get("type") == "object":
                    walk(sub)

        walk(schema)

    def test_defaults(self):
        cfg = parse_config({"mode": "finite"})
        assert cfg["finite"]["N"] == 10 and cfg["protocol"]["lam"] == 0.1
        assert cfg["game"]["w"] == [0.5, 1.0, 2.0] and cfg["seeds"] == [0]
        assert cfg["record_wall_time"] is False
        assert apply_defaults({}, {"properties": {"a": {"default": 1}}}) == {"a": 1}

    @pytest.mark.parametrize(
        "data",
        [
            {"mode": "finite", "bogus": 1},
            {"mode": "finite", "finite": {"Nn": 3}},
            {"mode": "nope"},
            {},
            {"mode": "finite", "protocol": {"eta": -1.0}},
            {"mode": "finite", "finite": {"h": 0.5}},
            {"mode": "finite", "game": {"w": [1.0, 2.0]}},
            {"mode": "meanfield", "meanfield": {"x0": [0.5, 0.6, 0.1]}},
            {"mode": "meanfield", "meanfield": {"d": 1.0, "h": 0.3}},
            {"mode": "verify-bound", "protocol": {"name": "smith"}},
            {"mode": "sweep", "sweep": {"eta": list(np.linspace(0.1, 1, 101)), "lam": list(np.linspace(0.1, 1, 100))}},
        ],
    )
    def test_rejected(self, data):
        with pytest.raises(ConfigError):
            parse_config(data)

    def test_bad_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "missing.toml"))
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, "mode = "))

    def test_sweep_points(self):
        cfg = parse_config({"mode": "sweep", "sweep": {"eta": [1.0, 2.0], "N": [5, 6], "smith_calibration": True,
                                                       "smith_lam_grid": [0.5, 1.0]}})
        pts = sweep_points(cfg)
        assert len(pts) == 4 + 4
        assert pts[0] == {"protocol": "kldrl", "eta": 1.0, "lam": 0.1, "N": 5, "d": 10}
        assert [p["protocol"] for p in pts[4:]] == ["smith"] * 4

    def test_shipped_configs_parse(self):
        from pathlib import Path

        for path in sorted((Path(__file__).parent.parent / "configs").glob("*.toml")):
            load_config(str(path))


class TestCLI:
    def test_equilibrium(self, tmp_path):
        out = tmp_path / "out"
        assert main(["run", write(tmp_path, 'mode = "equilibrium"\nlabel = "eq"'), "--out", str(out)]) == 0
        data = json.loads((out / "eq_equilibrium.json").read_text())
        assert data["q_bar"] == pytest.approx(Q_BAR_REF, rel=1e-12)
        np.testing.assert_allclose(data["x_star"], X_STAR_REF, atol=1e-12)

    def test_config_error_writes_nothing(self, tmp_path, capsys):
        out = tmp_path / "out"
        cfg = write(tmp_path, 'mode = "finite"\n[protocol]\neta = -1.0')
        assert main(["run", cfg, "--out", str(out)]) == 2
        assert not out.exists()
        assert "configuration error" in capsys.readouterr().err

    def test_mode_command_mismatch(self, tmp_path):
        out = tmp_path / "out"
        assert main(["sweep", write(tmp_path, 'mode = "equilibrium"'), "--out", str(out)]) == 2
        assert main(["run", write(tmp_path, 'mode = "equilibrium"'), "--out", str(out), "--jobs", "0"]) == 2
        assert not out.exists()

    def test_numerical_failure(self, tmp_path):
        out = tmp_path / "out"
        cfg = write(tmp_path, 'mode = "finite"\nlabel = "f"\n[finite]\nN = 5\nT = 5.0\ngraph_prob = 0.01')
        assert main(["run", cfg, "--out", str(out)]) == 3
        failures = json.loads((out / "failures.json").read_text())["failures"]
        assert failures[0]["seed"] == 0 and "GraphSamplingExhausted" in failures[0]["error"]

    def test_finite_artifacts_and_svg(self, tmp_path):
        out = tmp_path / "out"
        cfg = write(tmp_path, 'mode = "finite"\nlabel = "f"\nsvg = true\nseeds = [4]\n[finite]\nN = 5\nd = 1\nT = 10.0')
        assert main(["run", cfg, "--out", str(out), "--seed-override", "9"]) == 0
        names = {p.name for p in out.iterdir()}
        assert {"f_s9.csv", "f_s9.svg", "f_summary.jsonl", "manifest.json"} <= names
        ET.fromstring((out / "f_s9.svg").read_text())
        rec = json.loads((out / "f_summary.jsonl").read_text().splitlines()[0])
        assert rec["seed"] == 9 and rec["wall_time"] is None

    def test_manifest_hashes(self, tmp_path):
        out = tmp_path / "out"
        assert main(["sweep", write(tmp_path, SMALL_SWEEP), "--out", str(out), "--jobs", "1"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["label"] == "tiny" and "output_dir" not in manifest["config"]
        for entry in manifest["artifacts"]:
            assert hashlib.sha256((out / entry["name"]).read_bytes()).hexdigest() == entry["sha256"]
            assert entry["schema_version"] == 1

    def test_reruns_byte_identical_and_parallel(self, tmp_path):
        cfg = write(tmp_path, SMALL_SWEEP)
        assert main(["sweep", cfg, "--out", str(tmp_path / "a"), "--jobs", "1"]) == 0
        assert main(["sweep", cfg, "--out", str(tmp_path / "b"), "--jobs", "1"]) == 0
        assert main(["sweep", cfg, "--out", str(tmp_path / "c"), "--jobs", "2"]) == 0
        a = read_dir(tmp_path / "a")
        assert a == read_dir(tmp_path / "b")
        assert a == read_dir(tmp_path / "c")


class TestExperiments:
    def test_aggregation_ignores_record_order(self):
        cfg = parse_config({"mode": "sweep", "seeds": [0, 1, 2, 3], "finite": {"N": 5, "d": 1, "T": 10.0},
                            "sweep": {"lam": [0.1, 0.5]}})
        result = run_mode(cfg, jobs=1)
        points = sweep_points(cfg)
        shuffled = copy.copy(result.records)
        random.Random(0).shuffle(shuffled)
        assert aggregate(shuffled, points, 4) == result.rows
        tails = sorted(r.tail_mean for r in result.records if r.point == 0)
        assert result.rows[0]["tail_mean_median"] == pytest.approx(np.median(tails))
        assert result.rows[0]["n_ok"] == 4 and result.rows[0]["n_failed"] == 0

    def test_smith_calibration_meta(self):
        cfg = parse_config({"mode": "sweep", "seeds": [0, 1], "finite": {"N": 5, "d": 1, "T": 10.0},
                            "sweep": {"smith_calibration": True, "smith_lam_grid": [0.5, 2.0]}})
        result = run_mode(cfg, jobs=1)
        meta = json.loads(result.artifacts["run_sweep_meta.json"])
        smith_rows = [r for r in result.rows if r["protocol"] == "smith"]
        best = min(smith_rows, key=lambda r: r["tail_mean_median"])
        assert meta["smith_calibration"]["smith_lam"] == best["lam"]
        assert meta["smith_calibration"]["groups"][0]["best_lam"] == best["lam"]

    def test_meanfield_mode(self):
        result = run_mode(parse_config({"mode": "meanfield", "label": "m", "meanfield": {"T": 10.0}}))
        lines = result.artifacts["m_meanfield.csv"].splitlines()
        assert lines[0].startswith("t,")
        assert len(lines) == 1 + 1001

    def test_stationary_mode(self):
        cfg = parse_config({"mode": "stationary", "label": "s", "stationary": {"N_values": [3, 4], "write_mu": True}})
        result = run_mode(cfg)
        reports = [json.loads(l) for l in result.artifacts["s_stationary.jsonl"].splitlines()]
        assert [r["N"] for r in reports] == [3, 4]
        for r in reports:
            assert r["sum_var"] == pytest.approx(r["closed_form_sum_var"], abs=1e-12)
        assert "s_mu_N4.csv" in result.artifacts

    def test_verify_bound_meanfield(self):
        cfg = parse_config({"mode": "verify-bound", "label": "b", "meanfield": {"T": 20.0}})
        report = json.loads(run_mode(cfg).artifacts["b_bound.jsonl"].splitlines()[0])
        assert report["holds"] is True

    def test_sup_deviation_horizon(self):
        from types import SimpleNamespace

        from popdyn.core import RngSpec
        from popdyn.finite_sim import SimConfig, interpolate, run_finite
        from popdyn.protocols import KLDRL

        traj = run_finite(SimConfig(N=5, protocol=KLDRL(0.5, X_STAR_REF), lam=0.5, d=0, T=10.0, rng=RngSpec(seed=1)))
        last = traj.knots()[0][-1]
        t = np.linspace(0.0, 20.0, 201)
        x = interpolate(traj, np.minimum(t, last))
        x[t > 5.0] += 0.3  # shift only the second half
        mf = SimpleNamespace(t=t, x=x)
        assert sup_deviation(traj, mf, 4.9) == pytest.approx(0.0, abs=1e-15)
        assert sup_deviation(traj, mf, 8.0) == pytest.approx(0.3)


def test_svg_is_well_formed():
    svg = line_chart([("a<b", [0, 1, 2], [1, 3, 2]), ("flat", [0, 1], [0, 0])], title="q & x")
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert len([e for e in root if e.tag.endswith("polyline")]) == 2
    assert line_chart([("a", [0, 1], [1, 2])]) == line_chart([("a", [0, 1], [1, 2])])
