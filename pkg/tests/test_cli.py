"""End-to-end command line runs against temporary output trees."""
import csv
import json
import math

import numpy as np
import pytest

from rimflow.cli import OUTPUT_DIR_ENV, ConfigError, main, parse_config
from rimflow.grid import Grid, write_field_csv

EVOLVE_TEMPLATE = """
[run]
mode = evolve
output_dir = {out}

[grid]
n = 64

[params]
a0 = 1.0
a1 = 16.0
a2 = 0.0
a3 = 0.0

[initial]
kind = trig
mean = 0.3
cos = 0.02, 0.02

[evolve]
t_end = 0.5
dt_init = 1e-4
dt_max = 0.001
epsilon = 0.0
snapshots = 0.25
"""


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


def write_cfg(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestParseConfig:
    def test_minimal_evolve(self, tmp_path):
        cfg = parse_config(EVOLVE_TEMPLATE.format(out=tmp_path / "out"))
        assert cfg.mode == "evolve"
        assert cfg.grid.n == 64
        assert cfg.params.a1 == 16.0
        assert cfg.evolve.t_end == 0.5
        assert cfg.evolve.snapshot_times == (0.25,)
        assert cfg.evolve.knobs.epsilon == 0.0

    def test_grid_defaults_when_section_missing(self):
        text = ("[run]\nmode = evolve\n[params]\na0=1\na1=1\na2=0\na3=0\n"
                "[initial]\nkind = constant\nvalue = 0.3\n[evolve]\nt_end = 0.1\n")
        cfg = parse_config(text)
        assert cfg.grid.n == 256
        assert cfg.grid.length == pytest.approx(2.0 * math.pi)

    def test_physical_parameters_map(self):
        text = ("[run]\nmode = evolve\n[params]\nchi = 3.0\nmu = 3.0\n"
                "[initial]\nkind = constant\nvalue = 0.3\n[evolve]\nt_end = 0.1\n")
        cfg = parse_config(text)
        assert (cfg.params.a0, cfg.params.a1) == (1.0, 1.0)
        assert (cfg.params.a2, cfg.params.a3) == (-1.0, 1.0)

    @pytest.mark.parametrize("mutation,needle", [
        ("[bogus]\nx = 1\n", "unknown section"),
        ("[sweep]\nteeth = 3\n", "unknown key"),
        ("[steady]\ntargets = 0.1\nmu = 1\n", "does not accept"),
    ])
    def test_rejects_unknown_structure(self, tmp_path, mutation, needle):
        text = EVOLVE_TEMPLATE.format(out=tmp_path) + mutation
        with pytest.raises(ConfigError, match=needle):
            parse_config(text)

    def test_requires_run_section(self):
        with pytest.raises(ConfigError, match="missing required section"):
            parse_config("[grid]\nn = 64\n")

    def test_requires_known_mode(self):
        with pytest.raises(ConfigError, match="mode must be one of"):
            parse_config("[run]\nmode = dance\n")

    def test_requires_mode_sections(self):
        with pytest.raises(ConfigError, match="requires section"):
            parse_config("[run]\nmode = evolve\n[params]\na0=1\na1=1\na2=0\na3=0\n")

    def test_rejects_mixed_parameterizations(self):
        text = ("[run]\nmode = evolve\n[params]\na0 = 1\nchi = 3\n"
                "[initial]\nkind = constant\nvalue = 0.3\n[evolve]\nt_end = 0.1\n")
        with pytest.raises(ConfigError, match="not both"):
            parse_config(text)

    def test_rejects_bad_number(self, tmp_path):
        text = EVOLVE_TEMPLATE.format(out=tmp_path).replace("a1 = 16.0", "a1 = wide")
        with pytest.raises(ConfigError, match="not a number"):
            parse_config(text)

    def test_rejects_unknown_initial_kind(self, tmp_path):
        text = EVOLVE_TEMPLATE.format(out=tmp_path).replace("kind = trig",
                                                            "kind = wavelet")
        with pytest.raises(ConfigError, match="kind must be"):
            parse_config(text)

    def test_steady_needs_targets(self):
        text = "[run]\nmode = steady\n[steady]\nmu = 1.0\n"
        with pytest.raises(ConfigError, match="targets"):
            parse_config(text)

    def test_sweep_vary_must_name_known_key(self, tmp_path):
        text = EVOLVE_TEMPLATE.format(out=tmp_path).replace(
            "mode = evolve", "mode = sweep")
        text += "[sweep]\nvary = params.zeta\nvalues = 1, 2\n"
        with pytest.raises(ConfigError, match="unknown target"):
            parse_config(text)


class TestEvolveCommand:
    def test_end_to_end_outputs(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_cfg(tmp_path, EVOLVE_TEMPLATE.format(out=out))
        assert main(["evolve", cfg]) == 0

        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["mode"] == "evolve"
        assert manifest["termination"] == "t_end"
        assert [s["t"] for s in manifest["snapshots"]] == pytest.approx(
            [0.0, 0.25, 0.5], abs=1e-12)
        for entry in manifest["snapshots"]:
            assert (out / entry["file"]).exists()

        with open(out / "diagnostics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        masses = [float(r["mass"]) for r in rows]
        assert masses[1] == pytest.approx(masses[0], rel=1e-12)

        reports = json.loads((out / "bound_reports.json").read_text())
        names = [r["name"] for r in reports]
        assert "dissipation" in names
        assert "gradient_growth" in names
        assert "mass_conservation" in names
        assert any(n.startswith("interpolation@t=") for n in names)
        assert all(r["satisfied"] for r in reports)

    def test_byte_identical_reruns(self, tmp_path):
        cfg = write_cfg(tmp_path, EVOLVE_TEMPLATE.format(out=tmp_path / "a"))
        assert main(["evolve", cfg, "--output-dir", str(tmp_path / "b")]) == 0
        assert main(["evolve", cfg, "--output-dir", str(tmp_path / "c")]) == 0
        for name in ("diagnostics.csv", "bound_reports.json", "manifest.json",
                     "snapshots/snapshot_0002.csv"):
            assert (tmp_path / "b" / name).read_bytes() == \
                (tmp_path / "c" / name).read_bytes()

    def test_snapshots_flag_overrides_config(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_cfg(tmp_path, EVOLVE_TEMPLATE.format(out=out))
        assert main(["evolve", cfg, "--snapshots", "0.1,0.2"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert [s["t"] for s in manifest["snapshots"]] == pytest.approx(
            [0.0, 0.1, 0.2, 0.5], abs=1e-12)

    def test_failure_writes_partial_outputs(self, tmp_path, capsys):
        out = tmp_path / "out"
        text = """
[run]
mode = evolve
output_dir = {out}

[grid]
n = 64

[params]
a0 = 1.0
a1 = 400.0
a2 = 0.0
a3 = 0.0

[initial]
kind = trig
mean = 0.3
cos = 0.05

[evolve]
t_end = 10.0
dt_init = 1.0
dt_min = 1.0
dt_max = 1.0
newton_max_iter = 2
epsilon = 0.0
""".format(out=out)
        cfg = write_cfg(tmp_path, text)
        assert main(["evolve", cfg]) == 1
        err = capsys.readouterr().err
        assert "StepFailure" in err
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["termination"] == "failed"
        assert (out / "diagnostics.csv").exists()

    def test_file_initial_data(self, tmp_path):
        g = Grid(n=64)
        field_path = tmp_path / "h0.csv"
        write_field_csv(g.field(0.3 + 0.02 * np.cos(g.x)), field_path,
                        value_name="h")
        out = tmp_path / "out"
        text = EVOLVE_TEMPLATE.format(out=out).replace(
            "kind = trig\nmean = 0.3\ncos = 0.02, 0.02",
            f"kind = file\npath = {field_path}")
        cfg = write_cfg(tmp_path, text)
        assert main(["evolve", cfg]) == 0

    def test_file_grid_mismatch_fails(self, tmp_path, capsys):
        g = Grid(n=32)
        field_path = tmp_path / "h0.csv"
        write_field_csv(g.constant(0.3), field_path, value_name="h")
        out = tmp_path / "out"
        text = EVOLVE_TEMPLATE.format(out=out).replace(
            "kind = trig\nmean = 0.3\ncos = 0.02, 0.02",
            f"kind = file\npath = {field_path}")
        cfg = write_cfg(tmp_path, text)
        assert main(["evolve", cfg]) == 1
        assert "does not match" in capsys.readouterr().err

    def test_negative_initial_data_fails(self, tmp_path, capsys):
        out = tmp_path / "out"
        text = EVOLVE_TEMPLATE.format(out=out).replace(
            "mean = 0.3", "mean = 0.001")
        cfg = write_cfg(tmp_path, text)
        assert main(["evolve", cfg]) == 1
        assert "nonnegative" in capsys.readouterr().err


class TestOutputDirPrecedence:
    def test_flag_beats_env_beats_config(self, tmp_path, monkeypatch):
        cfg = write_cfg(tmp_path, EVOLVE_TEMPLATE.format(out=tmp_path / "cfgdir"))
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "envdir"))
        assert main(["evolve", cfg, "--output-dir", str(tmp_path / "flagdir")]) == 0
        assert (tmp_path / "flagdir" / "manifest.json").exists()
        assert not (tmp_path / "envdir").exists()
        assert not (tmp_path / "cfgdir").exists()

        assert main(["evolve", cfg]) == 0
        assert (tmp_path / "envdir" / "manifest.json").exists()
        assert not (tmp_path / "cfgdir").exists()

    def test_config_dir_used_by_default(self, tmp_path):
        cfg = write_cfg(tmp_path, EVOLVE_TEMPLATE.format(out=tmp_path / "cfgdir"))
        assert main(["evolve", cfg]) == 0
        assert (tmp_path / "cfgdir" / "manifest.json").exists()

    def test_seed_override_lands_in_manifest(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_cfg(tmp_path, EVOLVE_TEMPLATE.format(out=out))
        assert main(["evolve", cfg, "--seed", "7"]) == 0
        assert json.loads((out / "manifest.json").read_text())["seed"] == 7


class TestModeAndParseErrors:
    def test_mode_mismatch_is_config_error(self, tmp_path):
        cfg = write_cfg(tmp_path, EVOLVE_TEMPLATE.format(out=tmp_path / "out"))
        assert main(["steady", cfg]) == 2

    def test_bad_syntax_is_config_error(self, tmp_path):
        cfg = write_cfg(tmp_path, "not an ini file [\n")
        assert main(["evolve", cfg]) == 2

    def test_missing_file_is_runtime_error(self, tmp_path):
        assert main(["evolve", str(tmp_path / "nope.ini")]) == 1

    def test_snapshots_flag_needs_evolve_section(self, tmp_path):
        text = ("[run]\nmode = steady\noutput_dir = {}\n"
                "[steady]\nmu = 1.0\ntargets = 0.2\n").format(tmp_path / "out")
        cfg = write_cfg(tmp_path, text)
        assert main(["steady", cfg, "--snapshots", "1.0"]) == 2

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "rimflow" in capsys.readouterr().out


class TestSteadyCommand:
    def test_surface_tension_free_branch(self, tmp_path):
        out = tmp_path / "out"
        text = ("[run]\nmode = steady\noutput_dir = {}\n"
                "[steady]\nmu = 1.0\ntargets = 0.2, 0.3\n").format(out)
        cfg = write_cfg(tmp_path, text)
        assert main(["steady", cfg]) == 0
        with open(out / "branch.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["q"]) for r in rows] == pytest.approx([0.2, 0.3])
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["profiles"]) == 2
        for entry in manifest["profiles"]:
            assert (out / entry["file"]).exists()
            assert entry["beta"] == pytest.approx(entry["q"] ** 2 / 3.0, rel=1e-12)

    def test_capillary_branch(self, tmp_path):
        out = tmp_path / "out"
        text = ("[run]\nmode = steady\noutput_dir = {}\n[grid]\nn = 128\n"
                "[steady]\nmu = 3.0\nchi = 3.0\ntargets = 0.1, 0.2\n").format(out)
        cfg = write_cfg(tmp_path, text)
        assert main(["steady", cfg]) == 0
        with open(out / "branch.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert all(float(r["residual_sup"]) <= 1e-10 for r in rows)

    def test_capillary_fixed_mass(self, tmp_path):
        out = tmp_path / "out"
        text = ("[run]\nmode = steady\noutput_dir = {}\n[grid]\nn = 128\n"
                "[steady]\nmode = fixed_mass\nmu = 3.0\nchi = 3.0\n"
                "targets = 0.8\n").format(out)
        cfg = write_cfg(tmp_path, text)
        assert main(["steady", cfg]) == 0
        with open(out / "branch.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert float(rows[0]["mass"]) == pytest.approx(0.8, rel=1e-9)

    def test_flux_above_fold_fails(self, tmp_path, capsys):
        out = tmp_path / "out"
        text = ("[run]\nmode = steady\noutput_dir = {}\n"
                "[steady]\nmu = 1.0\ntargets = 0.7\n").format(out)
        cfg = write_cfg(tmp_path, text)
        assert main(["steady", cfg]) == 1
        assert "BranchLost" in capsys.readouterr().err

    def test_fixed_mass_without_capillarity_fails(self, tmp_path, capsys):
        out = tmp_path / "out"
        text = ("[run]\nmode = steady\noutput_dir = {}\n"
                "[steady]\nmode = fixed_mass\nmu = 1.0\ntargets = 1.5\n").format(out)
        cfg = write_cfg(tmp_path, text)
        assert main(["steady", cfg]) == 1
        assert "fixed_flux" in capsys.readouterr().err


class TestSweepCommand:
    def test_serial_sweep_over_drift(self, tmp_path):
        out = tmp_path / "out"
        text = EVOLVE_TEMPLATE.format(out=out).replace("mode = evolve",
                                                       "mode = sweep")
        text = text.replace("t_end = 0.5", "t_end = 0.05")
        text += "\n[sweep]\nvary = params.a3\nvalues = 0, 1\nworkers = 1\n"
        cfg = write_cfg(tmp_path, text)
        assert main(["sweep", cfg]) == 0
        index = json.loads((out / "sweep_index.json").read_text())
        assert index["vary"] == "params.a3"
        assert [r["value"] for r in index["runs"]] == [0.0, 1.0]
        for record in index["runs"]:
            assert record["exit_code"] == 0
            assert record["termination"] == "t_end"
            sub = out / f"a3={record['value']:g}"
            assert (sub / "manifest.json").exists()
            assert (sub / "diagnostics.csv").exists()


class TestCheckCommand:
    def test_battery_passes(self, tmp_path, capsys):
        out = tmp_path / "out"
        text = f"[run]\nmode = check\noutput_dir = {out}\n"
        cfg = write_cfg(tmp_path, text)
        assert main(["check", cfg]) == 0
        printed = capsys.readouterr().out
        assert "PASS" in printed
        assert "FAIL" not in printed
        reports = json.loads((out / "check_reports.json").read_text())
        names = [r["name"] for r in reports]
        assert "evolve_mass_conservation" in names
        assert "steady_flux_bound" in names
        assert len(reports) >= 10

    def test_same_seed_reproduces_battery(self, tmp_path):
        cfg = write_cfg(tmp_path, "[run]\nmode = check\n")
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["check", cfg, "--output-dir", str(a), "--seed", "3"]) == 0
        assert main(["check", cfg, "--output-dir", str(b), "--seed", "3"]) == 0
        assert (a / "check_reports.json").read_bytes() == \
            (b / "check_reports.json").read_bytes()
