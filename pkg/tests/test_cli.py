"""End-to-end command-line tests on a small synthetic world."""

import json

import numpy as np
import pytest

from lgcpthin import geo
from lgcpthin.cli import main, read_config
from lgcpthin.errors import ParseError
from lgcpthin.geo import Grid, RasterGrid, RoadNetwork


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """A 10 km square with one covariate raster and a small road network."""
    root = tmp_path_factory.mktemp("world")
    grid = Grid(0.0, 0.0, 1.0, 10, 10)
    centers = grid.cell_centers()
    vals = np.sin(0.7 * centers[:, 0]) + 0.4 * np.cos(0.5 * centers[:, 1])
    vals = (vals - vals.mean()) / vals.std()
    cov = RasterGrid(grid, vals.reshape(10, 10))
    cov_path = root / "x1.asc"
    geo.write_esri_ascii(cov, cov_path)
    roads = RoadNetwork((
        np.array([[0.0, 3.0], [10.0, 3.2]]),
        np.array([[6.0, 0.0], [6.2, 10.0]]),
    ))
    roads_path = root / "roads.geojson"
    geo.write_roads_geojson(roads, roads_path)
    return {"root": root, "cov": str(cov_path), "roads": str(roads_path)}


def simulate_args(world, outdir, seed=7):
    return ["simulate", "--covariate", f"x1={world['cov']}", "--beta0", "1.1",
            "--coef", "0.8", "--rho", "2.5", "--sigma", "0.8",
            "--seed", str(seed), "--out", str(outdir)]


@pytest.fixture(scope="module")
def simulated(world):
    out = world["root"] / "sim"
    assert main(simulate_args(world, out)) == 0
    return out


@pytest.fixture(scope="module")
def thinned(world, simulated):
    out = world["root"] / "thin"
    code = main(["thin", "--points", str(simulated / "points.csv"),
                 "--roads", world["roads"], "--zeta", "1.5",
                 "--seed", "3", "--out", str(out)])
    assert code == 0
    return out


def fit_args(world, points, outdir, model):
    return ["fit", "--points", str(points), "--covariate", f"x1={world['cov']}",
            "--roads", world["roads"], "--model", model, "--pc-rho0", "2.0",
            "--assess-draws", "150", "--seed", "1", "--out", str(outdir)]


@pytest.fixture(scope="module")
def fit_dirs(world, thinned):
    points = thinned / "thinned.csv"
    dirs = {}
    for model in ("naive", "vse"):
        out = world["root"] / f"fit_{model}"
        assert main(fit_args(world, points, out, model)) == 0
        dirs[model] = out
    return dirs


class TestSimulate:
    def test_byte_identical_under_fixed_seed(self, world):
        out1 = world["root"] / "sim_a"
        out2 = world["root"] / "sim_b"
        assert main(simulate_args(world, out1)) == 0
        assert main(simulate_args(world, out2)) == 0
        assert (out1 / "points.csv").read_bytes() == (out2 / "points.csv").read_bytes()

    def test_manifest_records_run(self, simulated):
        manifest = json.loads((simulated / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["seed"] == 7
        assert "points.csv" in manifest["artifacts"]
        assert "numpy" in manifest["versions"]
        assert manifest["wall_time_s"] >= 0

    def test_writes_surface_raster(self, simulated):
        surface = geo.read_esri_ascii(simulated / "log_intensity.asc")
        assert surface.values.shape == (10, 10)


class TestThin:
    def test_removes_points_and_reports_fraction(self, simulated, thinned):
        before = geo.read_points_csv(simulated / "points.csv")
        after = geo.read_points_csv(thinned / "thinned.csv")
        assert 0 < len(after) < len(before)
        manifest = json.loads((thinned / "manifest.json").read_text())
        assert manifest["n_after"] == len(after)
        assert manifest["removed_fraction"] == pytest.approx(
            1 - len(after) / len(before))

    def test_zero_zeta_keeps_everything(self, world, simulated):
        out = world["root"] / "thin0"
        assert main(["thin", "--points", str(simulated / "points.csv"),
                     "--roads", world["roads"], "--zeta", "0",
                     "--seed", "3", "--out", str(out)]) == 0
        before = geo.read_points_csv(simulated / "points.csv")
        after = geo.read_points_csv(out / "thinned.csv")
        np.testing.assert_array_equal(after.points, before.points)


class TestFitPredictReport:
    def test_fit_outputs(self, fit_dirs):
        doc = json.loads((fit_dirs["naive"] / "fit.json").read_text())
        assert doc["model"] == "naive"
        names = {row["parameter"] for row in doc["parameters"]}
        assert names == {"beta0", "x1", "rho", "sigma"}
        assert set(doc["scores"]) >= {"dic", "waic", "lpml"}
        doc_vse = json.loads((fit_dirs["vse"] / "fit.json").read_text())
        assert {row["parameter"] for row in doc_vse["parameters"]} >= {"zeta"}

    def test_predict_from_saved_fit(self, world, fit_dirs):
        out = world["root"] / "pred"
        code = main(["predict", "--fit", str(fit_dirs["naive"]),
                     "--draws", "300", "--seed", "2", "--out", str(out)])
        assert code == 0
        med = geo.read_esri_ascii(out / "log_intensity_median.asc")
        sd = geo.read_esri_ascii(out / "log_intensity_sd.asc")
        assert med.values.shape == (10, 10)
        assert np.all(sd.values >= 0)

    def test_report_collects_criteria(self, world, fit_dirs):
        out = world["root"] / "report"
        code = main(["report", "--fits", str(fit_dirs["naive"]),
                     str(fit_dirs["vse"]), "--out", str(out)])
        assert code == 0
        lines = (out / "comparison.csv").read_text().splitlines()
        assert lines[0] == "model,dic,waic,lpml"
        assert len(lines) == 3
        models = {line.split(",")[0] for line in lines[1:]}
        assert models == {"naive", "vse"}
        for line in lines[1:]:
            assert all(np.isfinite(float(v)) for v in line.split(",")[1:])


class TestExplore:
    def test_summary_and_ecdf(self, world, simulated):
        out = world["root"] / "explore"
        code = main(["explore", "--points", str(simulated / "points.csv"),
                     "--roads", world["roads"], "--grid-res", "40",
                     "--covariate", f"x1={world['cov']}", "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "explore.json").read_text())
        assert 0 <= doc["ks_p_value"] <= 1
        assert doc["ks_statistic"] >= 0
        assert "0.5" in doc["fraction_within"]
        assert "x1" in doc["covariate_distance_correlation"]
        lines = (out / "ecdf.csv").read_text().splitlines()
        assert lines[0] == "distance,ecdf_points,ecdf_reference"
        assert len(lines) > 10


class TestExploreOnRoadPoints:
    def test_points_on_roads_saturate_thresholds(self, world, tmp_path):
        # every observation exactly on the network: all distance fractions hit
        # 1 and the distance distributions are nearly disjoint
        xs = np.linspace(0.5, 9.5, 60)
        pts = tmp_path / "onroad.csv"
        with open(pts, "w") as fh:
            fh.write("x,y\n")
            for x in xs:
                fh.write(f"{x},{3.0 + 0.02 * x}\n")
        out = tmp_path / "explore_onroad"
        code = main(["explore", "--points", str(pts), "--roads", world["roads"],
                     "--grid-res", "50", "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "explore.json").read_text())
        assert all(v == 1.0 for v in doc["fraction_within"].values())
        assert doc["ks_statistic"] > 0.9


class TestSimstudyCommand:
    def test_self_test_mode_zero_bias(self, world):
        out = world["root"] / "study"
        code = main(["simstudy", "--replicates", "1", "--zeta-levels", "0", "16",
                     "--grid-n", "10", "--domain-size", "80", "--self-test",
                     "--seed", "4", "--out", str(out)])
        assert code == 0
        lines = (out / "results.csv").read_text().splitlines()
        header = lines[0].split(",")
        bias_col = header.index("bias")
        assert all(float(line.split(",")[bias_col]) == 0.0 for line in lines[1:])
        manifest = json.loads((out / "manifest.json").read_text())
        assert "zeta_scale" in manifest
        assert (out / "summary.md").exists()
        assert (out / "coverage.csv").exists()


class TestConfigFile:
    def test_values_fill_defaults_and_flags_win(self, world, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\nseed = 11\nzeta = 2.5\n")
        parsed = read_config(cfg)
        assert parsed == {"seed": 11, "zeta": 2.5}
        out = tmp_path / "thin_cfg"
        sim = world["root"] / "sim"
        code = main(["thin", "--points", str(sim / "points.csv"),
                     "--roads", world["roads"], "--zeta", "2.5",
                     "--config", str(cfg), "--out", str(out)])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 11  # from config
        explicit = tmp_path / "thin_flag"
        code = main(["thin", "--points", str(sim / "points.csv"),
                     "--roads", world["roads"], "--zeta", "2.5",
                     "--seed", "99", "--config", str(cfg), "--out", str(explicit)])
        assert code == 0
        manifest = json.loads((explicit / "manifest.json").read_text())
        assert manifest["seed"] == 99  # explicit flag wins

    def test_parse_errors_carry_line_numbers(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("seed = 1\noops\n")
        with pytest.raises(ParseError, match="line 2"):
            read_config(bad)

    def test_scenario_definitions_from_config(self, tmp_path):
        # thinning levels and replicate counts can come from a config file
        cfg = tmp_path / "study.cfg"
        cfg.write_text("zeta_levels = 0, 16\nreplicates = 2\nself_test = true\n")
        out = tmp_path / "study_out"
        code = main(["simstudy", "--grid-n", "10", "--domain-size", "80",
                     "--config", str(cfg), "--seed", "3", "--out", str(out)])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["options"]["replicates"] == 2
        assert manifest["options"]["zeta_levels"] == [0, 16]
        assert len(manifest["scenario_zetas"]) == 2


class TestErrorHandling:
    def test_malformed_points_file(self, world, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("x,y\n1,zork\n")
        code = main(["thin", "--points", str(bad), "--roads", world["roads"],
                     "--zeta", "1", "--out", str(tmp_path / "o")])
        assert code == 1
        assert "line 2" in capsys.readouterr().err

    def test_missing_file(self, world, tmp_path, capsys):
        code = main(["explore", "--points", str(tmp_path / "nope.csv"),
                     "--roads", world["roads"], "--out", str(tmp_path / "o")])
        assert code == 1
        assert "error" in capsys.readouterr().err
