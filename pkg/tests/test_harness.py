import csv
import json

import pytest

from lvharvest.cli import main
from lvharvest.harness import (ExperimentConfig, StageError, builtin_config, export_plot_data,
                               load_config, run_epsilon_ladder, run_extinction_study, run_pipeline)
from lvharvest.model import ModelParams
from lvharvest.policy import Grid, PolicyTable


def small(cfg, **over):
    d = dict(grid=Grid(0.01, 3.0, 0.01, 3.0, 20, 20),
             solver={"tol": 1e-5, "max_iters": 500_000, "radius": 1},
             diffusion={"dt": 0.01, "t_end": 40.0, "burn_in": 10.0, "initial": [0.5, 0.5]},
             wideband={"t_end": 40.0, "burn_in": 10.0, "initial": [0.5, 0.5]},
             epsilon_ladder=[0.5], n_paths=3,
             lyapunov={"verify_grid": {"x_min": 1e-8, "x_max": 1e3, "y_min": 1e-8, "y_max": 1e3,
                                       "nx": 30, "ny": 30}},
             extinction={"t_end": 300.0, "burn_in": 50.0, "n_paths": 6, "epsilon": 0.5})
    d.update(over)
    return cfg.replace(**d)


@pytest.fixture(scope="module")
def tiny(default_cfg):
    return small(default_cfg)


class TestConfig:
    def test_builtins_load(self):
        d, e = builtin_config("default"), builtin_config("extinct")
        assert d.params.s2 == -0.2 and e.params.s2 + e.params.c2 * e.params.a1 / e.params.b1 < 0

    def test_round_trip_and_hash(self, default_cfg, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(default_cfg.to_json())
        back = load_config(p)
        assert back.to_dict() == default_cfg.to_dict() and back.hash() == default_cfg.hash()
        # output location is not part of the identity
        assert default_cfg.replace(output_dir="elsewhere").hash() == default_cfg.hash()
        assert default_cfg.replace(seed=1).hash() != default_cfg.hash()

    @pytest.mark.parametrize("ladder", [[0.25, 0.5], [0.5, 0.5], [], [1.5]])
    def test_bad_ladder(self, default_cfg, ladder):
        with pytest.raises(ValueError, match="epsilon_ladder"):
            default_cfg.replace(epsilon_ladder=ladder)

    def test_schema_version(self, default_cfg):
        d = default_cfg.to_dict()
        d["schema_version"] = 99
        with pytest.raises(ValueError, match="schema_version"):
            ExperimentConfig.from_dict(d)
        d["schema_version"] = 1
        del d["grid"]
        with pytest.raises(ValueError, match="missing"):
            ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def run(tiny, tmp_path_factory):
    return run_pipeline(tiny, tmp_path_factory.mktemp("run"))


class TestPipeline:
    def test_files_and_manifest(self, run):
        root = run.root
        for name in ("report.json", "manifest.csv", "timings.json", "config.json", "baselines.csv",
                     "tightness.csv", "epsilon_ladder.csv", "hjb/policy.csv", "averaging/coeffs.json"):
            assert (root / name).exists(), name
        rows = list(csv.DictReader((root / "manifest.csv").open(newline="")))
        listed = {r["path"] for r in rows}
        assert "timings.json" not in listed and "report.json" in listed
        for r in rows:
            assert (root / r["path"]).stat().st_size == int(r["bytes"])

    def test_checks_carry_numbers(self, run):
        d = json.loads((run.root / "report.json").read_text())
        names = {c["name"] for c in d["checks"]}
        assert {"hjb_residual", "rho_dominates_constants", "diffusion_vs_rho", "tightness",
                "policy_beats_constants", "drift_inequality"} <= names
        assert all(c["value"] is not None and c["threshold"] is not None for c in d["checks"])
        # a single rung has no trend to check
        assert "ladder_gap_nonincreasing" not in names
        assert len(run.outputs["wideband"]) == 1

    def test_export_families(self, run, tiny, tmp_path):
        fams = export_plot_data(run.root, tmp_path / "plots")
        assert set(fams) == {"policy_heatmap", "value_function", "epsilon_ladder", "occupation", "sample_paths"}
        rows = fams["policy_heatmap"][0].read_text().splitlines()
        assert len(rows) - 1 == tiny.grid.nx * tiny.grid.ny
        assert fams["occupation"] and fams["sample_paths"]

    def test_export_names_missing_stage(self, run, tmp_path):
        d = json.loads((run.root / "report.json").read_text())
        del d["files"]["wideband"]
        (tmp_path / "report.json").write_text(json.dumps(d))
        with pytest.raises(StageError, match="wideband") as ei:
            export_plot_data(tmp_path)
        assert ei.value.stage == "wideband"


def test_zero_cap_pipeline(tiny, tmp_path):
    cfg = tiny.replace(params=ModelParams(**{**tiny.params.to_dict(), "M": 0.0}))
    rep = run_pipeline(cfg, tmp_path)
    assert rep.outputs["hjb"]["rho"] == 0.0
    assert rep.outputs["diffusion"]["estimate"] == 0.0
    assert all(r["estimate"] == 0.0 for r in rep.outputs["wideband"])


def test_failed_stage_is_named(tiny, tmp_path):
    cfg = tiny.replace(solver={"tol": 1e-12, "max_iters": 3, "radius": 1})
    with pytest.raises(StageError) as ei:
        run_pipeline(cfg, tmp_path)
    assert ei.value.stage == "hjb"
    d = json.loads((tmp_path / "report.json").read_text())
    assert d["failed_stage"] == "hjb" and not d["pass"] and "averaging" in d["files"]


def test_ladder_trend_check(tiny):
    cfg = tiny.replace(epsilon_ladder=[0.5, 0.3])
    out = run_epsilon_ladder(cfg, PolicyTable.constant(cfg.grid, 1.0, cfg.params.M))
    assert [r["epsilon"] for r in out["rows"]] == [0.5, 0.3]
    assert [c.name for c in out["checks"]] == ["ladder_gap_nonincreasing"]


class TestExtinction:
    def test_refuses_persistent(self, tiny, tmp_path):
        with pytest.raises(ValueError, match="persists"):
            run_extinction_study(tiny, tmp_path)

    def test_extinct_passes(self, tmp_path):
        rep = run_extinction_study(small(builtin_config("extinct")), tmp_path)
        assert rep.passed
        rows = (tmp_path / "extinction.csv").read_text().splitlines()
        assert len(rows) == 5


class TestCLI:
    def write(self, cfg, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(cfg.replace(output_dir=str(tmp_path / "out")).to_json())
        return str(p)

    def test_avg_coeffs(self, tiny, tmp_path, capsys):
        assert main(["avg-coeffs", "--config", self.write(tiny, tmp_path), "--quiet"]) == 0
        d = json.loads(capsys.readouterr().out)
        assert d == json.loads((tmp_path / "out/averaging/coeffs.json").read_text())

    def test_bad_config_path(self, tmp_path):
        assert main(["solve", "--config", str(tmp_path / "nope.json"), "--quiet"]) == 2

    def test_bad_builtin(self):
        assert main(["solve", "--config", "builtin:nope", "--quiet"]) == 2

    def test_solve(self, tiny, tmp_path, capsys):
        assert main(["solve", "--config", self.write(tiny, tmp_path), "--quiet"]) == 0
        d = json.loads(capsys.readouterr().out)
        assert d["pass"] and (tmp_path / "out/hjb/policy.json").exists()

    def test_extinction_on_persistent_is_error(self, tiny, tmp_path):
        assert main(["extinction", "--config", self.write(tiny, tmp_path), "--quiet"]) == 2

    def test_simulate_constant_with_seed_override(self, tiny, tmp_path, capsys):
        cfgp = self.write(tiny, tmp_path)
        args = ["simulate-diffusion", "--config", cfgp, "--constant", "0.5", "--n-paths", "2", "--quiet"]
        assert main(args + ["--seed", "3"]) == 0
        a = json.loads(capsys.readouterr().out)
        assert main(args + ["--seed", "3"]) == 0
        b = json.loads(capsys.readouterr().out)
        assert main(args + ["--seed", "4"]) == 0
        c = json.loads(capsys.readouterr().out)
        assert a == b and a != c

    def test_verify_failure_exit_code(self, tiny, tmp_path):
        # a persistent config as the negative control passes the boundary check
        bad = tiny.replace(lyapunov={**tiny.lyapunov, "boundary": {"T1": 20.0, "n_paths": 2},
                                     "comparison": {"T0": 300.0, "n_paths": 2}})
        neg = tmp_path / "neg.json"
        neg.write_text(tiny.to_json())
        code = main(["verify-lyapunov", "--config", self.write(bad, tmp_path), "--negative", str(neg),
                     "--quiet"])
        assert code == 1
