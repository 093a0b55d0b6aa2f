import csv
import io
import json
import os
from pathlib import Path

import numpy as np
import pytest

from weavemc import harness
from weavemc.harness import (
    TARGETS,
    WORKERS_ENV,
    ConfigError,
    ExperimentConfig,
    TargetEntry,
    main,
    make_config,
    read_config_file,
    run_experiment,
    run_limit_check,
    run_trace,
    seed_split,
    worker_cap,
)
from weavemc.targets import GAUSSIAN, LEBESGUE, TargetModel, gaussian_target, student_t_target

DATA = Path(__file__).parent / "data"
GOLDEN = DATA / "golden_summary.csv"

# small enough to run in a second, large enough for ESS (>= 100 kept draws)
SMALL = {"target": "gaussian", "dim": "3", "kernel": "all", "h": "0.5", "s": "0.5", "L": "2",
         "iters": "400", "burnin": "100", "pretune_iters": "500", "seed": "11"}


class TestSeedSplit:
    def test_deterministic(self):
        assert seed_split(5, 3) == seed_split(5, 3)

    def test_distinct_indices(self):
        assert seed_split(5, 0) != seed_split(5, 1)

    def test_no_collisions(self):
        seeds = {seed_split(master, i) for master in range(10) for i in range(1000)}
        assert len(seeds) == 10_000

    def test_range(self):
        assert all(0 <= seed_split(2 ** 70, i) < 2 ** 64 for i in range(10))


class TestConfig:
    def test_defaults(self):
        cfg = make_config()
        assert cfg.burn_in == cfg.iters // 10 and cfg.pretune_iters == 100_000 and cfg.chains == 1

    def test_file_and_override(self, tmp_path):
        p = tmp_path / "exp.cfg"
        p.write_text("# comment\ntarget = student_t\nkernel = wm, hwm  # two\niters = 2e3\nh = 0.3\n")
        cfg = make_config(read_config_file(p), {"iters": "3000", "seed": None})
        assert cfg.target == "student_t" and cfg.kernels == ["hwm", "wm"]
        assert cfg.iters == 3000 and cfg.seed == 0 and cfg.param_for("wm") == 0.3

    def test_all_kernels_sorted(self):
        assert make_config(overrides={"kernel": "all"}).kernels == sorted(harness.KERNELS)

    def test_param_kinds(self):
        cfg = make_config(overrides={"kernel": "rwm,wm", "s": "0.2", "h": "auto"})
        assert cfg.param_for("rwm") == 0.2 and cfg.param_for("wm") is None

    @pytest.mark.parametrize("bad", [
        {"target": "banana"}, {"kernel": "mala"}, {"kernel": ""}, {"iters": "100", "burnin": "100"},
        {"iters": "150", "burnin": "100"}, {"chains": "0"}, {"jitter": "1.0"}, {"h": "-1"},
        {"auto_ar": "1.5"}, {"iters": "1.5"}, {"colour": "red"}, {"seed": "abc"},
    ])
    def test_rejections(self, bad):
        with pytest.raises(ConfigError):
            make_config(overrides=bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_config_file(tmp_path / "nope.cfg")

    def test_reference_mismatch(self, monkeypatch):
        restricted = dict(TARGETS, restricted=TargetEntry(TARGETS["gaussian"].build, (LEBESGUE, GAUSSIAN)))
        monkeypatch.setattr(harness, "TARGETS", restricted)
        make_config(overrides={"target": "restricted", "kernel": "wm,rwm"})
        with pytest.raises(ConfigError, match="hwm"):
            make_config(overrides={"target": "restricted", "kernel": "wm,hwm"})


class TestTargets:
    @pytest.mark.parametrize("name,dim", [("gaussian", 10), ("student_t", 10), ("logistic", 31),
                                          ("sv", 103), ("sde", 10)])
    def test_default_dimensions(self, name, dim):
        assert TARGETS[name].build(ExperimentConfig(target=name)).dim == dim

    def test_logistic_dataset(self, tmp_path):
        rng = np.random.default_rng(0)
        p = tmp_path / "d.csv"
        rows = ["a,b,y"] + [f"{rng.normal()!r},{rng.normal()!r},{int(rng.random() < 0.5)}" for _ in range(40)]
        p.write_text("\n".join(rows) + "\n")
        model = TARGETS["logistic"].build(ExperimentConfig(target="logistic", dataset=str(p)))
        assert model.dim == 3

    def test_logistic_dataset_missing(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot load"):
            TARGETS["logistic"].build(ExperimentConfig(target="logistic", dataset=str(tmp_path / "x.csv")))


@pytest.fixture(scope="module")
def report():
    return run_experiment(make_config(overrides=SMALL), workers=1)


class TestExperiment:
    def test_rows(self, report):
        assert [s.method for s in report.summaries] == sorted(harness.KERNELS)
        assert all(s.time_s > 0 for s in report.summaries)

    def test_deterministic_csv(self, report):
        again = run_experiment(make_config(overrides=SMALL), workers=1)
        assert again.csv(include_timing=False) == report.csv(include_timing=False)

    def test_golden(self, report):
        # delete the file to regenerate it; the first run writes it, later runs compare
        text = report.csv(include_timing=False)
        if not GOLDEN.exists():
            GOLDEN.parent.mkdir(exist_ok=True)
            GOLDEN.write_text(text)
        expected = list(csv.DictReader(io.StringIO(GOLDEN.read_text())))
        got = list(csv.DictReader(io.StringIO(text)))
        assert [r["method"] for r in got] == [r["method"] for r in expected]
        for g, e in zip(got, expected):
            for col in e:
                if col != "method":
                    assert float(g[col]) == pytest.approx(float(e[col]), rel=1e-9), (g["method"], col)

    def test_json(self, report):
        payload = json.loads(report.to_json())
        assert set(payload) == {"version", "config", "seeds", "params", "tuning", "summaries", "timing"}
        assert "time_s" not in payload["summaries"][0] and "time_s" in payload["timing"][0]
        assert payload["params"]["wm"] == 0.5 and payload["params"]["rwm"] == 0.5

    def test_chains_in_parallel_match_serial(self):
        cfg = dict(SMALL, kernel="wm,pcn", chains="2")
        a = run_experiment(make_config(overrides=cfg), workers=2)
        b = run_experiment(make_config(overrides=cfg), workers=1)
        assert [s.method for s in a.summaries] == ["pcn[0]", "pcn[1]", "wm[0]", "wm[1]"]
        assert a.csv(False) == b.csv(False)
        assert a.summaries[0].essl != a.summaries[1].essl  # chains differ

    def test_auto_tuning_recorded(self):
        cfg = make_config(overrides=dict(SMALL, kernel="rwm", s="auto"))
        rep = run_experiment(cfg, workers=1)
        assert set(rep.tuning) == {"rwm"} and rep.tuning["rwm"]["probes"] >= 1


class TestWorkers:
    def test_env(self, monkeypatch):
        monkeypatch.setenv(WORKERS_ENV, "3")
        assert worker_cap() == 3

    def test_default(self, monkeypatch):
        monkeypatch.delenv(WORKERS_ENV, raising=False)
        assert worker_cap() == (os.cpu_count() or 1)

    @pytest.mark.parametrize("raw", ["zero", "0"])
    def test_bad(self, monkeypatch, raw):
        monkeypatch.setenv(WORKERS_ENV, raw)
        with pytest.raises(ConfigError):
            worker_cap()


class TestTrace:
    def test_single_step(self):
        rows = list(csv.reader(io.StringIO(run_trace(student_t_target(2, 3.0), 0.1, 1, 0))))
        assert rows[0] == ["step", "x0", "x1", "v0", "v1"] and len(rows) == 3

    @pytest.mark.parametrize("d", [2, 3])
    def test_long_path_keeps_radius(self, d):
        rows = np.loadtxt(io.StringIO(run_trace(student_t_target(d, 3.0), 0.1, 40, 1)), delimiter=",", skiprows=1)
        assert rows.shape == (41, 1 + 2 * d)
        radii = np.linalg.norm(rows[:, 1:], axis=1)
        np.testing.assert_allclose(radii, radii[0], rtol=1e-12)

    def test_deterministic(self):
        assert run_trace(gaussian_target(2), 0.2, 5, 3) == run_trace(gaussian_target(2), 0.2, 5, 3)

    def test_bad(self):
        with pytest.raises(ConfigError):
            run_trace(gaussian_target(2), 0.1, 0, 0)


class TestLimitCheck:
    def test_empty_grid(self):
        with pytest.raises(ConfigError):
            run_limit_check(gaussian_target(2), [], 1.0, 1e-3)

    def test_quadratic(self):
        # h = 0.1 is still pre-asymptotic for some starts, so the grid begins at 0.05
        text = run_limit_check(gaussian_target(2), [0.05, 0.025, 0.0125], 1.0, 5e-4, seed=2)
        rows = list(csv.DictReader(io.StringIO(text)))
        assert len(rows) == 3 and rows[0]["order_estimate"] == ""
        for r in rows[1:]:
            assert 0.7 <= float(r["order_estimate"]) <= 1.3
        assert float(rows[0]["tangency_max"]) <= 1e-6


class TestMain:
    def test_run_writes_files(self, tmp_path):
        out = tmp_path / "res" / "small"
        args = ["run"] + [f"--{k}={v}" for k, v in dict(SMALL, kernel="wm,pcn").items()] + [f"--out={out}"]
        assert main(args) == 0
        assert Path(f"{out}.csv").read_text().splitlines()[0].startswith("method,essl,ess_min,msjd")
        assert json.loads(Path(f"{out}.json").read_text())["config"]["kernel"] == "wm,pcn"

    def test_config_error_exit(self, capsys):
        assert main(["run", "--kernel", "mala"]) == 1
        assert "config error" in capsys.readouterr().err

    def test_numerical_failure_exit(self, capsys, monkeypatch):
        # a flat potential has no level-set direction anywhere
        flat = TargetModel("flat", 2, lambda x: 0.0, lambda x: np.zeros(2))
        monkeypatch.setattr(harness, "TARGETS", dict(TARGETS, flat=TargetEntry(lambda cfg: flat)))
        assert main(["limit-check", "--target", "flat", "--hs", "0.1", "--dt", "0.05", "--horizon", "0.1"]) == 2
        assert "ZeroGradientError" in capsys.readouterr().err

    def test_trace_stdout(self, capsys):
        assert main(["trace", "--target", "student_t", "--dim", "2", "--h", "0.1", "--L", "1"]) == 0
        assert len(capsys.readouterr().out.splitlines()) == 3

    def test_pretune(self, tmp_path):
        out = tmp_path / "pre"
        assert main(["pretune", "--dim", "2", "--pretune_iters", "300", f"--out={out}"]) == 0
        payload = json.loads(Path(f"{out}.json").read_text())
        assert len(payload["M"]) == 2 and len(payload["Sigma"]) == 2

    def test_tune(self, capsys):
        assert main(["tune", "--dim", "2", "--kernel", "rwm", "--pretune_iters", "300"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "kernel,param,rate,converged" and lines[1].startswith("rwm,")
