from __future__ import annotations

import json
import math

import pytest
from conftest import make_dataset

from admeasure import pipeline as pl
from admeasure.cli import main
from admeasure.ingest import write_dataset

SMALL = {"master_seed": 7, "experiments": [{"n_users": 10_000, "baseline_rate": 0.1, "true_lift": 0.4}],
         "rct": {"bootstrap": 50}, "obs": {"bootstrap": 20}}


def write_config(tmp_path, cfg):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_simulate_then_analyze(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    data = tmp_path / "data" / "exp000.jsonl"
    assert data.exists() and (tmp_path / "data" / "exp000.truth.json").exists()

    assert main(["analyze-rct", "--config", cfg, "--out", str(tmp_path / "rct"), "--data", str(data)]) == 0
    doc = json.loads((tmp_path / "rct" / "rct__exp000__purchase.json").read_text())
    assert doc["config_hash"] == pl.config_hash(pl.resolve_config(SMALL))
    assert doc["seed"] == pl.derive_seed(7, "rct/exp000/purchase")
    assert doc["result"]["n_test"] + doc["result"]["n_control"] == 10_000

    rc = main(["analyze-obs", "--config", cfg, "--out", str(tmp_path / "obs"), "--data", str(tmp_path / "data"),
               "--method", "eu", "dml", "--folds", "2", "--bootstrap", "0"])
    assert rc == 0
    names = sorted(p.name for p in (tmp_path / "obs").iterdir())
    assert names == ["obs__exp000__purchase__dml.json", "obs__exp000__purchase__exposed_unexposed.json"]
    dml = json.loads((tmp_path / "obs" / names[0]).read_text())
    assert dml["lift_se_source"] == "delta" and math.isfinite(dml["estimate"]["lift"])

    rc = main(["evaluate", "--config", cfg, "--out", str(tmp_path / "ev"), "--inputs", str(tmp_path / "rct"),
               str(tmp_path / "obs"), "--truth", str(tmp_path / "data")])
    assert rc == 0
    summary = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert "deciles skipped" in summary["summary"]["note"]
    records = (tmp_path / "ev" / "records.jsonl").read_text().splitlines()
    assert len(records) == 1 and json.loads(records[0])["truth"]["true_lift"] == pytest.approx(0.4)

    assert main(["meta", "--config", cfg, "--out", str(tmp_path / "meta"), "--records", str(tmp_path / "ev")]) == 0
    imp = json.loads((tmp_path / "meta" / "importance__dml.json").read_text())
    assert "skipped" in imp


def test_config_errors_exit_2(tmp_path, capsys):
    bad = write_config(tmp_path, {"experiments": [{"planned_split": 1.0}]})
    assert main(["simulate", "--config", bad, "--out", str(tmp_path)]) == 2
    assert "[config]" in capsys.readouterr().err
    typo = write_config(tmp_path, {"obs": {"strata_count": 10}})
    assert main(["pipeline", "--config", typo, "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--out", str(tmp_path), "--jobs", "0"]) == 2


def test_data_errors_exit_3(tmp_path, capsys):
    broken = tmp_path / "broken.jsonl"
    broken.write_text("{not json\n")
    assert main(["analyze-rct", "--out", str(tmp_path / "o"), "--data", str(broken)]) == 3
    assert "[analyze-rct]" in capsys.readouterr().err
    assert main(["evaluate", "--out", str(tmp_path / "o"), "--inputs", str(tmp_path / "empty")]) == 3


def test_estimation_errors_exit_4(tmp_path, capsys):
    # nobody in the test group was exposed, so the instrument carries no information
    ds = make_dataset([1] * 20 + [0] * 20, [0] * 40, [1, 0] * 20)
    path = write_dataset(ds, tmp_path / "unexposed.jsonl")
    assert main(["analyze-rct", "--out", str(tmp_path / "o"), "--data", str(path), "--bootstrap", "50"]) == 4
    assert "degenerate instrument" in capsys.readouterr().err


def test_pipeline_single_experiment(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["pipeline", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    (exp,) = report["experiments"]
    assert set(exp["estimates"]) == {"exposed_unexposed", "spsm", "dml"}
    values = [exp["rct"]["lift"]] + [e["lift"] for e in exp["estimates"].values()]
    values += [e["lift_se"] for e in exp["estimates"].values()]
    assert all(math.isfinite(v) for v in values)
    assert report["config_hash"] == pl.config_hash(pl.resolve_config(SMALL))
    for sub in ("data", "rct", "obs", "evaluate", "meta"):
        assert (tmp_path / "run" / sub).is_dir()


def test_pipeline_jobs_do_not_change_results():
    cfg = {"master_seed": 3, "suite": {"n_experiments": 3, "base": {"n_users": 4_000}},
           "rct": {"bootstrap": 50}, "obs": {"bootstrap": 0, "methods": ["eu", "spsm"]}}
    assert pl.run_pipeline(cfg, None, jobs=1) == pl.run_pipeline(cfg, None, jobs=2)


def test_seed_override_changes_hash(tmp_path):
    a = pl.resolve_config({"master_seed": 1})
    b = pl.resolve_config({"master_seed": 2})
    assert pl.config_hash(a) != pl.config_hash(b)
    assert pl.derive_seed(1, "x") == pl.derive_seed(1, "x") != pl.derive_seed(1, "y")


def test_suite_configs_are_seeded_per_experiment():
    cfg = pl.resolve_config({"master_seed": 5, "suite": {"n_experiments": 4, "base": {"n_users": 1_000}}})
    sims = pl.suite_configs(cfg)
    assert [s.experiment_id for s in sims] == ["exp000", "exp001", "exp002", "exp003"]
    assert len({s.seed for s in sims}) == 4 and len({s.hidden_fraction for s in sims}) == 4
    assert all(len(s.events) == 3 for s in sims)
    assert pl.suite_configs(cfg) == sims
