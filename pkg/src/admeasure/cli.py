"""Command-line entry point: ``admeasure <subcommand> [options]``.

Every subcommand reads the same run configuration (``--config``), whose
sections are documented in :data:`admeasure.pipeline.DEFAULTS`. Exit codes:
0 ok, 2 configuration error, 3 data error, 4 estimation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .evalmetrics import EvaluationRecord
from .ingest import DatasetValidationError, ParseError, load_dataset
from .simulate import observed_view, simulate_experiment, write_simulation

log = logging.getLogger("admeasure")


def _load_config(args) -> dict:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise pl.ConfigError("config", f"cannot read {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise pl.ConfigError("config", "config must be a JSON object")
    if args.seed is not None:
        raw["master_seed"] = args.seed
    return pl.resolve_config(raw)


def _load_data(paths, stage: str):
    out = []
    for p in paths:
        try:
            out.append(load_dataset(p))
        except (ParseError, DatasetValidationError, FileNotFoundError, ValueError) as exc:
            raise pl.DataError(stage, f"{p}: {exc}") from exc
    return out


def _expand(paths, pattern: str) -> list[Path]:
    found = []
    for p in map(Path, paths):
        found += sorted(p.rglob(pattern)) if p.is_dir() else [p]
    return found


def cmd_simulate(args, cfg):
    out = Path(args.out)
    for sim in pl.suite_configs(cfg):
        ds, gt = simulate_experiment(sim)
        path = write_simulation(observed_view(ds, gt), gt, sim, out)
        log.info("wrote %s", path)


def cmd_analyze_rct(args, cfg):
    out = Path(args.out)
    chash = pl.config_hash(cfg)
    B = args.bootstrap if args.bootstrap is not None else int(cfg["rct"]["bootstrap"])
    for ds in _load_data(_expand(args.data, "*.jsonl"), "analyze-rct"):
        for doc in pl.rct_documents(ds, B, int(cfg["master_seed"]), chash):
            res = doc["result"]
            pl.dump_json(doc, out / f"rct__{res['experiment_id']}__{res['event']}.json")


def cmd_analyze_obs(args, cfg):
    out = Path(args.out)
    if args.strata is not None:
        cfg["obs"]["strata"] = args.strata
    if args.dml_variant is not None:
        cfg["obs"]["dml_variant"] = args.dml_variant
    if args.folds is not None:
        cfg["models"]["folds"] = args.folds
    if args.bootstrap is not None:
        cfg["obs"]["bootstrap"] = args.bootstrap
    if args.model is not None:
        cfg["models"]["propensity"]["kind"] = args.model
        cfg["models"]["outcome"]["kind"] = args.model
    chash = pl.config_hash(cfg)
    methods = args.method or cfg["obs"]["methods"]
    for ds in _load_data(_expand(args.data, "*.jsonl"), "analyze-obs"):
        for doc in pl.obs_documents(ds, cfg, int(cfg["master_seed"]), chash, methods):
            name = f"obs__{doc['experiment_id']}__{doc['event']}__{doc['estimate']['method']}.json"
            pl.dump_json(doc, out / name)


def _read_docs(paths, pattern: str, stage: str) -> list[dict]:
    docs = []
    for p in _expand(paths, pattern):
        try:
            docs.append(json.loads(p.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise pl.DataError(stage, f"{p}: {exc}") from exc
    return docs


def _read_truths(paths) -> dict:
    truths = {}
    for doc in _read_docs(paths, "*.truth.json", "evaluate"):
        exp = doc["config"]["experiment_id"]
        for ev, t in doc["ground_truth"]["events"].items():
            truths[(exp, ev)] = {"true_att": t["true_att"], "true_lift": t["true_lift"]}
    return truths


def cmd_evaluate(args, cfg):
    rct = _read_docs(args.inputs, "rct__*.json", "evaluate")
    obs = _read_docs(args.inputs, "obs__*.json", "evaluate")
    if not rct or not obs:
        raise pl.DataError("evaluate", "need both rct__*.json and obs__*.json artifacts")
    truths = _read_truths(args.truth) if args.truth else None
    records = pl.evaluate_documents(rct, obs, truths)
    if not records:
        raise pl.DataError("evaluate", "no (experiment, event) pair has both RCT and observational results")
    summary = pl.evaluation_summary(records)
    if all(r.decile is None for r in records):
        summary["note"] = "fewer than 10 records per funnel: deciles skipped"
    pl.write_evaluation(records, summary, Path(args.out), pl.config_hash(cfg))


def cmd_meta(args, cfg):
    records = []
    for p in _expand(args.records, "records.jsonl"):
        try:
            records += [EvaluationRecord.from_dict(json.loads(line)) for line in p.read_text().splitlines() if line]
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise pl.DataError("meta", f"{p}: {exc}") from exc
    out = pl.meta_analysis(records, cfg, int(cfg["master_seed"]))
    for m, body in out.items():
        if "skipped" in body:
            log.warning("meta %s skipped: %s", m, body["skipped"])
    pl.write_meta(out, Path(args.out), pl.config_hash(cfg), int(cfg["master_seed"]))


def cmd_pipeline(args, cfg):
    report = pl.run_pipeline(cfg, args.out, jobs=args.jobs)
    log.info("report written to %s (config %s)", Path(args.out) / "report.json", report["config_hash"])


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel experiments (pipeline)")
    common.add_argument("--seed", type=int, help="override master_seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="admeasure", description="Ad-effect measurement: RCT vs observational methods.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="simulate the configured experiments")

    s = sub.add_parser("analyze-rct", parents=[common], help="ITT, ATT, lift and bootstrap SE per event")
    s.add_argument("--data", nargs="+", required=True, help="dataset files or directories")
    s.add_argument("--bootstrap", type=int)

    s = sub.add_parser("analyze-obs", parents=[common], help="observational estimates on the test group")
    s.add_argument("--data", nargs="+", required=True, help="dataset files or directories")
    s.add_argument("--method", nargs="+", choices=["eu", "spsm", "dml"])
    s.add_argument("--strata", type=int)
    s.add_argument("--dml-variant", choices=["g0", "gw"])
    s.add_argument("--folds", type=int)
    s.add_argument("--model", choices=["logistic", "mlp"])
    s.add_argument("--bootstrap", type=int, help="replicates for the lift SE (0 = delta method)")

    s = sub.add_parser("evaluate", parents=[common], help="compare observational lifts with RCT lifts")
    s.add_argument("--inputs", nargs="+", required=True, help="directories holding rct__*.json and obs__*.json")
    s.add_argument("--truth", nargs="+", help="directories holding *.truth.json (simulated data)")

    s = sub.add_parser("meta", parents=[common], help="forest importance and partial dependence of APE")
    s.add_argument("--records", nargs="+", required=True, help="records.jsonl files or directories")

    sub.add_parser("pipeline", parents=[common], help="simulate through meta in one run")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "analyze-rct": cmd_analyze_rct,
    "analyze-obs": cmd_analyze_obs,
    "evaluate": cmd_evaluate,
    "meta": cmd_meta,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise pl.ConfigError("config", "--jobs must be at least 1")
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
