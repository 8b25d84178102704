"""Stage functions behind the CLI and the end-to-end pipeline.

Every artifact is a JSON document carrying the stage name, the hash of the
configuration that produced it and its seed. Seeds for stochastic steps are
derived from a master seed and a stage label, so reruns are reproducible and
independent of the order (or process) in which experiments are handled.
"""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import evalmetrics as em
from .data import ExperimentDataset
from .ingest import randomization_check, write_dataset
from .meta import ForestParams, fit_forest, partial_dependence, permutation_importance
from .models import ModelSpec, crossfit
from .obs import bootstrap_obs_lift, dml_att, exposed_unexposed, spsm_att
from .rct import analyze_rct
from .simulate import SimConfig, funnel_events, observed_view, simulate_experiment

log = logging.getLogger(__name__)

METHOD_ALIASES = {"eu": "exposed_unexposed", "exposed_unexposed": "exposed_unexposed", "spsm": "spsm", "dml": "dml"}
VERTICALS = ("retail", "ecommerce", "cpg", "financial", "travel", "gaming", "other")


class StageError(Exception):
    exit_code = 1

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class ConfigError(StageError):
    exit_code = 2


class DataError(StageError):
    exit_code = 3


class EstimationError(StageError):
    exit_code = 4


def derive_seed(master_seed: int, label: str) -> int:
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(label.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def dump_json(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


DEFAULTS = {
    "master_seed": 0,
    "suite": {"n_experiments": 12, "randomize": True, "base": {"n_users": 20_000}},
    "models": {"propensity": {"kind": "logistic"}, "outcome": {"kind": "logistic"}, "folds": 3},
    "obs": {"methods": ["eu", "spsm", "dml"], "strata": 100, "dml_variant": "g0", "bootstrap": 100,
            "spsm_literal_variance": False},
    "rct": {"bootstrap": 200},
    "metrics": {"winsor_pct": 0.95},
    "meta": {"n_trees": 200, "mtry": 2, "min_node": 1, "max_depth": None, "importance_repeats": 5, "pdp_points": 20},
}


def resolve_config(cfg: Mapping | None) -> dict:
    """Merge a user config over the defaults; unknown sections or keys are config errors."""
    cfg = dict(cfg or {})
    out = json.loads(json.dumps(DEFAULTS))
    for key, val in cfg.items():
        if key not in out and key != "experiments":
            raise ConfigError("config", f"unknown config section {key!r}")
        if key in ("master_seed", "experiments"):
            out[key] = val
            continue
        if not isinstance(val, Mapping):
            raise ConfigError("config", f"section {key!r} must be an object")
        for k, v in val.items():
            if k not in out[key]:
                raise ConfigError("config", f"unknown key {key}.{k}")
            out[key][k] = v
    return out


def suite_configs(cfg: Mapping) -> list[SimConfig]:
    """Experiment configurations for a pipeline run, validated before any work starts."""
    master = int(cfg["master_seed"])
    try:
        if cfg.get("experiments"):
            sims = []
            for i, d in enumerate(cfg["experiments"]):
                d = dict(d)
                d.setdefault("experiment_id", f"exp{i:03d}")
                d.setdefault("seed", derive_seed(master, f"simulate/{d['experiment_id']}"))
                sims.append(SimConfig.from_dict(d))
            return sims
        suite = cfg["suite"]
        base = dict(suite.get("base", {}))
        sims = []
        for i in range(int(suite["n_experiments"])):
            exp_id = f"exp{i:03d}"
            d = dict(base)
            if suite.get("randomize", True):
                rng = np.random.default_rng(derive_seed(master, f"suite/{exp_id}"))
                lifts = rng.uniform(0.0, 0.6, size=3)
                upper, mid, lower = funnel_events(tuple(float(x) for x in lifts))
                d.update(
                    selection_strength=float(rng.uniform(0.5, 2.0)),
                    hidden_fraction=float(rng.uniform(0.0, 0.9)),
                    exposure_target=float(rng.uniform(0.3, 0.85)),
                    prospecting_ratio=float(rng.uniform(0.0, 1.0)),
                    length_days=int(rng.integers(7, 61)),
                    vertical=str(VERTICALS[int(rng.integers(len(VERTICALS)))]),
                    event_name=upper.name,
                    funnel=upper.funnel,
                    baseline_rate=upper.baseline_rate,
                    true_lift=upper.true_lift,
                    extra_events=(mid, lower),
                )
                d = {**d, **{k: v for k, v in base.items() if k not in ("seed", "experiment_id")}}
            d["experiment_id"] = exp_id
            d["seed"] = derive_seed(master, f"simulate/{exp_id}")
            sims.append(SimConfig.from_dict(d))
        return sims
    except (TypeError, ValueError) as exc:
        raise ConfigError("config", str(exc)) from exc


def _stamp(doc: dict, stage: str, chash: str, seed: int | None) -> dict:
    return {"stage": stage, "config_hash": chash, "seed": seed, **doc}


def rct_documents(ds: ExperimentDataset, bootstrap: int, master_seed: int, chash: str) -> list[dict]:
    docs = []
    check = randomization_check(ds)
    for ev in ds.meta.outcome_events:
        seed = derive_seed(master_seed, f"rct/{ds.meta.experiment_id}/{ev.name}")
        try:
            res = analyze_rct(ds, ev.name, B=bootstrap, seed=seed)
        except ValueError as exc:
            raise EstimationError("analyze-rct", f"{ds.meta.experiment_id}/{ev.name}: {exc}") from exc
        doc = {
            "result": res.to_dict(),
            "funnel": ev.funnel,
            "meta": ds.meta.to_dict(),
            "randomization_check": check.to_dict(),
        }
        docs.append(_stamp(doc, "analyze-rct", chash, seed))
    return docs


def obs_documents(ds: ExperimentDataset, cfg: Mapping, master_seed: int, chash: str, methods=None) -> list[dict]:
    """One document per (event, method) for the test group of ``ds``."""
    obs_cfg, model_cfg = cfg["obs"], cfg["models"]
    methods = [METHOD_ALIASES[m] for m in (methods or obs_cfg["methods"])]
    tg = ds.test_group()
    exp = ds.meta.experiment_id
    docs = []
    for ev in ds.meta.outcome_events:
        label = f"{exp}/{ev.name}"
        cf_seed = derive_seed(master_seed, f"crossfit/{label}")
        try:
            cf = None
            if {"spsm", "dml"} & set(methods):
                spec_e = ModelSpec.from_dict({**model_cfg["propensity"], "seed": derive_seed(master_seed, f"model_e/{label}")})
                spec_g = ModelSpec.from_dict({**model_cfg["outcome"], "seed": derive_seed(master_seed, f"model_g/{label}")})
                cf = crossfit(spec_e, spec_g, tg, ev.name, K=int(model_cfg["folds"]), seed=cf_seed)
            for m in methods:
                boot_seed = derive_seed(master_seed, f"obs_boot/{label}/{m}")
                if m == "exposed_unexposed":
                    est = exposed_unexposed(tg, ev.name)
                elif m == "spsm":
                    est, _ = spsm_att(tg, ev.name, cf.e_hat, J=int(obs_cfg["strata"]),
                                      literal_variance=bool(obs_cfg["spsm_literal_variance"]))
                    est = replace(est, diagnostics={**est.diagnostics, **cf.diagnostics()})
                else:
                    est, _ = dml_att(tg, ev.name, cf, residual_variant=obs_cfg["dml_variant"])
                B = int(obs_cfg["bootstrap"])
                lift_se_source = "delta"
                if B > 0 and est.lift is not None:
                    boot = bootstrap_obs_lift(tg, ev.name, m, B=B, seed=boot_seed, cf=cf,
                                              J=int(obs_cfg["strata"]), residual_variant=obs_cfg["dml_variant"])
                    if boot is not None:
                        est = replace(est, lift_se=boot)
                        lift_se_source = "bootstrap"
                doc = {
                    "experiment_id": exp,
                    "event": ev.name,
                    "funnel": ev.funnel,
                    "estimate": est.to_dict(),
                    "exposed_rate": float(tg.outcome(ev.name)[tg.w == 1].mean()),
                    "lift_se_source": lift_se_source,
                }
                docs.append(_stamp(doc, "analyze-obs", chash, boot_seed))
        except ValueError as exc:
            raise EstimationError("analyze-obs", f"{label}: {exc}") from exc
    return docs


def characteristics(rct_doc: Mapping, obs_docs: Iterable[Mapping], method: str | None = None) -> dict:
    res, meta = rct_doc["result"], rct_doc["meta"]
    funnel = rct_doc["funnel"]
    out = {
        "length_days": float(meta["length_days"]),
        "n_test": float(res["n_test"]),
        "control_conv_rate": float(res["control_conv_rate"]),
        "exposure_rate": float(res["exposure_rate"]),
        "prospecting_ratio": float(meta["prospecting_ratio"]),
        "funnel_upper": float(funnel == "upper"),
        "funnel_mid": float(funnel == "mid"),
        "funnel_lower": float(funnel == "lower"),
    }
    for d in obs_docs:
        diag = d["estimate"]["diagnostics"]
        if diag.get("mean_auc_propensity") is not None:
            out["propensity_auc"] = float(diag["mean_auc_propensity"])
        if d["estimate"]["method"] == "dml" and diag.get("mean_auc_outcome") is not None:
            out["outcome_auc"] = float(diag["mean_auc_outcome"])
    return out


def evaluate_documents(rct_docs, obs_docs, truths: Mapping | None = None) -> list[em.EvaluationRecord]:
    """Join RCT and observational documents into evaluation records, with RCT deciles per funnel."""
    obs_by_key: dict = {}
    for d in obs_docs:
        obs_by_key.setdefault((d["experiment_id"], d["event"]), []).append(d)
    records = []
    for r in sorted(rct_docs, key=lambda d: (d["result"]["experiment_id"], d["result"]["event"])):
        key = (r["result"]["experiment_id"], r["result"]["event"])
        group = sorted(obs_by_key.get(key, []), key=lambda d: d["estimate"]["method"])
        if not group:
            continue
        estimates = {d["estimate"]["method"]: d["estimate"] for d in group}
        truth = None
        if truths and key in truths:
            truth = truths[key]
        records.append(em.build_record(r["result"], estimates, characteristics(r, group), r["funnel"], truth))
    by_funnel: dict = {}
    for rec in records:
        if rec.rct_lift is not None:
            by_funnel.setdefault(rec.funnel, []).append(rec)
    for members in by_funnel.values():
        if len(members) >= 10:
            for rec, dec in zip(members, em.assign_deciles([m.rct_lift for m in members])):
                rec.decile = dec
    return records


def evaluation_summary(records: list[em.EvaluationRecord], methods=("spsm", "dml")) -> dict:
    n_ape_excluded = sum(1 for r in records if r.rct_lift is None or r.rct_lift <= 0)
    return {
        "n_records": len(records),
        "n_excluded_nonpositive_rct_lift": n_ape_excluded,
        "significance": em.significance_table(records, methods),
        "ape_by_decile": em.decile_table([r for r in records if r.rct_lift is not None and r.rct_lift > 0], "ape", methods),
        "ae_by_decile": em.decile_table(records, "ae", methods),
        "rpb": em.rpb_table(records, methods),
        "share_improved": {m: em.share_improved(records, m) for m in methods},
    }


def render_summary(summary: Mapping, methods=("spsm", "dml")) -> str:
    parts = [
        "Observational vs RCT lifts: significance of the difference\n",
        em.render_significance_table(summary["significance"]),
        "\nMedian APE by RCT lift decile (positive RCT lifts only)\n",
        em.render_decile_table(summary["ape_by_decile"], methods),
        "\nMedian AE by RCT lift decile\n",
        em.render_decile_table(summary["ae_by_decile"], methods),
    ]
    return "".join(parts)


META_FEATURES = ("length_days", "n_test", "control_conv_rate", "exposure_rate", "propensity_auc",
                 "prospecting_ratio", "funnel_upper", "funnel_mid", "funnel_lower")


def meta_analysis(records: list[em.EvaluationRecord], cfg: Mapping, master_seed: int, methods=("spsm", "dml")) -> dict:
    """Forest of winsorized APE on experiment characteristics, per method."""
    meta_cfg = cfg["meta"]
    out = {}
    for m in methods:
        features = list(META_FEATURES) + (["outcome_auc"] if m == "dml" else [])
        rows = [r for r in records if r.ape.get(m) is not None and all(f in r.characteristics for f in features)]
        if len(rows) < 20:
            out[m] = {"skipped": f"needs at least 20 records with a defined APE, found {len(rows)}"}
            continue
        y = em.winsorize([r.ape[m] for r in rows], cfg["metrics"]["winsor_pct"], [r.funnel for r in rows])
        X = np.array([[r.characteristics[f] for f in features] for r in rows])
        if np.ptp(y) == 0:
            out[m] = {"skipped": "constant APE"}
            continue
        params = ForestParams(
            n_trees=int(meta_cfg["n_trees"]), mtry=int(meta_cfg["mtry"]), min_node=int(meta_cfg["min_node"]),
            max_depth=meta_cfg["max_depth"], seed=derive_seed(master_seed, f"forest/{m}"),
        )
        try:
            forest = fit_forest(X, np.asarray(y), params, features)
            imp = permutation_importance(forest, seed=derive_seed(master_seed, f"importance/{m}"),
                                         n_repeats=int(meta_cfg["importance_repeats"]))
        except ValueError as exc:
            raise EstimationError("meta", f"{m}: {exc}") from exc
        pdps = {}
        for j, f in enumerate(features):
            if np.ptp(X[:, j]) == 0:
                continue
            lo, hi = np.percentile(X[:, j], [2, 98])
            grid = np.linspace(lo, hi, int(meta_cfg["pdp_points"]))
            pdps[f] = partial_dependence(forest, X, f, grid)
        out[m] = {"n_records": len(rows), "oob_r2": forest.oob_r2(), "importance": imp.to_dict(), "pdp": pdps}
    return out


def _experiment_job(args):
    sim, cfg, chash, out_dir = args
    master = int(cfg["master_seed"])
    ds, gt = simulate_experiment(sim)
    view = observed_view(ds, gt)
    if out_dir is not None:
        from .simulate import write_simulation

        write_simulation(view, gt, sim, Path(out_dir) / "data")
    rct_docs = rct_documents(view, int(cfg["rct"]["bootstrap"]), master, chash)
    obs_docs = obs_documents(view, cfg, master, chash)
    truths = {(sim.experiment_id, k): {"true_att": v.true_att, "true_lift": v.true_lift} for k, v in gt.events.items()}
    return rct_docs, obs_docs, truths


def run_pipeline(cfg: Mapping | None, out_dir: str | Path | None, jobs: int = 1) -> dict:
    """simulate -> analyze-rct -> analyze-obs -> evaluate -> meta; returns the report body."""
    cfg = resolve_config(cfg)
    chash = config_hash(cfg)
    master = int(cfg["master_seed"])
    sims = suite_configs(cfg)
    out = Path(out_dir) if out_dir is not None else None
    args = [(s, cfg, chash, None if out is None else str(out)) for s in sims]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_experiment_job, args))
    else:
        results = [_experiment_job(a) for a in args]

    rct_docs = [d for r in results for d in r[0]]
    obs_docs = [d for r in results for d in r[1]]
    truths = {k: v for r in results for k, v in r[2].items()}
    if out is not None:
        for d in rct_docs:
            dump_json(d, out / "rct" / f"rct__{d['result']['experiment_id']}__{d['result']['event']}.json")
        for d in obs_docs:
            name = f"obs__{d['experiment_id']}__{d['event']}__{d['estimate']['method']}.json"
            dump_json(d, out / "obs" / name)

    records = evaluate_documents(rct_docs, obs_docs, truths)
    summary = evaluation_summary(records)
    meta_out = meta_analysis(records, cfg, master)
    if out is not None:
        write_evaluation(records, summary, out / "evaluate", chash)
        write_meta(meta_out, out / "meta", chash, master)

    report = {
        "config_hash": chash,
        "master_seed": master,
        "config": cfg,
        "experiments": _experiment_summaries(rct_docs, obs_docs, truths),
        "evaluation": summary,
        "meta": {m: {k: v for k, v in body.items() if k != "pdp"} for m, body in meta_out.items()},
    }
    if out is not None:
        dump_json(report, out / "report.json")
    return report


def _experiment_summaries(rct_docs, obs_docs, truths) -> list[dict]:
    out = []
    for r in rct_docs:
        res = r["result"]
        key = (res["experiment_id"], res["event"])
        ests = {d["estimate"]["method"]: {k: d["estimate"][k] for k in ("att", "se", "lift", "lift_se", "n_used")}
                for d in obs_docs if (d["experiment_id"], d["event"]) == key}
        out.append({
            "experiment_id": key[0],
            "event": key[1],
            "funnel": r["funnel"],
            "truth": truths.get(key),
            "randomization_p": r["randomization_check"]["p_value"],
            "rct": {k: res[k] for k in ("itt", "itt_se", "att", "att_se", "lift", "lift_se", "significant_5pct")},
            "estimates": ests,
        })
    return out


def write_evaluation(records, summary, out_dir: Path, chash: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "records.jsonl").open("w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True, allow_nan=False) + "\n")
    dump_json(_stamp({"summary": summary}, "evaluate", chash, None), out_dir / "summary.json")
    (out_dir / "tables.txt").write_text(render_summary(summary))


def write_meta(meta_out: Mapping, out_dir: Path, chash: str, seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for m, body in meta_out.items():
        doc = {k: v for k, v in body.items() if k != "pdp"}
        if "pdp" in body:
            doc["rug_deciles"] = {f: list(p.rug_deciles) for f, p in body["pdp"].items()}
            for f, p in body["pdp"].items():
                (out_dir / f"pdp__{m}__{f}.csv").write_text(p.to_csv())
        dump_json(_stamp({"method": m, **doc}, "meta", chash, seed), out_dir / f"importance__{m}.json")
