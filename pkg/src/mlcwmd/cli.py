"""Batch command-line front end.

Subcommands: simulate, fit, select, predict, scenario, evaluate, reproduce-sim.
Settings come from one YAML/JSON config file (keys ``data.path``,
``data.roles``, ``model.*``, ``output.dir``, ``seed``); flags override it and
``MLCWMD_OUTPUT_DIR`` overrides the configured output directory.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import DataError, load_dataset, save_dataset
from .dgp import GroundTruth, builtin_application_analogue, builtin_table1, simulate_replicate
from .em import fit_select
from .inference import (accuracy_at, adjusted_rand_index, predict, random_effect_flags, roc_cutoff,
                        scenario)
from .model import FitConfig, ModelFit, SchemaError, dump_json

log = logging.getLogger("mlcwmd")

ENV_OUTPUT = "MLCWMD_OUTPUT_DIR"
MODEL_KEYS = {"c_grid", "n_starts", "tol", "max_iter", "init", "ising_domain", "formula", "intercept",
              "lambda_floor", "sigma_ridge", "min_cluster_size", "y_likelihood", "max_restarts"}


class UsageError(RuntimeError):
    pass


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    failures: int = 0
    created: str = ""

    def read(self, path):
        self.inputs[str(path)] = sha256(path)

    def wrote(self, path):
        if path is not None:
            self.outputs.append(str(path))
        return path

    def timed(self, phase, t0):
        self.timings[phase] = round(time.perf_counter() - t0, 4)

    def save(self, out_dir):
        self.created = datetime.now(timezone.utc).isoformat(timespec="seconds")
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"outputs missing on disk: {missing}")
        path = Path(out_dir) / "manifest.json"
        path.write_text(dump_json(self.__dict__), encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def load_config(path):
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    cfg = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a mapping")
    unknown = set(cfg) - {"data", "model", "output", "seed"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    bad = set(cfg.get("model", {}) or {}) - MODEL_KEYS
    if bad:
        raise UsageError(f"unknown model keys: {sorted(bad)}")
    return cfg


def parse_c(text):
    return tuple(int(c) for c in str(text).split(",") if c.strip())


def fit_config(cfg, args):
    model = dict(cfg.get("model", {}) or {})
    if getattr(args, "c", None):
        model["c_grid"] = parse_c(args.c)
    elif "c_grid" in model:
        model["c_grid"] = parse_c(model["c_grid"]) if isinstance(model["c_grid"], str) else tuple(model["c_grid"])
    for flag in ("n_starts", "init", "tol", "max_iter"):
        if getattr(args, flag, None) is not None:
            model[flag] = getattr(args, flag)
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.get("seed", 0)
    return FitConfig(**model, seed=int(seed))


def output_dir(cfg, args):
    out = getattr(args, "out", None) or os.environ.get(ENV_OUTPUT) or (cfg.get("output") or {}).get("dir")
    out = Path(out or "mlcwmd-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def read_data(cfg, args, manifest, roles=None, **kw):
    data = cfg.get("data") or {}
    path = getattr(args, "data", None) or data.get("path")
    if not path:
        raise UsageError("no data file given (use --data or data.path)")
    roles = roles or data.get("roles")
    if not roles:
        raise UsageError("no column roles given (data.roles in the config)")
    domain = (cfg.get("model") or {}).get("ising_domain", "01")
    manifest.read(path)
    return load_dataset(path, roles, ising_domain=domain, **kw)


def write_csv(path, rows, columns=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k)) for k in columns})
    return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _figures(args):
    return not getattr(args, "no_figures", False)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _ground_truth(name):
    if name == "table1":
        return builtin_table1()
    if name == "analogue":
        return builtin_application_analogue()
    path = Path(name)
    if not path.exists():
        raise UsageError(f"unknown DGP {name!r}: use table1, analogue or a ground-truth JSON file")
    return GroundTruth.from_dict(json.loads(path.read_text(encoding="utf-8")))


def cmd_simulate(args, cfg):
    gt = _ground_truth(args.dgp)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = output_dir(cfg, args)
    man = RunManifest("simulate", {"dgp": args.dgp, "reps": args.reps, "n_test": args.n_test}, seed)
    t0 = time.perf_counter()
    for r in range(args.reps):
        rep_seed = seed if args.reps == 1 else int(np.random.SeedSequence([seed, r]).generate_state(1)[0])
        target = out if args.reps == 1 else out / f"rep{r + 1:03d}"
        target.mkdir(parents=True, exist_ok=True)
        train, test = simulate_replicate(gt, rep_seed, args.n_test)
        roles = save_dataset(train.dataset, target / "train.csv")
        save_dataset(test.dataset, target / "test.csv")
        truth = {"seed": rep_seed, "ground_truth": gt.to_dict(), "roles": roles,
                 "train_labels": (train.labels + 1).tolist(), "test_labels": (test.labels + 1).tolist(),
                 "train_intercepts": train.intercepts.tolist(), "test_intercepts": test.intercepts.tolist()}
        (target / "truth.json").write_text(dump_json(truth), encoding="utf-8")
        for name in ("train.csv", "test.csv", "truth.json"):
            man.wrote(target / name)
    man.timed("simulate", t0)
    man.save(out)
    print(f"wrote {args.reps} replicate(s) to {out}")
    return 0


def _train_metrics(fit, ds):
    pred = predict(fit, ds, "blup")
    roc = roc_cutoff(pred.p, ds.y)
    return {"train_accuracy": roc.accuracy, "train_auc": roc.auc, "cutoff": roc.cutoff}


def _fit_outputs(fit, ds, out, man, args):
    try:
        fit.metrics = _train_metrics(fit, ds)
    except ValueError as exc:
        log.warning("training metrics unavailable: %s", exc)
    man.wrote(fit.save(out / "fit.json"))
    comp_rows = []
    for c, cp in enumerate(fit.components, start=1):
        for name, b, se, pv in zip(fit.design_names, cp.beta, cp.regression.se, cp.regression.pvalues):
            comp_rows.append({"cluster": c, "term": name, "estimate": b, "se": se, "p_value": pv})
        comp_rows.append({"cluster": c, "term": "sigma_b", "estimate": cp.sigma_b, "se": "", "p_value": ""})
    man.wrote(write_csv(out / "coefficients.csv", comp_rows))
    re_rows = []
    for c, cp in enumerate(fit.components, start=1):
        flags = random_effect_flags(cp.regression)
        for j, label in enumerate(ds.group_labels):
            re_rows.append({"cluster": c, "group": label, "b": cp.b[j], "sd": cp.b_sd[j], "flag": int(flags[j])})
    man.wrote(write_csv(out / "random_effects.csv", re_rows))
    if _figures(args):
        from . import plotting
        man.wrote(plotting.random_effects(fit, ds.group_labels, out / "random_effects.png"))
        man.wrote(plotting.interactions(fit, ds.d_names, out / "interactions.png"))


def _select(args, cfg, command):
    config = fit_config(cfg, args)
    out = output_dir(cfg, args)
    man = RunManifest(command, {**cfg, "model": config.to_dict()}, config.seed)
    t0 = time.perf_counter()
    ds = read_data(cfg, args, man)
    man.timed("load", t0)
    t0 = time.perf_counter()
    sel = fit_select(ds, config, variant=args.variant, jobs=args.jobs)
    man.timed("fit", t0)
    man.failures = sum(r["status"] == "failed" for r in sel.runs)
    man.wrote(write_csv(out / "starts.csv", sel.runs,
                        ["C", "start", "status", "loglik", "objective", "bic", "n_iter", "converged",
                         "attempts", "guard_triggers", "error"]))
    man.timings["starts"] = [{"C": r["C"], "start": r["start"], "seconds": round(r["seconds"], 4)}
                             for r in sel.runs]
    man.wrote(write_csv(out / "bic_table.csv", sel.table,
                        ["C", "status", "loglik", "bic", "n_params", "start", "n_failed"]))
    if sel.best is None:
        man.save(out)
        print("all cluster counts failed", file=sys.stderr)
        return 2
    _fit_outputs(sel.best, ds, out, man, args)
    if _figures(args) and len(sel.table) > 1:
        from . import plotting
        man.wrote(plotting.bic_by_c([sel.table], out / "bic.png"))
    man.save(out)
    print(f"selected C={sel.best.C} (BIC {sel.best.bic:.2f}); outputs in {out}")
    return 0


def cmd_fit(args, cfg):
    return _select(args, cfg, "fit")


def cmd_select(args, cfg):
    return _select(args, cfg, "select")


def _load_fit(path, man):
    man.read(path)
    try:
        return ModelFit.load(path)
    except SchemaError as exc:
        raise UsageError(str(exc)) from exc


def _read_for_fit(fit, cfg, args, man, require_response):
    path = getattr(args, "data", None) or (cfg.get("data") or {}).get("path")
    if not path:
        raise UsageError("no data file given (use --data)")
    with open(path, encoding="utf-8", newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh))]
    roles = dict(fit.schema)
    needed = [n for n, s in roles.items() if (s if isinstance(s, str) else s["role"]) != "response"]
    missing = [n for n in needed if n not in header]
    if missing:
        extra = [h for h in header if h not in roles]
        raise UsageError(f"data file does not match the fit: missing columns {missing}, extra columns {extra}")
    has_y = any((s if isinstance(s, str) else s["role"]) == "response" and n in header for n, s in roles.items())
    if require_response and not has_y:
        raise UsageError("this command needs the response column")
    man.read(path)
    domain = fit.config.get("ising_domain", "01")
    return load_dataset(path, roles, ising_domain=domain, strict_levels=True,
                        require_response=False)


def _b_mode(text):
    if text in ("zero", "blup"):
        return text
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"--b-mode must be zero, blup or a number, got {text!r}") from None


def cmd_predict(args, cfg):
    out = output_dir(cfg, args)
    man = RunManifest("predict", {"fit": args.fit, "b_mode": args.b_mode}, None)
    fit = _load_fit(args.fit, man)
    ds = _read_for_fit(fit, cfg, args, man, False)
    pred = predict(fit, ds, _b_mode(args.b_mode))
    rows = []
    for i, r in enumerate(pred.rows()):
        row = {"row": i + 1, "group": ds.group_labels[ds.groups[i]], "p": r["p"],
               "cluster": int(np.argmax(r["posteriors"])) + 1}
        for c in range(fit.C):
            row[f"posterior_{c + 1}"] = r["posteriors"][c]
            row[f"p_{c + 1}"] = r["conditional"][c]
        rows.append(row)
    man.wrote(write_csv(out / "predictions.csv", rows))
    doc = {"b_mode": pred.b_mode, "predictions": rows}
    if ds.y is not None and "cutoff" in fit.metrics:
        doc["accuracy"] = accuracy_at(pred.p, ds.y, fit.metrics["cutoff"])
        doc["cutoff"] = fit.metrics["cutoff"]
        print(f"accuracy at stored cutoff {fit.metrics['cutoff']:.4f}: {doc['accuracy']:.4f}")
    (out / "predictions.json").write_text(dump_json(doc), encoding="utf-8")
    man.wrote(out / "predictions.json")
    man.save(out)
    return 0


def cmd_scenario(args, cfg):
    out = output_dir(cfg, args)
    man = RunManifest("scenario", {"fit": args.fit}, None)
    fit = _load_fit(args.fit, man)
    ds = _read_for_fit(fit, cfg, args, man, False)
    labels = None
    if args.id_column:
        with open(args.data, encoding="utf-8", newline="") as fh:
            labels = [r[args.id_column] for r in csv.DictReader(fh)]
    grids = scenario(fit, ds, labels=labels)
    rows = []
    for g in grids:
        for k, p in zip(g.offsets, g.p):
            rows.append({"record": g.label, "offset_sd": k, "p": p})
    man.wrote(write_csv(out / "scenario.csv", rows))
    (out / "scenario.json").write_text(dump_json([g.__dict__ for g in grids]), encoding="utf-8")
    man.wrote(out / "scenario.json")
    if _figures(args):
        from . import plotting
        man.wrote(plotting.scenario_bars(grids, out / "scenario.png"))
    man.save(out)
    print(f"{len(rows)} predictions for {len(grids)} records written to {out}")
    return 0


def cmd_evaluate(args, cfg):
    out = output_dir(cfg, args)
    man = RunManifest("evaluate", {"fit": args.fit, "truth": args.truth}, None)
    fit = _load_fit(args.fit, man)
    ds = _read_for_fit(fit, cfg, args, man, True)
    pred = predict(fit, ds, _b_mode(args.b_mode))
    roc = roc_cutoff(pred.p, ds.y)
    rows = [{"metric": "auc", "value": roc.auc}, {"metric": "accuracy_own_cutoff", "value": roc.accuracy},
            {"metric": "own_cutoff", "value": roc.cutoff}]
    if "cutoff" in fit.metrics:
        rows.append({"metric": "accuracy_fit_cutoff",
                     "value": accuracy_at(pred.p, ds.y, fit.metrics["cutoff"])})
    if args.truth:
        man.read(args.truth)
        truth = json.loads(Path(args.truth).read_text(encoding="utf-8"))
        key = args.truth_key
        labels = np.asarray(truth[key])
        if labels.size != ds.n_obs:
            raise UsageError(f"truth labels ({labels.size}) do not match data rows ({ds.n_obs})")
        rows.append({"metric": "ari", "value": adjusted_rand_index(labels, pred.posteriors.argmax(axis=1))})
    man.wrote(write_csv(out / "evaluation.csv", rows))
    (out / "evaluation.json").write_text(dump_json({r["metric"]: r["value"] for r in rows}), encoding="utf-8")
    man.wrote(out / "evaluation.json")
    man.save(out)
    for r in rows:
        print(f"{r['metric']}: {r['value']:.4f}")
    return 0


def cmd_reproduce(args, cfg):
    from .study import default_study_config, long_rows, run_replicate, summarize
    gt = _ground_truth(args.dgp)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    config = default_study_config(gt, n_starts=args.n_starts or 5, c_grid=parse_c(args.c or "2,3,4"),
                                  init=args.init or "kmeans")
    out = output_dir(cfg, args)
    man = RunManifest("reproduce-sim", {"dgp": args.dgp, "reps": args.reps, "model": config.to_dict()}, seed)
    t0 = time.perf_counter()
    results = []
    for r in range(args.reps):
        res = run_replicate(gt, r, base_seed=seed, config=config, jobs=args.jobs)
        results.append(res)
        print(f"replicate {r + 1}/{args.reps}: C={res.metric('ML-CWMd', 'train', 'C')} "
              f"ARI={res.metric('ML-CWMd', 'train', 'ari'):.3f} ({res.seconds:.1f}s)", flush=True)
    man.timed("replicates", t0)
    rows = long_rows(results)
    man.wrote(write_csv(out / "results.csv", rows, ["replicate", "method", "split", "metric", "value"]))
    bic_rows = [{"replicate": res.replicate, "method": m, "C": t["C"], "bic": t["bic"], "status": t["status"]}
                for res in results for m, table in res.bic_table.items() for t in table]
    man.wrote(write_csv(out / "bic.csv", bic_rows))
    beta_rows = []
    for res in results:
        for method, est in res.betas.items():
            est = np.atleast_2d(est)
            for c in range(est.shape[0]):
                for k, name in enumerate(res.design_names):
                    beta_rows.append({"replicate": res.replicate, "method": method,
                                      "cluster": c + 1 if est.shape[0] > 1 else "", "term": name,
                                      "estimate": est[c, k]})
    man.wrote(write_csv(out / "betas.csv", beta_rows))
    summary = summarize(results, gt)
    (out / "summary.json").write_text(dump_json(summary), encoding="utf-8")
    man.wrote(out / "summary.json")
    if _figures(args):
        from . import plotting
        for method in ("ML-CWMd", "ML-CWMd-noD"):
            tag = method.lower().replace("-", "_")
            man.wrote(plotting.bic_by_c([r.bic_table[method] for r in results], out / f"bic_{tag}.png"))
        man.wrote(plotting.metric_by_method(rows, "ari", "train", out / "ari.png", ["ML-CWMd", "ML-CWMd-noD"]))
        for split in ("train", "test"):
            man.wrote(plotting.metric_by_method(rows, "accuracy", split, out / f"accuracy_{split}.png",
                                                ["ML-CWMd", "ML-CWMd-noD", "GLMER", "GLM"]))
        est = [r.betas["ML-CWMd"] for r in results if "ML-CWMd" in r.betas]
        if est:
            man.wrote(plotting.beta_recovery(est, gt.beta, results[0].design_names, out / "beta_recovery.png",
                                             {"GLM": [r.betas["GLM"] for r in results],
                                              "GLMER": [r.betas["GLMER"] for r in results]}))
    man.save(out)
    print(f"C={gt.C} chosen in {summary['rate_true_C']:.0%} of replicates; outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="mlcwmd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--no-figures", action="store_true", help="skip PNG figures")
        if data:
            sp.add_argument("--data", help="CSV data file")
        return sp

    sp = common(sub.add_parser("simulate", help="write synthetic train/test CSVs"), data=False)
    sp.add_argument("--dgp", default="table1", help="table1, analogue or a ground-truth JSON")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--reps", type=int, default=1)
    sp.add_argument("--n-test", type=int, default=200)
    sp.set_defaults(func=cmd_simulate)

    for name, func, default_c in (("fit", cmd_fit, None), ("select", cmd_select, None)):
        sp = common(sub.add_parser(name, help=f"{name} the mixture model"))
        sp.add_argument("--c", default=default_c, help="cluster count(s), comma separated")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--n-starts", type=int)
        sp.add_argument("--init", choices=("random", "kmeans"))
        sp.add_argument("--tol", type=float)
        sp.add_argument("--max-iter", type=int)
        sp.add_argument("--variant", choices=("full", "noD"), default="full")
        sp.add_argument("--jobs", type=int, default=1)
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("predict", help="risk predictions from a saved fit"))
    sp.add_argument("--fit", required=True)
    sp.add_argument("--b-mode", default="zero", help="zero, blup or k (k fitted SDs)")
    sp.set_defaults(func=cmd_predict)

    sp = common(sub.add_parser("scenario", help="predictions at -1, 0, +1 random-intercept SDs"))
    sp.add_argument("--fit", required=True)
    sp.add_argument("--id-column", help="column holding record labels")
    sp.set_defaults(func=cmd_scenario)

    sp = common(sub.add_parser("evaluate", help="accuracy, AUC and (with truth) ARI"))
    sp.add_argument("--fit", required=True)
    sp.add_argument("--truth", help="JSON file with true cluster labels")
    sp.add_argument("--truth-key", default="train_labels")
    sp.add_argument("--b-mode", default="blup")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("reproduce-sim", help="replicated simulation study"), data=False)
    sp.add_argument("--dgp", default="table1")
    sp.add_argument("--reps", type=int, default=20)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--c", help="cluster grid, default 2,3,4")
    sp.add_argument("--n-starts", type=int)
    sp.add_argument("--init", choices=("random", "kmeans"))
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (UsageError, DataError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
