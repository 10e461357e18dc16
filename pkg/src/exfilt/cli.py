"""Command-line pipeline: each subcommand is one stage with persisted artifacts.

Layout of the output directory::

    manifest.json              config fingerprint, stage seeds, artifact hashes
    target.mlp / defended.mlp  train-target
    surrogate_<B>.mlp          extract (plus d_s_<B>.csv, history_<B>.jsonl)
    mia_<tag>.csv / .json      mia (distances and threshold sidecar)
    table2.csv, table3.csv, roc_<tag>.csv, report.json   report
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, config as config_mod
from .data import TabularDataset, fingerprints, load_csv, read_manifest, split, write_csv
from .defenses import NONE, accounted_epsilon, defended_config, read_grid
from .errors import BudgetExhausted, ConfigError, ExfiltError, SchemaError, TransportError
from .evaluation import (AttackReport, ExperimentResult, accuracy, attack_accuracy, fidelity, load_dataset,
                         roc_auc, run_defense_grid, write_roc, write_table2)
from .extraction import extract
from .mia import (MiaThreshold, calibrate_threshold, decide, boundary_distances, MembershipResult,
                  read_results, write_results, write_sidecar)
from .nn import load_model, save_model, train
from .oracle import LabelOracle, RemoteOracle, serve

logger = logging.getLogger("exfilt")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_RUNTIME = 4

OUTPUT_ENV = "EXFILT_OUTPUT_DIR"


# ---------------------------------------------------------------- plumbing

def _load_config(args) -> config_mod.ExperimentConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"master_seed={args.seed}")
    if args.config:
        cfg = config_mod.load(args.config, overrides)
    else:
        doc = {}
        for o in overrides:
            config_mod.apply_override(doc, o)
        cfg = config_mod.build(doc)
    out = args.output or os.environ.get(OUTPUT_ENV) or cfg.output_dir
    if out is None:
        raise ConfigError(f"no output directory: pass --output, set {OUTPUT_ENV}, or set output_dir")
    cfg.output_dir = Path(out)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _record(cfg, stage: str, artifacts, seeds: dict) -> None:
    """Merge one stage's seeds and artifact hashes into manifest.json."""
    path = cfg.output_dir / "manifest.json"
    doc = read_manifest(path) if path.exists() else {}
    if doc.get("config_fingerprint") not in (None, cfg.fingerprint()):
        logger.warning("output directory was produced by a different config; manifest entries are replaced")
        doc = {}
    src = cfg.csv_path()
    doc.update({"schema": cfg.schema.to_dict(), "source": str(src) if src else "synthetic",
                "split": vars(cfg.split), "config": cfg.raw, "config_fingerprint": cfg.fingerprint(),
                "version": __version__, "master_seed": cfg.master_seed})
    doc.setdefault("stages", {})[stage] = {
        "seeds": seeds, "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": {p.name: _sha256(p) for p in artifacts if p.exists()}}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _splits(cfg):
    return split(load_dataset(cfg), cfg.split)


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{path.name} not found in {path.parent}; run `exfilt {stage}` first")
    return path


def _attacked_name(cfg) -> str:
    return "target" if cfg.defense.kind == NONE else "defended"


def _surrogate_tag(cfg, budget: int) -> str:
    return f"surrogate_{budget}" if cfg.defense.kind == NONE else f"surrogate_defended_{budget}"


# ---------------------------------------------------------------- commands

def cmd_train_target(args) -> int:
    cfg = _load_config(args)
    sp = _splits(cfg)
    out = cfg.output_dir
    model = train(sp.d_m, cfg.target)
    save_model(model, out / "target.mlp")
    print(f"target: train accuracy {accuracy(model, sp.d_m):.4f}, test accuracy {accuracy(model, sp.d_n):.4f}")
    written = [out / "target.mlp"]
    seeds = {"split": cfg.split.seed, "target": cfg.target.seed}
    if cfg.defense.kind != NONE:
        dcfg = defended_config(len(sp.d_m), cfg.target, cfg.defense)
        defended = train(sp.d_m, dcfg)
        save_model(defended, out / "defended.mlp")
        written.append(out / "defended.mlp")
        extra = ""
        if dcfg.dp is not None:
            extra = f", sigma {dcfg.dp.noise_multiplier:.4f}, epsilon {accounted_epsilon(len(sp.d_m), dcfg):.3f}"
        print(f"defended ({cfg.defense.label}): train accuracy {accuracy(defended, sp.d_m):.4f}, "
              f"test accuracy {accuracy(defended, sp.d_n):.4f}{extra}")
    _record(cfg, "train-target", written, seeds)
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    out = cfg.output_dir
    budget = args.budget if args.budget is not None else cfg.budgets[-1]
    sp = _splits(cfg)
    if budget < len(sp.d_a):
        raise ConfigError(f"budget {budget} cannot cover labelling the {len(sp.d_a)} auxiliary rows")
    if args.oracle_url:
        oracle = RemoteOracle(args.oracle_url)
        if oracle.schema.n_features != cfg.schema.n_features or oracle.schema.n_classes != cfg.schema.n_classes:
            raise ConfigError(f"oracle at {args.oracle_url} serves a different schema")
        if oracle.remaining() < budget:
            logger.warning("remote oracle has %s queries left, below the requested %d",
                           oracle.remaining(), budget)
        probe = None
    else:
        name = _attacked_name(cfg)
        attacked = load_model(_need(out / f"{name}.mlp", "train-target"))
        oracle = LabelOracle(attacked, cfg.schema, budget)
        probe = TabularDataset(sp.d_n.samples, attacked.predict(sp.d_n.samples), cfg.schema)
    tag = _surrogate_tag(cfg, budget)
    hist = out / f"history_{tag}.jsonl"
    hist.unlink(missing_ok=True)
    ext = cfg.extraction_for(budget)
    if args.oracle_url:
        ext.max_queries = budget
    before = oracle.spent
    surrogate, state = extract(sp.d_a, oracle, ext, cfg.surrogate, probe=probe, history_path=hist)
    save_model(surrogate, out / f"{tag}.mlp")
    write_csv(state.d_s, out / f"d_s_{tag}.csv")
    spent = oracle.spent - before
    summary = {"budget": budget, "rounds": state.t, "spent": spent, "d_s": len(state.d_s),
               "stop_reason": state.stop_reason, "remote": bool(args.oracle_url)}
    (out / f"{tag}.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    fid = "" if probe is None else f", fidelity {state.history[-1].get('fidelity', float('nan')):.4f}"
    print(f"{tag}: {state.t} rounds, {spent} queries, |D_S| {len(state.d_s)}{fid}, stop: {state.stop_reason}")
    _record(cfg, f"extract-{budget}", [out / f"{tag}.mlp", out / f"d_s_{tag}.csv", hist, out / f"{tag}.json"],
            {"extraction": ext.seed, "surrogate": cfg.surrogate.seed})
    if state.stop_reason.startswith("oracle_error"):
        # The partial surrogate is saved; the exit code still reports the failure.
        if "budget" in state.stop_reason:
            raise BudgetExhausted(0, oracle.remaining())
        raise TransportError(state.stop_reason)
    return EXIT_OK


def _mia_target(cfg, args):
    out = cfg.output_dir
    if args.model:
        path = Path(args.model)
        tag = args.tag or path.stem
    elif args.budget is not None:
        name = _surrogate_tag(cfg, args.budget)
        tag = args.tag or name
        path = _need(out / f"{name}.mlp", f"extract --budget {args.budget}")
    else:
        tag = args.tag or _attacked_name(cfg)
        path = _need(out / f"{_attacked_name(cfg)}.mlp", "train-target")
    return tag, path


def cmd_mia(args) -> int:
    cfg = _load_config(args)
    out = cfg.output_dir
    if args.method:
        cfg.mia.method = args.method
    cfg.mia.check(cfg.schema)
    tag, path = _mia_target(cfg, args)
    model = load_model(path)
    sp = _splits(cfg)
    if args.samples:
        data = load_csv(args.samples, cfg.schema)
    else:
        data = sp.d_mem
    if args.tau is not None:
        threshold = MiaThreshold(float(args.tau), source="manual", member_side=cfg.member_side,
                                 method=cfg.mia.method)
    else:
        exclude = frozenset()
        d_s = out / f"d_s_{path.stem}.csv"
        if d_s.exists():
            exclude = frozenset(fingerprints(load_csv(d_s, cfg.schema).samples))
        threshold = calibrate_threshold(model, cfg.schema, cfg.n_cal, cfg.mia, seed=cfg.seed("calibration"),
                                        activation_rates=sp.d_a.samples.mean(axis=0), exclude=exclude,
                                        member_side=cfg.member_side)
    dists = boundary_distances(model, data.samples, cfg.mia, cfg.schema)
    result = MembershipResult(decide(dists, threshold), dists)
    write_results(out / f"mia_{tag}.csv", result, data.membership)
    write_sidecar(out / f"mia_{tag}.json", threshold)
    msg = f"{tag}: tau {threshold.tau:.4f} ({threshold.source}), {int(result.predictions.sum())}/{len(data)} members"
    if data.membership is not None and 0 < data.membership.sum() < len(data):
        auc, _ = roc_auc(dists, data.membership, cfg.member_side)
        msg += f", attack accuracy {attack_accuracy(result.predictions, data.membership):.4f}, auc {auc:.4f}"
    print(msg)
    _record(cfg, f"mia-{tag}", [out / f"mia_{tag}.csv", out / f"mia_{tag}.json"],
            {"mia": cfg.mia.seed, "calibration": threshold.seed})
    return EXIT_OK


def _report_row(cfg, sp, tag, model, target, attacked, budget=None, summary=None) -> AttackReport:
    out = cfg.output_dir
    stage = "mia" if budget is None else f"mia --budget {budget}"
    dists, preds, truths = read_results(_need(out / f"mia_{tag}.csv", stage))
    side = json.loads((out / f"mia_{tag}.json").read_text())
    if truths is None:
        raise ConfigError(f"mia_{tag}.csv has no ground truth; rerun `exfilt {stage}` on the default split")
    auc, pts = roc_auc(dists, truths, side.get("member_side", cfg.member_side))
    write_roc(out / f"roc_{tag}.csv", pts)
    summary = summary or {}
    rounds, spent, stop = summary.get("rounds"), summary.get("spent"), summary.get("stop_reason", "")
    return AttackReport(
        "surrogate" if budget else tag, budget, cfg.defense.label, fidelity(model, target, sp.d_n),
        fidelity(model, attacked, sp.d_n) if attacked is not target else None, accuracy(model, sp.d_n),
        attack_accuracy(preds, truths), auc, side["tau"], spent, rounds, stop, roc=pts)


def cmd_report(args) -> int:
    cfg = _load_config(args)
    out = cfg.output_dir
    sp = _splits(cfg)
    target = load_model(_need(out / "target.mlp", "train-target"))
    name = _attacked_name(cfg)
    attacked = target if name == "target" else load_model(_need(out / "defended.mlp", "train-target"))
    base = _report_row(cfg, sp, name, attacked, target, attacked)
    rows = []
    for b in cfg.budgets:
        tag = _surrogate_tag(cfg, b)
        model = load_model(_need(out / f"{tag}.mlp", f"extract --budget {b}"))
        summary = out / f"{tag}.json"
        rows.append(_report_row(cfg, sp, tag, model, target, attacked, b,
                                json.loads(summary.read_text()) if summary.exists() else None))
    result = ExperimentResult(base, rows)
    write_table2(out / "table2.csv", result)
    doc = {"attacked": base.row(), "surrogates": [r.row() for r in rows]}
    written = [out / "table2.csv"] + [out / f"roc_{r}.csv" for r in
                                      [name] + [_surrogate_tag(cfg, b) for b in cfg.budgets]]
    specs = list(cfg.defenses)
    if args.defense_grid:
        specs += read_grid(args.defense_grid)
    if specs:
        grid = run_defense_grid(cfg, specs)
        doc["defenses"] = [{"defense": g.spec.label, "defended": g.defended.row(), "surrogate": g.surrogate.row()}
                           for g in grid]
        written.append(out / "table3.csv")
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    written.append(out / "report.json")
    with (out / "table2.csv").open() as fh:
        sys.stdout.write(fh.read())
    _record(cfg, "report", written, {})
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = _load_config(args)
    name = _attacked_name(cfg)
    model = load_model(_need(cfg.output_dir / f"{name}.mlp", "train-target"))
    oracle = LabelOracle(model, cfg.schema, args.budget, reject_invalid=args.reject_invalid)
    server = serve(oracle, (args.host, args.port))
    print(f"serving {name} at {server.url} (budget {'unlimited' if args.budget is None else args.budget})",
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_synth_data(args) -> int:
    cfg = _load_config(args)
    if cfg.csv_path() is not None:
        raise ConfigError("synth-data needs a synthetic dataset section")
    ds = load_dataset(cfg)
    path = Path(args.file) if args.file else cfg.output_dir / "synthetic.csv"
    write_csv(ds, path)
    (path.with_suffix(".schema.json")).write_text(json.dumps(cfg.schema.to_dict(), indent=2))
    print(f"wrote {len(ds)} rows to {path}")
    _record(cfg, "synth-data", [path], {"data": cfg.seed("data")})
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment JSON document")
    common.add_argument("--seed", type=int, help="master seed (overrides master_seed)")
    common.add_argument("--output", metavar="DIR", help=f"artifact directory (fallback: ${OUTPUT_ENV})")
    common.add_argument("--quiet", action="store_true", help="only warnings and errors on stderr")
    common.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                        help="override one config field; VALUE is parsed as JSON when possible")

    p = argparse.ArgumentParser(prog="exfilt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-target", parents=[common], help="train M (and M' when a defense is set)")
    s.set_defaults(func=cmd_train_target)

    s = sub.add_parser("extract", parents=[common], help="extract a surrogate through the label oracle")
    s.add_argument("--budget", type=int, help="query budget (default: last configured budget)")
    s.add_argument("--oracle-url", help="query a remote `exfilt serve` endpoint instead of an in-process oracle")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("mia", parents=[common], help="boundary-distance membership inference, offline")
    s.add_argument("--budget", type=int, help="attack the surrogate extracted with this budget")
    s.add_argument("--model", help="attack this model file instead")
    s.add_argument("--tag", help="artifact name (default derived from the model)")
    s.add_argument("--samples", help="CSV of samples to score (default: the membership evaluation set)")
    s.add_argument("--tau", type=float, help="manual threshold; skips calibration")
    s.add_argument("--method", choices=["exhaustive", "labelonly_hsj", "whitebox_margin"])
    s.set_defaults(func=cmd_mia)

    s = sub.add_parser("report", parents=[common], help="assemble table2/table3/ROC CSVs from artifacts")
    s.add_argument("--defense-grid", help="CSV (kind,value) of defenses to run for table3")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("serve", parents=[common], help="expose the target as a label-only HTTP oracle")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--budget", type=int, help="query budget (default: unlimited)")
    s.add_argument("--reject-invalid", action="store_true", help="refuse out-of-domain rows with 422")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("synth-data", parents=[common], help="write the synthetic dataset as CSV")
    s.add_argument("--file", help="destination CSV (default: <output>/synthetic.csv)")
    s.set_defaults(func=cmd_synth_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except BudgetExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    except (ExfiltError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
