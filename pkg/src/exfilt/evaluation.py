"""Metrics, the end-to-end experiment driver and the report tables.

Metrics never touch an attack oracle.  The driver gives every budget a fresh
:class:`~exfilt.oracle.LabelOracle`; evaluation-side labels (the neutral
probe, target-side membership inference) come from the model directly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .data import TabularDataset, fingerprints, load_csv, split, synth_generate, write_manifest
from .defenses import NONE, DefenseSpec, accounted_epsilon, defended_config, spec_value
from .errors import ConfigError
from .extraction import extract
from .mia import FAR, NEAR, MiaThreshold, calibrate_threshold, infer_membership, write_results, write_sidecar
from .nn import accuracy, save_model, train
from .oracle import LabelOracle

logger = logging.getLogger(__name__)


def fidelity(model_a, model_b, samples) -> float:
    """Fraction of rows on which the two models predict the same label."""
    X = samples.samples if isinstance(samples, TabularDataset) else np.asarray(samples)
    if len(X) == 0:
        raise ConfigError("fidelity needs at least one sample")
    return float(np.mean(model_a.predict(X) == model_b.predict(X)))


def attack_accuracy(predictions, truths) -> float:
    p, t = np.asarray(predictions), np.asarray(truths)
    if len(t) == 0 or p.shape != t.shape:
        raise ConfigError("attack_accuracy needs equal-length non-empty arrays")
    return float(np.mean(p == t))


def _scores(distances, member_side):
    d = np.asarray(distances, dtype=np.float64)
    if member_side == FAR:
        return d
    if member_side == NEAR:
        return -d
    raise ConfigError(f"member_side must be {FAR!r} or {NEAR!r}")


def roc_curve(distances, truths, member_side: str = FAR):
    """Sweep every distinct distance as tau.

    Returns ``(fpr, tpr, taus)`` starting at (0, 0) with ``tau`` at the
    extreme that admits no member and ending at (1, 1).  Tied distances
    move together, so each tie group is a single step.
    """
    truths = np.asarray(truths).astype(bool)
    s = _scores(distances, member_side)
    n_pos, n_neg = int(truths.sum()), int((~truths).sum())
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("ROC needs both members and non-members")
    levels = np.unique(s)[::-1]
    tp = np.array([0] + [int(np.sum(truths & (s >= v))) for v in levels])
    fp = np.array([0] + [int(np.sum(~truths & (s >= v))) for v in levels])
    start = math.inf if member_side == FAR else -math.inf
    taus = np.concatenate([[start], levels if member_side == FAR else -levels])
    return fp / n_neg, tp / n_pos, taus, (tp, fp, n_pos, n_neg)


def roc_auc(distances, truths, member_side: str = FAR):
    """Trapezoid area under the ROC; equals the Mann-Whitney statistic with ties at 1/2."""
    fpr, tpr, taus, (tp, fp, n_pos, n_neg) = roc_curve(distances, truths, member_side)
    area = np.sum(np.diff(fp) * (tp[1:] + tp[:-1])) / (2.0 * n_pos * n_neg)
    return float(area), list(zip(fpr.tolist(), tpr.tolist(), taus.tolist()))


def write_roc(path, points) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "tau"])
        for f, t, tau in points:
            w.writerow([repr(f), repr(t), repr(tau)])


@dataclass
class AttackReport:
    model: str
    budget: Optional[int]
    defense: str
    fidelity_to_target: Optional[float]
    fidelity_to_defended: Optional[float]
    test_accuracy: float
    attack_accuracy: float
    attack_auc: float
    tau: float
    queries_spent: Optional[int]
    rounds: Optional[int]
    stop_reason: str = ""
    seconds: float = 0.0
    roc: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "roc"}


def _mia(model, d_mem, cfg: ExperimentConfig, schema, activation_rates, exclude):
    # Every model is calibrated on the same random draw, so target and
    # surrogate rows differ only through the model.
    threshold = calibrate_threshold(model, schema, cfg.n_cal, cfg.mia, seed=cfg.seed("calibration"),
                                    activation_rates=activation_rates, exclude=exclude,
                                    member_side=cfg.member_side)
    result = infer_membership(model, d_mem, threshold, cfg.mia)
    auc, points = roc_auc(result.distances, d_mem.membership, cfg.member_side)
    return threshold, result, attack_accuracy(result.predictions, d_mem.membership), auc, points


@dataclass
class ExperimentResult:
    target_report: AttackReport
    surrogate_reports: list
    defended_report: Optional[AttackReport] = None
    artifacts: dict = field(default_factory=dict)


def load_dataset(cfg: ExperimentConfig) -> TabularDataset:
    path = cfg.csv_path()
    if path is not None:
        return load_csv(path, cfg.schema)
    syn = cfg.dataset["synthetic"]
    return synth_generate(cfg.schema, int(syn["n_rows"]), float(syn["class_sep"]),
                          cfg.seed("data"))


def artifact_tag(attacked: str, budget: int) -> str:
    """File stem for a surrogate: ``surrogate_<budget>`` or ``surrogate_defended_<budget>``."""
    return f"surrogate_{budget}" if attacked == "target" else f"surrogate_{attacked}_{budget}"


def _save_mia(out: Optional[Path], tag: str, result, threshold: MiaThreshold, truths, points):
    if out is None:
        return
    write_results(out / f"mia_{tag}.csv", result, truths)
    write_sidecar(out / f"mia_{tag}.json", threshold)
    write_roc(out / f"roc_{tag}.csv", points)


def run_experiment(cfg: ExperimentConfig, defense: Optional[DefenseSpec] = None,
                   budgets=None, splits=None, target=None) -> ExperimentResult:
    """Train M (and M' if defended), extract a surrogate per budget, attack both.

    ``splits`` and ``target`` let a caller reuse the undefended pieces
    across several defenses.
    """
    defense = defense if defense is not None else cfg.defense
    budgets = list(cfg.budgets if budgets is None else budgets)
    if budgets and min(budgets) < cfg.split.aux_size:
        raise ConfigError(f"budget {min(budgets)} cannot cover the {cfg.split.aux_size} bootstrap queries")
    out = cfg.output_dir
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    schema = cfg.schema
    if splits is None:
        splits = split(load_dataset(cfg), cfg.split)
    if out is not None:
        src = str(cfg.csv_path() or f"synthetic:{json.dumps(cfg.dataset['synthetic'], sort_keys=True)}")
        write_manifest(out / "manifest.json", schema, src, cfg.split,
                       extra={"config_fingerprint": cfg.fingerprint(), "version": __version__,
                              "master_seed": cfg.master_seed})
    t0 = time.perf_counter()
    if target is None:
        target = train(splits.d_m, cfg.target)
    logger.info("target trained in %.1fs: test accuracy %.3f", time.perf_counter() - t0,
                accuracy(target, splits.d_n))
    attacked, tag = target, "target"
    if defense.kind != NONE:
        dcfg = defended_config(len(splits.d_m), cfg.target, defense)
        attacked, tag = train(splits.d_m, dcfg), "defended"
        if dcfg.dp is not None:
            logger.info("defended target: accounted epsilon %.3f", accounted_epsilon(len(splits.d_m), dcfg))
    if out is not None:
        save_model(target, out / "target.mlp")
        if attacked is not target:
            save_model(attacked, out / "defended.mlp")

    act = splits.d_a.samples.mean(axis=0)
    d_mem = splits.d_mem
    label = defense.label

    t0 = time.perf_counter()
    thr, res, acc, auc, pts = _mia(attacked, d_mem, cfg, schema, act, frozenset())
    _save_mia(out, tag, res, thr, d_mem.membership, pts)
    base_report = AttackReport(
        tag, None, label, fidelity(attacked, target, splits.d_n) if attacked is not target else 1.0, None,
        accuracy(attacked, splits.d_n), acc, auc, thr.tau, None, None, seconds=time.perf_counter() - t0, roc=pts)

    probe = TabularDataset(splits.d_n.samples, attacked.predict(splits.d_n.samples), schema)
    reports = []
    for budget in budgets:
        t0 = time.perf_counter()
        oracle = LabelOracle(attacked, schema, budget)
        stag = artifact_tag(tag, budget)
        hist = None if out is None else out / f"history_{stag}.jsonl"
        if hist is not None and hist.exists():
            hist.unlink()
        surrogate, state = extract(splits.d_a, oracle, cfg.extraction_for(budget), cfg.surrogate,
                                   probe=probe, history_path=hist)
        exclude = frozenset(fingerprints(state.d_s.samples))
        thr, res, acc, auc, pts = _mia(surrogate, d_mem, cfg, schema, act, exclude)
        _save_mia(out, stag, res, thr, d_mem.membership, pts)
        if out is not None:
            save_model(surrogate, out / f"{stag}.mlp")
        rep = AttackReport(
            "surrogate", budget, label, fidelity(surrogate, target, splits.d_n),
            fidelity(surrogate, attacked, splits.d_n) if attacked is not target else None,
            accuracy(surrogate, splits.d_n), acc, auc, thr.tau, oracle.spent, state.t,
            state.stop_reason, time.perf_counter() - t0, pts)
        logger.info("budget %d: fidelity %.3f, test acc %.3f, attack acc %.3f, auc %.3f (%.0fs)",
                    budget, rep.fidelity_to_target, rep.test_accuracy, acc, auc, rep.seconds)
        reports.append(rep)

    result = ExperimentResult(base_report, reports)
    if attacked is not target:
        result.defended_report = base_report
        thr, res, acc, auc, pts = _mia(target, d_mem, cfg, schema, act, frozenset())
        result.target_report = AttackReport("target", None, "undefended", 1.0, None,
                                            accuracy(target, splits.d_n), acc, auc, thr.tau, None, None, roc=pts)
    if out is not None:
        write_table2(out / f"table2_{tag}.csv", result)
        (out / f"report_{tag}.json").write_text(json.dumps(
            {"config_fingerprint": cfg.fingerprint(), "master_seed": cfg.master_seed,
             "seeds": {"split": cfg.split.seed, "target": cfg.target.seed, "surrogate": cfg.surrogate.seed,
                       "mia": cfg.mia.seed,
                       "extraction": {str(b): cfg.extraction_for(b).seed for b in budgets}},
             "target": result.target_report.row(),
             "defended": None if result.defended_report is None else result.defended_report.row(),
             "surrogates": [r.row() for r in reports]}, indent=2, default=_json_default))
    result.artifacts = {"splits": splits, "target": target, "attacked": attacked}
    return result


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


TABLE2_COLUMNS = ["model", "budget", "fidelity", "test_accuracy", "attack_accuracy", "attack_auc", "tau",
                  "queries_spent", "rounds", "stop_reason"]


def write_table2(path, result: ExperimentResult) -> None:
    """One row for the attacked target, one per surrogate budget."""
    rows = [result.defended_report or result.target_report] + list(result.surrogate_reports)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE2_COLUMNS)
        for r in rows:
            w.writerow([r.model, "" if r.budget is None else r.budget,
                        _fmt(r.fidelity_to_target), _fmt(r.test_accuracy), _fmt(r.attack_accuracy),
                        _fmt(r.attack_auc), _fmt(r.tau), "" if r.queries_spent is None else r.queries_spent,
                        "" if r.rounds is None else r.rounds, r.stop_reason])


TABLE3_COLUMNS = ["defense", "value", "fid_target_defended", "defended_test_acc", "defended_attack_acc",
                  "defended_auc", "fid_target_surrogate", "fid_defended_surrogate", "surrogate_test_acc",
                  "surrogate_attack_acc", "surrogate_auc"]


@dataclass
class DefenseRow:
    spec: DefenseSpec
    defended: AttackReport
    surrogate: AttackReport

    def cells(self) -> list:
        d, s = self.defended, self.surrogate
        value = spec_value(self.spec)
        return [self.spec.kind, "" if value is None else value, _fmt(d.fidelity_to_target),
                _fmt(d.test_accuracy), _fmt(d.attack_accuracy), _fmt(d.attack_auc),
                _fmt(s.fidelity_to_target), _fmt(s.fidelity_to_defended if s.fidelity_to_defended is not None
                                                 else s.fidelity_to_target),
                _fmt(s.test_accuracy), _fmt(s.attack_accuracy), _fmt(s.attack_auc)]


def defense_dirname(spec: DefenseSpec) -> str:
    value = spec_value(spec)
    return spec.kind if value is None else f"{spec.kind}_{value:g}"


def run_defense_grid(cfg: ExperimentConfig, specs, budget: Optional[int] = None) -> list:
    """Undefended baseline plus one M' per spec, each attacked at ``budget``."""
    budget = budget or cfg.defense_budget or cfg.budgets[-1]
    splits = split(load_dataset(cfg), cfg.split)
    target = train(splits.d_m, cfg.target)
    rows = []
    for spec in [DefenseSpec()] + [s for s in specs if s.kind != NONE]:
        sub = cfg if cfg.output_dir is None else replace(cfg, output_dir=cfg.output_dir / defense_dirname(spec))
        res = run_experiment(sub, spec, [budget], splits=splits, target=target)
        defended = res.defended_report or res.target_report
        rows.append(DefenseRow(spec, defended, res.surrogate_reports[0]))
        logger.info("%s: defended auc %.3f, surrogate auc %.3f", spec.label, defended.attack_auc,
                    res.surrogate_reports[0].attack_auc)
    if cfg.output_dir is not None:
        write_table3(cfg.output_dir / "table3.csv", rows)
    return rows


def write_table3(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE3_COLUMNS)
        for r in rows:
            w.writerow(r.cells())


def _fmt(x):
    return "" if x is None else f"{x:.4f}"
