"""Experiment configuration: one JSON document, dot-path overrides, stage seeds."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import DatasetSchema, SplitSpec
from .defenses import DefenseSpec, spec_from
from .errors import ConfigError
from .extraction import ExtractionConfig
from .mia import FAR, BoundaryEstimatorConfig
from .nn import DpConfig, TrainConfig
from .seeding import derive_seed

# Location-like desk-scale defaults.
DEFAULTS = {
    "dataset": {"synthetic": {"n_features": 446, "n_classes": 30, "n_rows": 5010, "class_sep": 0.16}},
    "split": {"train_size": 1600, "aux_size": 150, "neutral_size": 1000,
              "mem_members": 100, "mem_nonmembers": 100},
    "target": {"epochs": 200, "learning_rate": 0.001, "weight_decay": 1e-7, "batch_size": 100},
    "surrogate": None,
    "defense": {"kind": "none"},
    "defenses": [],
    "extraction": {"alpha": 4, "rho": 0.1, "B": 1000, "gamma1": 0.5, "gamma2": 0.5},
    "rounds": None,
    "mia": {"method": "labelonly_hsj", "n_cal": 100, "member_side": FAR},
    "budgets": [1000, 10000],
    "defense_budget": None,
    "output_dir": None,
    "master_seed": 0,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "dataset":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` in place; ``value`` is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = doc
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
        if not isinstance(node, dict):
            raise ConfigError(f"override {path!r}: {k!r} is not a section")
    node[keys[-1]] = _parse_value(raw)
    return doc


def _build(cls, d: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


@dataclass
class ExperimentConfig:
    raw: dict
    schema: Optional[DatasetSchema]
    split: SplitSpec
    target: TrainConfig
    surrogate: TrainConfig
    defense: DefenseSpec
    defenses: list
    extraction: ExtractionConfig
    rounds: Optional[int]
    mia: BoundaryEstimatorConfig
    n_cal: int
    member_side: str
    budgets: list
    defense_budget: Optional[int]
    output_dir: Optional[Path]
    master_seed: int
    base_dir: Path = field(default_factory=Path.cwd)

    def seed(self, *stage) -> int:
        return derive_seed(self.master_seed, *stage)

    def fingerprint(self) -> str:
        """Hash of the normalized document, minus where outputs go."""
        doc = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    def csv_path(self) -> Optional[Path]:
        src = self.dataset.get("csv")
        if src is None:
            return None
        p = Path(src)
        return p if p.is_absolute() else self.base_dir / p

    def extraction_for(self, budget: int) -> ExtractionConfig:
        """Extraction settings for one budget.

        With ``rounds`` set, B is scaled so the post-bootstrap budget splits
        into that many rounds, and alpha grows so the pool still covers B.
        """
        ext = self.extraction
        if self.rounds:
            per_round = max(1, -(-(budget - self.split.aux_size) // self.rounds))
            B = max(ext.B, -(-per_round * 1.0 // (ext.gamma1 * ext.gamma2)))
            B = int(B)
            alpha = max(ext.alpha, -(-B // max(1, self.split.aux_size)))
            ext = _replace(ext, B=B, alpha=alpha)
        return _replace(ext, seed=self.seed("extraction", budget))


def _replace(obj, **kw):
    from dataclasses import replace
    return replace(obj, **kw)


def _train_config(d: dict, where: str, seed: int) -> TrainConfig:
    d = dict(d)
    dp = d.pop("dp", None)
    cfg = _build(TrainConfig, {**d, "seed": d.get("seed", seed)}, where)
    if dp is not None:
        cfg.dp = _build(DpConfig, dp, f"{where}.dp")
    cfg.validate()
    return cfg


def _defense(d: dict) -> DefenseSpec:
    d = dict(d)
    kind = d.pop("kind", "none")
    value = d.pop("value", None)
    if d:
        raise ConfigError(f"defense: unknown keys {sorted(d)}")
    return spec_from(kind, value)


def build(doc: dict, base_dir=None) -> ExperimentConfig:
    doc = _merge(DEFAULTS, doc)
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    master = int(doc["master_seed"])

    ds = doc["dataset"]
    schema = None
    if "csv" in ds:
        if "schema" not in ds:
            raise ConfigError("dataset.csv needs a dataset.schema")
        schema = DatasetSchema.from_dict(ds["schema"])
        p = Path(ds["csv"])
        if not (p if p.is_absolute() else base_dir / p).exists():
            raise ConfigError(f"dataset file {ds['csv']} does not exist")
    elif "synthetic" in ds:
        syn = ds["synthetic"]
        schema = DatasetSchema.binary(int(syn["n_features"]), int(syn["n_classes"]))
    else:
        raise ConfigError("dataset needs either 'csv' or 'synthetic'")

    split = _build(SplitSpec, {**doc["split"], "seed": doc["split"].get("seed", derive_seed(master, "split"))},
                   "split")
    target = _train_config(doc["target"], "target", derive_seed(master, "target"))
    sur_doc = doc["surrogate"] if doc["surrogate"] is not None else {
        k: v for k, v in doc["target"].items() if k not in ("dp", "dropout_p", "l2_lambda", "seed")}
    surrogate = _train_config(sur_doc, "surrogate", derive_seed(master, "surrogate"))
    extraction = _build(ExtractionConfig, doc["extraction"], "extraction")
    mia_doc = dict(doc["mia"])
    n_cal = int(mia_doc.pop("n_cal", 100))
    member_side = mia_doc.pop("member_side", FAR)
    mia = _build(BoundaryEstimatorConfig, {**mia_doc, "seed": mia_doc.get("seed", derive_seed(master, "mia"))},
                 "mia")
    mia.check(schema)
    budgets = [int(b) for b in doc["budgets"]]
    if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ConfigError(f"budgets must be strictly increasing, got {budgets}")
    out = doc.get("output_dir")
    return ExperimentConfig(
        raw=doc, schema=schema, split=split, target=target, surrogate=surrogate,
        defense=_defense(doc["defense"]), defenses=[_defense(d) for d in doc["defenses"]],
        extraction=extraction, rounds=doc["rounds"], mia=mia, n_cal=n_cal, member_side=member_side,
        budgets=budgets, defense_budget=doc["defense_budget"],
        output_dir=Path(out) if out else None, master_seed=master, base_dir=base_dir)


def load(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for o in overrides:
        apply_override(doc, o)
    return build(doc, base_dir=path.parent)


def to_dict(cfg: ExperimentConfig) -> dict:
    return {"raw": cfg.raw, "split": asdict(cfg.split), "target": asdict(cfg.target),
            "surrogate": asdict(cfg.surrogate), "mia": asdict(cfg.mia)}
