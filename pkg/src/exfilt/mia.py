"""Label-only membership inference by decision-boundary distance.

The attacker owns the model being probed (the extracted surrogate), so any
number of label evaluations are free here; nothing in this module touches a
:class:`~exfilt.oracle.LabelOracle`.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DatasetSchema, clamp_to_domain, fingerprint
from .errors import CalibrationError, ConfigError

logger = logging.getLogger(__name__)

EXHAUSTIVE = "exhaustive"
LABELONLY_HSJ = "labelonly_hsj"
WHITEBOX_MARGIN = "whitebox_margin"
METHODS = (EXHAUSTIVE, LABELONLY_HSJ, WHITEBOX_MARGIN)

# Members are the rows whose boundary distance lies on this side of tau.
FAR = "far"
NEAR = "near"

EXHAUSTIVE_MAX_FEATURES = 20


@dataclass
class BoundaryEstimatorConfig:
    method: str = LABELONLY_HSJ
    max_model_evals: int = 5000
    hsj_init_trials: int = 100
    hsj_binsearch_tol: float = 1e-3
    hsj_grad_samples: int = 50
    integer_constrained: bool = False
    seed: int = 0

    def check(self, schema: DatasetSchema):
        if self.method not in METHODS:
            raise ConfigError(f"unknown boundary method {self.method!r}; pick one of {METHODS}")
        if self.method == EXHAUSTIVE and not (
                schema.is_binary and schema.n_features <= EXHAUSTIVE_MAX_FEATURES):
            raise ConfigError(
                f"exhaustive search needs an all-binary schema with at most "
                f"{EXHAUSTIVE_MAX_FEATURES} features (got {schema.n_features})")


@dataclass
class MiaThreshold:
    tau: float
    n_cal: int = 0
    calibration_distances: np.ndarray = field(default_factory=lambda: np.zeros(0))
    source: str = "manual"
    member_side: str = FAR
    method: Optional[str] = None
    seed: Optional[int] = None

    def sidecar(self) -> dict:
        return {"tau": self.tau, "n_cal": self.n_cal, "source": self.source,
                "member_side": self.member_side, "method": self.method, "seed": self.seed}


class _Budgeted:
    """Label function with an evaluation counter."""

    def __init__(self, model, limit):
        self.model = model
        self.limit = limit
        self.used = 0

    @property
    def left(self):
        return self.limit - self.used

    def __call__(self, X):
        X = np.atleast_2d(X)
        self.used += len(X)
        return np.asarray(self.model.predict(X))


def _sample_seed(seed: int, x: np.ndarray) -> np.random.Generator:
    # Keyed on the sample's content so results do not depend on row order.
    h = int.from_bytes(hashlib.blake2b(fingerprint(x), digest_size=8,
                                       key=str(seed).encode()).digest(), "little")
    return np.random.default_rng(h)


def boundary_distance(model, x, config: BoundaryEstimatorConfig, schema: DatasetSchema) -> float:
    """L2 norm of a label-changing perturbation of ``x`` (``inf`` if none found)."""
    config.check(schema)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if config.method == EXHAUSTIVE:
        return _exhaustive(model, x)
    rng = _sample_seed(config.seed, x)
    if config.method == WHITEBOX_MARGIN:
        return _whitebox_margin(model, x, config, schema, rng)
    return _hsj(model, x, config, schema, rng)


def boundary_distances(model, X, config: BoundaryEstimatorConfig, schema: DatasetSchema) -> np.ndarray:
    return np.array([boundary_distance(model, x, config, schema) for x in np.asarray(X, dtype=np.float64)])


def _exhaustive(model, x) -> float:
    """Smallest number of bit flips that changes the label, as sqrt(count)."""
    n = len(x)
    y0 = model.predict(x[None])[0]
    for k in range(1, n + 1):
        for chunk in _batched(itertools.combinations(range(n), k), 4096):
            cand = np.repeat(x[None], len(chunk), axis=0)
            rows = np.repeat(np.arange(len(chunk)), k)
            cols = np.array(chunk).reshape(-1)
            cand[rows, cols] = 1.0 - cand[rows, cols]
            if np.any(model.predict(cand) != y0):
                return math.sqrt(k)
    return math.inf


def _batched(it, size):
    buf = []
    for item in it:
        buf.append(item)
        if len(buf) == size:
            yield buf
            buf = []
    if buf:
        yield buf


def _projector(config, schema):
    lo, hi = schema.lower, schema.upper
    if config.integer_constrained:
        return lambda P: clamp_to_domain(P, schema)
    return lambda P: np.clip(P, lo, hi)


def _bisect(label, project, x, x_adv, y0, tol):
    """Walk the segment x -> x_adv down to the boundary; returns an adversarial point."""
    lo, hi = 0.0, 1.0
    span = np.linalg.norm(x_adv - x)
    best = project(x_adv[None])[0]
    while (hi - lo) * span > tol and label.left > 0:
        mid = 0.5 * (lo + hi)
        p = project((x + mid * (x_adv - x))[None])
        if label(p)[0] != y0:
            hi = mid
            best = p[0]
        else:
            lo = mid
    return best


def _prune(label, x, z, y0, rng):
    """Greedily undo coordinates of a lattice adversarial point while it stays adversarial."""
    improved = True
    while improved and label.left > 0:
        improved = False
        diff = np.flatnonzero(z != x)
        for j in rng.permutation(diff):
            if label.left <= 0:
                break
            trial = z.copy()
            trial[j] = x[j]
            if label(trial)[0] != y0:
                z = trial
                improved = True
    return z


def _hsj(model, x, config, schema, rng) -> float:
    """Decision-based boundary search in the spirit of HopSkipJump.

    Only predicted labels of the model are used.  Random far points seed the
    search, then each iteration estimates the boundary normal from
    ``hsj_grad_samples`` sign probes, steps along it with a geometric step
    search and bisects back toward ``x``.
    """
    label = _Budgeted(model, config.max_model_evals)
    project = _projector(config, schema)
    lo, hi = schema.lower, schema.upper
    d = len(x)
    y0 = label(x[None])[0]

    starts = project(rng.uniform(lo, hi, size=(config.hsj_init_trials, d)))
    adv = starts[label(starts) != y0]
    if len(adv) == 0:
        return math.inf
    x_adv = adv[np.argmin(np.linalg.norm(adv - x, axis=1))]
    x_b = _bisect(label, project, x, x_adv, y0, config.hsj_binsearch_tol)
    dist = np.linalg.norm(x_b - x)

    theta = 1.0 / (d * math.sqrt(d))
    t = 0
    while label.left > config.hsj_grad_samples + 2 and dist > 0:
        t += 1
        delta = math.sqrt(d) * theta * dist
        u = rng.standard_normal((config.hsj_grad_samples, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        probes = np.clip(x_b + delta * u, lo, hi)
        phi = np.where(label(project(probes)) != y0, 1.0, -1.0)
        if np.all(phi == phi[0]):
            v = phi[0] * u.mean(axis=0)
        else:
            v = ((phi - phi.mean())[:, None] * u).mean(axis=0)
        norm = np.linalg.norm(v)
        if norm == 0:
            break
        v /= norm

        step = dist / math.sqrt(t)
        cand = None
        while label.left > 1 and step > config.hsj_binsearch_tol * 1e-3:
            p = project(np.clip(x_b + step * v, lo, hi)[None])
            if label(p)[0] != y0:
                cand = p[0]
                break
            step /= 2.0
        if cand is None:
            break
        x_new = _bisect(label, project, x, cand, y0, config.hsj_binsearch_tol)
        new_dist = np.linalg.norm(x_new - x)
        if new_dist < dist:
            x_b, dist = x_new, new_dist

    if config.integer_constrained:
        x_b = _prune(label, x, x_b, y0, rng)
        dist = np.linalg.norm(x_b - x)
    return float(dist)


def _whitebox_margin(model, x, config, schema, rng) -> float:
    """First-order descent on the top-2 logit margin using the model's own gradients."""
    label = _Budgeted(model, config.max_model_evals)
    lo, hi = schema.lower, schema.upper
    y0 = label(x[None])[0]
    if config.integer_constrained:
        return _greedy_lattice(model, label, x, y0, schema, rng)

    project = _projector(config, schema)
    x_k = x.copy()
    found = None
    for _ in range(100):
        if label.left <= 1:
            break
        z = model.logits(x_k[None])[0]
        if label(x_k[None])[0] != y0:
            found = x_k
            break
        others = np.delete(np.arange(len(z)), y0)
        cot = np.zeros((len(others), len(z)))
        cot[:, y0] = 1.0
        cot[np.arange(len(others)), others] = -1.0
        grads = model.input_gradient(np.repeat(x_k[None], len(others), axis=0), cot)
        margins = z[y0] - z[others]
        norms = np.linalg.norm(grads, axis=1)
        ratio = np.where(norms > 0, np.abs(margins) / np.maximum(norms, 1e-300), np.inf)
        j = int(np.argmin(ratio))
        if not np.isfinite(ratio[j]):
            break
        g = grads[j]
        x_k = np.clip(x_k - 1.02 * (margins[j] + 1e-6) / (g @ g) * g, lo, hi)
    if found is None:
        return math.inf
    x_b = _bisect(label, project, x, found, y0, config.hsj_binsearch_tol)
    return float(np.linalg.norm(x_b - x))


def _greedy_lattice(model, label, x, y0, schema, rng) -> float:
    # Move one coordinate at a time to the neighbouring lattice value whose
    # linearized margin drop is largest, until the label flips; then prune.
    lo, hi = schema.lower, schema.upper
    z = x.copy()
    touched = np.zeros(len(x), dtype=bool)
    while label.left > 1:
        logits = model.logits(z[None])[0]
        if np.argmax(logits) != y0:
            break
        order = np.argsort(logits)[::-1]
        runner = order[0] if order[0] != y0 else order[1]
        cot = np.zeros((1, len(logits)))
        cot[0, y0], cot[0, runner] = 1.0, -1.0
        g = model.input_gradient(z[None], cot)[0]
        step = np.where(g > 0, -1.0, 1.0)
        gain = np.abs(g)
        allowed = ~touched & (z + step >= lo) & (z + step <= hi)
        if not allowed.any():
            return math.inf
        j = int(np.argmax(np.where(allowed, gain, -np.inf)))
        z[j] += step[j]
        touched[j] = True
    if label(z[None])[0] == y0:
        return math.inf
    z = _prune(label, x, z, y0, rng)
    return float(np.linalg.norm(z - x))


def random_calibration_samples(schema: DatasetSchema, n: int, rng, activation_rates=None,
                               exclude=frozenset(), max_rounds: int = 100) -> np.ndarray:
    """Draw ``n`` random in-domain points whose fingerprints are not in ``exclude``.

    Binary features are Bernoulli(p_j) with ``p_j`` taken from
    ``activation_rates`` (default 0.5); categorical features are uniform
    over their values and continuous ones uniform over [lo, hi].
    """
    p = np.full(schema.n_features, 0.5) if activation_rates is None else np.asarray(activation_rates)
    kinds = np.array([d.kind for d in schema.feature_domains])
    lo, hi = schema.lower, schema.upper
    out = []
    seen = set(exclude)
    for _ in range(max_rounds):
        batch = rng.uniform(lo, hi, size=(n, schema.n_features))
        cat = kinds == "categorical"
        batch[:, cat] = rng.integers(lo[cat].astype(int), hi[cat].astype(int) + 1, size=(n, cat.sum()))
        binary = kinds == "binary"
        batch[:, binary] = (rng.random((n, binary.sum())) < p[binary]).astype(np.float64)
        for row in batch:
            fp = fingerprint(row)
            if fp not in seen:
                seen.add(fp)
                out.append(row)
                if len(out) == n:
                    return np.array(out)
    raise CalibrationError(f"could only draw {len(out)} unseen calibration samples out of {n}")


def calibrate_threshold(model, schema: DatasetSchema, n_cal: int, config: BoundaryEstimatorConfig,
                        seed: int = 0, activation_rates=None, exclude=frozenset(),
                        member_side: str = FAR) -> MiaThreshold:
    """Unsupervised tau: the largest boundary distance over random feature-space points."""
    if n_cal < 1:
        raise ConfigError("n_cal must be at least 1")
    config.check(schema)
    rng = np.random.default_rng(seed)
    X = random_calibration_samples(schema, n_cal, rng, activation_rates, exclude)
    dists = boundary_distances(model, X, config, schema)
    finite = dists[np.isfinite(dists)]
    if len(finite) == 0:
        raise CalibrationError("no calibration sample reached a decision boundary")
    return MiaThreshold(float(finite.max()), n_cal, dists, "calibrated", member_side,
                        config.method, seed)


def decide(distances, threshold: MiaThreshold) -> np.ndarray:
    """Membership call per distance; ``tau`` itself counts as a member.

    Infinite distances are the largest possible value, so they are members
    on the far side and non-members on the near side.
    """
    d = np.asarray(distances, dtype=np.float64)
    if threshold.member_side == NEAR:
        return (d <= threshold.tau).astype(np.int64)
    if threshold.member_side == FAR:
        return (d >= threshold.tau).astype(np.int64)
    raise ConfigError(f"member_side must be {FAR!r} or {NEAR!r}")


@dataclass
class MembershipResult:
    predictions: np.ndarray
    distances: np.ndarray


def infer_membership(model, d_mem, threshold: MiaThreshold,
                     config: BoundaryEstimatorConfig) -> MembershipResult:
    dists = boundary_distances(model, d_mem.samples, config, d_mem.schema)
    return MembershipResult(decide(dists, threshold), dists)


def write_results(path, result: MembershipResult, truths=None) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_index", "true_member", "distance", "predicted_member"])
        for i, (p, d) in enumerate(zip(result.predictions, result.distances)):
            truth = "" if truths is None else int(truths[i])
            w.writerow([i, truth, repr(float(d)), int(p)])


def read_results(path):
    """Inverse of :func:`write_results`: ``(distances, predictions, truths or None)``."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    dists = np.array([float(r["distance"]) for r in rows])
    preds = np.array([int(r["predicted_member"]) for r in rows], dtype=np.int64)
    truths = None
    if rows and rows[0]["true_member"] != "":
        truths = np.array([int(r["true_member"]) for r in rows], dtype=np.int64)
    return dists, preds, truths


def write_sidecar(path, threshold: MiaThreshold) -> None:
    Path(path).write_text(json.dumps(threshold.sidecar(), indent=2, sort_keys=True))
