"""Active-sampling surrogate extraction against a label-only oracle.

One round: perturb alpha copies of the auxiliary set into a candidate pool,
keep the B most uncertain candidates, spread them over k-means clusters of
their entropy gradients, keep the ones nearest the worst-fit training rows,
buy labels for those and retrain the surrogate.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import TabularDataset, clamp_to_domain, concat, fingerprints
from .errors import BudgetExhausted, ConfigError, InvalidQuery, TransportError
from .nn import MlpClassifier, TrainConfig, predictive_entropy, train
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class ExtractionConfig:
    alpha: int = 4
    rho: float = 0.1
    B: int = 1000
    gamma1: float = 0.5
    gamma2: float = 0.5
    k_clusters: Optional[int] = None  # default n_c
    k_loss: Optional[int] = None  # default ceil(gamma1 * gamma2 * B)
    max_queries: Optional[int] = None
    fidelity_target: Optional[float] = None
    max_iterations: Optional[int] = None
    seed: int = 0
    # Std of the additive noise on non-binary features; a scalar, a per-feature
    # vector, or None for the per-feature std of the auxiliary data.
    continuous_noise: Optional[object] = None
    warm_start: bool = False
    retries: int = 16

    @property
    def n_grad(self) -> int:
        return math.ceil(self.gamma1 * self.B)

    @property
    def n_round(self) -> int:
        return math.ceil(self.gamma1 * self.gamma2 * self.B)

    def validate(self, n_classes: int):
        if self.alpha < 1 or self.B < 1:
            raise ConfigError("alpha and B must be positive")
        if not 0 < self.rho <= 1:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")
        if not (0 < self.gamma1 <= 1 and 0 < self.gamma2 <= 1):
            raise ConfigError("gamma1 and gamma2 must lie in (0, 1]")
        if self.gamma1 * self.B < self.clusters(n_classes):
            raise ConfigError("gamma1 * B must be at least k_clusters")
        if self.gamma1 * self.gamma2 * self.B < 1:
            raise ConfigError("gamma1 * gamma2 * B must be at least 1")

    def clusters(self, n_classes: int) -> int:
        return self.k_clusters or n_classes

    def anchors(self) -> int:
        return self.k_loss or self.n_round


@dataclass
class ExtractionState:
    surrogate: MlpClassifier
    d_s: TabularDataset
    t: int = 0
    queries_spent: int = 0
    seen_hashes: set = field(default_factory=set, repr=False)
    history: list = field(default_factory=list)
    stop_reason: str = ""


def _round_config(train_config: TrainConfig, t: int) -> TrainConfig:
    return replace(train_config, seed=derive_seed(train_config.seed, "surrogate", t))


def bootstrap(d_a: TabularDataset, oracle, train_config: TrainConfig) -> ExtractionState:
    """Label D_A through the oracle (charged) and fit the first surrogate."""
    if len(d_a) == 0:
        raise ConfigError("cannot bootstrap from an empty auxiliary set")
    X = d_a.samples
    fps = fingerprints(X)
    keep, seen = [], set()
    for i, fp in enumerate(fps):
        if fp not in seen:
            seen.add(fp)
            keep.append(i)
    X = X[keep]
    labels = oracle.query(X)
    d_s = TabularDataset(X, labels, d_a.schema)
    model = train(d_s, _round_config(train_config, 0))
    state = ExtractionState(model, d_s, 0, len(X), seen)
    state.history.append({"t": 0, "pool": 0, "dropped": 0, "entropy": 0, "grad": 0,
                          "queried": len(X), "spent": len(X), "d_s": len(X)})
    return state


def _noise_scale(config: ExtractionConfig, d_a: TabularDataset) -> np.ndarray:
    if config.continuous_noise is None:
        return d_a.samples.std(axis=0)
    return np.broadcast_to(np.asarray(config.continuous_noise, dtype=np.float64),
                           (d_a.schema.n_features,))


def _perturb(src: np.ndarray, config: ExtractionConfig, schema, sigma, rng) -> np.ndarray:
    hit = rng.random(src.shape) < config.rho
    kinds = np.array([d.kind for d in schema.feature_domains])
    out = src.copy()
    binary = kinds == "binary"
    out[:, binary] = np.where(hit[:, binary], 1.0 - src[:, binary], src[:, binary])
    other = ~binary
    if other.any():
        noise = rng.standard_normal((len(src), other.sum())) * sigma[other]
        out[:, other] = np.where(hit[:, other], src[:, other] + noise, src[:, other])
        out = clamp_to_domain(out, schema)
    return out


def build_query_pool(state: ExtractionState, d_a: TabularDataset, config: ExtractionConfig,
                     t: Optional[int] = None):
    """alpha perturbed copies of D_A, unique and unseen.

    Rows that collide with an earlier pool row or with anything already in
    the surrogate's training set get a fresh mask, up to ``config.retries``
    times, and are dropped after that.  Returns ``(pool, dropped)``.
    """
    t = state.t + 1 if t is None else t
    rng = np.random.default_rng([config.seed, t])
    schema = d_a.schema
    sigma = _noise_scale(config, d_a)
    src = np.tile(d_a.samples, (config.alpha, 1))
    pool = _perturb(src, config, schema, sigma, rng)
    accepted = np.zeros(len(pool), dtype=bool)
    taken = set(state.seen_hashes)
    pending = np.arange(len(pool))
    for attempt in range(config.retries + 1):
        if attempt:
            pool[pending] = _perturb(src[pending], config, schema, sigma, rng)
        retry = []
        for i, fp in zip(pending, fingerprints(pool[pending])):
            if fp in taken:
                retry.append(i)
            else:
                taken.add(fp)
                accepted[i] = True
        pending = np.array(retry, dtype=np.int64)
        if len(pending) == 0:
            break
    dropped = int((~accepted).sum())
    if dropped:
        logger.debug("round %d: dropped %d duplicate pool rows", t, dropped)
    return TabularDataset(pool[accepted], np.full(accepted.sum(), -1), schema), dropped


def entropy_select(pool_X, surrogate: MlpClassifier, B: int) -> np.ndarray:
    """Indices of the B highest-entropy rows, most uncertain first, ties by index."""
    pool_X = np.asarray(pool_X)
    if len(pool_X) == 0:
        return np.zeros(0, dtype=np.int64)
    ent = predictive_entropy(surrogate.predict_proba(pool_X))
    order = np.argsort(-ent, kind="stable")
    return order[:B]


def entropy_input_gradient(surrogate: MlpClassifier, X) -> np.ndarray:
    """d H(softmax(logits(x))) / dx per row."""
    p = surrogate.predict_proba(X)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(p > 0, np.log(p), 0.0)
    H = -(p * logp).sum(axis=1, keepdims=True)
    return surrogate.input_gradient(X, -p * (logp + H))


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignment: np.ndarray
    objective: list  # after each assignment step
    iterations: int


def kmeans(points, k: int, seed, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; stops when assignments repeat.

    Empty clusters keep their previous center.  Ties in assignment go to the
    lowest cluster index.
    """
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    sq = (X * X).sum(axis=1)

    def sqdist(C):
        return np.maximum(sq[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :], 0.0)

    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = sqdist(centers[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else int(np.argmax(closest))
        centers[c] = X[idx]
        closest = np.minimum(closest, sqdist(centers[c:c + 1])[:, 0])

    assign = None
    objective = []
    it = 0
    for it in range(1, max_iter + 1):
        D = sqdist(centers)
        new = np.argmin(D, axis=1)
        objective.append(float(D[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
    return KMeansResult(centers, assign, objective, it)


def round_robin_by_cluster(points, result: KMeansResult, n_select: int) -> np.ndarray:
    """Take the nearest-to-center point of each cluster in turn until ``n_select``."""
    X = np.asarray(points, dtype=np.float64)
    queues = []
    for c in range(len(result.centers)):
        members = np.flatnonzero(result.assignment == c)
        d = ((X[members] - result.centers[c]) ** 2).sum(axis=1)
        queues.append(list(members[np.argsort(d, kind="stable")]))
    picked = []
    n_select = min(n_select, len(X))
    depth = 0
    while len(picked) < n_select:
        for q in queues:
            if depth < len(q):
                picked.append(q[depth])
                if len(picked) == n_select:
                    break
        depth += 1
    return np.array(picked, dtype=np.int64)


def gradient_cluster_select(q_X, surrogate: MlpClassifier, gamma1: float, B: int,
                            k_clusters: int, seed) -> np.ndarray:
    """Positions (into ``q_X``) of a cluster-balanced subset of size ceil(gamma1 * B).

    ``q_X`` is expected in entropy order, which is also the fallback order
    when there are fewer rows than clusters.
    """
    n_select = min(math.ceil(gamma1 * B), len(q_X))
    if len(q_X) < k_clusters:
        logger.info("only %d candidates for %d clusters; selecting by entropy", len(q_X), k_clusters)
        return np.arange(n_select)
    grads = entropy_input_gradient(surrogate, q_X)
    result = kmeans(grads, k_clusters, seed)
    return round_robin_by_cluster(grads, result, n_select)


def sample_losses(surrogate: MlpClassifier, d_s: TabularDataset) -> np.ndarray:
    """Cross-entropy of the surrogate against the stored oracle labels."""
    p = surrogate.predict_proba(d_s.samples)[np.arange(len(d_s)), d_s.labels]
    with np.errstate(divide="ignore"):
        return -np.log(p)


def loss_proximity_select(q_X, d_s: TabularDataset, surrogate: MlpClassifier, n_select: int,
                          k_loss: int) -> np.ndarray:
    """Positions of the ``n_select`` rows of ``q_X`` closest (summed squared L2) to
    the ``k_loss`` worst-fit rows of ``d_s``."""
    q_X = np.asarray(q_X, dtype=np.float64)
    if len(d_s) == 0:
        raise ConfigError("loss sampling needs a non-empty surrogate training set")
    losses = sample_losses(surrogate, d_s)
    if not np.any(losses > 0):
        logger.info("surrogate fits its training set exactly; anchors default to the first rows")
    anchors = d_s.samples[np.argsort(-losses, kind="stable")[:k_loss]]
    a_sum = anchors.sum(axis=0)
    score = len(anchors) * (q_X * q_X).sum(axis=1) - 2.0 * q_X @ a_sum + (anchors * anchors).sum()
    return np.argsort(score, kind="stable")[:min(n_select, len(q_X))]


def fidelity_on(model, probe: TabularDataset) -> float:
    return float(np.mean(model.predict(probe.samples) == probe.labels))


def extraction_round(state: ExtractionState, d_a: TabularDataset, oracle, config: ExtractionConfig,
                     train_config: TrainConfig, n_query: int) -> dict:
    """Run one select-query-retrain round in place and return its history record."""
    t = state.t + 1
    schema = d_a.schema
    pool, dropped = build_query_pool(state, d_a, config, t)
    surrogate = state.surrogate
    ent_idx = entropy_select(pool.samples, surrogate, config.B)
    q_ent = pool.samples[ent_idx]
    grad_pos = gradient_cluster_select(q_ent, surrogate, config.gamma1, config.B,
                                       config.clusters(schema.n_classes), derive_seed(config.seed, "kmeans", t))
    q_grad = q_ent[grad_pos]
    loss_pos = loss_proximity_select(q_grad, state.d_s, surrogate, n_query, config.anchors())
    q_loss = q_grad[loss_pos]
    record = {"t": t, "pool": len(pool), "dropped": dropped, "entropy": len(q_ent),
              "grad": len(q_grad), "queried": 0, "spent": state.queries_spent, "d_s": len(state.d_s)}
    if len(q_loss) == 0:
        return record
    labels = oracle.query(q_loss)
    state.queries_spent += len(q_loss)
    state.seen_hashes.update(fingerprints(q_loss))
    state.d_s = concat([state.d_s, TabularDataset(q_loss, labels, schema)], schema)
    state.t = t
    init = surrogate if config.warm_start else None
    state.surrogate = train(state.d_s, _round_config(train_config, t), init=init)
    record.update(queried=len(q_loss), spent=state.queries_spent, d_s=len(state.d_s))
    return record


def extract(d_a: TabularDataset, oracle, config: ExtractionConfig, train_config: TrainConfig,
            probe: Optional[TabularDataset] = None, state: Optional[ExtractionState] = None,
            history_path=None):
    """Bootstrap (unless ``state`` is given) and iterate rounds until a stop condition.

    ``probe`` is a neutral set labelled by the target outside the attack
    budget; it is only used to log fidelity and to honour
    ``config.fidelity_target``.  Stops when the budget (oracle's or
    ``config.max_queries``) is used up, the fidelity target is met, the
    iteration cap is reached, or a round finds nothing new to ask.  Oracle
    failures mid-run end the loop with the last good surrogate.
    """
    config.validate(d_a.schema.n_classes)
    if state is None:
        state = bootstrap(d_a, oracle, train_config)
        if probe is not None:
            state.history[-1]["fidelity"] = fidelity_on(state.surrogate, probe)
        _log_history(history_path, state.history[-1])
    cap = math.inf if config.max_queries is None else config.max_queries
    rounds = 0
    while True:
        left = min(oracle.remaining(), cap - state.queries_spent)
        if left <= 0:
            state.stop_reason = "budget"
            break
        if config.max_iterations is not None and rounds >= config.max_iterations:
            state.stop_reason = "max_iterations"
            break
        if (config.fidelity_target is not None and probe is not None
                and state.history[-1].get("fidelity", 0.0) >= config.fidelity_target):
            state.stop_reason = "fidelity_target"
            break
        n_query = int(min(config.n_round, left))
        try:
            record = extraction_round(state, d_a, oracle, config, train_config, n_query)
        except (BudgetExhausted, TransportError, InvalidQuery) as exc:
            logger.warning("oracle failure ends extraction at round %d: %s", state.t + 1, exc)
            state.stop_reason = f"oracle_error: {exc}"
            break
        rounds += 1
        if record["queried"] == 0:
            logger.info("round %d produced no new queries; stopping", record["t"])
            state.stop_reason = "exhausted_pool"
            state.history.append(record)
            _log_history(history_path, record)
            break
        if probe is not None:
            record["fidelity"] = fidelity_on(state.surrogate, probe)
        state.history.append(record)
        _log_history(history_path, record)
        logger.info("round %d: queried %d, spent %d, |D_S| %d%s", record["t"], record["queried"],
                    record["spent"], record["d_s"],
                    f", fidelity {record['fidelity']:.3f}" if "fidelity" in record else "")
    return state.surrogate, state


def _log_history(path, record):
    if path is None:
        return
    with Path(path).open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_history(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]

