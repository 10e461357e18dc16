import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from exfilt.data import DatasetSchema, TabularDataset, fingerprints, synth_generate
from exfilt.errors import ConfigError
from exfilt.extraction import (ExtractionConfig, ExtractionState, bootstrap, build_query_pool, entropy_select,
                               entropy_input_gradient, extract, fidelity_on, gradient_cluster_select, kmeans,
                               loss_proximity_select, read_history, round_robin_by_cluster, sample_losses)
from exfilt.nn import MlpClassifier, TrainConfig, predictive_entropy
from exfilt.oracle import LabelOracle

TINY = TrainConfig(epochs=3, hidden=8, batch_size=32)


class Constant:
    def __init__(self, label):
        self.label = label

    def predict(self, X):
        return np.full(len(np.atleast_2d(X)), self.label)


def small_task(n_features=16, n_classes=3, seed=0):
    schema = DatasetSchema.binary(n_features, n_classes)
    ds = synth_generate(schema, 300, 0.6, seed)
    target = MlpClassifier.init(n_features, n_classes, 6, rng=seed)
    return schema, ds.subset(np.arange(20)), ds.subset(np.arange(100, 300)), target


def state_for(d_a):
    return ExtractionState(MlpClassifier.init(d_a.schema.n_features, d_a.schema.n_classes, 4, rng=0),
                           d_a, 0, len(d_a), set(fingerprints(d_a.samples)))


def test_bootstrap_charges_d_a():
    schema, d_a, _, target = small_task()
    oracle = LabelOracle(target, schema, budget=100)
    state = bootstrap(d_a, oracle, TINY)
    assert oracle.spent == len(d_a) == state.queries_spent and state.t == 0
    assert np.array_equal(state.d_s.labels, target.predict(d_a.samples))


def test_bootstrap_location_size():
    schema = DatasetSchema.binary(446, 30)
    d_a = synth_generate(schema, 150, 0.16, seed=1)
    oracle = LabelOracle(MlpClassifier.init(446, 30, 4, rng=0), schema, budget=1000)
    bootstrap(d_a, oracle, TrainConfig(epochs=1, hidden=4))
    assert oracle.spent == 150


def test_bootstrap_refuses_empty():
    schema = DatasetSchema.binary(3, 2)
    with pytest.raises(ConfigError):
        bootstrap(TabularDataset.empty(schema), LabelOracle(Constant(0), schema), TINY)


def test_constant_target_bootstrap():
    schema, d_a, _, _ = small_task()
    state = bootstrap(d_a, LabelOracle(Constant(2), schema), TrainConfig(epochs=60, hidden=8))
    assert np.all(state.surrogate.predict(d_a.samples) == 2)


def test_pool_identity_limit_drops_everything():
    schema, d_a, _, _ = small_task()
    pool, dropped = build_query_pool(state_for(d_a), d_a, ExtractionConfig(rho=1e-9, alpha=3), 1)
    assert len(pool) == 0 and dropped == 3 * len(d_a)


def test_pool_full_flip_is_complement():
    schema, d_a, _, _ = small_task()
    state = state_for(d_a)
    pool, dropped = build_query_pool(state, d_a, ExtractionConfig(rho=1.0, alpha=1), 1)
    assert dropped == 0
    np.testing.assert_array_equal(pool.samples, 1.0 - d_a.samples)


def test_pool_flip_count_moments():
    schema = DatasetSchema.binary(446, 2)
    rng = np.random.default_rng(0)
    d_a = TabularDataset(rng.integers(0, 2, (1000, 446)), np.zeros(1000, dtype=int), schema)
    pool, _ = build_query_pool(state_for(d_a), d_a, ExtractionConfig(rho=0.1, alpha=1), 1)
    flips = (pool.samples != d_a.samples).sum(axis=1)
    assert abs(flips.mean() - 44.6) <= 3 * math.sqrt(446 * 0.1 * 0.9)


@given(st.integers(1, 5), st.floats(0.02, 0.6), st.integers(0, 1000))
def test_pool_rows_unique_unseen_and_in_domain(alpha, rho, seed):
    schema, d_a, _, _ = small_task(n_features=6)
    state = state_for(d_a)
    pool, dropped = build_query_pool(state, d_a, ExtractionConfig(alpha=alpha, rho=rho, seed=seed), 1)
    fps = fingerprints(pool.samples)
    assert len(set(fps)) == len(fps)
    assert not set(fps) & state.seen_hashes
    assert len(pool) + dropped == alpha * len(d_a)
    assert schema.contains(pool.samples).all()


def test_pool_is_deterministic():
    schema, d_a, _, _ = small_task()
    cfg = ExtractionConfig(seed=5)
    a, _ = build_query_pool(state_for(d_a), d_a, cfg, 2)
    b, _ = build_query_pool(state_for(d_a), d_a, cfg, 2)
    c, _ = build_query_pool(state_for(d_a), d_a, cfg, 3)
    assert np.array_equal(a.samples, b.samples) and not np.array_equal(a.samples, c.samples)


class FixedProbs:
    def __init__(self, probs):
        self.probs = np.asarray(probs)

    def predict_proba(self, X):
        return self.probs[np.asarray(X)[:, 0].astype(int)]


def test_entropy_select_picks_most_uncertain():
    p = np.array([[1.0, 0.0], [0.5, 0.5], [0.9, 0.1]])
    assert predictive_entropy(p)[1] == pytest.approx(0.6931, abs=1e-4)
    idx = entropy_select(np.arange(3)[:, None], FixedProbs(p), 1)
    assert idx.tolist() == [1]
    assert entropy_select(np.arange(3)[:, None], FixedProbs(p), 10).tolist() == [1, 2, 0]
    tied = np.array([[0.5, 0.5]] * 3)
    assert entropy_select(np.arange(3)[:, None], FixedProbs(tied), 2).tolist() == [0, 1]


def test_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    m = MlpClassifier.init(5, 4, 6, rng=rng)
    m.w1 *= 3
    X = rng.normal(size=(3, 5))
    g = entropy_input_gradient(m, X)
    h = 1e-6
    for i in range(3):
        for j in range(5):
            e = np.zeros(5)
            e[j] = h
            num = (predictive_entropy(m.predict_proba(X[i] + e)) - predictive_entropy(m.predict_proba(X[i] - e)))
            assert num[0] / (2 * h) == pytest.approx(g[i, j], rel=1e-5, abs=1e-9)


def test_kmeans_two_obvious_clusters():
    pts = np.array([[0, 0], [0, 1], [10, 10], [10, 11]], dtype=float)
    res = kmeans(pts, 2, seed=0)
    centers = sorted(map(tuple, res.centers))
    np.testing.assert_allclose(centers, [(0, 0.5), (10, 10.5)])


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_kmeans_objective_never_increases(seed, k):
    pts = np.random.default_rng(seed).normal(size=(40, 3))
    obj = kmeans(pts, k, seed).objective
    assert all(b <= a + 1e-9 for a, b in zip(obj, obj[1:]))


def test_single_cluster_takes_points_nearest_mean():
    pts = np.random.default_rng(1).normal(size=(30, 2))
    res = kmeans(pts, 1, 0)
    picked = round_robin_by_cluster(pts, res, 5)
    d = ((pts - pts.mean(0)) ** 2).sum(1)
    assert set(picked.tolist()) == set(np.argsort(d)[:5].tolist())


def test_identical_gradients_select_lowest_indices():
    q = np.zeros((10, 4))
    m = MlpClassifier.init(4, 3, 5, rng=0)
    picked = gradient_cluster_select(q, m, 0.5, 8, 3, seed=0)
    assert sorted(picked.tolist()) == [0, 1, 2, 3]


def test_round_robin_covers_all_clusters():
    pts = np.array([[0, 0], [0, 0.1], [0, 0.2], [5, 5], [9, 0]], dtype=float)
    res = kmeans(pts, 3, 0)
    picked = round_robin_by_cluster(pts, res, 3)
    assert len({int(res.assignment[i]) for i in picked}) == 3


def test_too_few_rows_for_clusters_falls_back_to_entropy_order():
    m = MlpClassifier.init(4, 3, 5, rng=0)
    q = np.random.default_rng(0).random((2, 4))
    assert gradient_cluster_select(q, m, 0.5, 8, 3, seed=0).tolist() == [0, 1]


def test_loss_value_and_proximity():
    schema = DatasetSchema.binary(1, 2)
    d_s = TabularDataset(np.array([[0.0]]), np.array([0]), schema)
    m = MlpClassifier(np.zeros((1, 1)), np.zeros(1), np.zeros((2, 1)), np.array([np.log(9.0), 0.0]))
    assert sample_losses(m, d_s)[0] == pytest.approx(-np.log(0.9), abs=1e-12)
    assert sample_losses(m, d_s)[0] == pytest.approx(0.1054, abs=1e-4)
    q = np.array([[3.0], [1.0], [2.0]])
    assert loss_proximity_select(q, d_s, m, 1, 1).tolist() == [1]


def test_perfect_fit_anchors_default_to_first_rows():
    schema = DatasetSchema.binary(1, 2)
    d_s = TabularDataset(np.array([[0.0], [1.0]]), np.array([0, 0]), schema)
    m = MlpClassifier(np.zeros((1, 1)), np.zeros(1), np.zeros((2, 1)), np.array([1e4, 0.0]))
    assert np.all(sample_losses(m, d_s) == 0)
    # Anchor is row 0, so the query nearest 0 wins.
    assert loss_proximity_select(np.array([[1.0], [0.0]]), d_s, m, 1, 1).tolist() == [1]


def test_loss_select_rejects_empty_pool():
    schema = DatasetSchema.binary(1, 2)
    with pytest.raises(ConfigError):
        loss_proximity_select(np.zeros((1, 1)), TabularDataset.empty(schema), MlpClassifier.init(1, 2, 1), 1, 1)


def test_default_budget_arithmetic():
    cfg = ExtractionConfig()
    assert cfg.n_round == 250 and (10_150 - 150) // cfg.n_round == 40


def _accounting_run(d_a, target, schema, cfg, budget):
    oracle = LabelOracle(target, schema, budget=budget)
    _, state = extract(d_a, oracle, cfg, TrainConfig(epochs=1, hidden=4, batch_size=64))
    return oracle, state


def test_accounting_and_dedup_invariants():
    schema, d_a, _, target = small_task()
    cfg = ExtractionConfig(alpha=4, B=40, seed=1)
    oracle, state = _accounting_run(d_a, target, schema, cfg, 20 + 5 * 10)
    rounds = [h for h in state.history if h["t"] > 0]
    assert len(rounds) == 5
    assert oracle.spent == len(d_a) + 5 * cfg.n_round == state.queries_spent == len(state.d_s)
    fps = fingerprints(state.d_s.samples)
    assert len(set(fps)) == len(fps)
    assert schema.contains(state.d_s.samples).all()
    for h in rounds:
        assert h["pool"] >= h["entropy"] >= h["grad"] >= h["queried"]


def test_partial_final_round_spends_budget_exactly():
    schema, d_a, _, target = small_task()
    oracle, state = _accounting_run(d_a, target, schema, ExtractionConfig(B=40, seed=2), 20 + 10 + 4)
    assert oracle.spent == 34 and state.history[-1]["queried"] == 4 and state.stop_reason == "budget"


def test_max_iterations_and_fidelity_target(tmp_path):
    schema, d_a, d_n, target = small_task()
    probe = TabularDataset(d_n.samples, target.predict(d_n.samples), schema)
    oracle = LabelOracle(target, schema, budget=10_000)
    _, st1 = extract(d_a, oracle, ExtractionConfig(B=40, max_iterations=2), TINY, probe=probe,
                     history_path=tmp_path / "h.jsonl")
    assert st1.t == 2 and st1.stop_reason == "max_iterations"
    assert all(0.0 <= r["fidelity"] <= 1.0 for r in st1.history)
    assert [r["t"] for r in read_history(tmp_path / "h.jsonl")] == [0, 1, 2]
    const = Constant(1)
    _, st2 = extract(d_a, LabelOracle(const, schema), ExtractionConfig(B=40, fidelity_target=1.0),
                     TrainConfig(epochs=60, hidden=8),
                     probe=TabularDataset(d_n.samples, const.predict(d_n.samples), schema))
    assert st2.stop_reason == "fidelity_target" and st2.t <= 1
    assert fidelity_on(st2.surrogate, TabularDataset(d_n.samples, const.predict(d_n.samples), schema)) == 1.0


def test_oracle_failure_keeps_last_surrogate():
    schema, d_a, _, target = small_task()

    class Flaky(LabelOracle):
        def query(self, batch):
            if self.spent >= 30:
                raise ConnectionError("down")
            return super().query(batch)

    from exfilt.errors import TransportError

    class Transport(Flaky):
        def query(self, batch):
            try:
                return super().query(batch)
            except ConnectionError as exc:
                raise TransportError(str(exc)) from None

    oracle = Transport(target, schema, budget=1000)
    surrogate, state = extract(d_a, oracle, ExtractionConfig(B=40), TINY)
    assert state.stop_reason.startswith("oracle_error") and surrogate is state.surrogate
    assert oracle.spent == 30


def test_extraction_is_deterministic():
    schema, d_a, _, target = small_task()
    cfg = ExtractionConfig(B=40, seed=3)
    s1, st1 = extract(d_a, LabelOracle(target, schema, 80), cfg, TINY)
    s2, st2 = extract(d_a, LabelOracle(target, schema, 80), cfg, TINY)
    assert np.array_equal(st1.d_s.samples, st2.d_s.samples)
    for k in s1.params():
        assert np.array_equal(s1.params()[k], s2.params()[k])


def test_config_validation():
    with pytest.raises(ConfigError):
        ExtractionConfig(rho=0).validate(3)
    with pytest.raises(ConfigError):
        ExtractionConfig(B=4, gamma1=0.5).validate(3)
    with pytest.raises(ConfigError):
        ExtractionConfig(B=2, gamma1=1.0, gamma2=0.1).validate(1)
