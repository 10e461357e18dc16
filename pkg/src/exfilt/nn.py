"""Single-hidden-layer tanh MLP with hand-written backprop and AdamW.

Everything is plain numpy in float64.  Training is deterministic given
``TrainConfig.seed``: the same generator drives initialization, per-epoch
shuffles, dropout masks and DP noise, in that order.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, SchemaError, TrainingError

logger = logging.getLogger(__name__)

PARAM_NAMES = ("w1", "b1", "w2", "b2")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

MODEL_MAGIC = b"mlp-v1\n"


@dataclass
class DpConfig:
    """DP-SGD knobs.

    ``noise_multiplier`` may be left unset when ``target_epsilon`` is given;
    :func:`exfilt.defenses.train_defended` solves for it before training.
    """

    clip_norm: float = 1.0
    noise_multiplier: Optional[float] = None
    delta: float = 1e-5
    target_epsilon: Optional[float] = None

    def validate(self):
        if not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.noise_multiplier is None or not self.noise_multiplier > 0:
            raise ConfigError(f"noise_multiplier must be positive, got {self.noise_multiplier}")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    weight_decay: float = 1e-7
    batch_size: int = 100
    dropout_p: float = 0.0
    l2_lambda: float = 0.0
    dp: Optional[DpConfig] = None
    seed: int = 0
    hidden: int = 128

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ConfigError("epochs, batch_size and hidden must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.l2_lambda < 0 or self.weight_decay < 0:
            raise ConfigError("l2_lambda and weight_decay must be non-negative")
        if self.dp is not None:
            self.dp.validate()


@dataclass
class MlpClassifier:
    """n_features -> hidden (tanh) -> n_classes (softmax).

    ``w1`` has shape (hidden, n_features) and ``w2`` (n_classes, hidden), so a
    row-major batch ``X`` maps through ``X @ w1.T``.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    opt_state: Optional[dict] = field(default=None, repr=False, compare=False)
    version: int = field(default=0, repr=False, compare=False)

    @classmethod
    def init(cls, n_features: int, n_classes: int, hidden: int = 128, rng=None):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        rng = np.random.default_rng(rng)
        lim1 = 1.0 / np.sqrt(n_features)
        lim2 = 1.0 / np.sqrt(hidden)
        return cls(
            w1=rng.uniform(-lim1, lim1, size=(hidden, n_features)),
            b1=rng.uniform(-lim1, lim1, size=hidden),
            w2=rng.uniform(-lim2, lim2, size=(n_classes, hidden)),
            b2=rng.uniform(-lim2, lim2, size=n_classes),
        )

    @property
    def n_features(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "MlpClassifier":
        out = MlpClassifier(*(p.copy() for p in (self.w1, self.b1, self.w2, self.b2)))
        if self.opt_state is not None:
            out.opt_state = {
                "m": {k: v.copy() for k, v in self.opt_state["m"].items()},
                "v": {k: v.copy() for k, v in self.opt_state["v"].items()},
                "step": self.opt_state["step"],
            }
        return out

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise SchemaError(f"expected (N, {self.n_features}) input, got shape {X.shape}")
        return X

    def hidden_activations(self, X) -> np.ndarray:
        X = self._check(X)
        return np.tanh(X @ self.w1.T + self.b1)

    def logits(self, X) -> np.ndarray:
        return self.hidden_activations(X) @ self.w2.T + self.b2

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.logits(X))

    def predict(self, X) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class.
        return np.argmax(self.logits(X), axis=1)

    def input_gradient(self, X, dlogits) -> np.ndarray:
        """Pull a per-row cotangent on the logits back to the inputs."""
        h = self.hidden_activations(X)
        dh = np.asarray(dlogits, dtype=np.float64) @ self.w2
        return (dh * (1.0 - h * h)) @ self.w1


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predictive_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row of a probability matrix."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=1)


@dataclass
class ForwardCache:
    x: np.ndarray
    h: np.ndarray  # tanh output, before dropout
    h_drop: np.ndarray  # what the output layer actually saw
    mask: Optional[np.ndarray]
    probs: np.ndarray
    model_id: int
    model_version: int


def forward(model: MlpClassifier, batch, dropout_p: float = 0.0, rng=None):
    """Training-mode forward pass.  Returns ``(probs, cache)``.

    Inverted dropout is applied to the hidden layer when ``dropout_p > 0``.
    """
    X = model._check(batch)
    h = np.tanh(X @ model.w1.T + model.b1)
    mask = None
    h_drop = h
    if dropout_p > 0:
        if rng is None:
            raise ConfigError("dropout needs a random generator")
        mask = (rng.random(h.shape) >= dropout_p) / (1.0 - dropout_p)
        h_drop = h * mask
    probs = softmax(h_drop @ model.w2.T + model.b2)
    return probs, ForwardCache(X, h, h_drop, mask, probs, id(model), model.version)


def _output_delta(model, cache, labels):
    if cache.model_id != id(model) or cache.model_version != model.version:
        raise TrainingError("stale forward cache: model changed since forward()")
    labels = np.asarray(labels)
    if labels.shape != (cache.x.shape[0],):
        raise SchemaError(f"expected {cache.x.shape[0]} labels, got shape {labels.shape}")
    dz = cache.probs.copy()
    dz[np.arange(len(labels)), labels] -= 1.0
    da = dz @ model.w2
    if cache.mask is not None:
        da = da * cache.mask
    da *= 1.0 - cache.h * cache.h
    return dz, da


def backward(model: MlpClassifier, cache: ForwardCache, labels) -> dict:
    """Gradients of the mean cross-entropy over the cached batch."""
    dz, da = _output_delta(model, cache, labels)
    n = cache.x.shape[0]
    return {
        "w1": da.T @ cache.x / n,
        "b1": da.sum(axis=0) / n,
        "w2": dz.T @ cache.h_drop / n,
        "b2": dz.sum(axis=0) / n,
    }


def per_sample_gradients(model: MlpClassifier, cache: ForwardCache, labels) -> dict:
    """Stacked per-row gradients, each of the row's own cross-entropy."""
    dz, da = _output_delta(model, cache, labels)
    return {
        "w1": np.einsum("nh,nf->nhf", da, cache.x),
        "b1": da,
        "w2": np.einsum("nc,nh->nch", dz, cache.h_drop),
        "b2": dz,
    }


def adamw_step(model: MlpClassifier, grads: dict, config: TrainConfig, step_index: int):
    """One AdamW update in place; ``step_index`` starts at 1.

    Decoupled decay first (``p *= 1 - lr * wd``), then the bias-corrected
    Adam step.
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    if model.opt_state is None:
        model.opt_state = {
            "m": {k: np.zeros_like(v) for k, v in model.params().items()},
            "v": {k: np.zeros_like(v) for k, v in model.params().items()},
            "step": 0,
        }
    lr = config.learning_rate
    decay = 1.0 - lr * config.weight_decay
    bc1 = 1.0 - ADAM_BETA1**step_index
    bc2 = 1.0 - ADAM_BETA2**step_index
    m_state, v_state = model.opt_state["m"], model.opt_state["v"]
    for name in PARAM_NAMES:
        p = getattr(model, name)
        g = grads[name]
        p *= decay
        m = m_state[name]
        v = v_state[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if not np.all(np.isfinite(p)):
            raise TrainingError(f"non-finite values in {name} after step {step_index}")
    model.opt_state["step"] = step_index
    model.version += 1
    return model


def clip_per_sample(per_sample: dict, clip_norm: float) -> dict:
    """Rescale each row's full gradient (all parameters jointly) to norm <= C."""
    norms = np.sqrt(sum((g.reshape(g.shape[0], -1) ** 2).sum(axis=1) for g in per_sample.values()))
    scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    return {k: g * scale.reshape((-1,) + (1,) * (g.ndim - 1)) for k, g in per_sample.items()}


def _add_noise_and_average(summed: dict, n: int, dp: DpConfig, rng) -> dict:
    std = dp.noise_multiplier * dp.clip_norm
    return {k: (g + rng.normal(0.0, std, size=g.shape)) / n for k, g in summed.items()}


def privatize(per_sample: dict, dp: DpConfig, rng) -> dict:
    """Clip, sum, add N(0, (sigma*C)^2) per coordinate, divide by batch size."""
    dp.validate()
    clipped = clip_per_sample(per_sample, dp.clip_norm)
    n = next(iter(per_sample.values())).shape[0]
    return _add_noise_and_average({k: g.sum(axis=0) for k, g in clipped.items()}, n, dp, rng)


def dp_sgd_step(model, per_sample_grads: dict, dp: DpConfig, rng, config: TrainConfig, step_index: int):
    return adamw_step(model, privatize(per_sample_grads, dp, rng), config, step_index)


def _privatized_batch_gradient(model, cache, labels, dp: DpConfig, rng) -> dict:
    # Same result as privatize(per_sample_gradients(...)) without materializing
    # the (N, hidden, n_features) tensor: each row's dense gradient is an outer
    # product, so its norm factorizes.
    dz, da = _output_delta(model, cache, labels)
    x, h = cache.x, cache.h_drop
    sq = (da * da).sum(1) * ((x * x).sum(1) + 1.0) + (dz * dz).sum(1) * ((h * h).sum(1) + 1.0)
    scale = np.minimum(1.0, dp.clip_norm / np.maximum(np.sqrt(sq), 1e-300))
    da_s = da * scale[:, None]
    dz_s = dz * scale[:, None]
    summed = {"w1": da_s.T @ x, "b1": da_s.sum(0), "w2": dz_s.T @ h, "b2": dz_s.sum(0)}
    return _add_noise_and_average(summed, x.shape[0], dp, rng)


def train(dataset, config: TrainConfig, init: Optional[MlpClassifier] = None) -> MlpClassifier:
    """Fit an MLP on ``dataset`` (anything with ``samples``, ``labels``, ``schema``).

    With ``init`` the given model is copied and training continues from it
    (optimizer state included); otherwise a fresh model is drawn from the seed.
    """
    config.validate()
    X = np.asarray(dataset.samples, dtype=np.float64)
    y = np.asarray(dataset.labels)
    n_classes = dataset.schema.n_classes
    if X.shape[0] == 0:
        raise TrainingError("cannot train on an empty dataset")
    if y.min() < 0 or y.max() >= n_classes:
        raise TrainingError(f"labels outside 0..{n_classes - 1}")

    rng = np.random.default_rng(config.seed)
    if init is None:
        model = MlpClassifier.init(X.shape[1], n_classes, config.hidden, rng)
    else:
        model = init.copy()
    step = 0 if model.opt_state is None else model.opt_state["step"]
    n = X.shape[0]
    bs = config.batch_size
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            _, cache = forward(model, X[idx], config.dropout_p, rng)
            if config.dp is not None:
                grads = _privatized_batch_gradient(model, cache, y[idx], config.dp, rng)
            else:
                grads = backward(model, cache, y[idx])
            if config.l2_lambda > 0:
                grads["w1"] = grads["w1"] + config.l2_lambda * model.w1
                grads["w2"] = grads["w2"] + config.l2_lambda * model.w2
            step += 1
            adamw_step(model, grads, config, step)
    return model


def accuracy(model: MlpClassifier, dataset) -> float:
    if len(dataset.labels) == 0:
        return float("nan")
    return float(np.mean(model.predict(dataset.samples) == np.asarray(dataset.labels)))


def save_model(model: MlpClassifier, path) -> None:
    """Write the ``mlp-v1`` binary format: magic, 3 x uint64 header, float64 params."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<3Q", model.n_features, model.n_classes, model.hidden))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())


def load_model(path) -> MlpClassifier:
    raw = Path(path).read_bytes()
    if not raw.startswith(MODEL_MAGIC):
        raise SchemaError(f"{path}: not an mlp-v1 model file")
    off = len(MODEL_MAGIC)
    n_j, n_c, hidden = struct.unpack_from("<3Q", raw, off)
    off += 24
    shapes = {"w1": (hidden, n_j), "b1": (hidden,), "w2": (n_c, hidden), "b2": (n_c,)}
    expected = off + 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(raw) != expected:
        raise SchemaError(f"{path}: header says {expected} bytes, file has {len(raw)}")
    arrays = {}
    for name in PARAM_NAMES:
        count = int(np.prod(shapes[name]))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shapes[name]).copy()
        off += 8 * count
    return MlpClassifier(**arrays)
