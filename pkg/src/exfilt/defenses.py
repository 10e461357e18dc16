"""Defended target training (dropout, L2, DP-SGD) and a Renyi-DP accountant."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConfigError
from .nn import DpConfig, MlpClassifier, TrainConfig, train

logger = logging.getLogger(__name__)

NONE = "none"
DROPOUT = "dropout"
L2 = "l2"
DPSGD = "dpsgd"
KINDS = (NONE, DROPOUT, L2, DPSGD)

RDP_ORDERS = np.arange(2, 65)
SIGMA_BRACKET = (0.05, 100.0)


@dataclass
class DefenseSpec:
    kind: str = NONE
    dropout_p: Optional[float] = None
    l2_lambda: Optional[float] = None
    dp_target_epsilon: Optional[float] = None
    dp_delta: float = 1e-5
    dp_clip_norm: float = 1.0

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown defense {self.kind!r}")
        given = {DROPOUT: self.dropout_p, L2: self.l2_lambda, DPSGD: self.dp_target_epsilon}
        for kind, value in given.items():
            if (value is not None) != (kind == self.kind):
                raise ConfigError(f"defense {self.kind!r}: parameter for {kind!r} must "
                                  f"{'be set' if kind == self.kind else 'be unset'}")
        if self.kind == DROPOUT and not 0 < self.dropout_p < 1:
            raise ConfigError(f"dropout_p must lie in (0, 1), got {self.dropout_p}")
        if self.kind == L2 and self.l2_lambda < 0:
            raise ConfigError(f"l2_lambda must be non-negative, got {self.l2_lambda}")
        if self.kind == DPSGD and not self.dp_target_epsilon > 0:
            raise ConfigError(f"target epsilon must be positive, got {self.dp_target_epsilon}")

    @property
    def label(self) -> str:
        if self.kind == DROPOUT:
            return f"dropout p={self.dropout_p:g}"
        if self.kind == L2:
            return f"l2 lambda={self.l2_lambda:g}"
        if self.kind == DPSGD:
            return f"dpsgd eps={self.dp_target_epsilon:g}"
        return "undefended"


def _log_a(q: float, sigma: float, alpha: int) -> float:
    # log E[(1 - q + q * L)^alpha] for the sampled Gaussian, integer alpha:
    # sum_k C(alpha, k) (1-q)^(alpha-k) q^k exp((k^2 - k) / (2 sigma^2)).
    k = np.arange(alpha + 1)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    terms = log_binom + k * math.log(q) + (k * k - k) / (2.0 * sigma * sigma)
    if q < 1:
        terms = terms + (alpha - k) * math.log1p(-q)
    else:
        terms = terms[-1:]
    return float(logsumexp(terms))


def rdp_sampled_gaussian(q: float, sigma: float, orders=RDP_ORDERS) -> np.ndarray:
    """Per-step RDP of the Poisson-subsampled Gaussian mechanism at integer orders."""
    return np.array([_log_a(q, sigma, int(a)) / (a - 1) for a in orders])


def dp_epsilon(noise_multiplier: float, sample_rate: float, steps: int, delta: float,
               orders=RDP_ORDERS) -> float:
    """epsilon = min over orders of  T * RDP(alpha) + log(1/delta) / (alpha - 1)."""
    if not noise_multiplier > 0:
        raise ConfigError("noise_multiplier must be positive")
    if not 0 < sample_rate <= 1:
        raise ConfigError("sample_rate must lie in (0, 1]")
    if steps < 1 or not 0 < delta < 1:
        raise ConfigError("steps must be >= 1 and delta in (0, 1)")
    orders = np.asarray(orders)
    total = steps * rdp_sampled_gaussian(sample_rate, noise_multiplier, orders)
    return float(np.min(total + math.log(1.0 / delta) / (orders - 1)))


def solve_sigma_for_epsilon(target_epsilon: float, sample_rate: float, steps: int, delta: float,
                            bracket=SIGMA_BRACKET, rtol: float = 0.01) -> float:
    """Bisect the noise multiplier so the accountant lands in [(1 - rtol) * eps*, eps*]."""
    if not target_epsilon > 0:
        raise ConfigError("target epsilon must be positive")
    lo, hi = bracket
    eps_lo = dp_epsilon(lo, sample_rate, steps, delta)
    eps_hi = dp_epsilon(hi, sample_rate, steps, delta)
    if not eps_hi <= target_epsilon <= eps_lo:
        raise ConfigError(f"epsilon {target_epsilon} unreachable with sigma in [{lo}, {hi}] "
                          f"(epsilon spans [{eps_hi:.4g}, {eps_lo:.4g}])")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        eps = dp_epsilon(mid, sample_rate, steps, delta)
        if (1.0 - rtol) * target_epsilon <= eps <= target_epsilon:
            return mid
        if eps > target_epsilon:
            lo = mid
        else:
            hi = mid
    return hi


def dp_schedule(n_train: int, config: TrainConfig):
    """(sample_rate, steps) used for accounting a training run."""
    q = min(1.0, config.batch_size / n_train)
    steps = config.epochs * math.ceil(n_train / config.batch_size)
    return q, steps


def defended_config(n_train: int, base: TrainConfig, spec: DefenseSpec) -> TrainConfig:
    spec.validate()
    if spec.kind == DROPOUT:
        return replace(base, dropout_p=spec.dropout_p)
    if spec.kind == L2:
        return replace(base, l2_lambda=spec.l2_lambda)
    if spec.kind == DPSGD:
        q, steps = dp_schedule(n_train, base)
        sigma = solve_sigma_for_epsilon(spec.dp_target_epsilon, q, steps, spec.dp_delta)
        logger.info("dp-sgd: eps*=%g -> sigma=%.4f (q=%.4f, T=%d)", spec.dp_target_epsilon, sigma, q, steps)
        return replace(base, dp=DpConfig(spec.dp_clip_norm, sigma, spec.dp_delta, spec.dp_target_epsilon))
    return base


def train_defended(dataset, base_config: TrainConfig, spec: DefenseSpec) -> MlpClassifier:
    """Train M' with exactly one defense knob changed from ``base_config``."""
    return train(dataset, defended_config(len(dataset), base_config, spec))


def accounted_epsilon(n_train: int, config: TrainConfig) -> float:
    if config.dp is None:
        return math.inf
    q, steps = dp_schedule(n_train, config)
    return dp_epsilon(config.dp.noise_multiplier, q, steps, config.dp.delta)


STANDARD_GRID = (
    [DefenseSpec(DPSGD, dp_target_epsilon=e) for e in (20, 50, 100, 200)]
    + [DefenseSpec(DROPOUT, dropout_p=p) for p in (0.2, 0.4, 0.6, 0.8)]
    + [DefenseSpec(L2, l2_lambda=lam) for lam in (1e-4, 5e-4, 1e-3, 5e-3)]
)


def read_grid(path) -> list:
    """Defense grid file: CSV with columns ``kind,value`` (value empty for none)."""
    specs = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            kind = row["kind"].strip()
            value = row.get("value", "").strip()
            specs.append(spec_from(kind, float(value) if value else None))
    return specs


def write_grid(path, specs) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "value"])
        for s in specs:
            w.writerow([s.kind, "" if s.kind == NONE else spec_value(s)])


def spec_from(kind: str, value) -> DefenseSpec:
    if kind == DROPOUT:
        spec = DefenseSpec(DROPOUT, dropout_p=value)
    elif kind == L2:
        spec = DefenseSpec(L2, l2_lambda=value)
    elif kind == DPSGD:
        spec = DefenseSpec(DPSGD, dp_target_epsilon=value)
    else:
        spec = DefenseSpec(kind)
    spec.validate()
    return spec


def spec_value(spec: DefenseSpec):
    return {DROPOUT: spec.dropout_p, L2: spec.l2_lambda, DPSGD: spec.dp_target_epsilon}.get(spec.kind)
