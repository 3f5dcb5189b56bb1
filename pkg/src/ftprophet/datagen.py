"""Synthetic delayed-feedback stream generator with an analytic oracle.

The generator draws one categorical token per field, converts with a
probability given by a fixed linear model over the bucketized feature space
(the oracle), and samples the feedback delay from an exponential mixture.
Conversions delayed beyond ``d_max`` are discarded entirely (not censored),
which keeps the ground-truth final-label probability in closed form:

    P(final label = 1 | x) = sigmoid(w . x + b) * F_x(d_max)

where ``F_x`` is the delay CDF of the record's mixture.  One feature field
may select among several delay mixtures ("regimes"), so which maturity window
is informative depends on the features.

Everything is reproducible from the seed; streams are emitted sorted by log
time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import FeatureVector, ImpressionRecord, Split

PROB_EPS = 1e-12


@dataclass(frozen=True)
class DelayMixture:
    """Exponential mixture over feedback delays: ``(weight, rate)`` pairs."""

    components: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if not self.components:
            raise ValueError("mixture needs at least one component")
        weights = [w for w, _ in self.components]
        rates = [r for _, r in self.components]
        if any(w <= 0 for w in weights):
            raise ValueError(f"mixture weights must be positive: {weights}")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1: {weights}")
        if any(r <= 0 for r in rates):
            raise ValueError(f"mixture rates must be positive: {rates}")

    def cdf(self, u) -> np.ndarray:
        """P(delay <= u); vectorized over u."""
        u = np.asarray(u, dtype=np.float64)
        total = np.zeros_like(u)
        for w, r in self.components:
            total = total + w * (1.0 - np.exp(-r * u))
        return total

    def quantile(self, q: float) -> float:
        """Inverse CDF by bisection (no closed form for mixtures)."""
        if not 0.0 <= q < 1.0:
            raise ValueError("quantile level must be in [0, 1)")
        lo, hi = 0.0, 1.0
        while self.cdf(hi) < q:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.cdf(mid) < q:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


@dataclass(frozen=True)
class GeneratorConfig:
    """Everything that defines a synthetic stream and its oracle."""

    seed: int
    n_records: int
    horizon: int
    field_cards: tuple[int, ...]
    n_buckets: int
    true_weights: np.ndarray  # shape (n_fields * n_buckets,)
    bias: float
    delay_mixture: DelayMixture
    d_max: int
    regime_field: Optional[int] = None
    delay_regimes: Optional[tuple[DelayMixture, ...]] = None
    regime_probs: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.n_records <= 0:
            raise ValueError("n_records must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")
        if not self.field_cards:
            raise ValueError("need at least one feature field")
        if any(c < 1 for c in self.field_cards):
            raise ValueError(f"field cardinalities must be >= 1: {self.field_cards}")
        if max(self.field_cards) > self.n_buckets:
            raise ValueError(
                f"cardinality {max(self.field_cards)} exceeds n_buckets {self.n_buckets}"
            )
        w = np.asarray(self.true_weights, dtype=np.float64)
        if w.shape != (self.n_fields * self.n_buckets,):
            raise ValueError(
                f"true_weights shape {w.shape} != ({self.n_fields * self.n_buckets},)"
            )
        object.__setattr__(self, "true_weights", w)
        if self.regime_field is not None:
            if not 0 <= self.regime_field < self.n_fields:
                raise ValueError(f"regime_field {self.regime_field} out of range")
            if self.delay_regimes is None:
                raise ValueError("regime_field set but delay_regimes missing")
            if len(self.delay_regimes) != self.field_cards[self.regime_field]:
                raise ValueError(
                    "delay_regimes must have one mixture per regime-field category"
                )
            if self.regime_probs is not None:
                if len(self.regime_probs) != len(self.delay_regimes):
                    raise ValueError("regime_probs length mismatch")
                if abs(sum(self.regime_probs) - 1.0) > 1e-9:
                    raise ValueError("regime_probs must sum to 1")

    @property
    def n_fields(self) -> int:
        return len(self.field_cards)

    def mixture_for_regime(self, regime: int) -> DelayMixture:
        if self.delay_regimes is None:
            return self.delay_mixture
        return self.delay_regimes[regime]

    @classmethod
    def sampled(
        cls,
        seed: int,
        n_records: int,
        horizon: int,
        field_cards: tuple[int, ...],
        n_buckets: int,
        delay_mixture: DelayMixture,
        d_max: int,
        weight_scale: float = 0.8,
        weight_seed: int = 7,
        bias: float = 0.0,
        regime_field: Optional[int] = None,
        delay_regimes: Optional[tuple[DelayMixture, ...]] = None,
        regime_probs: Optional[tuple[float, ...]] = None,
    ) -> "GeneratorConfig":
        """Convenience constructor that draws the oracle weights from a seed."""
        rng = np.random.default_rng(weight_seed)
        w = rng.normal(0.0, weight_scale, size=len(field_cards) * n_buckets)
        return cls(
            seed=seed,
            n_records=n_records,
            horizon=horizon,
            field_cards=tuple(field_cards),
            n_buckets=n_buckets,
            true_weights=w,
            bias=bias,
            delay_mixture=delay_mixture,
            d_max=d_max,
            regime_field=regime_field,
            delay_regimes=delay_regimes,
            regime_probs=regime_probs,
        )


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def true_cvr(x: FeatureVector, cfg: GeneratorConfig) -> float:
    """Oracle conversion probability (before delay truncation) for features x."""
    score = cfg.bias + sum(cfg.true_weights[idx] * val for idx, val in x)
    return float(_sigmoid(score))


@dataclass
class StreamOracle:
    """Per-record ground truth, aligned with the generated (log-time sorted) stream."""

    base_cvr: np.ndarray   # sigmoid of the oracle score
    final_cvr: np.ndarray  # base_cvr * P(delay <= d_max), the final-label probability
    regime: np.ndarray     # regime category per record (zeros without regimes)
    converted: np.ndarray  # pre-truncation conversion draw
    delay: np.ndarray      # sampled delay seconds (float), NaN where not converted

    def bayes_log_loss(self, mask: Optional[np.ndarray] = None) -> float:
        """Mean binary entropy of the final-label probability: no model can do better."""
        q = self.final_cvr if mask is None else self.final_cvr[mask]
        q = np.clip(q, PROB_EPS, 1.0 - PROB_EPS)
        return float(np.mean(-q * np.log(q) - (1.0 - q) * np.log(1.0 - q)))


def _mixture_inverse_cdf(mix: DelayMixture, u_comp: np.ndarray, u_delay: np.ndarray):
    """Component choice + exponential draw via inverse transform.

    Using pre-drawn uniforms keeps the RNG stream identical regardless of how
    records are partitioned across regimes.
    """
    weights = np.array([w for w, _ in mix.components])
    rates = np.array([r for _, r in mix.components])
    edges = np.cumsum(weights)
    comp = np.searchsorted(edges, u_comp, side="right")
    comp = np.minimum(comp, len(rates) - 1)  # guard u == 1.0 edge
    return -np.log1p(-u_delay) / rates[comp]


def _generate(cfg: GeneratorConfig):
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_records
    s = np.sort(rng.integers(0, cfg.horizon, size=n, dtype=np.int64))
    cats = np.empty((n, cfg.n_fields), dtype=np.int64)
    for f, card in enumerate(cfg.field_cards):
        if f == cfg.regime_field and cfg.regime_probs is not None:
            cats[:, f] = rng.choice(card, size=n, p=np.asarray(cfg.regime_probs))
        else:
            cats[:, f] = rng.integers(0, card, size=n)
    offsets = np.arange(cfg.n_fields, dtype=np.int64) * cfg.n_buckets
    feat_idx = cats + offsets[None, :]
    score = cfg.bias + cfg.true_weights[feat_idx].sum(axis=1)
    base = _sigmoid(score)
    converted = rng.random(n) < base
    u_comp = rng.random(n)
    u_delay = rng.random(n)

    regime = (
        cats[:, cfg.regime_field].copy()
        if cfg.regime_field is not None
        else np.zeros(n, dtype=np.int64)
    )
    delay = np.full(n, np.nan)
    cdf_dmax = np.empty(n)
    if cfg.delay_regimes is None:
        delay[:] = _mixture_inverse_cdf(cfg.delay_mixture, u_comp, u_delay)
        cdf_dmax[:] = cfg.delay_mixture.cdf(float(cfg.d_max))
    else:
        for r, mix in enumerate(cfg.delay_regimes):
            sel = regime == r
            if sel.any():
                delay[sel] = _mixture_inverse_cdf(mix, u_comp[sel], u_delay[sel])
            cdf_dmax[regime == r] = mix.cdf(float(cfg.d_max))

    # Discard (not censor) conversions whose feedback would land beyond d_max;
    # this keeps P(final=1|x) = base * F_x(d_max) exact.
    kept = converted & (delay <= cfg.d_max)
    t = np.where(kept, s + np.floor(delay).astype(np.int64), -1)
    delay_out = np.where(converted, delay, np.nan)

    oracle = StreamOracle(
        base_cvr=base,
        final_cvr=base * cdf_dmax,
        regime=regime,
        converted=converted,
        delay=delay_out,
    )
    return s, t, feat_idx, oracle


def _to_records(
    s: np.ndarray,
    t: np.ndarray,
    feat_idx: np.ndarray,
    eval_window: Optional[tuple[int, int]],
) -> list[ImpressionRecord]:
    records = []
    ev_lo, ev_hi = eval_window if eval_window is not None else (0, 0)
    for i in range(len(s)):
        si = int(s[i])
        split = Split.EVAL if eval_window is not None and ev_lo <= si < ev_hi else Split.TRAIN
        records.append(
            ImpressionRecord(
                id=i,
                log_time=si,
                conversion_time=None if t[i] < 0 else int(t[i]),
                features=tuple((int(j), 1.0) for j in feat_idx[i]),
                split=split,
            )
        )
    return records


def generate_stream(
    cfg: GeneratorConfig, eval_window: Optional[tuple[int, int]] = None
) -> list[ImpressionRecord]:
    """Generate the stream, sorted ascending by log time."""
    s, t, feat_idx, _ = _generate(cfg)
    return _to_records(s, t, feat_idx, eval_window)


def generate_stream_with_oracle(
    cfg: GeneratorConfig, eval_window: Optional[tuple[int, int]] = None
) -> tuple[list[ImpressionRecord], StreamOracle]:
    """Same stream as :func:`generate_stream` plus its per-record ground truth."""
    s, t, feat_idx, oracle = _generate(cfg)
    return _to_records(s, t, feat_idx, eval_window), oracle
