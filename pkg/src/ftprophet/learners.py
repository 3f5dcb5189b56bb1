"""Trainable methods behind a uniform ``update(tau)`` / ``predict`` interface.

* ``ftp`` - the follow-the-prophet learner: one matured pipeline per delay
  window feeding K task heads on a shared bottom, an internal prophet trained
  on the fully-matured pipeline, and a softmax policy head trained to put its
  weight on whichever task's stored online prediction lands nearest the
  prophecy.
* ``prophet`` - a standalone model fed by the fully-matured pipeline; its
  labels are final, so it is the in-simulation skyline.
* ``waiting`` - trains only on records at least ``d`` seconds old, labeled by
  what was observable then.
* ``fnw`` / ``fnc`` / ``pu`` - single models on the fake-negative event
  stream with, respectively, importance-weighted cross-entropy, plain
  cross-entropy plus a prediction-time calibration, and an unbiased
  positive-unlabeled risk.

The simulator drives every learner identically; nothing here is thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .core import TaskSchedule
from .model import (
    PROB_EPS,
    Adam,
    ModelConfig,
    SharedBottomNet,
    SingleHeadNet,
    bce_loss_and_grad,
)
from .pipelines import (
    ExtendedLog,
    FakeNegativePipeline,
    MaturedPipeline,
    StreamArrays,
    policy_batch,
)

LEARNER_KINDS = ("ftp", "prophet", "waiting", "fnw", "fnc", "pu")


@dataclass(frozen=True)
class Hyper:
    """Optimization hyperparameters shared by all learners in a run."""

    emb_dim: int = 8
    hidden: int = 128
    lrelu_slope: float = 0.01
    lr: float = 1e-3
    policy_lr: Optional[float] = None  # defaults to lr
    l2: float = 1e-6
    batch_size: int = 256
    base_rate: float = 0.5
    pu_nonneg: bool = False  # clamp the batch negative-risk estimate at zero
    shuffle: bool = True  # shuffle each release batch before chunked updates
    prophet_passes: int = 1  # optimization passes per release for prophet models

    def model_config(self, vocab_size: int, n_fields: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            n_fields=n_fields,
            emb_dim=self.emb_dim,
            hidden=self.hidden,
            lrelu_slope=self.lrelu_slope,
            base_rate=self.base_rate,
        )


@dataclass(frozen=True)
class LearnerSpec:
    """Which method to run; kind-specific fields must match the kind."""

    kind: str
    waiting_delay: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.kind == "waiting" and (self.waiting_delay is None or self.waiting_delay <= 0):
            raise ValueError("waiting learner needs a positive waiting_delay")
        if self.kind != "waiting" and self.waiting_delay is not None:
            raise ValueError(f"waiting_delay does not apply to kind {self.kind!r}")

    @property
    def name(self) -> str:
        if self.kind == "waiting":
            return f"waiting_{self.waiting_delay}"
        return self.kind


# -- loss functions ------------------------------------------------------------


def fnw_loss(pred, fake_label):
    """Importance-weighted cross-entropy on the fake-negative stream.

    The biased stream emits every record once as a negative and converters
    again as a positive, so re-weighting positives by ``1 + p`` and negatives
    by ``(1 + p)(1 - p)`` recovers the true-label risk.  The weights use the
    model's own prediction and take no gradient themselves; the logit
    gradient is ``w * (p - y)``.
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(fake_label, dtype=np.float64)
    w = np.where(y == 1.0, 1.0 + p, (1.0 + p) * (1.0 - p))
    base_loss, base_grad = bce_loss_and_grad(p, y)
    return w * base_loss, w * base_grad


def pu_loss(pred, fake_label):
    """Unbiased positive-unlabeled risk on the fake-negative stream.

    Each positive duplicate contributes its positive-class term minus the
    negative-class correction for the fake negative it cancels:
    ``-log p + log(1-p)`` (logit gradient -1).  Unlabeled events contribute
    ``-log(1-p)`` (logit gradient p).
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(fake_label, dtype=np.float64)
    pos = y == 1.0
    loss = np.where(pos, -np.log(p) + np.log1p(-p), -np.log1p(-p))
    grad = np.where(pos, -1.0, p)
    return loss, grad


def pu_batch_grad(pred, fake_label, nonneg: bool = False):
    """Batch PU loss with the optional non-negative risk clamp.

    When the batch estimate of the negative-class risk goes below zero and
    ``nonneg`` is set, the negative-risk terms are dropped from the gradient
    for this batch (clamp at zero).
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(fake_label, dtype=np.float64)
    pos = y == 1.0
    neg_risk = float(np.sum(np.where(pos, np.log1p(-p), -np.log1p(-p))))
    if nonneg and neg_risk < 0.0:
        loss = np.where(pos, -np.log(p), 0.0)
        grad = np.where(pos, p - 1.0, 0.0)
        return loss, grad
    return pu_loss(p, y)


def fnc_calibrate(q) -> np.ndarray:
    """Invert the fake-negative bias: a model calibrated on the biased stream
    learns ``q = p / (1 + p)``, so ``p = q / (1 - q)``, clamped to [eps, 1-eps]."""
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore"):
        p = np.where(q < 1.0, q / (1.0 - q), np.inf)
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def policy_loss_and_grad(weights: np.ndarray, kstar: np.ndarray):
    """Cross-entropy pushing the softmax weight onto the imitation target."""
    rows = np.arange(len(kstar))
    picked = np.clip(weights[rows, kstar], PROB_EPS, 1.0)
    loss = -np.log(picked)
    dlogits = weights.copy()
    dlogits[rows, kstar] -= 1.0
    return loss, dlogits


def _chunks(n: int, size: int) -> Iterator[slice]:
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


def _batch_order(rng: Optional[np.random.Generator], n: int) -> np.ndarray:
    """Training order within one release batch.

    Shuffling (per-learner seeded rng) decorrelates the optimization paths of
    models that consume identical releases; release sets and labels are
    untouched.
    """
    if rng is None:
        return np.arange(n)
    return rng.permutation(n)


# -- learners -------------------------------------------------------------------


class Learner:
    """Interface the simulator drives.  Subclasses own their nets and cursors."""

    name: str

    def update(self, tau: int) -> dict:
        raise NotImplementedError

    def predict(self, idx: np.ndarray, val: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def observe_arrivals(self, rows: slice) -> None:
        """Hook called once per step with the rows logged during that step."""

    def checkpoint(self) -> dict[str, np.ndarray]:
        raise NotImplementedError


class WaitingLearner(Learner):
    """Single model trained on the ``d``-matured pipeline with plain BCE."""

    def __init__(
        self,
        stream: StreamArrays,
        d: int,
        cfg: ModelConfig,
        hyper: Hyper,
        seed: int,
        name: Optional[str] = None,
    ):
        self.name = name or f"waiting_{d}"
        self.d = d
        self.net = SingleHeadNet(cfg, seed)
        self.adam = Adam(lr=hyper.lr, l2=hyper.l2)
        self.pipeline = MaturedPipeline(stream, d)
        self.batch_size = hyper.batch_size
        self.passes = 1
        self.rng = np.random.default_rng([seed, 1]) if hyper.shuffle else None

    def update(self, tau: int) -> dict:
        batch = self.pipeline.poll(tau)
        total, n = 0.0, len(batch)
        for _ in range(self.passes):
            order = _batch_order(self.rng, n)
            for c in _chunks(n, self.batch_size):
                sel = order[c]
                probs, cache = self.net.forward(batch.idx[sel], batch.val[sel])
                loss, dlogit = bce_loss_and_grad(probs, batch.labels[sel])
                grads = self.net.backward(cache, dlogit / len(loss))
                self.adam.step(self.net.params, grads)
                total += float(loss.sum())
        return {"n": n, "loss": total / n if n else None}

    def predict(self, idx, val):
        return self.net.predict(idx, val)

    def checkpoint(self) -> dict[str, np.ndarray]:
        return dict(self.net.params)


class ProphetLearner(WaitingLearner):
    """Trained on the fully-matured pipeline, whose labels are final.

    The prophet is the well-trained reference model, so it may take extra
    optimization passes over each release; the data it consumes is exactly
    the fully-matured pipeline either way.
    """

    def __init__(self, stream, d_max: int, cfg, hyper, seed):
        super().__init__(stream, d_max, cfg, hyper, seed, name="prophet")
        self.passes = hyper.prophet_passes


class FakeStreamLearner(Learner):
    """Single model on the fake-negative event stream (fnw, fnc or pu)."""

    def __init__(
        self,
        stream: StreamArrays,
        kind: str,
        cfg: ModelConfig,
        hyper: Hyper,
        seed: int,
    ):
        if kind not in ("fnw", "fnc", "pu"):
            raise ValueError(f"not a fake-stream learner kind: {kind!r}")
        self.name = kind
        self.kind = kind
        self.net = SingleHeadNet(cfg, seed)
        self.adam = Adam(lr=hyper.lr, l2=hyper.l2)
        self.pipeline = FakeNegativePipeline(stream)
        self.batch_size = hyper.batch_size
        self.pu_nonneg = hyper.pu_nonneg
        self.rng = np.random.default_rng([seed, 1]) if hyper.shuffle else None
        self.calibration_clamps = 0  # fnc predictions clipped at the upper bound

    def update(self, tau: int) -> dict:
        batch = self.pipeline.poll(tau)
        total, n = 0.0, len(batch)
        order = _batch_order(self.rng, n)
        for c in _chunks(n, self.batch_size):
            sel = order[c]
            probs, cache = self.net.forward(batch.idx[sel], batch.val[sel])
            labels = batch.labels[sel]
            if self.kind == "fnw":
                loss, dlogit = fnw_loss(probs, labels)
            elif self.kind == "pu":
                loss, dlogit = pu_batch_grad(probs, labels, nonneg=self.pu_nonneg)
            else:  # fnc trains the biased model with plain BCE
                loss, dlogit = bce_loss_and_grad(probs, labels)
            grads = self.net.backward(cache, dlogit / len(loss))
            self.adam.step(self.net.params, grads)
            total += float(loss.sum())
        return {"n": n, "loss": total / n if n else None}

    def predict(self, idx, val):
        q = self.net.predict(idx, val)
        if self.kind != "fnc":
            return q
        p = fnc_calibrate(q)
        self.calibration_clamps += int(np.count_nonzero(q / np.maximum(1.0 - q, PROB_EPS) > 1.0 - PROB_EPS))
        return p

    def checkpoint(self) -> dict[str, np.ndarray]:
        return dict(self.net.params)


class FTPLearner(Learner):
    """Follow-the-prophet: window tasks + internal prophet + imitation policy.

    Per update, each task head consumes its own matured pipeline (loss flows
    through the head and the shared bottom), the internal prophet consumes the
    fully-matured pipeline, and the policy head consumes newly matured
    extended-log entries, imitating the task nearest the prophecy.  Policy
    gradients never touch the shared bottom or the task heads.
    """

    name = "ftp"

    def __init__(
        self,
        stream: StreamArrays,
        schedule: TaskSchedule,
        cfg: ModelConfig,
        hyper: Hyper,
        seed: int,
    ):
        self.schedule = schedule
        self.shared = SharedBottomNet(cfg, schedule.k, seed)
        self.prophet_net = SingleHeadNet(cfg, seed + 1)
        self.adam = Adam(lr=hyper.lr, l2=hyper.l2)
        self.adam_policy = Adam(lr=hyper.policy_lr or hyper.lr, l2=hyper.l2)
        self.adam_prophet = Adam(lr=hyper.lr, l2=hyper.l2)
        self.task_pipelines = [MaturedPipeline(stream, d) for d in schedule]
        self.prophet_pipeline = MaturedPipeline(stream, schedule.d_max)
        self.extlog = ExtendedLog(stream, schedule.k, schedule.d_max)
        self.batch_size = hyper.batch_size
        self.prophet_passes = hyper.prophet_passes
        self.rng = np.random.default_rng([seed, 1]) if hyper.shuffle else None

    def update(self, tau: int) -> dict:
        stats: dict = {}
        for k, pipe in enumerate(self.task_pipelines):
            batch = pipe.poll(tau)
            order = _batch_order(self.rng, len(batch))
            for c in _chunks(len(batch), self.batch_size):
                sel = order[c]
                probs, cache = self.shared.forward_task(batch.idx[sel], batch.val[sel], k)
                _, dlogit = bce_loss_and_grad(probs, batch.labels[sel])
                grads = self.shared.backward_task(cache, dlogit / len(dlogit), k)
                self.adam.step(self.shared.params, grads)
            stats[f"task{k}_n"] = len(batch)

        pbatch = self.prophet_pipeline.poll(tau)
        for _ in range(self.prophet_passes):
            order = _batch_order(self.rng, len(pbatch))
            for c in _chunks(len(pbatch), self.batch_size):
                sel = order[c]
                probs, cache = self.prophet_net.forward(pbatch.idx[sel], pbatch.val[sel])
                _, dlogit = bce_loss_and_grad(probs, pbatch.labels[sel])
                grads = self.prophet_net.backward(cache, dlogit / len(dlogit))
                self.adam_prophet.step(self.prophet_net.params, grads)
        stats["prophet_n"] = len(pbatch)

        pol = policy_batch(self.extlog, self.prophet_net, tau)
        order = _batch_order(self.rng, len(pol))
        for c in _chunks(len(pol), self.batch_size):
            sel = order[c]
            weights, a1 = self.shared.forward_policy(pol.idx[sel], pol.val[sel])
            _, dlogits = policy_loss_and_grad(weights, pol.kstar[sel])
            grads = self.shared.backward_policy(a1, dlogits / len(dlogits))
            self.adam_policy.step(self.shared.params, grads)
        stats["policy_n"] = len(pol)
        return stats

    def observe_arrivals(self, rows: slice) -> None:
        if rows.stop == rows.start:
            self.extlog.capture(rows, np.zeros((0, self.schedule.k)))
            return
        stream = self.extlog.stream
        preds = self.shared.task_preds(stream.feat_idx[rows], stream.feat_val[rows])
        self.extlog.capture(rows, preds)

    def predict(self, idx, val):
        return self.shared.predict(idx, val)

    def checkpoint(self) -> dict[str, np.ndarray]:
        out = {f"shared.{k}": v for k, v in self.shared.params.items()}
        out.update({f"prophet.{k}": v for k, v in self.prophet_net.params.items()})
        return out


def build_learner(
    spec: LearnerSpec,
    stream: StreamArrays,
    schedule: TaskSchedule,
    cfg: ModelConfig,
    hyper: Hyper,
    seed: int,
) -> Learner:
    if spec.kind == "ftp":
        return FTPLearner(stream, schedule, cfg, hyper, seed)
    if spec.kind == "prophet":
        return ProphetLearner(stream, schedule.d_max, cfg, hyper, seed)
    if spec.kind == "waiting":
        return WaitingLearner(stream, spec.waiting_delay, cfg, hyper, seed)
    return FakeStreamLearner(stream, spec.kind, cfg, hyper, seed)


def retrain_policy_offline(
    shared: SharedBottomNet,
    prophet_net: SingleHeadNet,
    idx: np.ndarray,
    val: np.ndarray,
    stored_preds: np.ndarray,
    hyper: Hyper,
    epochs: int = 1,
) -> float:
    """Multi-epoch policy replay over persisted extended-log entries.

    The in-simulation policy pipeline is single-pass; this is the offline
    alternative.  Returns the final mean policy loss.
    """
    from .pipelines import nearest_task

    prophecy = prophet_net.predict(idx, val)
    kstar = nearest_task(prophecy, stored_preds)
    adam = Adam(lr=hyper.lr, l2=hyper.l2)
    last = 0.0
    for _ in range(epochs):
        total = 0.0
        for c in _chunks(len(kstar), hyper.batch_size):
            weights, a1 = shared.forward_policy(idx[c], val[c])
            loss, dlogits = policy_loss_and_grad(weights, kstar[c])
            grads = shared.backward_policy(a1, dlogits / len(loss))
            adam.step(shared.params, grads)
            total += float(loss.sum())
        last = total / max(len(kstar), 1)
    return last
