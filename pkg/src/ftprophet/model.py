"""From-scratch learning kernel: embedding + dense networks, manual gradients,
Adam with sparse embedding updates, finite-difference verification, checkpoints.

Two architectures cover every method in this package:

* :class:`SingleHeadNet` - embeddings, two 128-unit Leaky-ReLU layers, one
  sigmoid output.  Used by the prophet and the single-model baselines.
* :class:`SharedBottomNet` - embeddings and the first dense layer are shared;
  each of the K window tasks owns a second dense layer and a sigmoid output,
  and a K-way softmax policy head sits on the shared representation.  The
  aggregated prediction is the policy-weighted average of the task outputs.

Policy-head gradients stop at the shared representation and task gradients
never reach the policy head; the two are trained from different pipelines
with different maturity and must not drag each other.

All arithmetic is float64; checkpoints store float32 on disk.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

PROB_EPS = 1e-7  # probability clamp for losses
CHECKPOINT_MAGIC = b"FTPCKPT\x01"


class NanGradientError(RuntimeError):
    """A gradient tensor went non-finite; carries the tensor name."""

    def __init__(self, tensor: str):
        self.tensor = tensor
        super().__init__(f"non-finite gradient in tensor {tensor!r}")


class CheckpointError(ValueError):
    pass


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit(p: float) -> float:
    p = min(max(p, 1e-4), 1.0 - 1e-4)
    return math.log(p / (1.0 - p))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def leaky_relu(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def leaky_relu_grad(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, 1.0, slope)


def bce_loss_and_grad(pred: np.ndarray, label: np.ndarray):
    """Binary cross-entropy and its gradient w.r.t. the logit.

    Predictions are clamped to ``[eps, 1-eps]``; the logit gradient is the
    plain residual ``p - y``.
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(label, dtype=np.float64)
    loss = -y * np.log(p) - (1.0 - y) * np.log(1.0 - p)
    return loss, p - y


def aggregate_predictions(task_preds: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Policy-weighted average of the per-task predictions (row-wise)."""
    return np.sum(np.asarray(task_preds) * np.asarray(weights), axis=-1)


@dataclass
class PredictionBundle:
    """Per-record outputs of the shared-bottom model."""

    task_preds: np.ndarray      # (B, K) window-task probabilities
    policy_weights: np.ndarray  # (B, K) softmax weights, rows sum to 1
    ftp_pred: np.ndarray        # (B,) aggregated prediction


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_fields: int
    emb_dim: int = 8
    hidden: int = 128
    lrelu_slope: float = 0.01
    base_rate: float = 0.5  # output-bias init so heads start near the base rate

    def __post_init__(self) -> None:
        if self.vocab_size < 1 or self.n_fields < 1:
            raise ValueError("vocab_size and n_fields must be >= 1")
        if self.emb_dim < 1 or self.hidden < 1:
            raise ValueError("emb_dim and hidden must be >= 1")


class Adam:
    """Adam with bias correction, L2 added to gradients before the moments,
    and touched-rows-only updates for sparse embedding gradients.

    Dense gradients are plain arrays; a sparse gradient is a ``(rows, mat)``
    pair with unique row indices.  Each tensor keeps its own step counter so
    heads updated at different cadences stay correctly bias-corrected.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, l2=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.l2 = l2
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict) -> None:
        for key, g in grads.items():
            p = params[key]
            if key not in self._m:
                self._m[key] = np.zeros_like(p)
                self._v[key] = np.zeros_like(p)
                self._t[key] = 0
            self._t[key] += 1
            t = self._t[key]
            bc1 = 1.0 - self.beta1 ** t
            bc2 = 1.0 - self.beta2 ** t
            if isinstance(g, tuple):  # sparse: (unique rows, per-row grads)
                rows, gm = g
                if not np.isfinite(gm).all():
                    raise NanGradientError(key)
                if self.l2:
                    gm = gm + self.l2 * p[rows]
                m = self._m[key]
                v = self._v[key]
                m[rows] = self.beta1 * m[rows] + (1.0 - self.beta1) * gm
                v[rows] = self.beta2 * v[rows] + (1.0 - self.beta2) * (gm * gm)
                p[rows] -= self.lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + self.eps)
            else:
                g = np.asarray(g, dtype=np.float64)
                if not np.isfinite(g).all():
                    raise NanGradientError(key)
                if self.l2:
                    g = g + self.l2 * p
                m = self._m[key]
                v = self._v[key]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _aggregate_embedding_grad(idx: np.ndarray, demb: np.ndarray):
    """Collapse duplicate embedding rows into (unique rows, summed grads)."""
    rows = idx.ravel()
    flat = demb.reshape(len(rows), -1)
    uniq, inv = np.unique(rows, return_inverse=True)
    out = np.zeros((len(uniq), flat.shape[1]))
    np.add.at(out, inv, flat)
    return uniq, out


def _init_dense(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SingleHeadNet:
    """Embeddings -> dense(H) -> dense(H) -> sigmoid, trained with manual grads."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d_in = cfg.n_fields * cfg.emb_dim
        self.params: dict[str, np.ndarray] = {
            "emb": rng.uniform(-1.0 / math.sqrt(cfg.emb_dim), 1.0 / math.sqrt(cfg.emb_dim),
                               size=(cfg.vocab_size, cfg.emb_dim)),
            "w1": _init_dense(rng, d_in, (d_in, cfg.hidden)),
            "b1": np.zeros(cfg.hidden),
            "w2": _init_dense(rng, cfg.hidden, (cfg.hidden, cfg.hidden)),
            "b2": np.zeros(cfg.hidden),
            "w3": _init_dense(rng, cfg.hidden, cfg.hidden),
            "b3": np.array(logit(cfg.base_rate)),
        }

    def forward(self, idx: np.ndarray, val: np.ndarray):
        p = self.params
        slope = self.cfg.lrelu_slope
        h0 = (p["emb"][idx] * val[..., None]).reshape(idx.shape[0], -1)
        z1 = h0 @ p["w1"] + p["b1"]
        a1 = leaky_relu(z1, slope)
        z2 = a1 @ p["w2"] + p["b2"]
        a2 = leaky_relu(z2, slope)
        z3 = a2 @ p["w3"] + p["b3"]
        probs = sigmoid(z3)
        cache = (idx, val, h0, z1, a1, z2, a2)
        return probs, cache

    def predict(self, idx: np.ndarray, val: np.ndarray) -> np.ndarray:
        return self.forward(idx, val)[0]

    def backward(self, cache, dlogit: np.ndarray) -> dict:
        p = self.params
        slope = self.cfg.lrelu_slope
        idx, val, h0, z1, a1, z2, a2 = cache
        grads: dict = {}
        grads["w3"] = a2.T @ dlogit
        grads["b3"] = np.array(dlogit.sum())
        da2 = np.outer(dlogit, p["w3"])
        dz2 = da2 * leaky_relu_grad(z2, slope)
        grads["w2"] = a1.T @ dz2
        grads["b2"] = dz2.sum(axis=0)
        da1 = dz2 @ p["w2"].T
        dz1 = da1 * leaky_relu_grad(z1, slope)
        grads["w1"] = h0.T @ dz1
        grads["b1"] = dz1.sum(axis=0)
        dh0 = dz1 @ p["w1"].T
        demb = dh0.reshape(idx.shape[0], idx.shape[1], -1) * val[..., None]
        grads["emb"] = _aggregate_embedding_grad(idx, demb)
        return grads


class SharedBottomNet:
    """K task heads plus a softmax policy head over a shared bottom."""

    def __init__(self, cfg: ModelConfig, n_tasks: int, seed: int):
        if n_tasks < 1:
            raise ValueError("need at least one task head")
        self.cfg = cfg
        self.n_tasks = n_tasks
        rng = np.random.default_rng(seed)
        d_in = cfg.n_fields * cfg.emb_dim
        params: dict[str, np.ndarray] = {
            "emb": rng.uniform(-1.0 / math.sqrt(cfg.emb_dim), 1.0 / math.sqrt(cfg.emb_dim),
                               size=(cfg.vocab_size, cfg.emb_dim)),
            "w1": _init_dense(rng, d_in, (d_in, cfg.hidden)),
            "b1": np.zeros(cfg.hidden),
        }
        for k in range(n_tasks):
            params[f"head{k}.w2"] = _init_dense(rng, cfg.hidden, (cfg.hidden, cfg.hidden))
            params[f"head{k}.b2"] = np.zeros(cfg.hidden)
            params[f"head{k}.w3"] = _init_dense(rng, cfg.hidden, cfg.hidden)
            params[f"head{k}.b3"] = np.array(logit(cfg.base_rate))
        params["policy.w"] = _init_dense(rng, cfg.hidden, (cfg.hidden, n_tasks))
        params["policy.b"] = np.zeros(n_tasks)
        self.params = params

    # -- shared bottom ----------------------------------------------------
    def _bottom(self, idx: np.ndarray, val: np.ndarray):
        p = self.params
        h0 = (p["emb"][idx] * val[..., None]).reshape(idx.shape[0], -1)
        z1 = h0 @ p["w1"] + p["b1"]
        a1 = leaky_relu(z1, self.cfg.lrelu_slope)
        return h0, z1, a1

    def _head(self, a1: np.ndarray, k: int):
        p = self.params
        z2 = a1 @ p[f"head{k}.w2"] + p[f"head{k}.b2"]
        a2 = leaky_relu(z2, self.cfg.lrelu_slope)
        z3 = a2 @ p[f"head{k}.w3"] + p[f"head{k}.b3"]
        return z2, a2, sigmoid(z3)

    # -- task path ---------------------------------------------------------
    def forward_task(self, idx: np.ndarray, val: np.ndarray, k: int):
        h0, z1, a1 = self._bottom(idx, val)
        z2, a2, probs = self._head(a1, k)
        return probs, (idx, val, h0, z1, a1, z2, a2)

    def backward_task(self, cache, dlogit: np.ndarray, k: int) -> dict:
        p = self.params
        slope = self.cfg.lrelu_slope
        idx, val, h0, z1, a1, z2, a2 = cache
        grads: dict = {}
        grads[f"head{k}.w3"] = a2.T @ dlogit
        grads[f"head{k}.b3"] = np.array(dlogit.sum())
        da2 = np.outer(dlogit, p[f"head{k}.w3"])
        dz2 = da2 * leaky_relu_grad(z2, slope)
        grads[f"head{k}.w2"] = a1.T @ dz2
        grads[f"head{k}.b2"] = dz2.sum(axis=0)
        da1 = dz2 @ p[f"head{k}.w2"].T
        dz1 = da1 * leaky_relu_grad(z1, slope)
        grads["w1"] = h0.T @ dz1
        grads["b1"] = dz1.sum(axis=0)
        dh0 = dz1 @ p["w1"].T
        demb = dh0.reshape(idx.shape[0], idx.shape[1], -1) * val[..., None]
        grads["emb"] = _aggregate_embedding_grad(idx, demb)
        return grads

    # -- policy path (gradients stop at the shared representation) ----------
    def forward_policy(self, idx: np.ndarray, val: np.ndarray):
        _, _, a1 = self._bottom(idx, val)
        zp = a1 @ self.params["policy.w"] + self.params["policy.b"]
        return softmax(zp), a1

    def backward_policy(self, a1: np.ndarray, dlogits: np.ndarray) -> dict:
        return {
            "policy.w": a1.T @ dlogits,
            "policy.b": dlogits.sum(axis=0),
        }

    # -- full bundle ---------------------------------------------------------
    def forward_bundle(self, idx: np.ndarray, val: np.ndarray) -> PredictionBundle:
        _, _, a1 = self._bottom(idx, val)
        preds = np.empty((idx.shape[0], self.n_tasks))
        for k in range(self.n_tasks):
            preds[:, k] = self._head(a1, k)[2]
        zp = a1 @ self.params["policy.w"] + self.params["policy.b"]
        weights = softmax(zp)
        return PredictionBundle(
            task_preds=preds,
            policy_weights=weights,
            ftp_pred=aggregate_predictions(preds, weights),
        )

    def task_preds(self, idx: np.ndarray, val: np.ndarray) -> np.ndarray:
        _, _, a1 = self._bottom(idx, val)
        preds = np.empty((idx.shape[0], self.n_tasks))
        for k in range(self.n_tasks):
            preds[:, k] = self._head(a1, k)[2]
        return preds

    def predict(self, idx: np.ndarray, val: np.ndarray) -> np.ndarray:
        return self.forward_bundle(idx, val).ftp_pred


# -- checkpoints -----------------------------------------------------------


def save_params(path: str, params: dict[str, np.ndarray]) -> None:
    """Versioned binary blob: magic, shape table, little-endian float32 data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name])
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f4").tobytes())


def load_params(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * n_items), dtype="<f4")
            if data.size != n_items:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            out[name] = data.astype(np.float64).reshape(shape)
    return out


def restore_params(net, path: str) -> None:
    """Load a checkpoint into a net, rejecting any name or shape mismatch."""
    loaded = load_params(path)
    if set(loaded) != set(net.params):
        raise CheckpointError(
            f"{path}: tensor names {sorted(loaded)} != expected {sorted(net.params)}"
        )
    for name, arr in loaded.items():
        if arr.shape != net.params[name].shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} shape {arr.shape} != {net.params[name].shape}"
            )
        net.params[name] = arr


# -- finite-difference verification -----------------------------------------


def _preactivations(net, idx: np.ndarray, val: np.ndarray) -> list[tuple[str, np.ndarray]]:
    """(bias key, pre-activation batch) for every Leaky-ReLU layer of a net."""
    out = []
    if isinstance(net, SharedBottomNet):
        _, z1, a1 = net._bottom(idx, val)
        out.append(("b1", z1))
        for k in range(net.n_tasks):
            out.append((f"head{k}.b2", net._head(a1, k)[0]))
    else:
        _, cache = net.forward(idx, val)
        out.append(("b1", cache[3]))
        out.append(("b2", cache[5]))
    return out


def nudge_preactivations(net, idx: np.ndarray, val: np.ndarray, threshold: float = 1e-3):
    """Shift hidden biases until no pre-activation sits within `threshold` of 0.

    The Leaky-ReLU kink is measure-zero but a finite-difference step straddles
    it; checks run on kink-free copies.
    """
    for _ in range(16):
        moved = False
        for bias_key, z in _preactivations(net, idx, val):
            close = (np.abs(z) < threshold).any(axis=0)
            if close.any():
                direction = np.where(z.sum(axis=0) >= 0, 1.0, -1.0)
                net.params[bias_key][close] += 3.0 * threshold * direction[close]
                moved = True
        if not moved:
            return
    raise RuntimeError("could not move pre-activations off the Leaky-ReLU kinks")


def grad_check(
    loss_fn: Callable[[], float],
    grads: dict,
    params: dict[str, np.ndarray],
    h: float = 1e-4,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` recomputes the scalar loss from the (possibly perturbed)
    ``params``; ``grads`` holds the analytic gradients to verify.  Only
    tensors present in ``grads`` are checked: a deliberate stop-gradient
    boundary is part of the loss definition, not an error.  Returns the max
    relative error, with the denominator floored at 1e-4 so noise on
    near-zero gradients is judged absolutely.
    """
    worst = 0.0
    for key, g in grads.items():
        if isinstance(g, tuple):  # sparse embedding grad -> densify
            rows, gm = g
            dense = np.zeros_like(params[key])
            dense[rows] = gm
            g = dense
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        flat = params[key].reshape(-1)  # view; perturbations hit the live params
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-4)
            worst = max(worst, err)
    return worst
