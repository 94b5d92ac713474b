"""Sequence classifier on top of a recurrent cell, with its optimizers and training loop.

The classifier reads the final dynamics latent feature h_T (or the time mean
of h with ``pool="mean"``) through a linear layer into softmax logits.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .autodiff import backward_sequence, clip_global_norm
from .cells import CellOptions, CellParams, forward_sequence, init_params

log = logging.getLogger(__name__)

TAU_POLICIES = ("first_frame", "random_per_sequence")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class ClassifierParams:
    cell: CellParams
    W_out: np.ndarray          # (C, D_h)
    b_out: np.ndarray          # (C,)
    tau_policy: Union[str, int] = "first_frame"
    tau_seed: int = 0
    pool: str = "last"

    def __post_init__(self):
        C = self.b_out.shape[0]
        if self.W_out.shape != (C, self.cell.hidden_dim):
            raise ValueError(f"readout shape {self.W_out.shape} incompatible with hidden_dim "
                             f"{self.cell.hidden_dim} and {C} classes")
        if self.pool not in ("last", "mean"):
            raise ValueError(f"unknown pool {self.pool!r}")
        check_tau_policy(self.tau_policy)

    @property
    def num_classes(self):
        return self.b_out.shape[0]

    @property
    def variant(self):
        return self.cell.variant

    def named(self):
        out = dict(self.cell.arrays)
        out["W_out"] = self.W_out
        out["b_out"] = self.b_out
        return out

    def with_arrays(self, arrays):
        cell = self.cell.replace({k: arrays[k] for k in self.cell.keys()})
        return ClassifierParams(cell, arrays["W_out"], arrays["b_out"], self.tau_policy, self.tau_seed, self.pool)


def check_tau_policy(policy):
    if isinstance(policy, (int, np.integer)) and not isinstance(policy, bool):
        if policy < 0:
            raise ValueError(f"fixed tau must be >= 0, got {policy}")
        return
    if policy not in TAU_POLICIES:
        raise ValueError(f"unknown tau policy {policy!r}; expected {TAU_POLICIES} or an integer")


def init_classifier(input_dim, hidden_dim, num_classes, variant, seed,
                    options=CellOptions(), tau_policy="first_frame", pool="last"):
    cell = init_params(input_dim, hidden_dim, variant, seed, options)
    rng = np.random.default_rng([seed, 101])
    s = np.sqrt(6.0 / (hidden_dim + num_classes))
    W_out = rng.uniform(-s, s, (num_classes, hidden_dim))
    return ClassifierParams(cell, W_out, np.zeros(num_classes), tau_policy, seed, pool)


def select_tau(sample, policy, seed=0):
    T = sample.frames.shape[0]
    if policy == "first_frame":
        return 0
    if policy == "random_per_sequence":
        # fixed per (run seed, sequence) so training and evaluation agree
        rng = np.random.default_rng([seed, sample.seed % (2 ** 63), sample.mode_id])
        return int(rng.integers(T))
    if not 0 <= policy < T:
        raise ValueError(f"fixed tau {policy} outside sequence of length {T}")
    return int(policy)


def static_frame(sample, policy, seed=0):
    return sample.frames[select_tau(sample, policy, seed)]


def _stack(params, samples):
    frames = np.stack([s.frames for s in samples], axis=1)        # (T, B, D_x)
    if frames.shape[-1] != params.cell.input_dim:
        raise ValueError(f"frame dim {frames.shape[-1]} does not match input_dim {params.cell.input_dim}")
    static = None
    if params.variant != "lstm":
        static = np.stack([static_frame(s, params.tau_policy, params.tau_seed) for s in samples])
    return frames, static


def _readout_features(params, state, caches):
    if params.pool == "mean":
        return np.mean([k.h for k in caches], axis=0)
    return state.h


def encode(params, sample):
    """Logits of one sample, shape (C,)."""
    frames = np.asarray(sample.frames, dtype=np.float64)
    if frames.shape[-1] != params.cell.input_dim:
        raise ValueError(f"frame dim {frames.shape[-1]} does not match input_dim {params.cell.input_dim}")
    static = None if params.variant == "lstm" else static_frame(sample, params.tau_policy, params.tau_seed)
    state, caches = forward_sequence(params.cell, frames, static)
    return _readout_features(params, state, caches) @ params.W_out.T + params.b_out


def softmax_cross_entropy(logits, label):
    """Loss and logit gradient; ``logits`` may be (C,) with an int label or (B, C) with labels (B,)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(label))
    C = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"label {label} out of range for {C} classes")
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    p = np.exp(logp)
    onehot = np.zeros_like(logits)
    if logits.ndim == 1:
        onehot[labels[0]] = 1.0
        return float(-logp[labels[0]]), p - onehot
    onehot[np.arange(len(labels)), labels] = 1.0
    return -logp[np.arange(len(labels)), labels], p - onehot


def batch_loss_and_grads(params, samples):
    """Mean loss, gradient dict and predictions over a same-length batch."""
    frames, static = _stack(params, samples)
    state, caches = forward_sequence(params.cell, frames, static)
    feats = _readout_features(params, state, caches)
    logits = feats @ params.W_out.T + params.b_out
    labels = np.array([s.label for s in samples])
    losses, d_logits = softmax_cross_entropy(logits, labels)
    B = len(samples)
    d_logits = d_logits / B
    grads = {}
    d_feat = d_logits @ params.W_out
    if params.pool == "mean":
        T = frames.shape[0]
        steps = np.broadcast_to(d_feat / T, (T,) + d_feat.shape)
        cell_grads = backward_sequence(params.cell, caches, np.zeros_like(d_feat), d_h_steps=steps)
    else:
        cell_grads = backward_sequence(params.cell, caches, d_feat)
    grads.update(cell_grads.params)
    grads["W_out"] = d_logits.T @ feats
    grads["b_out"] = d_logits.sum(axis=0)
    return float(losses.mean()), grads, logits.argmax(axis=1)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 8
    optimizer: str = "adam"
    seed: int = 0
    grad_clip: float = 5.0
    tau_policy: Union[str, int] = "first_frame"
    hidden_dim: int = 32
    pool: str = "last"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        check_tau_policy(self.tau_policy)

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(state, params, grads, config):
    """One SGD-momentum or Adam update of a name -> array dict; returns new arrays.

    ``state`` carries the moment estimates and is updated in place.
    """
    state.step += 1
    lr = config.learning_rate
    out = {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter {w.shape}")
        if config.optimizer == "sgd_momentum":
            vel = config.momentum * state.m.get(name, 0.0) + g
            state.m[name] = vel
            out[name] = w - lr * vel
        else:
            m = config.beta1 * state.m.get(name, 0.0) + (1.0 - config.beta1) * g
            v = config.beta2 * state.v.get(name, 0.0) + (1.0 - config.beta2) * g * g
            state.m[name], state.v[name] = m, v
            m_hat = m / (1.0 - config.beta1 ** state.step)
            v_hat = v / (1.0 - config.beta2 ** state.step)
            out[name] = w - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return out


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    train_accuracy: float
    wall_time_ms: float


def _batches(samples, order, batch_size):
    for start in range(0, len(order), batch_size):
        chunk = [samples[j] for j in order[start:start + batch_size]]
        # group by length so each group runs as one stacked array
        groups = {}
        for s in chunk:
            groups.setdefault(s.frames.shape[0], []).append(s)
        yield len(chunk), [groups[k] for k in sorted(groups)]


def train(samples, variant, config=None, options=CellOptions(), init=None, on_epoch=None):
    """Minibatch BPTT training; returns ``(ClassifierParams, [EpochMetrics])``."""
    config = config or TrainConfig()
    config.validate()
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    dims = {s.frames.shape[1] for s in samples}
    if len(dims) != 1:
        raise ValueError(f"samples have inconsistent frame dims {sorted(dims)}")
    num_classes = max(s.label for s in samples) + 1
    params = init or init_classifier(dims.pop(), config.hidden_dim, num_classes, variant, config.seed,
                                     options, config.tau_policy, config.pool)
    rng = np.random.default_rng([config.seed, 202])
    opt_state = OptimizerState()
    history = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(samples))
        loss_sum, correct = 0.0, 0
        for batch_len, groups in _batches(samples, order, config.batch_size):
            total = None
            for group in groups:
                loss, grads, pred = batch_loss_and_grads(params, group)
                w = len(group) / batch_len
                loss_sum += loss * len(group)
                correct += int(np.sum(pred == np.array([s.label for s in group])))
                scaled = {k: g * w for k, g in grads.items()}
                total = scaled if total is None else {k: total[k] + scaled[k] for k in total}
            if not np.isfinite(loss_sum):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            total, _ = clip_global_norm(total, config.grad_clip)
            params = params.with_arrays(optimizer_step(opt_state, params.named(), total, config))
        m = EpochMetrics(epoch, loss_sum / len(samples), correct / len(samples),
                         (time.perf_counter() - t0) * 1000.0)
        history.append(m)
        log.debug("epoch %d loss %.5f acc %.4f", m.epoch, m.mean_loss, m.train_accuracy)
        if on_epoch is not None:
            on_epoch(m)
    return params, history


@dataclass
class EvalResult:
    rate: float
    confusion: np.ndarray     # rows: true class, cols: predicted
    total: int

    @property
    def correct(self):
        return int(np.trace(self.confusion))


def predict(params, samples, batch_size=256):
    preds = np.empty(len(samples), dtype=np.int64)
    by_len = {}
    for idx, s in enumerate(samples):
        by_len.setdefault(s.frames.shape[0], []).append(idx)
    for _, idxs in sorted(by_len.items()):
        for start in range(0, len(idxs), batch_size):
            chunk = idxs[start:start + batch_size]
            frames, static = _stack(params, [samples[j] for j in chunk])
            state, caches = forward_sequence(params.cell, frames, static)
            logits = _readout_features(params, state, caches) @ params.W_out.T + params.b_out
            preds[chunk] = logits.argmax(axis=1)
    return preds


def evaluate(params, samples):
    """Recognition rate and confusion counts over ``samples``."""
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(params, samples)
    C = params.num_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    for s, p in zip(samples, preds):
        confusion[s.label, p] += 1
    return EvalResult(float(np.trace(confusion)) / len(samples), confusion, len(samples))


def metrics_csv(history, include_time=False):
    cols = ["epoch", "mean_loss", "train_accuracy"] + (["wall_time_ms"] if include_time else [])
    lines = [",".join(cols)]
    for m in history:
        row = [str(m.epoch), repr(m.mean_loss), repr(m.train_accuracy)]
        if include_time:
            row.append(f"{m.wall_time_ms:.3f}")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
