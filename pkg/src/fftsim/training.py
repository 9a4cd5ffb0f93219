"""Softmax classifiers and the local update rules run by clients and the server."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import ContractError, CoverageGap, CoverageGapWarning, ParameterError


@dataclass(frozen=True)
class Arch:
    """``hidden=None`` is a linear softmax model, otherwise a one-hidden-layer ReLU MLP."""

    in_dim: int
    num_classes: int
    hidden: int | None = None

    @property
    def num_params(self) -> int:
        d, C, h = self.in_dim, self.num_classes, self.hidden
        if h is None:
            return C * d + C
        return h * d + h + C * h + C

    def describe(self) -> str:
        if self.hidden is None:
            return f"Linear({self.in_dim}->{self.num_classes})"
        return f"MLP({self.in_dim}->{self.hidden}->{self.num_classes}, ReLU)"


@dataclass(frozen=True)
class ModelParams:
    theta: np.ndarray
    arch: Arch

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size != self.arch.num_params:
            raise ContractError(f"theta has {theta.size} entries, {self.arch.describe()} needs {self.arch.num_params}")
        object.__setattr__(self, "theta", theta)

    def with_theta(self, theta) -> "ModelParams":
        return ModelParams(np.asarray(theta, dtype=np.float64), self.arch)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    local_steps: int = 5
    batch_size: int = 32
    variant: str = "plain"  # plain | prox | scaffold
    mu: float = 0.0
    lr_drop_round: int | None = None
    lr_drop_factor: float = 0.1

    def __post_init__(self):
        if not self.learning_rate >= 0 or self.local_steps < 1 or self.batch_size < 1:
            raise ParameterError("need learning_rate >= 0, local_steps >= 1, batch_size >= 1")
        if self.variant not in ("plain", "prox", "scaffold"):
            raise ParameterError(f"unknown training variant {self.variant!r}")
        if self.mu < 0:
            raise ParameterError("proximal coefficient must be nonnegative")

    def lr_at(self, round_index: int) -> float:
        if self.lr_drop_round is not None and round_index > self.lr_drop_round:
            return self.learning_rate * self.lr_drop_factor
        return self.learning_rate


def init_params(arch: Arch, rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    d, C, h = arch.in_dim, arch.num_classes, arch.hidden
    if h is None:
        shapes = [((C, d), d), ((C,), d)]
    else:
        shapes = [((h, d), d), ((h,), d), ((C, h), h), ((C,), h)]
    parts = [rng.uniform(-1.0, 1.0, size=shape).ravel() / math.sqrt(fan_in) for shape, fan_in in shapes]
    return ModelParams(np.concatenate(parts), arch)


def _unpack(params: ModelParams):
    a, th = params.arch, params.theta
    d, C, h = a.in_dim, a.num_classes, a.hidden
    if h is None:
        return th[:C * d].reshape(C, d), th[C * d:]
    o = 0
    W1 = th[o:o + h * d].reshape(h, d); o += h * d
    b1 = th[o:o + h]; o += h
    W2 = th[o:o + C * h].reshape(C, h); o += C * h
    return W1, b1, W2, th[o:o + C]


def logits(params: ModelParams, X: np.ndarray) -> np.ndarray:
    if params.arch.hidden is None:
        W, b = _unpack(params)
        return X @ W.T + b
    W1, b1, W2, b2 = _unpack(params)
    return np.maximum(X @ W1.T + b1, 0.0) @ W2.T + b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_gradient(params: ModelParams, X: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. theta."""
    n = y.shape[0]
    if n == 0:
        raise ParameterError("empty batch")
    arch = params.arch
    if arch.hidden is None:
        W, b = _unpack(params)
        z = X @ W.T + b
    else:
        W1, b1, W2, b2 = _unpack(params)
        pre = X @ W1.T + b1
        hid = np.maximum(pre, 0.0)
        z = hid @ W2.T + b2
    logp = _log_softmax(z)
    loss = -logp[np.arange(n), y].mean()
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    if arch.hidden is None:
        grad = np.concatenate([(dz.T @ X).ravel(), dz.sum(axis=0)])
    else:
        dh = (dz @ W2) * (pre > 0)
        grad = np.concatenate([(dh.T @ X).ravel(), dh.sum(axis=0), (dz.T @ hid).ravel(), dz.sum(axis=0)])
    return float(loss), grad


def dataset_gradient(params: ModelParams, data: LabeledDataset):
    return loss_and_gradient(params, data.features, data.labels)


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Yield ``steps`` sorted index batches, reshuffling after each pass over the data."""
    size = min(batch_size, n)
    perm, pos = None, n
    for _ in range(steps):
        if pos >= n:
            perm, pos = rng.permutation(n), 0
        batch = perm[pos:pos + size]
        pos += size
        yield np.sort(batch)


def _run(params: ModelParams, data: LabeledDataset, cfg: TrainConfig, rng, direction, lr):
    if len(data) == 0:
        raise ParameterError("cannot train on an empty dataset")
    w = params.theta.copy()
    X, y = data.features, data.labels
    for batch in _batches(len(data), cfg.batch_size, cfg.local_steps, rng):
        _, g = loss_and_gradient(params.with_theta(w), X[batch], y[batch])
        w = w - lr * direction(w, g)
    return params.with_theta(w)


def local_update(params: ModelParams, data: LabeledDataset, cfg: TrainConfig, rng: np.random.Generator,
                 lr: float | None = None) -> ModelParams:
    """``local_steps`` mini-batch SGD steps starting from the broadcast model."""
    return _run(params, data, cfg, rng, lambda w, g: g, cfg.learning_rate if lr is None else lr)


server_update = local_update


def compensation_subset(server_data: LabeledDataset, missing) -> tuple[LabeledDataset, frozenset]:
    """Public samples whose label is missing, plus the missing classes the public set lacks."""
    missing = frozenset(int(c) for c in missing)
    if not missing:
        raise ParameterError("no missing classes to compensate")
    keep = np.isin(server_data.labels, sorted(missing))
    present = frozenset(int(c) for c in np.unique(server_data.labels[keep]))
    return server_data.subset(np.flatnonzero(keep)), missing - present


def compensatory_update(params: ModelParams, server_data: LabeledDataset, missing, cfg: TrainConfig,
                        rng: np.random.Generator, lr: float | None = None, strict: bool = True) -> ModelParams | None:
    """Train from the broadcast model on the public samples of the missing classes only.

    If the public set lacks some of those classes, ``strict`` raises
    :class:`CoverageGap`; otherwise a warning is issued and the covered subset is
    used (``None`` when nothing is covered).
    """
    subset, uncovered = compensation_subset(server_data, missing)
    if uncovered:
        if strict:
            raise CoverageGap(uncovered)
        warnings.warn(str(CoverageGap(uncovered)), CoverageGapWarning, stacklevel=2)
        if len(subset) == 0:
            return None
    return local_update(params, subset, cfg, rng, lr=lr)


def prox_local_update(params: ModelParams, data: LabeledDataset, cfg: TrainConfig, anchor: ModelParams,
                      rng: np.random.Generator, lr: float | None = None) -> ModelParams:
    """SGD on ``F + mu/2 ||w - anchor||^2``."""
    a = anchor.theta
    mu = cfg.mu
    return _run(params, data, cfg, rng, lambda w, g: g + mu * (w - a), cfg.learning_rate if lr is None else lr)


def scaffold_local_update(params: ModelParams, data: LabeledDataset, cfg: TrainConfig, c: np.ndarray,
                          c_i: np.ndarray, K: float, rng: np.random.Generator, lr: float | None = None):
    """Control-variate corrected SGD; returns ``(model, new client control variate)``.

    The new variate is ``c_i - c + (w_start - w_end) / (K * lr)``.
    """
    c = np.asarray(c, dtype=np.float64)
    c_i = np.asarray(c_i, dtype=np.float64)
    if c.shape != params.theta.shape or c_i.shape != params.theta.shape:
        raise ContractError("control variate length does not match the model")
    lr = cfg.learning_rate if lr is None else lr
    correction = c - c_i
    out = _run(params, data, cfg, rng, lambda w, g: g + correction, lr)
    if lr == 0:
        return out, c_i.copy()
    c_new = c_i - c + (params.theta - out.theta) / (K * lr)
    return out, c_new


def effective_objective(params: ModelParams, X, y, variant: str = "plain", mu: float = 0.0,
                        anchor: np.ndarray | None = None, c=None, c_i=None) -> float:
    """Objective whose gradient each variant follows.

    prox adds ``mu/2 ||w - anchor||^2``; scaffold adds the linear term ``<c - c_i, w>``.
    """
    loss, _ = loss_and_gradient(params, X, y)
    w = params.theta
    if variant == "prox":
        loss += 0.5 * mu * float(np.sum((w - anchor) ** 2))
    elif variant == "scaffold":
        loss += float(np.dot(np.asarray(c) - np.asarray(c_i), w))
    return loss


def step_direction(params: ModelParams, X, y, variant: str = "plain", mu: float = 0.0,
                   anchor: np.ndarray | None = None, c=None, c_i=None) -> np.ndarray:
    _, g = loss_and_gradient(params, X, y)
    if variant == "prox":
        return g + mu * (params.theta - anchor)
    if variant == "scaffold":
        return g - np.asarray(c_i) + np.asarray(c)
    return g


def evaluate(params: ModelParams, data: LabeledDataset):
    """(mean cross-entropy, accuracy) on a dataset."""
    if len(data) == 0:
        raise ParameterError("empty evaluation set")
    z = logits(params, data.features)
    logp = _log_softmax(z)
    loss = -logp[np.arange(len(data)), data.labels].mean()
    acc = float(np.mean(np.argmax(z, axis=1) == data.labels))
    return float(loss), acc
