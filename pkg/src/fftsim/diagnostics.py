"""Divergence measures, effective class distributions and heterogeneity estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .aggregation import AggregationWeights
from .data import ClassDistribution, LabeledDataset
from .errors import ParameterError
from .training import ModelParams, loss_and_gradient

# how an infinite divergence is written to logs (always paired with a flag)
INF_SENTINEL = float(np.finfo(np.float64).max)


def chi_square(q, p) -> float:
    """``sum_c (q_c - p_c)^2 / p_c`` with ``p`` as the reference.

    Entries where both are zero are skipped. Mass in ``q`` where ``p`` is zero makes
    the divergence infinite; the caller is expected to flag it (see
    :func:`chi_square_flagged`).
    """
    q = np.asarray(q.alpha if isinstance(q, ClassDistribution) else q, dtype=np.float64)
    p = np.asarray(p.alpha if isinstance(p, ClassDistribution) else p, dtype=np.float64)
    if q.shape != p.shape:
        raise ParameterError("chi-square arguments differ in length")
    if np.any(p < 0):
        raise ParameterError("reference must be nonnegative")
    pos = p > 0
    if np.any(q[~pos] != 0):
        return math.inf
    return float(np.sum((q[pos] - p[pos]) ** 2 / p[pos]))


def chi_square_flagged(q, p) -> tuple[float, bool]:
    """(value, is_infinite) with the infinite case replaced by :data:`INF_SENTINEL`."""
    v = chi_square(q, p)
    if math.isinf(v):
        return INF_SENTINEL, True
    return v, False


def effective_mix(weights: AggregationWeights, alpha_s, alpha_miss, client_alphas) -> np.ndarray:
    """``beta_s alpha_s + beta_miss alpha_miss + sum_i beta_i alpha_i`` (not renormalized)."""
    out = weights.beta_s * np.asarray(alpha_s, dtype=np.float64)
    if weights.beta_miss > 0:
        if alpha_miss is None:
            raise ParameterError("compensatory weight is positive but its distribution is missing")
        out = out + weights.beta_miss * np.asarray(alpha_miss, dtype=np.float64)
    if len(client_alphas) != weights.beta.size:
        raise ParameterError("one distribution per weighted client entry is required")
    for b, a in zip(weights.beta, client_alphas):
        out = out + b * np.asarray(a, dtype=np.float64)
    return out


def effective_distribution(weights: AggregationWeights, alpha_s, alpha_miss, client_alphas) -> ClassDistribution:
    if not weights.normalized:
        raise ParameterError("effective distribution needs weights summing to one; use effective_mix")
    mix = effective_mix(weights, alpha_s, alpha_miss, client_alphas)
    return ClassDistribution(mix / mix.sum())


def chi2_p_beta(weights: AggregationWeights, p_s: float, p_clients) -> float:
    """``sum_j (beta_j - p_j)^2 / p_j`` over the server and all N clients.

    The compensatory model is trained on public data, so its weight is counted
    with the server's. Duplicate entries of one client are summed.
    """
    p_clients = np.asarray(p_clients, dtype=np.float64)
    beta = np.concatenate([[weights.beta_s + weights.beta_miss], weights.per_client(p_clients.size)])
    p = np.concatenate([[p_s], p_clients])
    return chi_square(beta, p)


@dataclass(frozen=True)
class HeterogeneityEstimate:
    V: np.ndarray  # (nodes, C); nan where the node has no samples of that class
    G: float
    global_grad: np.ndarray
    class_grads: np.ndarray  # (C, P) global per-class gradients; zero rows for empty classes
    node_grads: np.ndarray  # (nodes, P)
    node_class_grads: np.ndarray  # (nodes, C, P)


def _class_gradients(params: ModelParams, data: LabeledDataset):
    C = data.num_classes
    P = params.theta.size
    grads = np.zeros((C, P))
    present = np.zeros(C, dtype=bool)
    for c in range(C):
        idx = np.flatnonzero(data.labels == c)
        if idx.size:
            _, grads[c] = loss_and_gradient(params, data.features[idx], data.labels[idx])
            present[c] = True
    return grads, present


def estimate_heterogeneity(params: ModelParams, node_data: Sequence[LabeledDataset]) -> HeterogeneityEstimate:
    """Point estimates of the within-class deviations and the global gradient norm.

    ``V[j, c] = ||grad F_{j,c}(w) - grad F_{g,c}(w)||`` where each class gradient is
    the mean over that node's (or the union's) class-c samples, and
    ``G = ||grad F_g(w)||`` over the union of all node datasets. These are values at
    the given model, not the suprema the bounding assumptions refer to.
    """
    if not node_data:
        raise ParameterError("no node datasets")
    C = node_data[0].num_classes
    union = LabeledDataset(np.concatenate([d.features for d in node_data]),
                           np.concatenate([d.labels for d in node_data]), C)
    g_class, g_present = _class_gradients(params, union)
    _, g = loss_and_gradient(params, union.features, union.labels)
    V = np.full((len(node_data), C), np.nan)
    node_grads = np.zeros((len(node_data), params.theta.size))
    node_class = np.zeros((len(node_data), C, params.theta.size))
    for j, d in enumerate(node_data):
        grads, present = _class_gradients(params, d)
        node_class[j] = grads
        V[j, present] = np.linalg.norm(grads[present] - g_class[present], axis=1)
        _, node_grads[j] = loss_and_gradient(params, d.features, d.labels)
    return HeterogeneityEstimate(V, float(np.linalg.norm(g)), g, g_class, node_grads, node_class)


@dataclass(frozen=True)
class BoundTerms:
    term_a: np.ndarray  # per-round contributions; their sum is the full term
    term_b: np.ndarray

    @property
    def total_a(self) -> float:
        return float(self.term_a.sum())

    @property
    def total_b(self) -> float:
        return float(self.term_b.sum())


def bound_terms(node_weights: np.ndarray, chi2_pb: np.ndarray, chi2_ag: np.ndarray, V: np.ndarray, G: float,
                p: np.ndarray, node_alphas: np.ndarray, alpha_g: np.ndarray, total_steps: int) -> BoundTerms:
    """Evaluate the non-i.i.d. term and the unreliability term of the convergence bound.

    ``node_weights`` is (R, nodes) with the server in column 0, ``node_alphas`` is
    (nodes, C) and ``p`` holds the matching dataset weights. Per round r:

      a_r = 8 / (sqrt(T N) R) * sum_j beta_j^r sum_c (alpha_jc V_jc^2 + chi2(alpha_j; alpha_g) G^2)
      b_r = 20 / R * (chi2_pb^r * sum_c sum_j p_j alpha_jc V_jc^2 + chi2_ag^r G^2)

    The label divergence sits inside the class sum exactly as the bound is written.
    Absent (node, class) cells contribute zero since their ``alpha_jc`` is zero.
    """
    B = np.atleast_2d(np.asarray(node_weights, dtype=np.float64))
    R, nodes = B.shape
    N = nodes - 1
    if R < 1 or N < 1:
        raise ParameterError("need at least one round and one client")
    Vsq = np.nan_to_num(np.asarray(V, dtype=np.float64), nan=0.0) ** 2
    A = np.asarray(node_alphas, dtype=np.float64)
    C = A.shape[1]
    label = np.array([chi_square(A[j], alpha_g) for j in range(nodes)])
    per_node = (A * Vsq).sum(axis=1) + C * label * G ** 2
    term_a = 8.0 / (math.sqrt(total_steps * N) * R) * (B @ per_node)
    feature = float(np.sum(np.asarray(p)[:, None] * A * Vsq))
    term_b = 20.0 / R * (np.asarray(chi2_pb) * feature + np.asarray(chi2_ag) * G ** 2)
    return BoundTerms(term_a, term_b)
