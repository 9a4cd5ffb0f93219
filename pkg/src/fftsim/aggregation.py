"""Aggregation weights and the model combination step.

A round's contributors are the server, an optional compensatory model and the
connected client *entries*. Under partial participation the selection is a
multiset, so the same client id may appear more than once; every entry gets its
own weight and ``client_ids`` records which client each entry belongs to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, ParameterError

FULL = "full"
PARTIAL = "partial"


@dataclass(frozen=True)
class AggregationWeights:
    beta_s: float
    beta_miss: float
    beta: np.ndarray
    client_ids: np.ndarray
    flags: frozenset = frozenset()
    normalized: bool = True

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        ids = np.asarray(self.client_ids, dtype=np.int64).reshape(-1)
        if beta.shape != ids.shape:
            raise ContractError("one weight per client entry is required")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "client_ids", ids)
        object.__setattr__(self, "flags", frozenset(self.flags))
        if self.beta_s < 0 or self.beta_miss < 0 or np.any(beta < 0):
            raise ContractError("aggregation weights must be nonnegative")
        if self.normalized and abs(self.total - 1.0) > 1e-9:
            raise ContractError(f"weights sum to {self.total!r}, not 1")

    @property
    def total(self) -> float:
        return float(self.beta_s + self.beta_miss + self.beta.sum())

    def per_client(self, num_clients: int) -> np.ndarray:
        """Weight per client id, summing duplicate entries; zero for absent clients."""
        out = np.zeros(num_clients)
        np.add.at(out, self.client_ids, self.beta)
        return out


def detect_missing_classes(connected_alphas: Sequence[np.ndarray], num_classes: int) -> frozenset:
    """Classes with zero mass in every connected client's distribution."""
    covered = np.zeros(num_classes, dtype=bool)
    for a in connected_alphas:
        a = np.asarray(a)
        if a.shape != (num_classes,):
            raise ParameterError("class distribution length differs from num_classes")
        covered |= a > 0
    return frozenset(int(c) for c in np.flatnonzero(~covered))


def missing_distribution(missing, alpha_s: np.ndarray) -> np.ndarray:
    """Class distribution of the public samples restricted to the missing classes."""
    a = np.zeros_like(np.asarray(alpha_s, dtype=np.float64))
    idx = sorted(missing)
    a[idx] = alpha_s[idx]
    mass = a.sum()
    if mass <= 0:
        raise ParameterError("public set has no samples of the missing classes")
    return a / mass


def fedavg_weights(connected_ids, p_s: float, p_clients, participation: str = FULL) -> AggregationWeights:
    """Heuristic weights from dataset sizes.

    full: every contributor gets ``p_j / (p_s + sum of connected p_j)``.
    partial: the server keeps ``p_s`` and connected entries share ``1 - p_s`` equally.
    With no connected client the server takes everything and the round is flagged.
    """
    ids = np.asarray(connected_ids, dtype=np.int64).reshape(-1)
    p_clients = np.asarray(p_clients, dtype=np.float64)
    if ids.size == 0:
        return AggregationWeights(1.0, 0.0, np.zeros(0), ids, flags={"degenerate"})
    if participation == FULL:
        denom = p_s + p_clients[ids].sum()
        return AggregationWeights(p_s / denom, 0.0, p_clients[ids] / denom, ids)
    if participation == PARTIAL:
        return AggregationWeights(p_s, 0.0, np.full(ids.size, (1.0 - p_s) / ids.size), ids)
    raise ParameterError(f"unknown participation mode {participation!r}")


def project_simplex(v: np.ndarray, budget: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum(x) = budget}`` (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    if budget <= 0:
        return np.zeros_like(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - budget
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


@dataclass
class WLSResult:
    x: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    trace: list = field(default_factory=list)


class _WLS:
    """``f(x) = sum_c (b_c - (A x)_c)^2 / g_c`` over classes with ``g_c > 0``."""

    def __init__(self, alpha_g, columns, fixed):
        g = np.asarray(alpha_g, dtype=np.float64)
        keep = g > 0
        self.D = 1.0 / g[keep]
        self.A = np.asarray(columns, dtype=np.float64)[keep]
        self.b = g[keep] - np.asarray(fixed, dtype=np.float64)[keep]
        self.H = 2.0 * self.A.T @ (self.D[:, None] * self.A)
        self.q = -2.0 * self.A.T @ (self.D * self.b)

    def f(self, x):
        r = self.b - self.A @ x
        return float(np.sum(self.D * r * r))

    def grad(self, x):
        return self.H @ x + self.q


def _kkt_residual(prob: _WLS, x, budget):
    return float(np.max(np.abs(x - project_simplex(x - prob.grad(x), budget))))


def _polish(prob: _WLS, x, budget, max_rounds=None):
    """Active-set refinement on the support of ``x``.

    Takes the minimum-norm Newton step that keeps the sum fixed; if it would leave
    the nonnegative orthant it is shortened to the first blocking coordinate,
    which is dropped from the support, and the step is repeated. Every accepted
    step stays feasible and cannot increase the convex objective.
    """
    x = x.copy()
    for _ in range(max_rounds or x.size + 1):
        S = np.flatnonzero(x > 0)
        if S.size == 0:
            return None
        m = S.size
        K = np.zeros((m + 1, m + 1))
        K[:m, :m] = prob.H[np.ix_(S, S)]
        K[:m, m] = 1.0
        K[m, :m] = 1.0
        rhs = np.concatenate([-prob.grad(x)[S], [0.0]])
        d = np.linalg.lstsq(K, rhs, rcond=None)[0][:m]
        neg = d < 0
        t = 1.0
        if neg.any():
            ratios = -x[S][neg] / d[neg]
            t = min(1.0, float(ratios.min()))
        y = x.copy()
        y[S] = np.maximum(x[S] + t * d, 0.0)
        if t < 1.0:
            y[S[neg][np.argmin(ratios)]] = 0.0
        x = y * (budget / y.sum())
        if t >= 1.0:
            break
    return x


def solve_constrained_wls(alpha_g, columns, fixed=None, budget: float = 1.0, tol: float = 1e-10,
                          max_iter: int = 10_000, x0=None) -> WLSResult:
    """Minimize ``sum_c (alpha_g_c - fixed_c - (A x)_c)^2 / alpha_g_c`` with x on the scaled simplex.

    ``columns`` is a (C, m) matrix whose columns are the class distributions of the
    free contributors and ``fixed`` is the already-weighted sum of the fixed ones.
    Classes with zero global mass are left out of the sum. Projected gradient with
    step ``1/L`` is interleaved with an exact solve on the current support, which is
    accepted only when it is feasible and does not increase the objective; the
    recorded objective trace is therefore non-increasing.
    """
    A = np.asarray(columns, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] == 0:
        raise ParameterError("at least one free weight is required")
    alpha_g = np.asarray(alpha_g, dtype=np.float64)
    if A.shape[0] != alpha_g.size:
        raise ParameterError("column length differs from the class count")
    fixed = np.zeros_like(alpha_g) if fixed is None else np.asarray(fixed, dtype=np.float64)
    if budget < 0:
        raise ParameterError("budget must be nonnegative")
    m = A.shape[1]
    prob = _WLS(alpha_g, A, fixed)
    if budget == 0:
        x = np.zeros(m)
        return WLSResult(x, prob.f(x), 0.0, 0, [prob.f(x)])

    L = float(np.linalg.eigvalsh(prob.H)[-1]) if prob.H.size else 0.0
    step = 1.0 / L if L > 0 else 1.0
    x = project_simplex(np.full(m, budget / m) if x0 is None else np.asarray(x0, dtype=np.float64), budget)
    fx = prob.f(x)
    trace = [fx]
    res = _kkt_residual(prob, x, budget)
    it = 0
    while res > tol and it < max_iter:
        it += 1
        y = project_simplex(x - step * prob.grad(x), budget)
        fy = prob.f(y)
        if fy <= fx:
            x, fx = y, fy
        if it % 5 == 1:
            z = _polish(prob, x, budget)
            if z is not None:
                fz = prob.f(z)
                if fz <= fx:
                    x, fx = z, fz
        trace.append(fx)
        res = _kkt_residual(prob, x, budget)
    return WLSResult(x, fx, res, it, trace)


def wls_objective(alpha_g, alpha_tilde) -> float:
    """The weighted least-squares objective written in terms of the effective distribution."""
    g = np.asarray(alpha_g, dtype=np.float64)
    t = np.asarray(alpha_tilde, dtype=np.float64)
    keep = g > 0
    return float(np.sum((g[keep] - t[keep]) ** 2 / g[keep]))


def fedauto_weights(connected_ids, alpha_g, alpha_s, client_alphas, alpha_miss=None,
                    use_compensation: bool = True, relax_zero_clients: bool = False,
                    tol: float = 1e-10):
    """Server weight fixed at ``1/(1 + n_connected)``; the rest from the weighted least squares.

    ``client_alphas`` holds one distribution per connected entry. ``alpha_miss`` is the
    compensatory model's distribution, or None when no class is missing.
    Returns ``(AggregationWeights, WLSResult or None)``.
    """
    ids = np.asarray(connected_ids, dtype=np.int64).reshape(-1)
    alpha_g = np.asarray(alpha_g, dtype=np.float64)
    alpha_s = np.asarray(alpha_s, dtype=np.float64)
    n = ids.size
    if len(client_alphas) != n:
        raise ParameterError("one class distribution per connected entry is required")
    with_miss = use_compensation and alpha_miss is not None
    if n == 0:
        if relax_zero_clients and with_miss:
            res = solve_constrained_wls(alpha_g, np.column_stack([alpha_s, alpha_miss]), budget=1.0, tol=tol)
            return AggregationWeights(res.x[0], res.x[1], np.zeros(0), ids, flags={"degenerate"}), res
        return AggregationWeights(1.0, 0.0, np.zeros(0), ids, flags={"degenerate"}), None
    beta_s = 1.0 / (1.0 + n)
    cols = ([np.asarray(alpha_miss, dtype=np.float64)] if with_miss else []) + [np.asarray(a, dtype=np.float64) for a in client_alphas]
    res = solve_constrained_wls(alpha_g, np.column_stack(cols), fixed=beta_s * alpha_s, budget=1.0 - beta_s, tol=tol)
    x = res.x
    beta_miss = float(x[0]) if with_miss else 0.0
    beta = x[1:] if with_miss else x
    return AggregationWeights(beta_s, beta_miss, beta, ids), res


def ablation_weights(variant: str, connected_ids, alpha_g, alpha_s, client_alphas, alpha_miss=None,
                     tol: float = 1e-10):
    """Weights with one or both FedAuto modules disabled.

    ``no_compensation``: no compensatory model, the least squares runs without it.
    ``no_optimization``: server weight ``1/(1+n)``; the compensatory model (if any) and
    every entry get ``n/(1+n)^2``, otherwise entries get ``1/(1+n)``.
    ``neither``: plain averaging of server and entries at ``1/(1+n)``.
    ``full``: identical to :func:`fedauto_weights`.
    """
    ids = np.asarray(connected_ids, dtype=np.int64).reshape(-1)
    n = ids.size
    if variant == "full":
        return fedauto_weights(ids, alpha_g, alpha_s, client_alphas, alpha_miss, tol=tol)
    if variant == "no_compensation":
        return fedauto_weights(ids, alpha_g, alpha_s, client_alphas, None, use_compensation=False, tol=tol)
    flags = {"degenerate"} if n == 0 else set()
    share = 1.0 / (1.0 + n)
    if variant == "no_optimization":
        if alpha_miss is not None:
            w = n / (1.0 + n) ** 2
            return AggregationWeights(share, w, np.full(n, w), ids, flags=flags), None
        return AggregationWeights(share, 0.0, np.full(n, share), ids, flags=flags), None
    if variant == "neither":
        return AggregationWeights(share, 0.0, np.full(n, share), ids, flags=flags), None
    raise ParameterError(f"unknown ablation variant {variant!r}")


def aggregate(weights: AggregationWeights, server_model: np.ndarray | None, miss_model: np.ndarray | None,
              client_models: Sequence[np.ndarray]) -> np.ndarray:
    """``beta_s w_s + beta_miss w_miss + sum_i beta_i w_i`` over flat parameter vectors.

    Terms are accumulated server first, then the compensatory model, then client
    entries in ascending id order, so the floating-point result is reproducible.
    """
    if len(client_models) != weights.beta.size:
        raise ContractError("one model per weighted client entry is required")
    if weights.beta_miss > 0 and miss_model is None:
        raise ContractError("compensatory weight is positive but no compensatory model was given")
    if weights.beta_s > 0 and server_model is None:
        raise ContractError("server weight is positive but no server model was given")
    terms = []
    if server_model is not None and weights.beta_s > 0:
        terms.append((weights.beta_s, server_model))
    if miss_model is not None and weights.beta_miss > 0:
        terms.append((weights.beta_miss, miss_model))
    for k in np.argsort(weights.client_ids, kind="stable"):
        terms.append((weights.beta[k], client_models[k]))
    if not terms:
        ref = server_model if server_model is not None else (client_models[0] if client_models else None)
        if ref is None:
            raise ContractError("nothing to aggregate")
        return np.zeros_like(np.asarray(ref, dtype=np.float64))
    out = np.zeros_like(np.asarray(terms[0][1], dtype=np.float64))
    for b, w in terms:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != out.shape:
            raise ContractError("model dimensions differ")
        out = out + b * w
    return out


def tf_selection_probs(p_clients, eps0, eps_threshold: float = 0.9) -> np.ndarray:
    """Selection probabilities minimizing ``sum p_i / (s_i (1 - eps_i))`` on the simplex.

    Clients above the reliability threshold get zero; the rest get
    ``s_i`` proportional to ``sqrt(p_i / (1 - eps_i))``.
    """
    p = np.asarray(p_clients, dtype=np.float64)
    e = np.asarray(eps0, dtype=np.float64)
    eligible = (e <= eps_threshold) & (e < 1.0)
    s = np.zeros_like(p)
    if not eligible.any():
        return s
    s[eligible] = np.sqrt(p[eligible] / (1.0 - e[eligible]))
    return s / s.sum()


def tf_aggregation_weights(connected_ids, p_clients, eps0, s, K: int) -> AggregationWeights:
    """Per-entry coefficients ``p_i / (K s_i (1 - eps_i))``; not renormalized and no server term."""
    ids = np.asarray(connected_ids, dtype=np.int64).reshape(-1)
    p = np.asarray(p_clients, dtype=np.float64)
    e = np.asarray(eps0, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if ids.size == 0:
        return AggregationWeights(0.0, 0.0, np.zeros(0), ids, flags={"degenerate"}, normalized=False)
    if np.any(s[ids] <= 0):
        raise ContractError("a connected client has zero selection probability")
    beta = p[ids] / (K * s[ids] * (1.0 - e[ids]))
    return AggregationWeights(0.0, 0.0, beta, ids, normalized=False)


def fedawe_correct(local_model: np.ndarray, prev_global: np.ndarray, r: int, tau: int,
                   gamma_g: float = 0.001) -> np.ndarray:
    """``w - gamma_g (r - tau) (w_global_prev - w)``."""
    if tau > r - 1:
        raise ContractError("last successful round must precede the current round")
    w = np.asarray(local_model, dtype=np.float64)
    return w - gamma_g * (r - tau) * (np.asarray(prev_global, dtype=np.float64) - w)


def scaffold_global_update(prev_global: np.ndarray, connected_models: Sequence[np.ndarray], c: np.ndarray,
                           c_deltas: Sequence[np.ndarray], num_clients: int, gamma_g: float = 1.0):
    """Returns ``(new global, new server control variate, degenerate flag)``.

    The model moves by ``gamma_g`` times the mean connected delta; the server
    variate moves by the connected variate deltas summed and divided by N.
    Under sampling with replacement ``connected_models`` has one entry per
    received upload while ``c_deltas`` has one per distinct client, since a
    client's variate changes once per round however often it was drawn.
    """
    prev = np.asarray(prev_global, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if len(c_deltas) > len(connected_models) or (len(connected_models) > 0) != (len(c_deltas) > 0):
        raise ContractError("need one control-variate delta per distinct connected client")
    n = len(connected_models)
    if n == 0:
        return prev.copy(), c.copy(), True
    delta = np.zeros_like(prev)
    dc = np.zeros_like(c)
    for w in connected_models:
        delta = delta + (np.asarray(w) - prev)
    for d in c_deltas:
        dc = dc + np.asarray(d)
    return prev + (gamma_g / n) * delta, c + dc / num_clients, False
