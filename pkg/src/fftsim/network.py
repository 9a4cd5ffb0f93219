"""Connection-failure processes for heterogeneous client links.

Unit conventions: powers are given in dBm and converted to milliwatts, the
noise PSD is converted from dBm/Hz to mW/Hz, so the SNR ``P * |h|^2 / (W * N0)``
is dimensionless. Channel gains are linear power ratios; ``*_dB`` values are
``10 * log10`` of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ContractError, ParameterError


class Standard(str, Enum):
    WIRED = "Wired"
    WIFI24 = "WiFi24"
    WIFI5 = "WiFi5"
    CELL4G = "Cell4G"
    CELL5G = "Cell5G"

    @property
    def wireless(self) -> bool:
        return self is not Standard.WIRED

    @property
    def indoor(self) -> bool:
        return self in (Standard.WIFI24, Standard.WIFI5)


# (tx power dBm, bandwidth MHz, carrier MHz) per standard
DEFAULT_STANDARDS = {
    Standard.WIRED: (-20.0, 10.0, 0.0),
    Standard.WIFI24: (20.0, 10.0, 2400.0),
    Standard.WIFI5: (23.0, 10.0, 5000.0),
    Standard.CELL4G: (23.0, 1.8, 1800.0),
    Standard.CELL5G: (23.0, 2.88, 3500.0),
}

WALL_LOSS_DB = {
    Standard.WIFI24: 12.0,
    Standard.WIFI5: 18.0,
    Standard.CELL4G: 10.0,
    Standard.CELL5G: 15.0,
}

DEFAULT_FAILURE_RATES = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)

# 215,466 float32 parameters = 0.86 MB uploaded in 0.8 s
MNIST_MODEL_SIZE_BITS = 0.86e6 * 8
MNIST_TX_DELAY_S = 0.8


def dbm_to_mw(dbm):
    return 10.0 ** (np.asarray(dbm, dtype=np.float64) / 10.0)


def mw_to_dbm(mw):
    return 10.0 * np.log10(mw)


@dataclass(frozen=True)
class LinkConfig:
    standard: Standard
    tx_power_dBm: float
    bandwidth_Hz: float
    carrier_MHz: float
    distance_km: float = 0.01
    wall_count: int = 0
    line_of_sight: bool = True
    model_size_bits: float = MNIST_MODEL_SIZE_BITS
    tx_delay_s: float = MNIST_TX_DELAY_S

    def __post_init__(self):
        object.__setattr__(self, "standard", Standard(self.standard))
        if not self.bandwidth_Hz > 0:
            raise ParameterError("bandwidth must be positive")
        if self.carrier_MHz < 0 or self.wall_count < 0:
            raise ParameterError("carrier and wall count must be nonnegative")
        if self.standard.wireless and not self.distance_km > 0:
            raise ParameterError("wireless links need a positive distance")

    @property
    def rate_bps(self) -> float:
        return self.model_size_bits / self.tx_delay_s


@dataclass(frozen=True)
class TransientModel:
    """Log-distance path loss with log-normal shadowing and per-wall losses.

    With ``reference_distance_m`` set (default 1 m) the mean gain is the
    free-space loss at the reference distance plus ``exponent * 10 log10(d / d0)``.
    With ``reference_distance_m=None`` the free-space term is evaluated at the
    client distance itself and the exponent term uses kilometres.
    """

    path_loss_exponent: float = 3.0
    sigma_los_dB: float = 4.0
    sigma_nlos_dB: float = 8.0
    noise_psd_dBm_per_Hz: float = -174.0
    wall_loss_dB: dict = field(default_factory=lambda: dict(WALL_LOSS_DB))
    reference_distance_m: float | None = 1.0

    def __post_init__(self):
        if self.reference_distance_m is not None and not self.reference_distance_m > 0:
            raise ParameterError("reference distance must be positive")
        object.__setattr__(self, "wall_loss_dB", {Standard(k): float(v) for k, v in self.wall_loss_dB.items()})

    def sigma_dB(self, link: LinkConfig) -> float:
        return self.sigma_los_dB if link.line_of_sight else self.sigma_nlos_dB


def _require_wireless(link: LinkConfig):
    if not link.standard.wireless:
        raise ContractError("wired links have no radio channel")


def channel_capacity(link: LinkConfig, h2_linear, model: TransientModel | None = None):
    """Shannon capacity in bps for a linear channel power gain."""
    model = model or TransientModel()
    h2 = np.asarray(h2_linear, dtype=np.float64)
    if np.any(h2 <= 0):
        raise ParameterError("channel gain must be positive")
    noise_mw = dbm_to_mw(model.noise_psd_dBm_per_Hz) * link.bandwidth_Hz
    snr = dbm_to_mw(link.tx_power_dBm) * h2 / noise_mw
    cap = link.bandwidth_Hz * np.log2(1.0 + snr)
    return float(cap) if cap.ndim == 0 else cap


def free_space_loss_dB(distance_km: float, carrier_MHz: float) -> float:
    return 20.0 * math.log10(distance_km) + 20.0 * math.log10(carrier_MHz) + 32.44


def mean_gain_dB(link: LinkConfig, model: TransientModel) -> float:
    """Deterministic part of the channel gain in dB (no shadowing)."""
    _require_wireless(link)
    d_km = link.distance_km
    if model.reference_distance_m is None:
        d0_km, ratio = d_km, d_km
    else:
        d0_km = model.reference_distance_m / 1000.0
        ratio = d_km / d0_km
    ref_loss = free_space_loss_dB(d0_km, link.carrier_MHz)
    walls = link.wall_count * model.wall_loss_dB.get(link.standard, 0.0)
    # wall values are losses, so they are subtracted
    return -ref_loss - model.path_loss_exponent * 10.0 * math.log10(ratio) - walls


def sample_channel_gain(link: LinkConfig, model: TransientModel, rng: np.random.Generator, size=None):
    mu = mean_gain_dB(link, model)
    gain_dB = mu + model.sigma_dB(link) * rng.standard_normal(size)
    return 10.0 ** (gain_dB / 10.0)


def threshold_gain_dB(link: LinkConfig, model: TransientModel) -> float:
    """Gain (dB) at which capacity equals the required rate ``L / tau``."""
    x = link.rate_bps / link.bandwidth_Hz * math.log(2.0)
    # log(2^(R/W) - 1) without overflow
    log_snr = x + math.log(-math.expm1(-x))
    noise_mw = dbm_to_mw(model.noise_psd_dBm_per_Hz) * link.bandwidth_Hz
    return 10.0 * (log_snr / math.log(10.0)) + 10.0 * math.log10(noise_mw / dbm_to_mw(link.tx_power_dBm))


def _normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def transient_failure_prob(link: LinkConfig, model: TransientModel | None = None) -> float:
    """Outage probability Pr(capacity <= L / tau) under log-normal shadowing."""
    if not link.standard.wireless:
        return 0.0
    model = model or TransientModel()
    if not link.rate_bps > 0:
        raise ParameterError("required rate must be positive")
    gap = threshold_gain_dB(link, model) - mean_gain_dB(link, model)
    sigma = model.sigma_dB(link)
    if sigma == 0:
        return 1.0 if gap >= 0 else 0.0
    return _normal_cdf(gap / sigma)


def sample_transient(epsilon: float, rng: np.random.Generator) -> bool:
    """One Bernoulli link realization; returns True when the upload gets through."""
    if not 0.0 <= epsilon <= 1.0:
        raise ParameterError("epsilon must lie in [0, 1]")
    return bool(rng.random() >= epsilon)


# --- intermittent failures -------------------------------------------------

@dataclass(frozen=True)
class IntermittentState:
    rate_lambda: float
    last_recovery_round: int = 0
    outage_rounds_remaining: int = 0
    duration_alpha: float = 10.0

    def __post_init__(self):
        if self.rate_lambda < 0 or not self.duration_alpha > 0 or self.outage_rounds_remaining < 0:
            raise ParameterError("invalid intermittent state")

    @property
    def max_duration(self) -> int:
        return max(1, int(math.floor(100.0 / self.duration_alpha)))

    @property
    def disconnected(self) -> bool:
        return self.outage_rounds_remaining > 0


def failure_cdf(rate_lambda: float, r: int, r0: int) -> float:
    """Probability that an outage has been triggered by round ``r`` since recovery at ``r0``."""
    return -math.expm1(-rate_lambda * max(r - r0, 0))


def trigger_probability(rate_lambda: float, r: int, r0: int) -> float:
    """Chance of triggering at round ``r`` given none in ``(r0, r)``.

    This is the discrete hazard of the exponential waiting time, so the
    trigger round has CDF ``failure_cdf`` exactly.
    """
    t = r - r0
    if t <= 0:
        return 0.0
    prev = failure_cdf(rate_lambda, r - 1, r0)
    if prev >= 1.0:
        return 1.0
    return (failure_cdf(rate_lambda, r, r0) - prev) / (1.0 - prev)


def intermittent_step(state: IntermittentState, r: int, rng: np.random.Generator):
    """Advance one round; returns ``(connected, new_state)``."""
    if state.outage_rounds_remaining > 0:
        left = state.outage_rounds_remaining - 1
        return False, replace(state, outage_rounds_remaining=left,
                              last_recovery_round=r if left == 0 else state.last_recovery_round)
    u = rng.random()
    if u >= trigger_probability(state.rate_lambda, r, state.last_recovery_round):
        return True, state
    duration = int(rng.integers(1, state.max_duration + 1))
    left = duration - 1
    return False, replace(state, outage_rounds_remaining=left,
                          last_recovery_round=r if left == 0 else state.last_recovery_round)


def mixed_step(epsilon: float, state: IntermittentState, r: int, rng: np.random.Generator,
               rng_intermittent: np.random.Generator | None = None):
    """Both processes advance; the link is up only if neither fails."""
    transient_ok = sample_transient(epsilon, rng)
    up, state = intermittent_step(state, r, rng_intermittent if rng_intermittent is not None else rng)
    return transient_ok and up, state


# --- client placement ------------------------------------------------------

@dataclass(frozen=True)
class Geometry:
    cell_radius_m: float = 200.0
    bs_height_m: float = 20.0
    room_side_m: float = 20.0
    ap_height_m: float = 3.0
    los_probability: float = 0.5
    nlos_walls: int = 1


def default_standard_assignment(num_clients: int, num_wired: int | None = None) -> list[Standard]:
    """First block wired, the rest cycling Wi-Fi 2.4, Wi-Fi 5, 4G, 5G.

    With 20 clients: 1-4 wired, 5/9/13/17 Wi-Fi 2.4 GHz, ...
    """
    if num_wired is None:
        num_wired = num_clients // 5
    cycle = [Standard.WIFI24, Standard.WIFI5, Standard.CELL4G, Standard.CELL5G]
    return [Standard.WIRED if i < num_wired else cycle[(i - num_wired) % 4] for i in range(num_clients)]


def default_failure_rates(num_clients: int) -> list[float]:
    """Five contiguous client groups with rates 1e-5 ... 1e-1."""
    groups = np.array_split(np.arange(num_clients), len(DEFAULT_FAILURE_RATES))
    rates = [0.0] * num_clients
    for rate, members in zip(DEFAULT_FAILURE_RATES, groups):
        for i in members:
            rates[int(i)] = rate
    return rates


def place_clients(standards: Sequence[Standard], rng: np.random.Generator,
                  geometry: Geometry = Geometry(), table=None,
                  model_size_bits: float = MNIST_MODEL_SIZE_BITS,
                  tx_delay_s: float = MNIST_TX_DELAY_S) -> list[LinkConfig]:
    """Draw client positions (Wi-Fi indoors, cellular/wired outdoors) and build links."""
    table = table or DEFAULT_STANDARDS
    links = []
    for std in standards:
        std = Standard(std)
        power, bw_mhz, carrier = table[std]
        if std.indoor:
            xy = (rng.random(2) - 0.5) * geometry.room_side_m
            height = geometry.ap_height_m
        else:
            radius = geometry.cell_radius_m * math.sqrt(rng.random())
            angle = 2.0 * math.pi * rng.random()
            xy = radius * np.array([math.cos(angle), math.sin(angle)])
            height = geometry.bs_height_m
        dist_m = math.sqrt(float(xy @ xy) + height ** 2)
        los = bool(rng.random() < geometry.los_probability)
        links.append(LinkConfig(
            standard=std, tx_power_dBm=power, bandwidth_Hz=bw_mhz * 1e6, carrier_MHz=carrier,
            distance_km=dist_m / 1000.0, wall_count=0 if los else geometry.nlos_walls,
            line_of_sight=los, model_size_bits=model_size_bits, tx_delay_s=tx_delay_s))
    return links


# --- resource allocation baselines ----------------------------------------

@dataclass
class ResourceOptResult:
    links: list
    epsilon: np.ndarray
    eligible: np.ndarray
    wired_drop_prob: float
    objective_trace: list
    max_violation: float

    @property
    def initial_objective(self) -> float:
        return self.objective_trace[0]

    @property
    def final_objective(self) -> float:
        return self.objective_trace[-1]


def _project_group(v: np.ndarray, lo: float, budget: float) -> np.ndarray:
    """Euclidean projection onto {v >= lo, sum(v) <= budget}."""
    w = np.maximum(v, lo)
    if w.sum() <= budget:
        return w
    # shift down: find tau with sum(max(v - tau, lo)) = budget
    lo_t, hi_t = 0.0, float(v.max() - lo)
    for _ in range(200):
        tau = 0.5 * (lo_t + hi_t)
        if np.maximum(v - tau, lo).sum() > budget:
            lo_t = tau
        else:
            hi_t = tau
    return np.maximum(v - hi_t, lo)


class _Problem:
    """Variance-equalizing allocation over one or more standard groups."""

    def __init__(self, links, members, groups, model, power_floor_dB, bw_floor_frac):
        self.links = links
        self.members = members  # indices of optimized clients
        self.groups = groups  # list of index arrays into `members`, one per bandwidth budget
        self.model = model
        base = [links[i] for i in members]
        self.p_max = np.array([lk.tx_power_dBm for lk in base])
        self.p_min = self.p_max - power_floor_dB
        w0 = np.array([lk.bandwidth_Hz for lk in base])
        self.budget = np.array([w0[g].sum() for g in groups])
        self.w_min_by_member = np.empty(len(members))
        for g, b in zip(groups, self.budget):
            self.w_min_by_member[g] = bw_floor_frac * b / len(g)

    def eps(self, p_dbm, w_hz):
        out = np.empty(len(self.members))
        for k, i in enumerate(self.members):
            lk = replace(self.links[i], tx_power_dBm=float(p_dbm[k]), bandwidth_Hz=float(w_hz[k]))
            out[k] = transient_failure_prob(lk, self.model)
        return out

    def eps_single(self, k, p_dbm, w_hz):
        lk = replace(self.links[self.members[k]], tx_power_dBm=float(p_dbm), bandwidth_Hz=float(w_hz))
        return transient_failure_prob(lk, self.model)

    def project(self, p_dbm, w_hz):
        p = np.clip(p_dbm, self.p_min, self.p_max)
        w = w_hz.copy()
        for g, b in zip(self.groups, self.budget):
            w[g] = _project_group(w_hz[g], self.w_min_by_member[g][0], b)
        return p, w

    def violation(self, p_dbm, w_hz) -> float:
        worst = float(np.max(p_dbm - self.p_max, initial=0.0))
        for g, b in zip(self.groups, self.budget):
            worst = max(worst, float(w_hz[g].sum() - b) / b)
        return max(worst, 0.0)


def _group_objective(eps: np.ndarray, groups) -> float:
    return float(sum(0.5 * np.sum((eps[g] - eps[g].mean()) ** 2) for g in groups if len(g)))


def _fd_sensitivities(prob: _Problem, p, w, rel_step=1e-4):
    """Central finite differences of each client's outage w.r.t. its own power and bandwidth.

    Power derivatives are taken in mW with a relative step and chained to dBm.
    """
    dp = np.empty_like(p)
    dw = np.empty_like(w)
    p_mw = dbm_to_mw(p)
    for k in range(len(p)):
        h = rel_step * p_mw[k]
        up = prob.eps_single(k, mw_to_dbm(p_mw[k] + h), w[k])
        dn = prob.eps_single(k, mw_to_dbm(p_mw[k] - h), w[k])
        dp[k] = (up - dn) / (2 * h) * p_mw[k] * math.log(10.0) / 10.0
        hw = rel_step * w[k]
        up = prob.eps_single(k, p[k], w[k] + hw)
        dn = prob.eps_single(k, p[k], w[k] - hw)
        dw[k] = (up - dn) / (2 * hw)
    return dp, dw


def _centered(eps, groups):
    out = np.empty_like(eps)
    for g in groups:
        out[g] = eps[g] - eps[g].mean()
    return out


def _descend(prob: _Problem, groups, step_size, iterations, max_power_step_dB=10.0, max_bw_step_frac=0.25):
    """Scaled projected gradient descent, alternating power and bandwidth half-steps.

    Each client's epsilon depends only on its own (P, W) and the mean terms cancel
    in the gradient, so dJ/dx_k = (eps_k - mean) * d eps_k / d x_k. Steps rescale
    that gradient by 1 / (d eps_k / d x_k)^2, i.e. a capped Gauss-Newton move of
    eps_k towards its group mean, so clients deep in the shadowing tail still move.

    Power is box-constrained per client, so every client backtracks on its own
    until its epsilon is no farther from the current mean; that can only lower the
    variance. Bandwidth is coupled through the group budget and backtracks jointly.
    """
    p = prob.p_max.copy()
    w = np.array([prob.links[i].bandwidth_Hz for i in prob.members])
    eps = prob.eps(p, w)
    obj = _group_objective(eps, groups)
    trace = [obj]
    worst = prob.violation(p, w)
    w_scale = np.empty(len(w))
    for g, b in zip(groups, prob.budget):
        w_scale[g] = b
    for _ in range(iterations):
        if obj == 0.0:
            break
        moved = False

        centered = _centered(eps, groups)
        dp, _ = _fd_sensitivities(prob, p, w)
        step_p = np.clip(np.divide(centered, dp, out=np.zeros_like(dp), where=dp != 0),
                         -max_power_step_dB, max_power_step_dB)
        for k in np.flatnonzero(step_p):
            t = step_size
            for _ in range(30):
                pk = float(np.clip(p[k] - t * step_p[k], prob.p_min[k], prob.p_max[k]))
                ek = prob.eps_single(k, pk, w[k])
                if abs(ek - (eps[k] - centered[k])) <= abs(centered[k]):
                    if pk != p[k]:
                        p[k], eps[k] = pk, ek
                        moved = True
                    break
                t *= 0.5
        obj = _group_objective(eps, groups)

        centered = _centered(eps, groups)
        _, dw = _fd_sensitivities(prob, p, w)
        dwn = dw * w_scale
        step_w = np.clip(np.divide(centered, dwn, out=np.zeros_like(dwn), where=dwn != 0),
                         -max_bw_step_frac, max_bw_step_frac) * w_scale
        if np.any(step_w):
            t = step_size
            for _ in range(30):
                _, w_new = prob.project(p, w - t * step_w)
                eps_new = prob.eps(p, w_new)
                obj_new = _group_objective(eps_new, groups)
                if obj_new <= obj:
                    if not np.array_equal(w_new, w):
                        w, eps, obj = w_new, eps_new, obj_new
                        moved = True
                    break
                t *= 0.5

        worst = max(worst, prob.violation(p, w))
        trace.append(obj)
        if not moved:
            break
    return p, w, eps, trace, worst


def _eligibility(links, model, eps_threshold):
    if not 0.0 < eps_threshold < 1.0:
        raise ParameterError("eps_threshold must lie in (0, 1)")
    eps0 = np.array([transient_failure_prob(lk, model) for lk in links])
    return eps0, eps0 <= eps_threshold


def resource_opt_joint(links: Sequence[LinkConfig], eps_threshold: float = 0.9, step_size: float = 1.0,
                       iterations: int = 200, model: TransientModel | None = None,
                       power_floor_dB: float = 100.0, bw_floor_frac: float = 0.01) -> ResourceOptResult:
    """Equalize eligible wireless outage probabilities across all standards jointly.

    Power is capped at each link's table value, bandwidth shares within a standard
    never exceed that standard's eligible total. Wired clients are then assigned the
    mean wireless outage as an artificial drop probability.
    """
    model = model or TransientModel()
    links = list(links)
    eps0, eligible = _eligibility(links, model, eps_threshold)
    members = [i for i, lk in enumerate(links) if eligible[i] and lk.standard.wireless]
    if not eligible.any():
        raise ParameterError("no client satisfies the eligibility threshold")
    eps = eps0.copy()
    new_links = list(links)
    trace, worst = [0.0], 0.0
    if members:
        by_std: dict[Standard, list[int]] = {}
        for k, i in enumerate(members):
            by_std.setdefault(links[i].standard, []).append(k)
        budget_groups = [np.array(v) for v in by_std.values()]
        prob = _Problem(links, members, budget_groups, model, power_floor_dB, bw_floor_frac)
        everyone = [np.arange(len(members))]
        p, w, eps_m, trace, worst = _descend(prob, everyone, step_size, iterations)
        for k, i in enumerate(members):
            new_links[i] = replace(links[i], tx_power_dBm=float(p[k]), bandwidth_Hz=float(w[k]))
            eps[i] = eps_m[k]
    wired_drop = float(eps[members].mean()) if members else 0.0
    for i, lk in enumerate(links):
        if not lk.standard.wireless and eligible[i]:
            eps[i] = wired_drop
    return ResourceOptResult(new_links, eps, eligible, wired_drop, trace, worst)


def resource_opt_per_standard(links: Sequence[LinkConfig], eps_threshold: float = 0.9, step_size: float = 1.0,
                              iterations: int = 200, model: TransientModel | None = None,
                              power_floor_dB: float = 100.0, bw_floor_frac: float = 0.01) -> ResourceOptResult:
    """Same objective restricted to each standard independently; no wired dropping."""
    model = model or TransientModel()
    links = list(links)
    eps0, eligible = _eligibility(links, model, eps_threshold)
    if not eligible.any():
        raise ParameterError("no client satisfies the eligibility threshold")
    eps = eps0.copy()
    new_links = list(links)
    worst = 0.0
    for std in Standard:
        if not std.wireless:
            continue
        members = [i for i, lk in enumerate(links) if eligible[i] and lk.standard is std]
        if len(members) < 2:
            continue
        prob = _Problem(links, members, [np.arange(len(members))], model, power_floor_dB, bw_floor_frac)
        p, w, eps_m, trace, wv = _descend(prob, [np.arange(len(members))], step_size, iterations)
        worst = max(worst, wv)
        for k, i in enumerate(members):
            new_links[i] = replace(links[i], tx_power_dBm=float(p[k]), bandwidth_Hz=float(w[k]))
            eps[i] = eps_m[k]
    groups = [np.array([i for i in range(len(links)) if eligible[i] and links[i].standard is s]) for s in Standard]
    init_obj = _group_objective(eps0, [g for g in groups if len(g)])
    final_obj = _group_objective(eps, [g for g in groups if len(g)])
    return ResourceOptResult(new_links, eps, eligible, 0.0, [init_obj, final_obj], worst)


def group_variances(eps: np.ndarray, links: Sequence[LinkConfig], mask: np.ndarray) -> dict:
    out = {}
    for std in Standard:
        idx = [i for i, lk in enumerate(links) if lk.standard is std and mask[i]]
        if idx:
            out[std] = float(np.var(eps[idx]))
    return out
