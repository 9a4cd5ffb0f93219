"""The round loop: selection, failure realization, local training, aggregation and logging."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .config import ExperimentConfig
from .data import (LabeledDataset, class_distribution, load_idx, partition_iid, partition_shard_noniid,
                   plan_distributions, synth_gaussian_mixture)
from .diagnostics import INF_SENTINEL, chi2_p_beta, chi_square_flagged, effective_mix, estimate_heterogeneity
from .errors import ConfigError, CoverageGap, CoverageGapWarning, RoundError
from .network import (DEFAULT_STANDARDS, Geometry, IntermittentState, LinkConfig, Standard, TransientModel,
                      intermittent_step, default_failure_rates, default_standard_assignment, place_clients,
                      resource_opt_joint, resource_opt_per_standard, sample_transient, transient_failure_prob)
from .rng import stream
from .training import (Arch, ModelParams, TrainConfig, compensation_subset, compensatory_update, evaluate,
                       init_params, local_update, loss_and_gradient, prox_local_update, scaffold_local_update,
                       server_update)

CSV_COLUMNS = ("round", "strategy", "connected_count", "chi2_p_beta", "chi2_ag_tilde", "train_loss",
               "test_loss", "test_acc", "grad_norm_sq", "flags")

FEDAVG_FAMILY = ("FedAvg", "FedAvgIdeal", "FedProx", "FedAWE", "ResourceOpt1", "ResourceOpt2")
FEDAUTO_VARIANTS = {"FedAuto": "full", "FedAutoNoM1": "no_compensation", "FedAutoNoM2": "no_optimization",
                    "FedAutoNeither": "neither"}


@dataclass
class RoundRecord:
    round: int
    strategy: str
    selected: tuple
    connected_ids: tuple
    missing_classes: frozenset
    weights: agg.AggregationWeights
    chi2_p_beta: float
    chi2_ag_tilde: float
    train_loss: float
    test_loss: float
    test_acc: float
    grad_norm_sq: float
    flags: frozenset = frozenset()

    @property
    def connected_count(self) -> int:
        return len(self.connected_ids)

    def csv_row(self) -> list:
        return [self.round, self.strategy, self.connected_count, _fmt(self.chi2_p_beta), _fmt(self.chi2_ag_tilde),
                _fmt(self.train_loss), _fmt(self.test_loss), _fmt(self.test_acc), _fmt(self.grad_norm_sq),
                "|".join(sorted(self.flags))]


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class RunLog:
    config: dict
    strategy: str
    seed: int
    records: list = field(default_factory=list)
    heterogeneity: list = field(default_factory=list)  # (round, V table, G)
    final_model: np.ndarray | None = None

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_acc


@dataclass
class Environment:
    """Everything shared by the strategies of one seed: data, links, masks' inputs, pre-trained model."""

    cfg: ExperimentConfig
    seed: int
    train: LabeledDataset
    test: LabeledDataset
    server_data: LabeledDataset
    client_data: list
    union: LabeledDataset
    p_s: float
    p: np.ndarray
    alpha_s: np.ndarray
    alpha_clients: np.ndarray
    alpha_g: np.ndarray
    links: list
    eps0: np.ndarray
    rates: np.ndarray
    transient_model: TransientModel
    arch: Arch
    pretrained: ModelParams
    train_cfg: TrainConfig

    @property
    def num_clients(self) -> int:
        return len(self.client_data)


def _seed_int(seed: int, purpose: str) -> int:
    return int(stream(seed, purpose).integers(0, 2 ** 63 - 1))


def _load_data(cfg: ExperimentConfig, seed: int):
    d = cfg.dataset
    if d.kind == "idx":
        train = load_idx(d.train_images, d.train_labels)
        test = load_idx(d.test_images, d.test_labels, train.num_classes)
        return train, test
    ds = d.seed if d.seed is not None else _seed_int(seed, "data")
    train = synth_gaussian_mixture(d.num_classes, d.dim, d.n_per_class, d.separation, ds, "train")
    test = synth_gaussian_mixture(d.num_classes, d.dim, d.n_test_per_class, d.separation, ds, "test")
    return train, test


def _standard_table(cfg: ExperimentConfig) -> dict:
    table = dict(DEFAULT_STANDARDS)
    for name, row in (cfg.failure.standards or {}).items():
        try:
            std = Standard(name)
        except ValueError:
            raise ConfigError(f"failure.standards.{name}", "unknown standard") from None
        if not (isinstance(row, list) and len(row) == 3):
            raise ConfigError(f"failure.standards.{name}", "expected [power dBm, bandwidth MHz, carrier MHz]")
        table[std] = tuple(float(v) for v in row)
    return table


_LINK_KEYS = {"standard", "tx_power_dBm", "bandwidth_MHz", "carrier_MHz", "distance_m", "walls", "los"}


def build_links(cfg: ExperimentConfig, seed: int) -> list:
    f = cfg.failure
    N = cfg.partition.num_clients
    table = _standard_table(cfg)
    if f.links == "default":
        g = f.geometry
        geometry = Geometry(g.cell_radius_m, g.bs_height_m, g.room_side_m, g.ap_height_m, g.los_probability,
                            g.nlos_walls)
        return place_clients(default_standard_assignment(N, f.num_wired), stream(seed, "placement"), geometry,
                             table, f.model_size_bits, f.tx_delay_s)
    links = []
    for k, entry in enumerate(f.links):
        key = f"failure.links.{k}"
        if not isinstance(entry, dict):
            raise ConfigError(key, "expected an object")
        for name in entry:
            if name not in _LINK_KEYS:
                raise ConfigError(f"{key}.{name}", "unknown key")
        try:
            std = Standard(entry.get("standard"))
        except ValueError:
            raise ConfigError(f"{key}.standard", "unknown or missing standard") from None
        power, bw, carrier = table[std]
        if std.wireless and "distance_m" not in entry:
            raise ConfigError(f"{key}.distance_m", "required for wireless links")
        los = bool(entry.get("los", True))
        links.append(LinkConfig(
            standard=std, tx_power_dBm=float(entry.get("tx_power_dBm", power)),
            bandwidth_Hz=float(entry.get("bandwidth_MHz", bw)) * 1e6,
            carrier_MHz=float(entry.get("carrier_MHz", carrier)),
            distance_km=float(entry.get("distance_m", 10.0)) / 1000.0,
            wall_count=int(entry.get("walls", 0)), line_of_sight=los,
            model_size_bits=f.model_size_bits, tx_delay_s=f.tx_delay_s))
    return links


def epsilon_table(cfg: ExperimentConfig, seed: int | None = None):
    """(links, per-client transient outage probabilities) for a config."""
    seed = cfg.seed if seed is None else seed
    links = build_links(cfg, seed)
    model = TransientModel(reference_distance_m=cfg.failure.path_loss_reference_m)
    if cfg.failure.epsilon is not None:
        eps = np.array(cfg.failure.epsilon, dtype=np.float64)
    else:
        eps = np.array([transient_failure_prob(lk, model) for lk in links])
    return links, eps, model


def make_train_config(cfg: ExperimentConfig, variant: str = "plain") -> TrainConfig:
    t = cfg.training
    return TrainConfig(learning_rate=t.learning_rate, local_steps=t.local_steps, batch_size=t.batch_size,
                       variant=variant, mu=cfg.options.prox_mu if variant == "prox" else 0.0,
                       lr_drop_round=t.lr_drop_round, lr_drop_factor=t.lr_drop_factor)


def build_environment(cfg: ExperimentConfig, seed: int | None = None) -> Environment:
    seed = cfg.seed if seed is None else seed
    train, test = _load_data(cfg, seed)
    p = cfg.partition
    part_seed = _seed_int(seed, "partition")
    if p.scheme == "iid":
        plan = partition_iid(train, p.num_clients, p.public_fraction, part_seed)
    else:
        plan = partition_shard_noniid(train, p.num_clients, p.classes_per_client, p.public_fraction, part_seed)
    a_s, a_clients, a_g = plan_distributions(train, plan)
    server_data = train.subset(plan.server_indices)
    client_data = [train.subset(ix) for ix in plan.client_indices]
    union = train.subset(np.sort(plan.all_indices()))
    links, eps0, model = epsilon_table(cfg, seed)
    f = cfg.failure
    rates = np.array(default_failure_rates(p.num_clients) if f.rates == "default" else f.rates, dtype=np.float64)
    t = cfg.training
    arch = Arch(train.dim, train.num_classes, t.hidden if t.arch == "mlp" else None)
    init = init_params(arch, stream(seed, "init"))
    tcfg = make_train_config(cfg)
    if t.pretrain_epochs > 0:
        steps = t.pretrain_epochs * math.ceil(len(server_data) / t.batch_size)
        pretrained = local_update(init, server_data, replace(tcfg, local_steps=steps), stream(seed, "pretrain"))
    else:
        pretrained = init
    return Environment(cfg, seed, train, test, server_data, client_data, union, plan.p_s, plan.p_clients,
                       a_s.alpha, np.array([a.alpha for a in a_clients]), a_g.alpha, links, eps0, rates, model,
                       arch, pretrained, tcfg)


def realize_connectivity(env: Environment, eps: np.ndarray, mode: str, rounds: int) -> np.ndarray:
    """(rounds, N) connectivity for every client; draws depend only on (seed, round, client)."""
    N = env.num_clients
    mask = np.ones((rounds, N), dtype=bool)
    if mode == "none":
        return mask
    states = [IntermittentState(float(env.rates[i]), duration_alpha=env.cfg.failure.duration_alpha)
              for i in range(N)]
    for r in range(1, rounds + 1):
        for i in range(N):
            ok = True
            if mode in ("transient", "mixed"):
                ok = sample_transient(float(eps[i]), stream(env.seed, "transient", r, i + 1))
            if mode in ("intermittent", "mixed"):
                up, states[i] = intermittent_step(states[i], r, stream(env.seed, "intermittent", r, i + 1))
                ok = ok and up
            mask[r - 1, i] = ok
    return mask


def select_clients(num_clients: int, K: int, p_clients, p_s: float, mode: str, rng: np.random.Generator,
                   eligible=None) -> np.ndarray:
    """Full: every (eligible) client once. Partial: K draws with replacement, client i with prob p_i/(1-p_s).

    The returned multiset is sorted by client id.
    """
    allowed = np.ones(num_clients, dtype=bool) if eligible is None else np.asarray(eligible, dtype=bool)
    if mode == "full":
        return np.flatnonzero(allowed)
    probs = np.where(allowed, np.asarray(p_clients, dtype=np.float64) / (1.0 - p_s), 0.0)
    if probs.sum() <= 0:
        return np.zeros(0, dtype=np.int64)
    probs = probs / probs.sum()
    return np.sort(rng.choice(num_clients, size=K, replace=True, p=probs))


class _Strategy:
    """Per-run mutable state for one strategy."""

    def __init__(self, env: Environment, name: str):
        self.env = env
        self.name = name
        cfg = env.cfg
        N = env.num_clients
        self.mode = "none" if name == "FedAvgIdeal" else cfg.failure.mode
        self.eps = env.eps0.copy()
        self.eligible = np.ones(N, dtype=bool)
        if name in ("ResourceOpt1", "ResourceOpt2"):
            opt = resource_opt_joint if name == "ResourceOpt1" else resource_opt_per_standard
            res = opt(env.links, cfg.options.resource_eps_threshold, iterations=cfg.options.resource_iterations,
                      model=env.transient_model)
            self.resource = res
            self.eps = res.epsilon
            self.eligible = res.eligible
        self.tf_s = None
        if name == "TFAggregation":
            self.tf_s = agg.tf_selection_probs(env.p, env.eps0, cfg.options.tf_eps_threshold)
        self.mask = realize_connectivity(env, self.eps, self.mode, cfg.rounds)
        P = env.pretrained.theta.size
        self.c = np.zeros(P)
        self.c_i = np.zeros((N, P))
        self.tau = np.zeros(N, dtype=np.int64)

    def select(self, r: int) -> np.ndarray:
        env, cfg = self.env, self.env.cfg
        K = cfg.clients_per_round
        if self.name == "TFAggregation":
            if self.tf_s.sum() <= 0:
                return np.zeros(0, dtype=np.int64)
            return np.sort(stream(env.seed, "tf_select", r).choice(env.num_clients, size=K, replace=True, p=self.tf_s))
        return select_clients(env.num_clients, K, env.p, env.p_s, cfg.participation.mode,
                              stream(env.seed, "select", r), self.eligible)


def _train_clients(st: _Strategy, ids, w_prev: ModelParams, r: int, lr: float) -> dict:
    env = st.env
    out = {}
    for i in ids:
        rng = stream(env.seed, "train", r, i + 1)
        data = env.client_data[i]
        if st.name == "FedProx":
            out[i] = prox_local_update(w_prev, data, make_train_config(env.cfg, "prox"), w_prev, rng, lr=lr)
        elif st.name == "Scaffold":
            K = len(st.selected) if env.cfg.options.scaffold_cv_divisor == "selected" else env.train_cfg.local_steps
            model, c_new = scaffold_local_update(w_prev, data, make_train_config(env.cfg, "scaffold"), st.c,
                                                 st.c_i[i], K, rng, lr=lr)
            out[i] = (model, c_new)
        else:
            out[i] = local_update(w_prev, data, env.train_cfg, rng, lr=lr)
    return out


def run_round(st: _Strategy, w_prev: ModelParams, r: int):
    """One round of the active strategy; returns (new global model, RoundRecord)."""
    env, cfg = st.env, st.env.cfg
    lr = env.train_cfg.lr_at(r)
    selected = st.select(r)
    st.selected = selected
    connected = np.array([i for i in selected if st.mask[r - 1, i]], dtype=np.int64)
    unique = sorted(set(int(i) for i in connected))
    flags = set()
    missing = frozenset()
    a_miss = None
    conn_alphas = [env.alpha_clients[i] for i in connected]

    if st.name == "Centralized":
        w_s = server_update(w_prev, env.server_data, env.train_cfg, stream(env.seed, "train", r, 0), lr=lr)
        weights = agg.AggregationWeights(1.0, 0.0, np.zeros(0), np.zeros(0, dtype=np.int64))
        theta = w_s.theta
        connected = np.zeros(0, dtype=np.int64)
        conn_alphas = []
    elif st.name == "Scaffold":
        trained = _train_clients(st, unique, w_prev, r, lr)
        models = [trained[i][0].theta for i in connected]
        deltas = [trained[i][1] - st.c_i[i] for i in unique]
        theta, st.c, degenerate = agg.scaffold_global_update(w_prev.theta, models, st.c, deltas, env.num_clients,
                                                             cfg.options.scaffold_gamma_g)
        for i in unique:
            st.c_i[i] = trained[i][1]
        n = connected.size
        g = cfg.options.scaffold_gamma_g
        weights = agg.AggregationWeights(0.0, 0.0, np.full(n, g / n) if n else np.zeros(0), connected,
                                         flags={"degenerate"} if degenerate else (), normalized=(n > 0 and g == 1.0))
    elif st.name == "TFAggregation":
        trained = _train_clients(st, unique, w_prev, r, lr)
        weights = agg.tf_aggregation_weights(connected, env.p, env.eps0, st.tf_s, max(len(selected), 1))
        if connected.size:
            theta = agg.aggregate(weights, None, None, [trained[i].theta for i in connected])
        else:
            # the unnormalized rule would zero the model; keep the previous global instead
            theta = w_prev.theta.copy()
    else:
        w_s = server_update(w_prev, env.server_data, env.train_cfg, stream(env.seed, "train", r, 0), lr=lr)
        trained = _train_clients(st, unique, w_prev, r, lr)
        if st.name == "FedAWE":
            for i in unique:
                trained[i] = trained[i].with_theta(agg.fedawe_correct(trained[i].theta, w_prev.theta, r,
                                                                      int(st.tau[i]), cfg.options.fedawe_gamma_g))
                st.tau[i] = r
        w_miss = None
        if st.name in FEDAVG_FAMILY:
            weights = agg.fedavg_weights(connected, env.p_s, env.p, cfg.participation.mode)
        else:
            variant = FEDAUTO_VARIANTS[st.name]
            missing = agg.detect_missing_classes(conn_alphas, env.train.num_classes)
            if missing and variant in ("full", "no_optimization"):
                subset, uncovered = compensation_subset(env.server_data, missing)
                if uncovered:
                    flags.add("coverage_gap")
                    if cfg.options.strict_coverage:
                        raise CoverageGap(uncovered)
                if len(subset):
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", CoverageGapWarning)
                        w_miss = compensatory_update(w_prev, env.server_data, missing, env.train_cfg,
                                                     stream(env.seed, "compensate", r), lr=lr, strict=False)
                    a_miss = class_distribution(subset.labels, env.train.num_classes).alpha
            if variant == "full":
                weights, _ = agg.fedauto_weights(connected, env.alpha_g, env.alpha_s, conn_alphas, a_miss,
                                                 relax_zero_clients=cfg.options.relax_zero_clients)
            else:
                weights, _ = agg.ablation_weights(variant, connected, env.alpha_g, env.alpha_s, conn_alphas, a_miss)
        theta = agg.aggregate(weights, w_s.theta, None if w_miss is None else w_miss.theta,
                              [trained[i].theta for i in connected])

    flags |= weights.flags
    new = w_prev.with_theta(theta)
    mix = effective_mix(weights, env.alpha_s, a_miss, conn_alphas)
    c_ag, inf_ag = chi_square_flagged(mix, env.alpha_g)
    c_pb = chi2_p_beta(weights, env.p_s, env.p)
    inf_pb = math.isinf(c_pb)
    if inf_pb:
        c_pb = INF_SENTINEL
    if inf_ag or inf_pb:
        flags.add("chi2_inf")
    train_loss, grad = loss_and_gradient(new, env.union.features, env.union.labels)
    test_loss, test_acc = evaluate(new, env.test)
    rec = RoundRecord(r, st.name, tuple(int(i) for i in selected), tuple(int(i) for i in connected), missing,
                      weights, c_pb, c_ag, train_loss, test_loss, test_acc, float(grad @ grad), frozenset(flags))
    return new, rec


def run_strategy(env: Environment, name: str) -> RunLog:
    cfg = env.cfg
    st = _Strategy(env, name)
    log = RunLog(cfg.to_dict(), name, env.seed)
    w = env.pretrained
    for r in range(1, cfg.rounds + 1):
        try:
            w, rec = run_round(st, w, r)
        except RoundError:
            raise
        except Exception as exc:
            raise RoundError(r, name, exc) from exc
        log.records.append(rec)
        if cfg.diagnostics.heterogeneity and r % cfg.diagnostics.stride == 0:
            est = estimate_heterogeneity(w, [env.server_data, *env.client_data])
            log.heterogeneity.append((r, est.V, est.G))
    log.final_model = w.theta
    return log


def run_experiment(cfg: ExperimentConfig, seed: int | None = None, strategies=None) -> list:
    """One RunLog per strategy, all sharing data, pre-training and failure draws."""
    env = build_environment(cfg, seed)
    return [run_strategy(env, s) for s in (strategies or cfg.strategies)]


def csv_text(logs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for log in logs:
        for rec in log.records:
            w.writerow(rec.csv_row())
    return buf.getvalue()


def write_csv(logs, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(logs))
    return path


def summarize(runs_by_seed) -> dict:
    """Mean and sample std of final accuracy per strategy over seeds."""
    acc: dict[str, list] = {}
    for logs in runs_by_seed:
        for log in logs:
            acc.setdefault(log.strategy, []).append(log.final_accuracy)
    out = {}
    for name, vals in acc.items():
        v = np.array(vals)
        out[name] = {"mean_acc": float(v.mean()), "std_acc": float(v.std(ddof=1)) if v.size > 1 else 0.0,
                     "seeds": int(v.size), "final_acc": [float(x) for x in v]}
    return out
