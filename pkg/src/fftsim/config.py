"""Experiment configuration: a JSON document checked strictly against nested dataclasses.

Unknown keys and wrongly typed values raise :class:`ConfigError` naming the dotted
path. Shipped presets live in ``fftsim/presets/<name>.json``.
"""

from __future__ import annotations

import copy
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Union

from .errors import ConfigError

STRATEGIES = (
    "Centralized", "FedAvg", "FedAvgIdeal", "FedProx", "Scaffold", "TFAggregation", "FedAWE",
    "FedAuto", "FedAutoNoM1", "FedAutoNoM2", "FedAutoNeither", "ResourceOpt1", "ResourceOpt2",
)
FAILURE_MODES = ("none", "transient", "intermittent", "mixed")
PRESETS = ("iid-mixed", "noniid-mixed", "noniid-transient", "noniid-intermittent", "partial-k10",
           "ablation-suite", "resource-opt", "acceptance")


@dataclass
class DatasetSpec:
    kind: str = "gaussian"  # gaussian | idx
    num_classes: int = 4
    dim: int = 16
    n_per_class: int = 500
    n_test_per_class: int = 250
    separation: float = 3.0
    seed: int | None = None  # None: derived from the master seed
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class PartitionSpec:
    scheme: str = "shard"  # iid | shard
    num_clients: int = 8
    classes_per_client: int = 2
    public_fraction: float = 0.2


@dataclass
class ParticipationSpec:
    mode: str = "full"  # full | partial
    clients_per_round: int | None = None


@dataclass
class GeometrySpec:
    cell_radius_m: float = 200.0
    bs_height_m: float = 20.0
    room_side_m: float = 20.0
    ap_height_m: float = 3.0
    los_probability: float = 0.5
    nlos_walls: int = 1


@dataclass
class FailureSpec:
    mode: str = "mixed"
    links: Union[str, list] = "default"  # "default" or one dict per client
    num_wired: int | None = None
    standards: dict | None = None  # per-standard [power dBm, bandwidth MHz, carrier MHz] overrides
    epsilon: list | None = None  # explicit per-client transient outage probabilities
    rates: Union[str, list] = "default"
    duration_alpha: float = 10.0
    model_size_bits: float = 0.86e6 * 8
    tx_delay_s: float = 0.8
    path_loss_reference_m: float | None = 1.0
    geometry: GeometrySpec = field(default_factory=GeometrySpec)


@dataclass
class TrainingSpec:
    arch: str = "mlp"  # mlp | linear
    hidden: int = 32
    learning_rate: float = 0.05
    local_steps: int = 5
    batch_size: int = 32
    lr_drop_round: int | None = None
    lr_drop_factor: float = 0.1
    pretrain_epochs: int = 5


@dataclass
class StrategyOptions:
    prox_mu: float = 0.01
    fedawe_gamma_g: float = 0.001
    scaffold_gamma_g: float = 1.0
    scaffold_cv_divisor: str = "selected"  # selected | local_steps
    tf_eps_threshold: float = 0.9
    resource_eps_threshold: float = 0.9
    resource_iterations: int = 200
    relax_zero_clients: bool = False
    strict_coverage: bool = False


@dataclass
class DiagnosticsSpec:
    stride: int = 10
    heterogeneity: bool = False


@dataclass
class OutputSpec:
    dir: str = "runs"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    rounds: int = 100
    strategies: list = field(default_factory=lambda: ["FedAuto"])
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    participation: ParticipationSpec = field(default_factory=ParticipationSpec)
    failure: FailureSpec = field(default_factory=FailureSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    options: StrategyOptions = field(default_factory=StrategyOptions)
    diagnostics: DiagnosticsSpec = field(default_factory=DiagnosticsSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    @property
    def clients_per_round(self) -> int:
        if self.participation.mode == "full" or self.participation.clients_per_round is None:
            return self.partition.num_clients
        return self.participation.clients_per_round

    def to_dict(self) -> dict:
        return asdict(self)


def _type_ok(value, tp, path):
    """Validate ``value`` against a type hint; returns the (possibly converted) value."""
    if tp is Any:
        return value
    origin = typing.get_origin(tp)
    if origin in (Union, types.UnionType):
        for arm in typing.get_args(tp):
            try:
                return _type_ok(value, arm, path)
            except ConfigError:
                continue
        raise ConfigError(path, f"value {value!r} matches none of the allowed types")
    if tp is type(None):
        if value is not None:
            raise ConfigError(path, "expected null")
        return None
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return _build_nested(tp, value, path + ".")
    if origin is list or tp is list:
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list")
        return list(value)
    if origin is dict or tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    raise ConfigError(path, f"unsupported schema type {tp!r}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    if "strategy" in raw:
        if "strategies" in raw:
            raise ConfigError("strategy", "give either strategy or strategies, not both")
        raw["strategies"] = [raw.pop("strategy")]
    cfg = _build_nested(ExperimentConfig, raw, "")
    validate(cfg)
    return cfg


def _build_nested(cls, raw, prefix):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        tp = hints[f.name]
        path = f"{prefix}{f.name}"
        kwargs[f.name] = _type_ok(raw[f.name], tp, path)
    return cls(**kwargs)


def _require(cond, key, message):
    if not cond:
        raise ConfigError(key, message)


def validate(cfg: ExperimentConfig) -> None:
    _require(cfg.rounds >= 1, "rounds", "must be >= 1")
    _require(len(cfg.strategies) >= 1, "strategies", "at least one strategy is required")
    for k, s in enumerate(cfg.strategies):
        _require(s in STRATEGIES, f"strategies.{k}", f"unknown strategy {s!r}; choose from {', '.join(STRATEGIES)}")
    d = cfg.dataset
    _require(d.kind in ("gaussian", "idx"), "dataset.kind", "must be gaussian or idx")
    if d.kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            _require(getattr(d, key) is not None, f"dataset.{key}", "required for idx datasets")
    else:
        _require(d.num_classes >= 2, "dataset.num_classes", "must be >= 2")
        _require(d.dim >= 1, "dataset.dim", "must be >= 1")
        _require(d.n_per_class >= 1, "dataset.n_per_class", "must be >= 1")
        _require(d.n_test_per_class >= 1, "dataset.n_test_per_class", "must be >= 1")
        _require(d.separation > 0, "dataset.separation", "must be positive")
    p = cfg.partition
    _require(p.scheme in ("iid", "shard"), "partition.scheme", "must be iid or shard")
    _require(p.num_clients >= 1, "partition.num_clients", "must be >= 1")
    _require(0 < p.public_fraction < 1, "partition.public_fraction", "must lie in (0, 1)")
    _require(p.classes_per_client >= 1, "partition.classes_per_client", "must be >= 1")
    q = cfg.participation
    _require(q.mode in ("full", "partial"), "participation.mode", "must be full or partial")
    if q.mode == "partial":
        _require(q.clients_per_round is not None, "participation.clients_per_round", "required in partial mode")
    if q.clients_per_round is not None:
        _require(1 <= q.clients_per_round <= p.num_clients, "participation.clients_per_round",
                 "must satisfy 1 <= K <= num_clients")
    f = cfg.failure
    N = p.num_clients
    _require(f.mode in FAILURE_MODES, "failure.mode", f"must be one of {', '.join(FAILURE_MODES)}")
    if isinstance(f.links, str):
        _require(f.links == "default", "failure.links", "must be \"default\" or a list of link objects")
    else:
        _require(len(f.links) == N, "failure.links", f"needs one entry per client ({N})")
    if isinstance(f.rates, str):
        _require(f.rates == "default", "failure.rates", "must be \"default\" or a list of rates")
    else:
        _require(len(f.rates) == N, "failure.rates", f"needs one entry per client ({N})")
        _require(all(isinstance(r, (int, float)) and r >= 0 for r in f.rates), "failure.rates", "rates must be >= 0")
    if f.epsilon is not None:
        _require(len(f.epsilon) == N, "failure.epsilon", f"needs one entry per client ({N})")
        _require(all(isinstance(e, (int, float)) and 0 <= e <= 1 for e in f.epsilon), "failure.epsilon",
                 "entries must lie in [0, 1]")
    _require(f.duration_alpha > 0, "failure.duration_alpha", "must be positive")
    t = cfg.training
    _require(t.arch in ("mlp", "linear"), "training.arch", "must be mlp or linear")
    _require(t.hidden >= 1, "training.hidden", "must be >= 1")
    _require(t.learning_rate > 0, "training.learning_rate", "must be positive")
    _require(t.local_steps >= 1, "training.local_steps", "must be >= 1")
    _require(t.batch_size >= 1, "training.batch_size", "must be >= 1")
    _require(t.pretrain_epochs >= 0, "training.pretrain_epochs", "must be >= 0")
    o = cfg.options
    _require(o.prox_mu >= 0, "options.prox_mu", "must be >= 0")
    _require(o.scaffold_cv_divisor in ("selected", "local_steps"), "options.scaffold_cv_divisor",
             "must be selected or local_steps")
    _require(0 < o.tf_eps_threshold < 1, "options.tf_eps_threshold", "must lie in (0, 1)")
    _require(0 < o.resource_eps_threshold < 1, "options.resource_eps_threshold", "must lie in (0, 1)")
    _require(cfg.diagnostics.stride >= 1, "diagnostics.stride", "must be >= 1")


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` with the value parsed as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key.path=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(text, "empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for text in overrides or ():
        path, value = parse_override(text)
        node = raw
        for k, part in enumerate(path[:-1]):
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(".".join(path[:k + 1]), "is not an object")
            node = nxt
        if path == ["strategy"] and "strategies" in raw:
            raw.pop("strategies")
        if path == ["strategies"] and "strategy" in raw:
            raw.pop("strategy")
        node[path[-1]] = value
    return raw


def preset_path(name: str) -> Path:
    return Path(str(resources.files("fftsim") / "presets" / f"{name}.json"))


def load_raw(source: str) -> dict:
    """Read a config file, or a shipped preset when ``source`` names one."""
    path = Path(source)
    if not path.exists() and source in PRESETS:
        path = preset_path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {source}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    return raw


def load_config(source: str, overrides=None) -> ExperimentConfig:
    return config_from_dict(apply_overrides(load_raw(source), overrides))
