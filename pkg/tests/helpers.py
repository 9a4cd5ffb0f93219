"""Small configurations for fast end-to-end tests."""

from __future__ import annotations

import copy

from fftsim.config import config_from_dict

SMALL = {
    "name": "small",
    "seed": 3,
    "rounds": 4,
    "strategies": ["FedAvg", "FedAuto"],
    "dataset": {"kind": "gaussian", "num_classes": 4, "dim": 6, "n_per_class": 40, "n_test_per_class": 20,
                "separation": 2.0, "seed": 11},
    "partition": {"scheme": "shard", "num_clients": 4, "classes_per_client": 2, "public_fraction": 0.25},
    "failure": {"mode": "mixed", "links": "default", "num_wired": 1, "rates": [1e-5, 0.1, 0.1, 0.1],
                "epsilon": [0.0, 0.3, 0.5, 0.5]},
    "training": {"arch": "mlp", "hidden": 8, "learning_rate": 0.1, "local_steps": 3, "batch_size": 8,
                 "pretrain_epochs": 1},
}


def small_raw(**top):
    raw = copy.deepcopy(SMALL)
    for key, value in top.items():
        node = raw
        parts = key.split("__")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return raw


def small_cfg(**top):
    return config_from_dict(small_raw(**top))
