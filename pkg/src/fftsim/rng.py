"""Keyed random streams derived from one master seed.

Every draw in a run comes from ``stream(master, purpose, round, node)``. The key
is hashed by :class:`numpy.random.SeedSequence`, so streams are independent and
adding a consumer never shifts the randomness another consumer sees. Two runs
that differ only in strategy therefore realize identical connectivity masks.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "init": 1,
    "pretrain": 2,
    "partition": 3,
    "placement": 4,
    "select": 5,
    "transient": 6,
    "intermittent": 7,
    "train": 8,
    "compensate": 9,
    "tf_select": 10,
    "data": 12,
}

SERVER_NODE = 0


def stream(master_seed: int, purpose: str, round_index: int = 0, node: int = 0) -> np.random.Generator:
    key = (PURPOSES[purpose], int(round_index), int(node))
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=key))
