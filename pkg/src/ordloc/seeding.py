"""Named random streams derived from one global seed."""
from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(seed: int, *labels) -> int:
    """Hash ``seed`` and a label path into a 63-bit seed. Adding a label never shifts others."""
    key = ":".join([str(int(seed))] + [str(x) for x in labels]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))


def torch_generator(seed: int, *labels) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *labels))
    return g
