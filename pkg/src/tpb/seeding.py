"""Seeding and deterministic-mode helpers.

All stochastic entry points take either an explicit ``numpy.random.Generator``
or an integer seed. Torch-side randomness (parameter init, dropout) is seeded
per operation from the same integer so that a pipeline stage is a pure
function of (data, config, seed).
"""

from __future__ import annotations

import random
import zlib

import numpy as np
import torch


def rng_from(seed_or_rng: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def derive_seed(seed: int, *labels: str | int) -> int:
    """Stable sub-seed for a named stream (e.g. one synthetic city)."""
    h = zlib.crc32(repr(labels).encode("utf-8"))
    return int(np.random.SeedSequence([seed & 0xFFFFFFFF, h]).generate_state(1)[0])


def seed_torch(seed: int) -> None:
    torch.manual_seed(seed)


def enable_deterministic_mode(seed: int) -> None:
    """Pin every RNG and force reproducible kernels.

    Single-threaded torch so results do not depend on the host's core count;
    the cost is acceptable at desk scale.
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
