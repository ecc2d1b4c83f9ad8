"""Named random substreams derived from one master seed.

Each component draws from its own stream (``scene``, ``init``, ``gp``,
``gs``, ``mc``) so that editing one part of an experiment does not shift
the random numbers seen by the others.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), _key(name), *[int(e) for e in extra]])


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for the named substream of ``seed``."""
    return np.random.default_rng(seed_sequence(seed, name, *extra))


def subseed(seed: int, name: str, *extra: int) -> int:
    """A 32-bit integer seed for libraries that want a plain int."""
    return int(seed_sequence(seed, name, *extra).generate_state(1)[0])


def torch_generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(subseed(seed, name))
    return g
