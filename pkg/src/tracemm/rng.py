"""Deterministic named random substreams derived from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _steam_key(name: str) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """A generator for stream ``name``, reproducible across runs and platforms."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _steam_key(name)]))
