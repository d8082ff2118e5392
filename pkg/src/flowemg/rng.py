"""Keyed random streams: every consumer derives its own generator from a key tuple,
so results never depend on call order or worker scheduling."""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(*keys) -> list[int]:
    digest = hashlib.sha256(repr(keys).encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]


def stream(*keys) -> np.random.Generator:
    """Generator for ``keys`` (e.g. ``stream(seed, "subject3", "synth")``)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(stream_key(*keys))))
