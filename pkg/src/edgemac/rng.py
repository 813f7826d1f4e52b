"""Deterministic named random substreams.

All randomness in the package flows from one integer seed. Independent
purposes (weight init, augmentation, shuffling, ...) get their own named
substream so that parallelism or reordering of one consumer never perturbs
another.
"""

import hashlib

import numpy as np


def _label_key(label) -> int:
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(seed: int, *labels) -> np.random.Generator:
    """Generator for the substream named by ``labels`` under ``seed``.

    The same (seed, labels) always yields the same stream, on any platform.
    """
    key = tuple(_label_key(label) for label in labels)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
