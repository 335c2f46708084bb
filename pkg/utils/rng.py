"""Counter-based random streams.

Every random draw in pinnforge comes from numpy's Philox-4x64 generator keyed
by ``SeedSequence(seed, spawn_key=stream)``. A stream is a tuple of small
integers naming its purpose (and, where needed, a call ordinal), so draws are
reproducible across platforms and independent callers never share a state.
"""
from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    NETWORK = 1
    INTERIOR = 2
    BOUNDARY = 3
    INITIAL = 4
    MINIBATCH = 5
    THETA = 6
    OBSERVATIONS = 7
    NOISE = 8
    ORACLE = 9
    AUXILIARY = 10


def generator(seed: int, *stream: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(sequence))
