"""Deterministic random substreams.

Every random draw in the package comes from a stream derived from
``(master_seed, trial, layer, role)``. The derivation is part of the public
contract so that reruns (and other implementations) reproduce identical
noise:

.. code-block:: text

    h = splitmix64(master_seed)
    h = splitmix64(h ^ trial)
    h = splitmix64(h ^ layer)
    h = splitmix64(h ^ role)
    stream = numpy.random.Generator(numpy.random.PCG64(h))

All arithmetic is modulo 2**64 and ``splitmix64`` is the finalizer of
Steele, Lea and Flood's SplitMix64 generator (increment
``0x9E3779B97F4A7C15``, multipliers ``0xBF58476D1CE4E5B9`` and
``0x94D049BB133111EB``, shifts 30/27/31).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# Layer label for streams that cover a whole trajectory and are consumed
# sequentially.
WHOLE_RUN = MASK64


class Role(IntEnum):
    INIT = 1
    MLP = 2
    FIELD = 3
    COUPLING = 4
    FROZEN_POINTS = 5
    LYAPUNOV = 6


def splitmix64(x: int) -> int:
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _label(value: int) -> int:
    value = int(value)
    if value < 0 or value > MASK64:
        raise ValueError(f"stream label {value} does not fit in 64 unsigned bits")
    return value


def derive_seed(master_seed: int, trial: int, layer: int, role: int) -> int:
    h = splitmix64(_label(master_seed))
    for label in (trial, layer, role):
        h = splitmix64(h ^ _label(label))
    return h


def derive_stream(master_seed: int, trial: int, layer: int, role: int) -> np.random.Generator:
    """Return the generator for one ``(trial, layer, role)`` label triple."""
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, trial, layer, role)))


@dataclass(frozen=True)
class TrialStreams:
    """All substreams of one trial; ``get(layer, role)`` builds a fresh generator."""

    master_seed: int
    trial: int

    def get(self, layer: int, role: int) -> np.random.Generator:
        return derive_stream(self.master_seed, self.trial, layer, role)
