"""Seeded, counter-based random number generation.

All stochastic components draw from Philox4x64-10 streams keyed through
``numpy.random.SeedSequence``, so datasets, model initializations and noise
realizations regenerate bit-identically across platforms and across
serial/parallel execution.  The entropy key is always an explicit integer
tuple; never a global state.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox, SeedSequence


def generator(*keys: int) -> Generator:
    """Philox generator keyed by an integer tuple."""
    return Generator(Philox(SeedSequence(entropy=list(keys))))


def derive_seed(*keys: int) -> int:
    """Collapse an integer tuple to a single reproducible 64-bit seed."""
    return int(SeedSequence(entropy=list(keys)).generate_state(1, np.uint64)[0])
