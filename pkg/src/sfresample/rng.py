"""Seeded random number generation.

Every stochastic operation takes an integer seed and builds a fresh
``numpy.random.Generator`` backed by the PCG64 bit generator. Gaussian draws
use numpy's ziggurat ``standard_normal``. Both algorithms are fixed by numpy's
stream-compatibility policy, so test vectors are stable across platforms.

Sub-seeds for components of a larger pipeline are derived with
``SeedSequence([root, *path])``; ``path`` is a tuple of small integers naming
the component (see ``derive_seed``).
"""

import numpy as np

# Component identifiers used when splitting a root seed.
NOISE = 1
KERNEL_NOISE = 2
TRAIN = 3
DATASET = 4
INIT = 5


def generator(seed):
    """Return a fresh PCG64 generator for ``seed``."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(root, *path):
    """Deterministically derive a 63-bit integer seed from ``root`` and ``path``."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFFFFFFFFFF, *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
