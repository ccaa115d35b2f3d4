"""Every random stream is derived from one user seed plus a purpose string.

The sub-seed for ``(seed, purpose, *extra)`` is the numpy ``SeedSequence``
over ``[seed, crc32(purpose), *extra]``, so streams are independent of the
order in which they are requested.
"""

import zlib

import numpy as np


def seed_sequence(seed, purpose, *extra):
    return np.random.SeedSequence([int(seed), zlib.crc32(purpose.encode("utf-8")), *(int(e) for e in extra)])


def derive_rng(seed, purpose, *extra):
    return np.random.default_rng(seed_sequence(seed, purpose, *extra))


def derive_seed(seed, purpose, *extra):
    """A 63-bit integer seed for a sub-task (e.g. one scene of a dataset)."""
    return int(seed_sequence(seed, purpose, *extra).generate_state(1, np.uint64)[0] >> np.uint64(1))
