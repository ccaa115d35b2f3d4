import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x, idx, h=1e-6):
    """Central difference of scalar ``f`` with respect to ``x.flat[idx]`` (x restored afterwards)."""
    old = x.flat[idx]
    x.flat[idx] = old + h
    fp = f()
    x.flat[idx] = old - h
    fm = f()
    x.flat[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_floor(f0, tol, h=1e-6):
    """Magnitude below which a central difference cannot resolve ``tol`` relative error.

    Rounding in ``f`` costs about ``eps * |f| / h`` absolute in the difference
    quotient (times a safety factor of 10 for accumulated sums); dividing by
    ``tol`` gives the gradient size at which that noise equals ``tol``.
    """
    return 10 * np.finfo(float).eps * max(1.0, abs(f0)) / h / tol
