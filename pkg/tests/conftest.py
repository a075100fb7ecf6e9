"""Shared helpers: independent finite-difference oracle and random
instance factories used across test modules."""

import numpy as np
import pytest

from desorec.loss import SoftTarget


def fd_gradient(fn, z, h=1e-5):
    """Central-difference gradient, written independently of the library."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    for j in range(z.size):
        bump = np.zeros_like(z)
        bump.flat[j] = h
        out.flat[j] = (fn(z + bump) - fn(z - bump)) / (2.0 * h)
    return out


def softmax(z):
    e = np.exp(z - np.max(z))
    return e / e.sum()


def random_probs(rng, m):
    return softmax(rng.normal(size=m))


def random_target(rng, m, y, min_support=2):
    """Random sparse soft target whose support contains y."""
    size = int(rng.integers(min_support, m + 1))
    support = rng.choice(m, size=size, replace=False)
    if y not in support:
        support[0] = y
    support = np.sort(support)
    probs = rng.uniform(0.05, 1.0, size=size)
    probs /= probs.sum()
    return SoftTarget(items=support, probs=probs, y=y, num_items=m)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
