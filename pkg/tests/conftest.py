import numpy as np
import pytest

from kktunlearn import diffnet
from kktunlearn.data_io import LabeledDataset
from kktunlearn.diffnet import NetworkSpec


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient (or Jacobian rows) of ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def pre_activations(spec, theta, x):
    Ws = diffnet.unflatten(spec, theta)
    h = np.asarray(x, dtype=np.float64) - spec.offset_array()
    out = []
    for W in Ws[:-1]:
        z = W @ h
        out.append(z)
        h = np.maximum(z, 0)
    return np.concatenate(out) if out else np.array([np.inf])


def kink_free_instance(rng, spec, margin=1e-3, tries=1000):
    """Random (theta, x) whose pre-activations all stay ``margin`` away from 0."""
    for _ in range(tries):
        theta = rng.normal(size=spec.num_params)
        x = rng.uniform(0, 1, spec.input_dim)
        if np.all(np.abs(pre_activations(spec, theta, x)) > margin):
            return theta, x
    raise RuntimeError("could not draw a kink-free instance")


def random_spec(rng, max_depth=3, offset=False, multiclass=None):
    depth = int(rng.integers(1, max_depth + 1))
    d = int(rng.integers(2, 6))
    hidden = tuple(int(w) for w in rng.integers(2, 7, size=depth - 1))
    k = 1
    if multiclass or (multiclass is None and rng.random() < 0.5):
        k = int(rng.integers(2, 4))
    off = tuple(rng.uniform(0, 1, d)) if offset else None
    return NetworkSpec(d, hidden, k, off)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TOY_X = np.array([[0.9, 0.1], [0.8, 0.3], [0.1, 0.9], [0.3, 0.7]])
TOY_Y = np.array([1, 1, -1, -1])


@pytest.fixture
def toy():
    return LabeledDataset(TOY_X, TOY_Y)
