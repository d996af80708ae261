import numpy as np
import pytest

from memvi.harness import SyntheticWorld
from memvi.memory import MemoryMatrix
from memvi.model import init_vae, train_vae
from memvi.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


def random_memory(rng, N, d, scale=1.0):
    return MemoryMatrix(scale * rng.standard_normal((N, d)))


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.fixture(scope="session")
def trained():
    """Desk-scale VAE trained on the synthetic world: ``(initial, trained, loss_trace, data)``."""
    world = SyntheticWorld()
    X, _ = world.sample(500, make_rng(0, "vae-data"))
    v0 = init_vae(make_rng(0, "vae-init"))
    vae, trace = train_vae(v0, X, 40, 0.001, make_rng(0, "vae-train"))
    return v0, vae, trace, X
