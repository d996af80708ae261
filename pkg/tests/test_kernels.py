"""The active kernels (numba when available) agree with the numpy reference versions."""
import os
import subprocess
import sys

import numpy as np
import pytest

from memvi import kernels


def cases(rng, count=30):
    for _ in range(count):
        d, n = int(rng.integers(1, 20)), int(rng.integers(1, 60))
        yield rng.standard_normal(d), rng.standard_normal((n, d))


def test_sq_dists_agree(rng):
    for z, p in cases(rng):
        np.testing.assert_allclose(kernels.sq_dists(z, p), kernels.np_sq_dists(z, p), rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("name,arg", [("gmm_readout", 0.7), ("mchn_readout", 3.0)])
def test_readouts_agree(rng, name, arg):
    fast, ref = getattr(kernels, name), getattr(kernels, "np_" + name)
    for z, p in cases(rng):
        a, la = fast(z, p, arg)
        b, lb = ref(z, p, arg)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
        assert la == pytest.approx(lb, rel=1e-12, abs=1e-12)


def test_precision_readout_agrees(rng):
    for z, p in cases(rng):
        prec = rng.uniform(0.1, 3.0, z.size)
        a, la = kernels.diag_precision_readout(z, p, prec)
        b, lb = kernels.np_diag_precision_readout(z, p, prec)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
        assert la == pytest.approx(lb, rel=1e-12, abs=1e-12)


def test_unrolled_precision_agrees(rng):
    for z, p in cases(rng, 20):
        prec = rng.uniform(0.1, 3.0, z.size)
        target = p[0]
        for iters in (1, 3):
            la, ga = kernels.precision_unrolled(z, target, p, prec, iters)
            lb, gb = kernels.np_precision_unrolled(z, target, p, prec, iters)
            assert la == pytest.approx(lb, rel=1e-12, abs=1e-14)
            np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-13)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, MEMVI_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from memvi import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
