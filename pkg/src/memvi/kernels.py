"""Hot inner kernels of the retrieval loops.

Two implementations of every kernel live here: vectorized numpy and explicit
loops compiled by numba. The module-level names point at the numba versions
when numba is available and ``MEMVI_DISABLE_NUMBA`` is unset, and at the numpy
versions otherwise. ``BACKEND`` tells which one is active.

All kernels take the memory in its physical layout: ``patterns`` is an
``(N, d)`` C-contiguous array whose rows are the stored patterns.
"""
import math

import numpy as np

from ._jit import HAVE_NUMBA, njit

# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------

def np_sq_dists(z, patterns):
    diff = patterns - z
    return np.einsum("kd,kd->k", diff, diff)


def _np_attend(logits, patterns):
    m = logits.max()
    w = np.exp(logits - m)
    s = w.sum()
    return (w / s) @ patterns, m + math.log(s)


def np_gmm_readout(z, patterns, sigma):
    """Return ``(softmax(-|z-M|^2 / 2 sigma^2) M^T, logsumexp of the logits)``."""
    return _np_attend(-np_sq_dists(z, patterns) / (2.0 * sigma * sigma), patterns)


def np_mchn_readout(z, patterns, beta):
    return _np_attend(beta * (patterns @ z), patterns)


def np_diag_precision_readout(z, patterns, prec):
    diff = patterns - z
    return _np_attend(-0.5 * (diff * diff) @ prec, patterns)


def np_precision_unrolled(z0, target, patterns, prec, n_iters):
    """Unrolled diagonal-precision readout and its gradient.

    Runs ``n_iters`` readouts from ``z0`` and returns ``(loss, dloss/dprec)``
    for ``loss = |z_T - target|^2``.
    """
    n, d = patterns.shape
    zs = np.empty((n_iters + 1, d))
    ws = np.empty((n_iters, n))
    zs[0] = z0
    for t in range(n_iters):
        diff = zs[t] - patterns
        logits = -0.5 * (diff * diff) @ prec
        w = np.exp(logits - logits.max())
        w /= w.sum()
        ws[t] = w
        zs[t + 1] = w @ patterns
    err = zs[n_iters] - target
    loss = float(err @ err)
    g = 2.0 * err
    gprec = np.zeros(d)
    for t in range(n_iters - 1, -1, -1):
        w = ws[t]
        gw = patterns @ g
        gs = w * (gw - w @ gw)
        diff = zs[t] - patterns
        gprec -= 0.5 * (gs @ (diff * diff))
        g = -prec * (gs @ diff)
    return loss, gprec


# --------------------------------------------------------------------------
# loop path (numba)
# --------------------------------------------------------------------------

def _loop_sq_dists(z, patterns):
    n, d = patterns.shape
    out = np.empty(n)
    for k in range(n):
        acc = 0.0
        for j in range(d):
            t = z[j] - patterns[k, j]
            acc += t * t
        out[k] = acc
    return out


def _loop_attend(logits, patterns):
    n, d = patterns.shape
    m = logits[0]
    for k in range(1, n):
        if logits[k] > m:
            m = logits[k]
    w = np.empty(n)
    s = 0.0
    for k in range(n):
        w[k] = math.exp(logits[k] - m)
        s += w[k]
    out = np.zeros(d)
    for k in range(n):
        wk = w[k] / s
        for j in range(d):
            out[j] += wk * patterns[k, j]
    return out, m + math.log(s)


def _loop_gmm_readout(z, patterns, sigma):
    logits = _loop_sq_dists(z, patterns)
    scale = -1.0 / (2.0 * sigma * sigma)
    for k in range(logits.shape[0]):
        logits[k] *= scale
    return _loop_attend(logits, patterns)


def _loop_mchn_readout(z, patterns, beta):
    n, d = patterns.shape
    logits = np.empty(n)
    for k in range(n):
        acc = 0.0
        for j in range(d):
            acc += z[j] * patterns[k, j]
        logits[k] = beta * acc
    return _loop_attend(logits, patterns)


def _loop_diag_precision_readout(z, patterns, prec):
    n, d = patterns.shape
    logits = np.empty(n)
    for k in range(n):
        acc = 0.0
        for j in range(d):
            t = z[j] - patterns[k, j]
            acc += prec[j] * t * t
        logits[k] = -0.5 * acc
    return _loop_attend(logits, patterns)


def _loop_precision_unrolled(z0, target, patterns, prec, n_iters):
    n, d = patterns.shape
    zs = np.empty((n_iters + 1, d))
    ws = np.empty((n_iters, n))
    for j in range(d):
        zs[0, j] = z0[j]
    for t in range(n_iters):
        m = -np.inf
        for k in range(n):
            acc = 0.0
            for j in range(d):
                u = zs[t, j] - patterns[k, j]
                acc += prec[j] * u * u
            ws[t, k] = -0.5 * acc
            if ws[t, k] > m:
                m = ws[t, k]
        s = 0.0
        for k in range(n):
            ws[t, k] = math.exp(ws[t, k] - m)
            s += ws[t, k]
        for j in range(d):
            zs[t + 1, j] = 0.0
        for k in range(n):
            ws[t, k] /= s
            for j in range(d):
                zs[t + 1, j] += ws[t, k] * patterns[k, j]
    g = np.empty(d)
    loss = 0.0
    for j in range(d):
        e = zs[n_iters, j] - target[j]
        loss += e * e
        g[j] = 2.0 * e
    gprec = np.zeros(d)
    gw = np.empty(n)
    for t in range(n_iters - 1, -1, -1):
        mean = 0.0
        for k in range(n):
            acc = 0.0
            for j in range(d):
                acc += patterns[k, j] * g[j]
            gw[k] = acc
            mean += ws[t, k] * acc
        gz = np.zeros(d)
        for k in range(n):
            gs = ws[t, k] * (gw[k] - mean)
            for j in range(d):
                u = zs[t, j] - patterns[k, j]
                gprec[j] -= 0.5 * gs * u * u
                gz[j] += gs * u
        for j in range(d):
            g[j] = -prec[j] * gz[j]
    return loss, gprec


if HAVE_NUMBA:
    nb_sq_dists = njit(_loop_sq_dists)
    nb_gmm_readout = njit(_loop_gmm_readout)
    nb_mchn_readout = njit(_loop_mchn_readout)
    nb_diag_precision_readout = njit(_loop_diag_precision_readout)
    nb_precision_unrolled = njit(_loop_precision_unrolled)
    # inner helpers must be compiled for the compiled callers to resolve them
    _loop_sq_dists = nb_sq_dists
    _loop_attend = njit(_loop_attend)

    BACKEND = "numba"
    sq_dists = nb_sq_dists
    gmm_readout = nb_gmm_readout
    mchn_readout = nb_mchn_readout
    diag_precision_readout = nb_diag_precision_readout
    precision_unrolled = nb_precision_unrolled
else:
    BACKEND = "numpy"
    sq_dists = np_sq_dists
    gmm_readout = np_gmm_readout
    mchn_readout = np_mchn_readout
    diag_precision_readout = np_diag_precision_readout
    precision_unrolled = np_precision_unrolled
