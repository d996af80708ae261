"""Memory store and the memory-dependent priors over the latent code.

Three prior families are supported:

* :class:`BalancedGMM` -- uniform mixture of ``N(M_k, sigma^2 I)``.
* :class:`MCHN` -- mixture of ``N(M_k, I/beta)`` with weights growing with
  ``|M_k|^2``; its negative log-density is the modern Hopfield energy up to a
  constant.
* :class:`PrecisionGMM` -- uniform mixture of ``N(M_k, P^-1)`` with a shared
  diagonal or full precision ``P``.

All log-densities keep their full normalization constants.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import EmptyMemoryError, MemviError, ShapeError
from .numerics import log_sum_exp, softmax

PRECISION_FLOOR = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


class MemoryMatrix:
    """Immutable ``d x N`` store of patterns.

    Semantically patterns are the columns ``M[:, k]``; physically they are kept
    as the rows of an ``(N, d)`` C-contiguous array, available as
    :attr:`patterns`. :attr:`M` is the transposed (column) view.
    """

    def __init__(self, patterns, d=None):
        p = np.array(patterns, dtype=np.float64, copy=True)
        if p.size == 0:
            if d is None:
                raise ShapeError("an empty memory needs an explicit dimension d")
            p = p.reshape(0, d)
        if p.ndim == 1:
            p = p.reshape(1, -1)
        if p.ndim != 2:
            raise ShapeError(f"patterns must be an (N, d) array, got shape {p.shape}")
        if d is not None and p.shape[1] != d:
            raise ShapeError(f"patterns have dim {p.shape[1]}, expected {d}")
        if not np.all(np.isfinite(p)):
            raise MemviError("memory patterns must be finite")
        p = np.ascontiguousarray(p)
        p.setflags(write=False)
        self._patterns = p

    @classmethod
    def from_columns(cls, M):
        M = np.asarray(M, dtype=np.float64)
        if M.ndim != 2:
            raise ShapeError(f"memory matrix must be d x N, got shape {M.shape}")
        return cls(M.T, d=M.shape[0])

    @classmethod
    def empty(cls, d):
        return cls(np.zeros((0, d)), d=d)

    @property
    def patterns(self):
        return self._patterns

    @property
    def M(self):
        return self._patterns.T

    @property
    def d(self):
        return self._patterns.shape[1]

    @property
    def N(self):
        return self._patterns.shape[0]

    def __len__(self):
        return self.N

    def column(self, k):
        return self._patterns[k]

    def __eq__(self, other):
        return isinstance(other, MemoryMatrix) and np.array_equal(self._patterns, other._patterns)

    def __repr__(self):
        return f"MemoryMatrix(d={self.d}, N={self.N})"

    def min_pairwise_distance(self):
        if self.N < 2:
            return math.inf
        p = self._patterns
        best = math.inf
        for k in range(self.N - 1):
            best = min(best, float(np.sqrt(kernels.sq_dists(p[k], p[k + 1:]).min())))
        return best


def _check(z, memory):
    if memory.N == 0:
        raise EmptyMemoryError()
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (memory.d,):
        raise ShapeError(f"latent has shape {z.shape}, memory has d={memory.d}")
    return z


def write_pattern(memory, z_new):
    """One-shot write: a new memory with ``z_new`` appended as the last column."""
    z_new = np.asarray(z_new, dtype=np.float64)
    if z_new.shape != (memory.d,):
        raise ShapeError(f"cannot write pattern of shape {z_new.shape} into memory with d={memory.d}")
    return MemoryMatrix(np.vstack([memory.patterns, z_new[None, :]]), d=memory.d)


# --------------------------------------------------------------------------
# balanced GMM
# --------------------------------------------------------------------------

def _check_sigma(sigma):
    if not sigma > 0:
        raise MemviError(f"sigma must be positive, got {sigma}")


def log_prior_balanced(z, memory, sigma):
    """``log (1/N) sum_k N(z; M_k, sigma^2 I)``."""
    z = _check(z, memory)
    _check_sigma(sigma)
    logits = -kernels.sq_dists(z, memory.patterns) / (2.0 * sigma * sigma)
    d = memory.d
    return log_sum_exp(logits) - math.log(memory.N) - 0.5 * d * (_LOG_2PI + 2.0 * math.log(sigma))


def grad_log_prior_balanced(z, memory, sigma):
    z = _check(z, memory)
    _check_sigma(sigma)
    readout, _ = kernels.gmm_readout(z, memory.patterns, float(sigma))
    return (readout - z) / (sigma * sigma)


# --------------------------------------------------------------------------
# MCHN (norm-biased GMM)
# --------------------------------------------------------------------------

def _check_beta(beta):
    if not beta > 0:
        raise MemviError(f"beta must be positive, got {beta}")


def mchn_energy(z, memory, beta):
    """``beta/2 z.z - log sum_k exp(beta z.M_k)`` (additive constant dropped)."""
    z = _check(z, memory)
    _check_beta(beta)
    return 0.5 * beta * float(z @ z) - log_sum_exp(beta * (memory.patterns @ z))


def grad_mchn_energy(z, memory, beta):
    z = _check(z, memory)
    _check_beta(beta)
    w = softmax(beta * (memory.patterns @ z))
    return beta * (z - w @ memory.patterns)


def mchn_mixing_weights(memory, beta):
    if memory.N == 0:
        raise EmptyMemoryError()
    norms = np.einsum("kd,kd->k", memory.patterns, memory.patterns)
    return softmax(0.5 * beta * norms)


def log_prior_mchn(z, memory, beta):
    """Full log-density of the norm-biased mixture ``sum_k pi_k N(z; M_k, I/beta)``.

    Uses the standard ``(beta / 2 pi)^(d/2)`` Gaussian normalizer.
    """
    z = _check(z, memory)
    _check_beta(beta)
    norms = np.einsum("kd,kd->k", memory.patterns, memory.patterns)
    half_b = 0.5 * beta
    log_pi = half_b * norms - log_sum_exp(half_b * norms)
    logits = log_pi - half_b * kernels.sq_dists(z, memory.patterns)
    return log_sum_exp(logits) + 0.5 * memory.d * (math.log(beta) - _LOG_2PI)


def mchn_log_prior_offset(memory, beta):
    """The ``z``-independent constant ``c`` with ``log_prior_mchn = -mchn_energy + c``."""
    if memory.N == 0:
        raise EmptyMemoryError()
    norms = np.einsum("kd,kd->k", memory.patterns, memory.patterns)
    return -log_sum_exp(0.5 * beta * norms) + 0.5 * memory.d * (math.log(beta) - _LOG_2PI)


# --------------------------------------------------------------------------
# shared-precision GMM
# --------------------------------------------------------------------------

def check_precision(P, d):
    """Validate a diagonal (1-d) or full (2-d, SPD) precision; returns it as float64."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim == 1:
        if P.shape != (d,):
            raise ShapeError(f"diagonal precision must have length {d}, got {P.shape}")
        if not np.all(P > 0):
            raise MemviError("non-positive diagonal precision entry")
        return P
    if P.ndim == 2:
        if P.shape != (d, d):
            raise ShapeError(f"precision matrix must be {d}x{d}, got {P.shape}")
        if not np.allclose(P, P.T, rtol=1e-12, atol=1e-12):
            raise MemviError("precision matrix must be symmetric")
        try:
            np.linalg.cholesky(P)
        except np.linalg.LinAlgError as exc:
            raise MemviError("precision matrix must be positive definite") from exc
        return P
    raise ShapeError(f"precision must be 1-d or 2-d, got shape {P.shape}")


def _precision_logits(z, memory, P):
    diff = memory.patterns - z
    if P.ndim == 1:
        return -0.5 * (diff * diff) @ P
    return -0.5 * np.einsum("ki,ij,kj->k", diff, P, diff)


def _log_det(P):
    if P.ndim == 1:
        return float(np.log(P).sum())
    return float(np.linalg.slogdet(P)[1])


def log_prior_precision(z, memory, P):
    """``log (1/N) sum_k N(z; M_k, P^-1)`` for diagonal or full ``P``."""
    z = _check(z, memory)
    P = check_precision(P, memory.d)
    logits = _precision_logits(z, memory, P)
    return log_sum_exp(logits) - math.log(memory.N) - 0.5 * memory.d * _LOG_2PI + 0.5 * _log_det(P)


def precision_readout(z, memory, P):
    """``softmax(-1/2 (z - M_k)^T P (z - M_k)) M^T``."""
    z = _check(z, memory)
    P = check_precision(P, memory.d)
    if P.ndim == 1:
        readout, _ = kernels.diag_precision_readout(z, memory.patterns, P)
        return readout
    return softmax(_precision_logits(z, memory, P)) @ memory.patterns


def grad_log_prior_precision(z, memory, P):
    z = _check(z, memory)
    P = check_precision(P, memory.d)
    delta = precision_readout(z, memory, P) - z
    return P * delta if P.ndim == 1 else P @ delta


# --------------------------------------------------------------------------
# prior specs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BalancedGMM:
    sigma: float

    def __post_init__(self):
        _check_sigma(self.sigma)

    kind = "balanced_gmm"

    def log_prob(self, z, memory):
        return log_prior_balanced(z, memory, self.sigma)

    def grad_log_prob(self, z, memory):
        return grad_log_prior_balanced(z, memory, self.sigma)


@dataclass(frozen=True)
class MCHN:
    beta: float

    def __post_init__(self):
        _check_beta(self.beta)

    kind = "mchn"

    def log_prob(self, z, memory):
        return log_prior_mchn(z, memory, self.beta)

    def grad_log_prob(self, z, memory):
        return -grad_mchn_energy(z, memory, self.beta)


class PrecisionGMM:
    kind = "precision_gmm"

    def __init__(self, precision):
        P = np.asarray(precision, dtype=np.float64)
        self.precision = check_precision(P, P.shape[0])

    def log_prob(self, z, memory):
        return log_prior_precision(z, memory, self.precision)

    def grad_log_prob(self, z, memory):
        return grad_log_prior_precision(z, memory, self.precision)

    def __repr__(self):
        return f"PrecisionGMM(precision={self.precision!r})"


def sample_prior(memory, sigma, rng, return_index=False):
    """Draw ``M_k + sigma * eps`` with ``k`` uniform over the stored patterns."""
    if memory.N == 0:
        raise EmptyMemoryError()
    _check_sigma(sigma)
    k = int(rng.integers(memory.N))
    z = memory.patterns[k] + sigma * rng.standard_normal(memory.d)
    return (z, k) if return_index else z


# --------------------------------------------------------------------------
# text persistence
# --------------------------------------------------------------------------

def dumps_memory(memory):
    """Header ``d=<d> n=<N>`` then one pattern per line, 17 significant digits."""
    lines = [f"d={memory.d} n={memory.N}"]
    for row in memory.patterns:
        lines.append(" ".join(format(float(v), ".17g") for v in row))
    return "\n".join(lines) + "\n"


def loads_memory(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MemviError("empty memory file")
    try:
        fields = dict(tok.split("=", 1) for tok in lines[0].split())
        d, n = int(fields["d"]), int(fields["n"])
    except (KeyError, ValueError) as exc:
        raise MemviError(f"malformed memory header: {lines[0]!r}") from exc
    if len(lines) - 1 != n:
        raise MemviError(f"memory header says n={n} but file has {len(lines) - 1} patterns")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        vals = [float(v) for v in line.split()]
        if len(vals) != d:
            raise MemviError(f"line {i}: expected {d} values, got {len(vals)}")
        rows.append(vals)
    return MemoryMatrix(np.array(rows).reshape(n, d), d=d)


def save_memory(path, memory):
    with open(path, "w") as fh:
        fh.write(dumps_memory(memory))


def load_memory(path):
    with open(path) as fh:
        return loads_memory(fh.read())
