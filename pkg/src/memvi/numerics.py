"""Dense arithmetic helpers, stable reductions and seeded random streams.

Vectors and matrices are plain float64 numpy arrays. Memory matrices are
exposed as ``d x N`` (patterns are columns) but stored as ``N x d`` row-major
arrays; see :class:`memvi.memory.MemoryMatrix`.
"""
import zlib

import numpy as np

from . import kernels
from .errors import MemviError, ShapeError


def as_vector(v, name="vector"):
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ShapeError(f"{name} must be a non-empty 1-d array, got shape {a.shape}")
    return a


def log_sum_exp(v):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise MemviError("empty reduction")
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def softmax(v):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise MemviError("empty reduction")
    w = np.exp(v - v.max())
    return w / w.sum()


def _check_mat(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {a.shape}")
    return a


def matvec(A, x):
    A = _check_mat(A, "matrix")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or A.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot multiply matrix {A.shape} by vector {x.shape}")
    return A @ x


def matmat(A, B):
    A = _check_mat(A, "left matrix")
    B = _check_mat(B, "right matrix")
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"cannot multiply matrix {A.shape} by matrix {B.shape}")
    return A @ B


def transpose(A):
    return _check_mat(A, "matrix").T.copy()


def axpy(a, x, y):
    """``a * x + y``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return a * x + y


def squared_distance_columns(z, M):
    """Entry k is ``|z - M[:, k]|^2`` for a ``d x N`` matrix ``M``."""
    z = np.asarray(z, dtype=np.float64)
    M = _check_mat(M, "memory")
    if z.ndim != 1 or z.shape[0] != M.shape[0]:
        raise ShapeError(f"vector {z.shape} incompatible with matrix {M.shape}")
    return kernels.sq_dists(z, np.ascontiguousarray(M.T))


# --------------------------------------------------------------------------
# seeded randomness
# --------------------------------------------------------------------------

def make_rng(seed, *keys):
    """Counter-based (Philox) generator for ``seed``, optionally keyed into a substream.

    Keys may be ints or strings; strings are hashed with CRC32 so the stream is
    stable across processes and platforms (unlike ``hash``).
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
