"""Learning a diagonal prior precision from retrieval examples.

The precision is parameterized as ``P_jj = max(exp(raw_j), PRECISION_FLOOR)``
and trained by full-batch gradient descent on the mean squared distance
between the unrolled readout and the correct pattern.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import MemviError, NumericError, ShapeError
from .memory import PRECISION_FLOOR, PrecisionGMM
from .retrieval import RetrievalConfig, retrieve

DEFAULT_UNROLL = 3


@dataclass
class PrecisionParams:
    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.array(self.raw, dtype=np.float64).reshape(-1)

    @classmethod
    def uniform(cls, d, sigma):
        return cls(np.full(d, math.log(1.0 / (sigma * sigma))))

    @property
    def precision(self):
        return np.maximum(np.exp(self.raw), PRECISION_FLOOR)

    def prior(self):
        return PrecisionGMM(self.precision)


@dataclass
class PrecisionTask:
    memory: object
    queries: np.ndarray
    targets: np.ndarray
    transform_spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.queries = np.atleast_2d(np.asarray(self.queries, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        if self.queries.shape[0] != self.targets.shape[0]:
            raise ShapeError("need one target index per query")
        if self.queries.shape[0] and self.queries.shape[1] != self.memory.d:
            raise ShapeError(f"queries have dim {self.queries.shape[1]}, memory has d={self.memory.d}")
        if self.targets.size and (self.targets.min() < 0 or self.targets.max() >= self.memory.N):
            raise MemviError("target index out of range")

    def __len__(self):
        return self.targets.shape[0]


def precision_loss_and_grad(params, task, iters_per_example=DEFAULT_UNROLL):
    """Mean ``|z_T - M_k*|^2`` over the task and its gradient w.r.t. ``params.raw``."""
    if len(task) == 0:
        raise MemviError("empty task")
    if iters_per_example < 1:
        raise MemviError("iters_per_example must be >= 1")
    prec = params.precision
    patterns = task.memory.patterns
    total = 0.0
    gprec = np.zeros_like(prec)
    for q, k in zip(task.queries, task.targets):
        loss, g = kernels.precision_unrolled(q, patterns[k], patterns, prec, int(iters_per_example))
        total += loss
        gprec += g
    n = len(task)
    # the floor is a constant region of the parameterization
    active = np.exp(params.raw) > PRECISION_FLOOR
    return total / n, gprec / n * np.exp(params.raw) * active


def precision_loss(params, task, iters_per_example=DEFAULT_UNROLL):
    return precision_loss_and_grad(params, task, iters_per_example)[0]


def train_precision(task, epochs, learning_rate, init=None, sigma=1.0, iters_per_example=DEFAULT_UNROLL):
    """Full-batch gradient descent on :func:`precision_loss`.

    Starts from ``init`` or the uniform precision ``1/sigma^2``. Returns
    ``(params, trace)`` where ``trace[e]`` is the loss before update ``e``.
    """
    if len(task) == 0:
        raise MemviError("empty task")
    params = PrecisionParams(init.raw if init is not None else PrecisionParams.uniform(task.memory.d, sigma).raw)
    trace = []
    for epoch in range(epochs):
        loss, grad = precision_loss_and_grad(params, task, iters_per_example)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericError(f"non-finite precision loss at epoch {epoch}: {loss}")
        trace.append(loss)
        params = PrecisionParams(params.raw - learning_rate * grad)
    return params, trace


def retrieval_success_rate(task, prior, tau, config=None):
    """Percent of task queries whose converged readout lands within ``tau`` of the target."""
    config = config or RetrievalConfig(log_energy=False)
    engine = "precision" if isinstance(prior, PrecisionGMM) else "gmm"
    hits = 0
    for q, k in zip(task.queries, task.targets):
        res = retrieve(q, task.memory, prior, engine, config)
        hits += np.linalg.norm(res.z_final - task.memory.patterns[k]) < tau
    return 100.0 * hits / len(task)


def masked_nearest_neighbor_rate(task, clean_dims):
    """Percent of queries whose nearest pattern, measured on ``clean_dims`` only, is the target."""
    clean = np.asarray(clean_dims, dtype=np.int64)
    p = task.memory.patterns[:, clean]
    hits = 0
    for q, k in zip(task.queries, task.targets):
        d2 = ((p - q[clean]) ** 2).sum(axis=1)
        hits += int(np.argmin(d2)) == k
    return 100.0 * hits / len(task)


def make_subspace_task(memory, corrupted_dims, per_pattern, rng, noise_std=2.0, clean_noise_std=0.0):
    """Queries ``M_k + noise`` with std ``noise_std`` on ``corrupted_dims`` and ``clean_noise_std`` elsewhere."""
    J = np.asarray(sorted(set(int(j) for j in corrupted_dims)), dtype=np.int64)
    if J.size and (J.min() < 0 or J.max() >= memory.d):
        raise MemviError("corrupted dims out of range")
    std = np.full(memory.d, float(clean_noise_std))
    std[J] = noise_std
    targets = np.repeat(np.arange(memory.N), per_pattern)
    queries = memory.patterns[targets] + rng.standard_normal((targets.size, memory.d)) * std
    spec = {"corrupted_dims": J.tolist(), "noise_std": noise_std, "clean_noise_std": clean_noise_std}
    return PrecisionTask(memory, queries, targets, spec)
