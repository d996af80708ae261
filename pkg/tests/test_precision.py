import numpy as np
import pytest
from conftest import central_diff, random_memory, rel_err

from memvi.errors import MemviError
from memvi.harness import default_tau, make_synthetic_memory
from memvi.memory import PRECISION_FLOOR, MemoryMatrix
from memvi.numerics import make_rng
from memvi.precision import (
    PrecisionParams,
    PrecisionTask,
    make_subspace_task,
    masked_nearest_neighbor_rate,
    precision_loss,
    precision_loss_and_grad,
    retrieval_success_rate,
    train_precision,
)
from memvi.retrieval import gmm_step, precision_step


def random_task(rng, N=10, d=8, per=2):
    mem = random_memory(rng, N, d)
    targets = np.repeat(np.arange(N), per)
    queries = mem.patterns[targets] + 0.7 * rng.standard_normal((targets.size, d))
    return PrecisionTask(mem, queries, targets)


def test_loss_zero_when_queries_are_targets(rng):
    mem = MemoryMatrix(np.vstack([5 * np.eye(4), -5 * np.eye(4)]))
    task = PrecisionTask(mem, mem.patterns.copy(), np.arange(8))
    for _ in range(5):
        assert precision_loss(PrecisionParams(rng.uniform(1.0, 3.0, 4)), task) < 1e-12


def test_uniform_loss_equals_unrolled_gmm(rng):
    task = random_task(rng)
    sigma = 0.8
    params = PrecisionParams.uniform(8, sigma)
    total = 0.0
    for q, k in zip(task.queries, task.targets):
        z = q
        for _ in range(3):
            z = gmm_step(z, task.memory, sigma)
        total += float(((z - task.memory.patterns[k]) ** 2).sum())
    assert precision_loss(params, task, 3) == pytest.approx(total / len(task), rel=1e-12)


def test_uniform_precision_step_matches_gmm(rng):
    mem = random_memory(rng, 12, 5)
    params = PrecisionParams.uniform(5, 0.6)
    for _ in range(10):
        z = rng.standard_normal(5)
        np.testing.assert_allclose(precision_step(z, mem, params.precision), gmm_step(z, mem, 0.6),
                                   rtol=0, atol=1e-12)


@pytest.mark.parametrize("unroll", [1, 3])
def test_gradient_matches_finite_differences(rng, unroll):
    worst = 0.0
    for _ in range(20):
        task = random_task(rng)
        params = PrecisionParams(rng.uniform(-0.5, 1.0, 8))
        _, g = precision_loss_and_grad(params, task, unroll)
        fd = central_diff(lambda r: precision_loss(PrecisionParams(r), task, unroll), params.raw)
        worst = max(worst, rel_err(g, fd))
    assert worst < 1e-5


def test_floored_entries_get_no_gradient(rng):
    task = random_task(rng)
    raw = rng.uniform(-0.5, 0.5, 8)
    raw[2] = np.log(PRECISION_FLOOR) - 5.0
    params = PrecisionParams(raw)
    assert params.precision[2] == PRECISION_FLOOR
    _, g = precision_loss_and_grad(params, task)
    assert g[2] == 0.0


def test_precision_always_positive(rng):
    params = PrecisionParams(np.array([-1e6, -50.0, 0.0, 3.0]))
    assert np.all(params.precision >= PRECISION_FLOOR)


def test_zero_learning_rate_keeps_params(rng):
    task = random_task(rng)
    init = PrecisionParams(rng.standard_normal(8))
    params, trace = train_precision(task, 5, 0.0, init=init)
    np.testing.assert_array_equal(params.raw, init.raw)
    assert len(trace) == 5 and len(set(trace)) == 1


def test_empty_task_rejected(rng):
    mem = random_memory(rng, 3, 2)
    task = PrecisionTask(mem, np.zeros((0, 2)), np.zeros(0, dtype=int))
    with pytest.raises(MemviError):
        precision_loss(PrecisionParams(np.zeros(2)), task)
    with pytest.raises(MemviError):
        train_precision(task, 1, 0.1)
    with pytest.raises(MemviError):
        PrecisionTask(mem, np.zeros((1, 2)), np.array([3]))


def test_subspace_task_corrupts_only_chosen_dims(rng):
    mem = random_memory(rng, 6, 5)
    task = make_subspace_task(mem, [1, 3], 4, rng)
    diff = task.queries - mem.patterns[task.targets]
    np.testing.assert_array_equal(diff[:, [0, 2, 4]], 0.0)
    assert np.all(diff[:, [1, 3]] != 0.0)
    assert masked_nearest_neighbor_rate(task, [0, 2, 4]) == 100.0


def test_training_lowers_corrupted_precision_and_helps_retrieval():
    d, N, J = 16, 50, list(range(6))
    mem = make_synthetic_memory(N, d, make_rng(0, "precision-memory"))
    kw = dict(noise_std=2.0, clean_noise_std=0.3)
    train = make_subspace_task(mem, J, 4, make_rng(0, "precision-train"), **kw)
    test = make_subspace_task(mem, J, 4, make_rng(0, "precision-test"), **kw)
    params, trace = train_precision(train, 300, 0.05, sigma=1.0)
    assert trace[-1] < trace[0]
    P = params.precision
    assert P[J].mean() < P[6:].mean()
    tau = default_tau(mem)
    before = retrieval_success_rate(test, PrecisionParams.uniform(d, 1.0).prior(), tau)
    after = retrieval_success_rate(test, params.prior(), tau)
    assert after > before
