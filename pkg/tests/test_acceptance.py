"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` (lines are printed even without ``-s``)
or ``python tests/test_acceptance.py`` for the summary alone.
"""
import json
import math
import time

import numpy as np
import pytest
from conftest import central_diff, random_memory, rel_err

from memvi.cli import run as cli_run
from memvi.config import PrecisionSection
from memvi.harness import (
    LANDSCAPE_BETA,
    LANDSCAPE_DOMINATED,
    LANDSCAPE_SIGMA,
    BenchmarkSpec,
    Scenario,
    capacity_sweep,
    energy_landscape,
    landscape_memory,
    run_benchmark,
)
from memvi.memory import (
    MCHN,
    BalancedGMM,
    grad_log_prior_balanced,
    grad_log_prior_precision,
    log_prior_balanced,
    log_prior_precision,
)
from memvi.model import Layer, LayerStack, decode, layer_vjp, random_stack, stack_vjp
from memvi.numerics import make_rng
from memvi.precision import (
    PrecisionParams,
    PrecisionTask,
    precision_loss,
    precision_loss_and_grad,
)
from memvi.retrieval import (
    RetrievalConfig,
    bp_gmm_loss_and_grad,
    gmm_smooth_step,
    gmm_step,
    mchn_gradient_step,
    mchn_step,
    pc_errors,
    pc_fixed_prediction_step,
    pc_gmm_retrieve,
    pc_init_state,
    precision_step,
)


def report(name, ok, detail, elapsed=None, limit=None, capsys=None):
    timing = ""
    if elapsed is not None:
        timing = f" [{elapsed:.1f}s"
        if limit is not None:
            timing += f" / limit {limit:.0f}s"
            ok = ok and elapsed < limit
        timing += "]"
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}{timing}"
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line


# --------------------------------------------------------------------------
# 1. gradient oracles
# --------------------------------------------------------------------------

def test_gradient_oracles(capsys):
    rng = make_rng(2024, "acceptance", "gradients")
    t0 = time.perf_counter()
    combos = [(d, N) for d in (2, 8, 16) for N in (1, 4, 100)]
    worst = {"balanced": 0.0, "precision": 0.0, "stack_vjp": 0.0, "precision_loss": 0.0}
    for i in range(108):
        d, N = combos[i % len(combos)]
        mem = random_memory(rng, N, d)
        z = mem.patterns[int(rng.integers(N))] + 0.5 * rng.standard_normal(d)
        sigma = float(rng.uniform(0.5, 2.0))
        fd = central_diff(lambda v: log_prior_balanced(v, mem, sigma), z)
        worst["balanced"] = max(worst["balanced"], rel_err(grad_log_prior_balanced(z, mem, sigma), fd))
        if i % 2:
            P = rng.uniform(0.3, 3.0, d)
        else:
            A = rng.standard_normal((d, d))
            P = A @ A.T / d + 0.5 * np.eye(d)
        fd = central_diff(lambda v: log_prior_precision(v, mem, P), z)
        worst["precision"] = max(worst["precision"], rel_err(grad_log_prior_precision(z, mem, P), fd))

    for i in range(100):
        depth = 1 + i % 3
        dims = [int(v) for v in rng.integers(2, 9, depth + 1)]
        stack = random_stack(dims, [("identity", "tanh")[int(b)] for b in rng.integers(0, 2, depth)], rng)
        z = rng.standard_normal(dims[-1])
        x = rng.standard_normal(dims[0])

        def loss(v):
            r = decode(stack, v)[1] - x
            return 0.5 * float(r @ r)

        g = stack_vjp(stack, z, decode(stack, z)[1] - x)
        worst["stack_vjp"] = max(worst["stack_vjp"], rel_err(g, central_diff(loss, z)))

    for i in range(100):
        mem = random_memory(rng, 10, 8)
        targets = np.repeat(np.arange(10), 2)
        task = PrecisionTask(mem, mem.patterns[targets] + 0.7 * rng.standard_normal((20, 8)), targets)
        params = PrecisionParams(rng.uniform(-0.5, 1.0, 8))
        _, g = precision_loss_and_grad(params, task)
        fd = central_diff(lambda r: precision_loss(PrecisionParams(r), task), params.raw)
        worst["precision_loss"] = max(worst["precision_loss"], rel_err(g, fd))
    elapsed = time.perf_counter() - t0
    ok = (worst["balanced"] < 1e-6 and worst["precision"] < 1e-6 and worst["stack_vjp"] < 1e-6
          and worst["precision_loss"] < 1e-5)
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    report("gradient oracles", ok, detail, elapsed, 30, capsys)


# --------------------------------------------------------------------------
# 2. MCHN identity
# --------------------------------------------------------------------------

def test_mchn_identity(capsys):
    rng = make_rng(2024, "acceptance", "mchn")
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        d, N = int(rng.integers(1, 17)), int(rng.integers(1, 101))
        mem = random_memory(rng, N, d)
        beta = float(rng.uniform(0.1, 10.0))
        z = rng.standard_normal(d)
        diff = mchn_gradient_step(z, mem, beta, 1.0 / beta) - mchn_step(z, mem, beta)
        worst = max(worst, float(np.max(np.abs(diff))))
    report("MCHN identity", worst <= 1e-12, f"max |gradient step - mchn_step| = {worst:.1e} over 100 instances",
           time.perf_counter() - t0, 5, capsys)


# --------------------------------------------------------------------------
# 3. PC == BP
# --------------------------------------------------------------------------

def test_pc_bp_equivalence(capsys):
    rng = make_rng(2024, "acceptance", "pcbp")
    t0 = time.perf_counter()
    worst = 0.0
    for depth in (2, 3):
        for _ in range(20):
            dims = [int(v) for v in rng.integers(2, 9, depth + 1)]
            stack = random_stack(dims, ["identity"] + ["tanh"] * (depth - 1), rng)
            mem = random_memory(rng, int(rng.integers(1, 20)), dims[-1])
            sigma = float(rng.uniform(0.5, 2.0))
            x = rng.standard_normal(dims[0])
            z = rng.standard_normal(dims[-1])
            pc = pc_fixed_prediction_step(pc_init_state(x, stack, z), stack, mem, sigma, 2.0)
            _, grad = bp_gmm_loss_and_grad(x, stack, mem, BalancedGMM(sigma), 2.0, z)
            worst = max(worst, float(np.max(np.abs(pc.z - (z - grad)))))
    report("PC==BP equivalence", worst <= 1e-10,
           f"max |PC z-update - BP step| = {worst:.1e} over 20 two-layer and 20 three-layer stacks",
           time.perf_counter() - t0, 10, capsys)


# --------------------------------------------------------------------------
# 4. reduction identities
# --------------------------------------------------------------------------

def test_reduction_identities(capsys):
    rng = make_rng(2024, "acceptance", "reductions")
    worst = [0.0, 0.0, 0.0]
    for _ in range(100):
        d, N = int(rng.integers(1, 17)), int(rng.integers(1, 50))
        mem = random_memory(rng, N, d)
        sigma = float(rng.uniform(0.2, 2.0))
        z = mem.patterns[0] + rng.standard_normal(d)
        P = np.full(d, 1.0 / sigma**2)
        g = gmm_step(z, mem, sigma)
        worst[0] = max(worst[0], float(np.max(np.abs(gmm_smooth_step(z, mem, sigma, sigma**2) - g))))
        worst[1] = max(worst[1], float(np.max(np.abs(precision_step(z, mem, P) - g))))
        worst[2] = max(worst[2], abs(log_prior_precision(z, mem, P) - log_prior_balanced(z, mem, sigma)))
    ok = max(worst) <= 1e-12
    report("reduction identities", ok,
           f"smooth(alpha=sigma^2) {worst[0]:.1e}, precision step {worst[1]:.1e}, precision log-prior {worst[2]:.1e}",
           capsys=capsys)


# --------------------------------------------------------------------------
# 5. energy descent
# --------------------------------------------------------------------------

def test_energy_descent(capsys):
    rng = make_rng(2024, "acceptance", "descent")
    worst = -math.inf
    for _ in range(50):
        d, N = int(rng.integers(2, 17)), int(rng.integers(2, 50))
        mem = random_memory(rng, N, d)
        sigma = float(rng.uniform(0.3, 1.5))
        z = 2 * rng.standard_normal(d)
        e = -log_prior_balanced(z, mem, sigma)
        for _ in range(100):
            z = gmm_smooth_step(z, mem, sigma, sigma**2 / 10)
            e_new = -log_prior_balanced(z, mem, sigma)
            worst = max(worst, e_new - e)
            e = e_new
    report("energy descent", worst <= 1e-9, f"largest per-step energy increase {worst:.1e} (50 x 100 steps)",
           capsys=capsys)


# --------------------------------------------------------------------------
# 6. 2-D landscape
# --------------------------------------------------------------------------

def test_landscape_minima(capsys):
    t0 = time.perf_counter()
    mem = landscape_memory()
    bal = energy_landscape(mem, BalancedGMM(LANDSCAPE_SIGMA), resolution=400)
    hop = energy_landscape(mem, MCHN(LANDSCAPE_BETA), resolution=400)
    near = [min(math.hypot(x - p[0], y - p[1]) for x, y, _ in bal.minima) for p in mem.patterns]
    dom = mem.column(LANDSCAPE_DOMINATED)
    dom_dist = min(math.hypot(x - dom[0], y - dom[1]) for x, y, _ in hop.minima)
    ok = len(bal.minima) == 4 and max(near) < 0.05 and len(hop.minima) < 4 and dom_dist >= 0.05
    detail = (f"balanced {len(bal.minima)} minima (max distance to pattern {max(near):.3f}), "
              f"mchn {len(hop.minima)} minima (nearest to dominated pattern {dom_dist:.3f})")
    report("2-D landscape", ok, detail, time.perf_counter() - t0, 20, capsys)


# --------------------------------------------------------------------------
# 7. retrieval table
# --------------------------------------------------------------------------

def test_retrieval_table(capsys):
    t0 = time.perf_counter()
    scen = (Scenario(), Scenario("gaussian_noise", 0.2), Scenario("gaussian_noise", 0.6))
    rep = run_benchmark(BenchmarkSpec(N=100, d=16, min_separation=1.0, seeds=tuple(range(10)), scenarios=scen))
    g = {s.label: rep.row("gmm", s.label).success_mean for s in scen}
    h = rep.row("mchn", "noise:0.6").success_mean
    ok = g["clean"] == 100.0 and g["noise:0.2"] >= 99.0 and g["noise:0.6"] > h
    detail = (f"gmm clean {g['clean']:.1f}%, noise 0.2 {g['noise:0.2']:.1f}%, noise 0.6 {g['noise:0.6']:.1f}% "
              f"vs mchn noise 0.6 {h:.1f}%")
    report("retrieval table", ok, detail, time.perf_counter() - t0, 60, capsys)


# --------------------------------------------------------------------------
# 8. capacity sweep
# --------------------------------------------------------------------------

def test_capacity_sweep(capsys):
    t0 = time.perf_counter()
    table = capacity_sweep(BenchmarkSpec(d=16), Ns=(5, 20, 100, 500, 2000), scenario=Scenario("gaussian_noise", 0.6))
    gmm = [m for _, e, m, _ in table if e == "gmm"]
    hop = [m for _, e, m, _ in table if e == "mchn"]
    rises = [b - a for a, b in zip(gmm, gmm[1:]) if b > a]
    ok = all(r <= 5.0 for r in rises) and all(a >= b for a, b in zip(gmm, hop))
    detail = "gmm " + "/".join(f"{v:.1f}" for v in gmm) + ", mchn " + "/".join(f"{v:.1f}" for v in hop)
    report("capacity sweep", ok, detail + " (N = 5/20/100/500/2000)", time.perf_counter() - t0, 300, capsys)


# --------------------------------------------------------------------------
# 9. precision learning
# --------------------------------------------------------------------------

def test_precision_learning(tmp_path, capsys):
    t0 = time.perf_counter()
    code, s = cli_run(["train-precision", "--out", str(tmp_path / "out"), "--seed", "0"])
    assert code == 0, s
    defaults = PrecisionSection()
    ok = (s["mean_precision_corrupted"] < s["mean_precision_clean"]
          and s["success_trained"] > s["success_uniform"]
          and s["success_trained"] >= s["success_oracle"] - 2.0)
    detail = (f"mean P corrupted {s['mean_precision_corrupted']:.3f} vs clean {s['mean_precision_clean']:.3f}; "
              f"success uniform {s['success_uniform']:.1f}%, trained {s['success_trained']:.1f}%, "
              f"masked-NN oracle {s['success_oracle']:.1f}% (d={defaults.d}, N={defaults.N})")
    report("precision learning", ok, detail, time.perf_counter() - t0, 120, capsys)


# --------------------------------------------------------------------------
# 10. PC equilibrium
# --------------------------------------------------------------------------

def test_pc_equilibrium(capsys):
    rng = make_rng(2024, "acceptance", "pc-eq")
    worst_res = 0.0
    all_converged = True
    for _ in range(10):
        stack = random_stack([int(v) for v in rng.integers(2, 7, 3)], ["identity", "identity"], rng)
        d = stack.input_dim
        mem = random_memory(rng, 3, d)
        x = rng.standard_normal(stack.output_dim)
        cfg = RetrievalConfig(max_iters=200000, step=0.1, tol=1e-8, log_energy=False, init_mode=np.zeros(d))
        res = pc_gmm_retrieve(x, stack, mem, 1.0, cfg)
        all_converged &= res.converged
        h = res.state.h
        eps = pc_errors(h, stack)
        worst_res = max(worst_res, float(np.linalg.norm(eps[1] - layer_vjp(stack[0], h[1], eps[0]))))
    worst_cf = 0.0
    for _ in range(10):
        d = int(rng.integers(1, 8))
        stack = LayerStack([Layer(np.eye(d), np.zeros(d))])
        mem = random_memory(rng, 1, d)
        sigma = float(rng.uniform(0.5, 1.5))
        x = rng.standard_normal(d)
        res = pc_gmm_retrieve(x, stack, mem, sigma, RetrievalConfig(max_iters=50000, tol=1e-13, log_energy=False))
        all_converged &= res.converged
        expected = (sigma**2 * x + mem.column(0)) / (sigma**2 + 1)
        worst_cf = max(worst_cf, float(np.max(np.abs(res.z_final - expected))))
    ok = all_converged and worst_res < 1e-6 and worst_cf <= 1e-8
    report("PC equilibrium", ok,
           f"max equilibrium residual {worst_res:.1e} on 2-layer linear stacks, "
           f"max closed-form error {worst_cf:.1e} for L=1", capsys=capsys)


# --------------------------------------------------------------------------
# 11. end-to-end determinism
# --------------------------------------------------------------------------

def test_benchmark_determinism(tmp_path, capsys):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"seed": 11}))
    outputs = []
    for name, workers in (("a", 1), ("b", 1), ("c", 2), ("d", 4)):
        code, msg = cli_run(["benchmark", "--config", str(cfg), "--out", str(tmp_path / name), "--workers", str(workers)])
        assert code == 0, msg
        outputs.append((tmp_path / name / "reports" / "benchmark.csv").read_bytes())
    ok = all(o == outputs[0] for o in outputs)
    report("benchmark determinism", ok,
           f"{len(outputs)} runs (workers 1, 1, 2, 4) produced {len(set(outputs))} distinct CSV report(s)",
           capsys=capsys)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
