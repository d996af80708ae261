"""Synthetic retrieval experiments: data, corruption, scoring, benchmark grids,
capacity sweeps, 2-D energy landscapes and one-shot generation."""
import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import ConfigError, EmptyMemoryError, MemviError, ShapeError
from .memory import (
    MCHN,
    BalancedGMM,
    MemoryMatrix,
    PrecisionGMM,
    sample_prior,
    write_pattern,
)
from .model import VaeModel, decode, dumps_model, encode, random_stack
from .numerics import make_rng
from .retrieval import ENGINES, RetrievalConfig, retrieve

# Two patterns on the positive x-axis: (0.4, 0) is aligned with and shorter
# than (1, 0), so the norm-biased prior gives it no basin of its own.
LANDSCAPE_PATTERNS = np.array([[1.0, 0.0], [0.4, 0.0], [-0.6, 0.8], [-0.5, -0.85]])
LANDSCAPE_DOMINATED = 1
LANDSCAPE_BETA = 100.0
LANDSCAPE_SIGMA = 0.2

DEFAULT_SIGMA = 0.5
DEFAULT_BETA = 1.0 / DEFAULT_SIGMA**2


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def make_synthetic_memory(N, d, rng, min_separation=1.0):
    """``N`` i.i.d. standard-normal patterns, resampled until pairwise distances reach ``min_separation``."""
    if N < 1 or d < 1:
        raise MemviError("need N >= 1 and d >= 1")
    rows = np.empty((N, d))
    placed = 0
    attempts = 0
    sep2 = min_separation * min_separation
    while placed < N:
        attempts += 1
        if attempts > 10 * N:
            raise MemviError(
                f"could not place {N} patterns in d={d} with min separation {min_separation} "
                f"within {10 * N} draws; use a smaller N or min_separation"
            )
        cand = rng.standard_normal(d)
        if placed and kernels.sq_dists(cand, rows[:placed]).min() < sep2:
            continue
        rows[placed] = cand
        placed += 1
    return MemoryMatrix(rows, d=d)


@dataclass
class SyntheticWorld:
    """Fixed random generator ``x = g(z) + noise`` standing in for an image distribution."""

    latent_dim: int = 8
    obs_dim: int = 16
    hidden: int = 32
    noise: float = 0.05
    scale: float = 4.0
    seed: int = 20220

    def __post_init__(self):
        rng = make_rng(self.seed, "world")
        g = random_stack([self.obs_dim, self.hidden, self.latent_dim], ["identity", "tanh"], rng, scale=1.5)
        # unit-variance decoder noise is assumed by the VAE; keep the signal well above it
        g[0].weight *= self.scale / 1.5
        self.generator = g

    def sample(self, n, rng):
        """Return ``(X, Z)`` with ``n`` observations and their generating latents."""
        Z = rng.standard_normal((n, self.latent_dim))
        X = np.array([decode(self.generator, z)[1] for z in Z]).reshape(n, self.obs_dim)
        X += self.noise * rng.standard_normal(X.shape)
        return X, Z


def store_observations(vae, observations, memory=None):
    """One-shot writing of ``encode(x).mu`` for each observation."""
    if memory is None:
        memory = MemoryMatrix.empty(vae.latent_dim)
    for x in observations:
        memory = write_pattern(memory, encode(vae, x)[0])
    return memory


# --------------------------------------------------------------------------
# corruption and scoring
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """Query corruption. ``level`` is the noise std (noise kinds) or mask width fraction (mask)."""

    kind: str = "clean"
    level: float = 0.0
    dims: tuple = ()
    space: str = "latent"

    KINDS = ("clean", "gaussian_noise", "mask", "subspace_noise")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.space not in ("latent", "observation"):
            raise ConfigError(f"unknown scenario space {self.space!r}")
        if self.kind == "mask" and not 0.0 < self.level < 1.0:
            raise ConfigError("mask width fraction must lie in (0, 1)")
        if self.kind in ("gaussian_noise", "subspace_noise") and self.level < 0:
            raise ConfigError("noise std must be non-negative")

    @property
    def label(self):
        prefix = "obs:" if self.space == "observation" else ""
        if self.kind == "clean":
            return prefix + "clean"
        if self.kind == "gaussian_noise":
            return f"{prefix}noise:{self.level:g}"
        if self.kind == "mask":
            return f"{prefix}mask:{self.level:g}"
        return f"{prefix}subspace:{self.level:g}:" + ",".join(str(j) for j in self.dims)

    @classmethod
    def parse(cls, text):
        """Inverse of :attr:`label`, e.g. ``noise:0.2``, ``mask:0.25``, ``obs:clean``, ``subspace:2:0,1``."""
        space = "latent"
        if text.startswith("obs:"):
            space, text = "observation", text[4:]
        parts = text.split(":")
        try:
            if parts[0] == "clean" and len(parts) == 1:
                return cls("clean", space=space)
            if parts[0] == "noise" and len(parts) == 2:
                return cls("gaussian_noise", float(parts[1]), space=space)
            if parts[0] == "mask" and len(parts) == 2:
                return cls("mask", float(parts[1]), space=space)
            if parts[0] == "subspace" and len(parts) == 3:
                dims = tuple(int(j) for j in parts[2].split(",") if j)
                return cls("subspace_noise", float(parts[1]), dims, space=space)
        except ValueError:
            pass
        raise ConfigError(f"cannot parse scenario {text!r}")


def corrupt(query, scenario, rng):
    q = np.array(query, dtype=np.float64)
    n = q.shape[0]
    if scenario.kind == "clean":
        return q
    if scenario.kind == "gaussian_noise":
        return q + scenario.level * rng.standard_normal(n)
    if scenario.kind == "mask":
        width = min(n, math.ceil(scenario.level * n))
        start = int(rng.integers(0, n - width + 1))
        q[start:start + width] = 0.0
        return q
    dims = np.asarray(scenario.dims, dtype=np.int64)
    if dims.size and (dims.min() < 0 or dims.max() >= n):
        raise ShapeError(f"subspace dims {scenario.dims} out of range for dim {n}")
    q[dims] += scenario.level * rng.standard_normal(dims.size)
    return q


def default_tau(memory):
    """Half the minimum pairwise pattern distance, so success implies the right match."""
    dmin = memory.min_pairwise_distance()
    return 1.0 if math.isinf(dmin) else 0.5 * dmin


def judge_success(result, k_star, memory, tau):
    if not tau > 0:
        raise MemviError("tau must be positive")
    if not 0 <= k_star < memory.N:
        raise MemviError(f"target index {k_star} out of range for N={memory.N}")
    z = result.z_final if hasattr(result, "z_final") else np.asarray(result)
    return bool(np.linalg.norm(z - memory.patterns[k_star]) < tau)


# --------------------------------------------------------------------------
# benchmark grid
# --------------------------------------------------------------------------

DEFAULT_SCENARIOS = (
    Scenario("clean"),
    Scenario("gaussian_noise", 0.2),
    Scenario("gaussian_noise", 0.6),
    Scenario("mask", 0.25),
    Scenario("mask", 0.56),
)


@dataclass
class BenchmarkSpec:
    N: int = 100
    d: int = 16
    engines: tuple = ("gmm", "mchn")
    scenarios: tuple = DEFAULT_SCENARIOS
    seeds: tuple = tuple(range(10))
    sigma: float = DEFAULT_SIGMA
    beta: float = DEFAULT_BETA
    precision: object = None
    min_separation: float = 1.0
    tau: float | None = None
    max_queries: int = 100
    retrieval: RetrievalConfig = field(default_factory=lambda: RetrievalConfig(log_energy=False))
    model: VaeModel | None = None
    world_seed: int = 20220
    base_seed: int = 0

    def __post_init__(self):
        self.engines = tuple(self.engines)
        self.scenarios = tuple(self.scenarios)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.engines or not self.scenarios or not self.seeds:
            raise ConfigError("a benchmark needs at least one engine, one scenario and one seed")
        for e in self.engines:
            if e not in ENGINES:
                raise ConfigError(f"unknown engine {e!r}")
        needs_model = any(e in ("bp_gmm", "pc_gmm") for e in self.engines) or any(
            s.space == "observation" for s in self.scenarios
        )
        if needs_model and self.model is None:
            missing = [e for e in self.engines if e in ("bp_gmm", "pc_gmm")]
            what = f"engine(s) {', '.join(missing)}" if missing else "observation-space scenarios"
            raise ConfigError(f"{what} require a trained VAE model file (train one with `train-vae`)")
        if "precision" in self.engines and self.precision is None:
            raise ConfigError("engine 'precision' requires a trained precision file (train one with `train-precision`)")
        if self.N < 1 or self.d < 1 or self.max_queries < 1:
            raise ConfigError("N, d and max_queries must be positive")
        if self.model is not None and self.model.latent_dim != self.d:
            raise ConfigError(f"model latent dim {self.model.latent_dim} != benchmark d={self.d}")


@dataclass
class CellResult:
    engine: str
    scenario: str
    seed: int
    success: float
    iters_mean: float
    queries: int
    inconsistent: int
    wall_ms: float


@lru_cache(maxsize=8)
def _latent_memory(N, d, seed, base_seed, min_separation):
    return make_synthetic_memory(N, d, make_rng(base_seed, "memory", seed), min_separation)


_OBS_CACHE = {}


def _observation_memory(spec, seed):
    """Observations from the synthetic world and the memory of their encodings."""
    fingerprint = hashlib.sha1(dumps_model(spec.model).encode()).hexdigest()
    key = (spec.N, seed, spec.base_seed, spec.world_seed, fingerprint)
    if key not in _OBS_CACHE:
        vae = spec.model
        world = SyntheticWorld(latent_dim=vae.latent_dim, obs_dim=vae.obs_dim, seed=spec.world_seed)
        X, _ = world.sample(spec.N, make_rng(spec.base_seed, "observations", seed))
        if len(_OBS_CACHE) > 8:
            _OBS_CACHE.clear()
        _OBS_CACHE[key] = (X, store_observations(vae, X))
    return _OBS_CACHE[key]


def _instance(spec, seed, space):
    """Memory, the clean query source per pattern, and target indices for one seed."""
    if space == "observation":
        sources, memory = _observation_memory(spec, seed)
    else:
        memory = _latent_memory(spec.N, spec.d, seed, spec.base_seed, spec.min_separation)
        sources = memory.patterns
    if memory.N <= spec.max_queries:
        targets = np.arange(memory.N)
    else:
        targets = np.sort(make_rng(spec.base_seed, "targets", seed).choice(memory.N, spec.max_queries, replace=False))
    return memory, sources, targets


def _prior_for(spec, engine):
    if engine == "mchn":
        return MCHN(spec.beta)
    if engine == "precision":
        return PrecisionGMM(spec.precision)
    return BalancedGMM(spec.sigma)


def run_cell(spec, engine, scenario, seed):
    t0 = time.perf_counter()
    memory, sources, targets = _instance(spec, seed, scenario.space)
    tau = spec.tau if spec.tau is not None else default_tau(memory)
    prior = _prior_for(spec, engine)
    config = spec.retrieval
    if scenario.space == "observation" and isinstance(config.init_mode, str) and config.init_mode in ("auto", "query"):
        config = replace(config, init_mode="encoder")
    # corruption noise is keyed by scenario and seed only, so engines see identical queries
    rng = make_rng(spec.base_seed, "corrupt", scenario.label, seed)
    hits = 0
    iters = 0
    inconsistent = 0
    for k in targets:
        q = corrupt(sources[k], scenario, rng)
        res = retrieve(q, memory, prior, engine, config, model=spec.model)
        ok = judge_success(res, int(k), memory, tau)
        hits += ok
        iters += res.iterations_used
        inconsistent += ok and res.matched_index != k
    n = len(targets)
    return CellResult(
        engine, scenario.label, seed, 100.0 * hits / n, iters / n, n, int(inconsistent),
        1000.0 * (time.perf_counter() - t0),
    )


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class BenchmarkRow:
    engine: str
    scenario: str
    seed_count: int
    success_mean: float
    success_std: float
    iters_mean: float
    wall_ms: float
    inconsistent: int = 0


@dataclass
class BenchmarkReport:
    rows: list
    cells: list

    CSV_HEADER = ("engine", "scenario", "seed_count", "success_mean", "success_std", "iters_mean", "wall_ms")

    def row(self, engine, scenario):
        label = scenario if isinstance(scenario, str) else scenario.label
        for r in self.rows:
            if r.engine == engine and r.scenario == label:
                return r
        raise KeyError((engine, label))

    def to_csv(self, include_timing=False):
        """CSV report. ``wall_ms`` is left empty unless ``include_timing``, keeping output reproducible."""
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for r in self.rows:
            w.writerow([
                r.engine, r.scenario, r.seed_count, f"{r.success_mean:.6f}", f"{r.success_std:.6f}",
                f"{r.iters_mean:.6f}", f"{r.wall_ms:.3f}" if include_timing else "",
            ])
        return out.getvalue()

    def to_json(self):
        return json.dumps({"rows": [asdict(r) for r in self.rows], "cells": [asdict(c) for c in self.cells]}, indent=2)


def _cells(spec):
    return [(e, s, seed) for e in spec.engines for s in spec.scenarios for seed in spec.seeds]


def run_benchmark(spec, workers=1):
    """Run the full (engine, scenario, seed) grid and aggregate across seeds.

    Cells are independent; with ``workers > 1`` they fan out to a process
    pool. Results are reduced in grid order, so the report does not depend on
    the worker count.
    """
    cells = _cells(spec)
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_args, [(spec, e, s, seed) for e, s, seed in cells], chunksize=1))
    else:
        results = [run_cell(spec, e, s, seed) for e, s, seed in cells]
    rows = []
    for e in spec.engines:
        for s in spec.scenarios:
            group = [c for c in results if c.engine == e and c.scenario == s.label]
            succ = np.array([c.success for c in group])
            rows.append(BenchmarkRow(
                e, s.label, len(group), float(succ.mean()), float(succ.std()),
                float(np.mean([c.iters_mean for c in group])), float(sum(c.wall_ms for c in group)),
                int(sum(c.inconsistent for c in group)),
            ))
    return BenchmarkReport(rows, results)


DEFAULT_CAPACITY_NS = (5, 20, 100, 500, 2000)


CAPACITY_SCENARIO = Scenario("gaussian_noise", 0.6)


def capacity_sweep(spec, Ns=DEFAULT_CAPACITY_NS, scenario=CAPACITY_SCENARIO, workers=1):
    """Success rate against memory size. Returns rows ``(N, engine, success_mean, success_std)``."""
    Ns = [int(n) for n in Ns]
    if Ns != sorted(Ns):
        raise ConfigError("Ns must be ascending")
    table = []
    for n in Ns:
        rep = run_benchmark(replace(spec, N=n, scenarios=(scenario,)), workers=workers)
        for r in rep.rows:
            table.append((n, r.engine, r.success_mean, r.success_std))
    return table


def capacity_csv(table):
    """One row per ``N`` with a mean and std column pair per engine."""
    engines = list(dict.fromkeys(e for _, e, _, _ in table))
    Ns = list(dict.fromkeys(n for n, _, _, _ in table))
    cells = {(n, e): (m, s) for n, e, m, s in table}
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["N"] + [f"{e}_{c}" for e in engines for c in ("success_mean", "success_std")])
    for n in Ns:
        row = [n]
        for e in engines:
            m, s = cells[(n, e)]
            row += [f"{m:.6f}", f"{s:.6f}"]
        w.writerow(row)
    return out.getvalue()


# --------------------------------------------------------------------------
# 2-D landscapes
# --------------------------------------------------------------------------

@dataclass
class Landscape:
    xs: np.ndarray
    ys: np.ndarray
    energy: np.ndarray  # energy[i, j] at (xs[j], ys[i])
    minima: list

    def to_csv(self):
        out = io.StringIO()
        out.write("x,y,energy\n")
        X, Y = np.meshgrid(self.xs, self.ys)
        for x, y, e in zip(X.ravel(), Y.ravel(), self.energy.ravel()):
            out.write(f"{x:.17g},{y:.17g},{e:.17g}\n")
        return out.getvalue()

    def minima_csv(self):
        out = io.StringIO()
        out.write("x,y,energy\n")
        for x, y, e in self.minima:
            out.write(f"{x:.17g},{y:.17g},{e:.17g}\n")
        return out.getvalue()


def grid_local_minima(E):
    """Grid-local minima of ``E`` as ``(row, col)`` pairs.

    An interior cell qualifies when no 8-neighbour is lower. Qualifying cells
    that touch each other (ties on symmetric landscapes) count as one minimum,
    reported at the lowest cell of the group.
    """
    c = E[1:-1, 1:-1]
    mask = np.ones_like(c, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                mask &= c <= E[1 + di:E.shape[0] - 1 + di, 1 + dj:E.shape[1] - 1 + dj]
    cand = {(int(r) + 1, int(q) + 1) for r, q in zip(*np.nonzero(mask))}
    minima = []
    while cand:
        seed = min(cand)
        group, stack = [], [seed]
        cand.discard(seed)
        while stack:
            r, q = stack.pop()
            group.append((r, q))
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    nb = (r + di, q + dj)
                    if nb in cand:
                        cand.discard(nb)
                        stack.append(nb)
        minima.append(min(group, key=lambda rc: (E[rc], rc)))
    return sorted(minima)


def energy_landscape(memory, prior, bounds=(-1.5, 1.5, -1.5, 1.5), resolution=400):
    """Energy of ``prior`` on a regular 2-D grid, plus its grid-local minima.

    The energy is ``-log p`` for a :class:`BalancedGMM` and the Hopfield energy
    for :class:`MCHN`.
    """
    if memory.d != 2:
        raise ShapeError("landscape requires d=2")
    if memory.N == 0:
        raise EmptyMemoryError()
    x0, x1, y0, y1 = bounds
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    M = memory.patterns
    if isinstance(prior, BalancedGMM):
        s2 = prior.sigma**2
        d2 = ((pts[:, None, :] - M[None, :, :]) ** 2).sum(-1)
        logits = -d2 / (2.0 * s2)
        m = logits.max(axis=1)
        lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
        E = -(lse - math.log(memory.N) - math.log(2.0 * math.pi * s2))
    elif isinstance(prior, MCHN):
        b = prior.beta
        logits = b * pts @ M.T
        m = logits.max(axis=1)
        lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
        E = 0.5 * b * (pts**2).sum(1) - lse
    else:
        raise ConfigError("landscape supports balanced and mchn priors")
    E = E.reshape(resolution, resolution)
    minima = [(float(xs[j]), float(ys[i]), float(E[i, j])) for i, j in grid_local_minima(E)]
    return Landscape(xs, ys, E, minima)


def landscape_memory():
    return MemoryMatrix(LANDSCAPE_PATTERNS, d=2)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def one_shot_generate(vae, memory, sigma, count, rng):
    """Decode ``count`` latents drawn from the memory-dependent prior."""
    if memory.N == 0:
        raise EmptyMemoryError()
    decoder = vae.decoder if isinstance(vae, VaeModel) else vae
    return [decode(decoder, sample_prior(memory, sigma, rng))[1] for _ in range(count)]


def available_workers():
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)
