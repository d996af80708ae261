"""``memvi`` command-line entry point.

Every command reads one JSON config (all keys optional), applies flag
overrides, computes its artifacts in memory and only then writes them under
the output directory together with the resolved config. Layout::

    <out>/model/      trained VAE and precision files
    <out>/memory/     memory matrices
    <out>/reports/    CSV/JSON reports
    <out>/landscapes/ 2-D energy grids and their minima

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.
"""
import argparse
import csv
import io
import json
import os
import sys
import tempfile

import numpy as np

from .config import load_config
from .errors import ConfigError, MemviError, NumericError
from .harness import (
    BenchmarkSpec,
    Scenario,
    SyntheticWorld,
    available_workers,
    capacity_csv,
    capacity_sweep,
    default_tau,
    energy_landscape,
    make_synthetic_memory,
    one_shot_generate,
    run_benchmark,
    store_observations,
)
from .memory import (
    MCHN,
    BalancedGMM,
    MemoryMatrix,
    PrecisionGMM,
    dumps_memory,
    load_memory,
    write_pattern,
)
from .model import dumps_model, init_vae, load_model, train_vae
from .numerics import make_rng
from .precision import (
    PrecisionParams,
    make_subspace_task,
    masked_nearest_neighbor_rate,
    retrieval_success_rate,
    train_precision,
)
from .retrieval import ENGINES, RetrievalConfig, retrieve

MODEL_FILE = "model/vae.txt"
PRECISION_FILE = "model/precision.txt"
MEMORY_FILE = "memory/memory.txt"
MODEL_ENGINES = ("bp_gmm", "pc_gmm")


class Outputs:
    """Artifacts staged in memory and written together at the end of a command."""

    def __init__(self, root):
        self.root = root
        self.files = {}

    def add(self, rel, text):
        self.files[rel] = text
        return os.path.join(self.root, rel)

    def commit(self):
        for rel, text in self.files.items():
            path = os.path.join(self.root, rel)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), prefix=".tmp-")
            try:
                with os.fdopen(fd, "w", newline="") as fh:
                    fh.write(text)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise


def _read_vectors(path, dim=None, what="input"):
    """Whitespace- or comma-separated floats, one vector per line; ``#`` starts a comment."""
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read {what} file {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].replace(",", " ").strip()
        if not line:
            continue
        try:
            v = np.array([float(t) for t in line.split()])
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: cannot parse {what} vector: {exc}") from exc
        if dim is not None and v.size != dim:
            raise ConfigError(f"{path}:{lineno}: {what} has dim {v.size}, expected {dim}")
        if not np.all(np.isfinite(v)):
            raise ConfigError(f"{path}:{lineno}: non-finite value in {what}")
        rows.append(v)
    if not rows:
        raise ConfigError(f"{what} file {path} holds no vectors")
    return rows


def _fmt_row(values):
    return ",".join(f"{float(v):.17g}" for v in values)


def _resolve(path, out, default_rel):
    if path is not None:
        return path
    candidate = os.path.join(out, default_rel)
    return candidate if os.path.exists(candidate) else None


def _load_vae(cfg, required_for):
    path = _resolve(cfg.model.path, cfg.output.directory, MODEL_FILE)
    if path is None:
        raise ConfigError(f"{required_for} requires a model file (set model.path or run `train-vae` first)")
    try:
        vae, _ = load_model(path)
    except OSError as exc:
        raise ConfigError(f"cannot read model file {path}: {exc}") from exc
    if vae is None:
        raise ConfigError(f"model file {path} holds no VAE")
    return vae


def _load_precision(cfg):
    path = _resolve(cfg.prior.precision_path, cfg.output.directory, PRECISION_FILE)
    if path is None:
        raise ConfigError("the precision prior requires a precision file (set prior.precision_path or run `train-precision`)")
    try:
        _, raw = load_model(path)
    except OSError as exc:
        raise ConfigError(f"cannot read precision file {path}: {exc}") from exc
    if raw is None:
        raise ConfigError(f"precision file {path} has no precision_raw line")
    return PrecisionParams(raw).precision


def _load_memory(cfg):
    path = _resolve(cfg.memory.path, cfg.output.directory, MEMORY_FILE)
    if path is None:
        raise ConfigError("no memory file (set memory.path or run `store` first)")
    try:
        return load_memory(path)
    except OSError as exc:
        raise ConfigError(f"cannot read memory file {path}: {exc}") from exc


def _beta(cfg):
    return cfg.prior.beta if cfg.prior.beta is not None else 1.0 / cfg.prior.sigma**2


def _prior(cfg, engine):
    kind = cfg.prior.kind
    if kind == "auto":
        kind = {"mchn": "mchn", "precision": "precision"}.get(engine, "balanced")
    if kind == "balanced":
        return BalancedGMM(cfg.prior.sigma)
    if kind == "mchn":
        return MCHN(_beta(cfg))
    if kind == "precision":
        return PrecisionGMM(_load_precision(cfg))
    raise ConfigError(f"unknown prior.kind {kind!r}; expected auto, balanced, mchn or precision")


def _retrieval(cfg, log_energy=True):
    r = cfg.retrieval
    return RetrievalConfig(
        max_iters=r.max_iters, step=r.step, prior_weight=r.prior_weight, tol=r.tol,
        init_mode=r.init_mode, log_energy=log_energy,
    )


def _scenarios(labels):
    if not isinstance(labels, (list, tuple)):
        raise ConfigError("scenarios must be a list of labels")
    return tuple(Scenario.parse(s) for s in labels)


def _seeds(seeds):
    if isinstance(seeds, bool):
        raise ConfigError("benchmark.seeds must be a count or a list of integers")
    if isinstance(seeds, int):
        if seeds < 1:
            raise ConfigError("benchmark.seeds must be >= 1")
        return tuple(range(seeds))
    if isinstance(seeds, list) and seeds and all(isinstance(s, int) for s in seeds):
        return tuple(seeds)
    raise ConfigError("benchmark.seeds must be a count or a list of integers")


def _benchmark_spec(cfg, engines, scenarios):
    engines = tuple(engines)
    model = None
    needs_model = any(e in MODEL_ENGINES for e in engines) or any(s.space == "observation" for s in scenarios)
    if needs_model:
        model = _load_vae(cfg, "model-based engines and observation scenarios")
    precision = _load_precision(cfg) if "precision" in engines else None
    d = model.latent_dim if model is not None else cfg.memory.d
    return BenchmarkSpec(
        N=cfg.memory.N, d=d, engines=engines, scenarios=scenarios,
        seeds=_seeds(cfg.benchmark.seeds), sigma=cfg.prior.sigma, beta=_beta(cfg),
        precision=precision, min_separation=cfg.memory.min_separation, tau=cfg.benchmark.tau,
        max_queries=cfg.benchmark.max_queries, retrieval=_retrieval(cfg, log_energy=False),
        model=model, base_seed=cfg.seed,
    )


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train_vae(cfg, args, out):
    m, t = cfg.model, cfg.train
    world = SyntheticWorld(latent_dim=m.latent_dim, obs_dim=m.obs_dim)
    X, _ = world.sample(t.n_samples, make_rng(cfg.seed, "vae-data"))
    vae = init_vae(make_rng(cfg.seed, "vae-init"), m.obs_dim, m.latent_dim, m.hidden, m.activation)
    vae, trace = train_vae(vae, X, t.epochs, t.learning_rate, make_rng(cfg.seed, "vae-train"))
    path = out.add(MODEL_FILE, dumps_model(vae))
    trace_path = out.add("reports/vae_loss.csv", "epoch,loss\n" + "".join(f"{i},{v:.17g}\n" for i, v in enumerate(trace)))
    return {"model": path, "loss_trace": trace_path, "final_loss": trace[-1] if trace else None}


def cmd_store(cfg, args, out):
    space = cfg.memory.input_space
    if space not in ("latent", "observation"):
        raise ConfigError("memory.input_space must be 'latent' or 'observation'")
    existing = _resolve(cfg.memory.path, cfg.output.directory, MEMORY_FILE) if args.append else cfg.memory.path
    memory = load_memory(existing) if existing else None
    if space == "observation":
        vae = _load_vae(cfg, "storing observations")
        if memory is None:
            memory = MemoryMatrix.empty(vae.latent_dim)
        rows = _read_vectors(args.inputs, vae.obs_dim, "observation")
        memory = store_observations(vae, rows, memory)
    else:
        d = memory.d if memory is not None else cfg.memory.d
        if memory is None:
            memory = MemoryMatrix.empty(d)
        for v in _read_vectors(args.inputs, d, "latent"):
            memory = write_pattern(memory, v)
    path = out.add(MEMORY_FILE, dumps_memory(memory))
    return {"memory": path, "N": memory.N, "d": memory.d}


def cmd_retrieve(cfg, args, out):
    engine = cfg.engine
    if engine not in ENGINES:
        raise ConfigError(f"unknown engine {engine!r}; expected one of {', '.join(ENGINES)}")
    memory = _load_memory(cfg)
    prior = _prior(cfg, engine)
    model = _load_vae(cfg, f"engine {engine}") if engine in MODEL_ENGINES else None
    dim = model.obs_dim if model is not None else memory.d
    queries = _read_vectors(args.queries, dim, "query")
    config = _retrieval(cfg)
    results = []
    for i, q in enumerate(queries, start=1):
        res = retrieve(q, memory, prior, engine, config, model=model)
        epath = out.add(f"reports/energies_{i}.csv", "iteration,energy\n" + "".join(
            f"{k},{e:.17g}\n" for k, e in enumerate(res.energies)))
        results.append({
            "query": i,
            "matched_index": res.matched_index + 1,
            "matched_distance": res.matched_distance,
            "iterations": res.iterations_used,
            "converged": res.converged,
            "z_final": [float(v) for v in res.z_final],
            "energies": epath,
        })
    report = {"engine": engine, "results": results}
    out.add("reports/retrieve.json", json.dumps(report, indent=2) + "\n")
    return report


def cmd_benchmark(cfg, args, out):
    spec = _benchmark_spec(cfg, cfg.benchmark.engines, _scenarios(cfg.benchmark.scenarios))
    report = run_benchmark(spec, workers=args.workers)
    path = out.add("reports/benchmark.csv", report.to_csv(include_timing=cfg.benchmark.record_timing))
    out.add("reports/benchmark.json", report.to_json())
    return {"report": path, "rows": len(report.rows)}


def cmd_capacity(cfg, args, out):
    scenario = Scenario.parse(cfg.capacity.scenario)
    spec = _benchmark_spec(cfg, cfg.capacity.engines, (scenario,))
    table = capacity_sweep(spec, Ns=cfg.capacity.Ns, scenario=scenario, workers=args.workers)
    path = out.add("reports/capacity.csv", capacity_csv(table))
    return {"report": path, "rows": len(table)}


def cmd_landscape(cfg, args, out):
    lc = cfg.landscape
    memory = MemoryMatrix(np.asarray(lc.patterns, dtype=np.float64), d=2)
    if len(lc.bounds) != 4:
        raise ConfigError("landscape.bounds must be [x_min, x_max, y_min, y_max]")
    if lc.resolution < 3:
        raise ConfigError("landscape.resolution must be >= 3")
    priors = {"balanced": BalancedGMM(lc.sigma), "mchn": MCHN(lc.beta)}
    summary = {}
    for name in lc.priors:
        if name not in priors:
            raise ConfigError(f"unknown landscape prior {name!r}; expected balanced or mchn")
        land = energy_landscape(memory, priors[name], tuple(lc.bounds), lc.resolution)
        grid = out.add(f"landscapes/{name}.csv", land.to_csv())
        out.add(f"landscapes/{name}_minima.csv", land.minima_csv())
        summary[name] = {"grid": grid, "minima": [[x, y] for x, y, _ in land.minima]}
    return summary


def cmd_train_precision(cfg, args, out):
    pc = cfg.precision
    memory = make_synthetic_memory(pc.N, pc.d, make_rng(cfg.seed, "precision-memory"), cfg.memory.min_separation)
    kw = dict(noise_std=pc.noise_std, clean_noise_std=pc.clean_noise_std)
    train = make_subspace_task(memory, pc.corrupted_dims, pc.per_pattern, make_rng(cfg.seed, "precision-train"), **kw)
    test = make_subspace_task(memory, pc.corrupted_dims, pc.per_pattern, make_rng(cfg.seed, "precision-test"), **kw)
    params, trace = train_precision(train, pc.epochs, pc.learning_rate, sigma=pc.sigma_init, iters_per_example=pc.unroll)
    tau = default_tau(memory)
    P = params.precision
    J = np.asarray(train.transform_spec["corrupted_dims"], dtype=np.int64)
    clean = np.setdiff1d(np.arange(memory.d), J)
    summary = {
        "precision": [float(p) for p in P],
        "mean_precision_corrupted": float(P[J].mean()) if J.size else None,
        "mean_precision_clean": float(P[clean].mean()) if clean.size else None,
        "success_uniform": retrieval_success_rate(test, PrecisionParams.uniform(memory.d, pc.sigma_init).prior(), tau),
        "success_trained": retrieval_success_rate(test, params.prior(), tau),
        "success_oracle": masked_nearest_neighbor_rate(test, clean),
    }
    path = out.add(PRECISION_FILE, dumps_model(None, params.raw))
    out.add(MEMORY_FILE.replace("memory.txt", "precision_memory.txt"), dumps_memory(memory))
    out.add("reports/precision_trace.csv", "epoch,loss\n" + "".join(f"{i},{v:.17g}\n" for i, v in enumerate(trace)))
    out.add("reports/precision.json", json.dumps(summary, indent=2) + "\n")
    summary["precision_file"] = path
    return summary


def cmd_generate(cfg, args, out):
    vae = _load_vae(cfg, "generate")
    memory = _load_memory(cfg)
    if memory.d != vae.latent_dim:
        raise ConfigError(f"memory d={memory.d} does not match model latent dim {vae.latent_dim}")
    g = cfg.generate
    if g.count < 1:
        raise ConfigError("generate.count must be >= 1")
    samples = one_shot_generate(vae, memory, g.sigma, g.count, make_rng(cfg.seed, "generate"))
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([f"x{j}" for j in range(vae.obs_dim)])
    buf.write("".join(_fmt_row(x) + "\n" for x in samples))
    path = out.add("reports/generated.csv", buf.getvalue())
    return {"samples": path, "count": g.count}


COMMANDS = {
    "train-vae": cmd_train_vae,
    "store": cmd_store,
    "retrieve": cmd_retrieve,
    "benchmark": cmd_benchmark,
    "capacity": cmd_capacity,
    "landscape": cmd_landscape,
    "train-precision": cmd_train_precision,
    "generate": cmd_generate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="base seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides output.directory)")
    common.add_argument("--workers", type=int, default=None, help="process fan-out cap (default: available CPUs)")
    p = argparse.ArgumentParser(prog="memvi", description="Memory-based variational retrieval experiments.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("train-vae", parents=[common], help="train the VAE on synthetic observations")
    s.add_argument("--epochs", type=int)
    s = sub.add_parser("store", parents=[common], help="append input vectors to a memory")
    s.add_argument("inputs", help="file with one vector per line")
    s.add_argument("--append", action="store_true", help="append to the existing memory in the output directory")
    s = sub.add_parser("retrieve", parents=[common], help="retrieve stored patterns for queries")
    s.add_argument("queries", help="file with one query per line")
    s.add_argument("--engine", choices=ENGINES)
    sub.add_parser("benchmark", parents=[common], help="run the engine x scenario x seed grid")
    sub.add_parser("capacity", parents=[common], help="success rate against memory size")
    sub.add_parser("landscape", parents=[common], help="2-D energy grids and their local minima")
    s = sub.add_parser("train-precision", parents=[common], help="learn a diagonal prior precision")
    s.add_argument("--epochs", type=int)
    sub.add_parser("generate", parents=[common], help="decode samples from the memory prior")
    return p


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output.directory = args.out
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        if args.command == "train-vae":
            cfg.train.epochs = epochs
        else:
            cfg.precision.epochs = epochs
    if getattr(args, "engine", None):
        cfg.engine = args.engine
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if args.workers is None:
        args.workers = available_workers()
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    return cfg


def run(argv=None):
    """Execute one command; returns ``(exit_code, summary_or_message)``."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return (0 if exc.code == 0 else 1), None
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        out = Outputs(cfg.output.directory)
        summary = COMMANDS[args.command](cfg, args, out)
        out.add(f"config.{args.command}.json", cfg.to_json())
        out.commit()
    except NumericError as exc:
        return 2, f"numeric failure: {exc}"
    except (MemviError, OSError, TypeError) as exc:
        return 1, f"error: {exc}"
    return 0, summary


def main(argv=None):
    code, payload = run(argv)
    if code == 0 and payload is not None:
        print(json.dumps(payload, indent=2))
    elif payload is not None:
        print(payload, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
