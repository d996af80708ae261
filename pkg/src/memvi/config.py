"""JSON run configuration with strict key checking and materialized defaults."""
import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .harness import (
    DEFAULT_CAPACITY_NS,
    DEFAULT_SIGMA,
    LANDSCAPE_BETA,
    LANDSCAPE_PATTERNS,
    LANDSCAPE_SIGMA,
)


@dataclass
class ModelSection:
    path: str | None = None
    obs_dim: int = 16
    latent_dim: int = 8
    hidden: int = 32
    activation: str = "tanh"


@dataclass
class TrainSection:
    n_samples: int = 1000
    epochs: int = 60
    learning_rate: float = 0.001


@dataclass
class MemorySection:
    path: str | None = None
    N: int = 100
    d: int = 16
    min_separation: float = 1.0
    input_space: str = "latent"


@dataclass
class PriorSection:
    kind: str = "auto"
    sigma: float = DEFAULT_SIGMA
    beta: float | None = None
    precision_path: str | None = None


@dataclass
class RetrievalSection:
    max_iters: int = 200
    step: float | None = None
    prior_weight: float = 2.0
    tol: float = 1e-7
    init_mode: str = "auto"


@dataclass
class BenchmarkSection:
    engines: list = field(default_factory=lambda: ["gmm", "mchn"])
    scenarios: list = field(default_factory=lambda: ["clean", "noise:0.2", "noise:0.6", "mask:0.25", "mask:0.56"])
    seeds: int = 10
    tau: float | None = None
    max_queries: int = 100
    record_timing: bool = False


@dataclass
class CapacitySection:
    Ns: list = field(default_factory=lambda: list(DEFAULT_CAPACITY_NS))
    scenario: str = "noise:0.6"
    engines: list = field(default_factory=lambda: ["gmm", "mchn"])


@dataclass
class LandscapeSection:
    patterns: list = field(default_factory=lambda: LANDSCAPE_PATTERNS.tolist())
    bounds: list = field(default_factory=lambda: [-1.5, 1.5, -1.5, 1.5])
    resolution: int = 400
    sigma: float = LANDSCAPE_SIGMA
    beta: float = LANDSCAPE_BETA
    priors: list = field(default_factory=lambda: ["balanced", "mchn"])


@dataclass
class PrecisionSection:
    N: int = 50
    d: int = 16
    corrupted_dims: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    noise_std: float = 2.0
    clean_noise_std: float = 0.3
    per_pattern: int = 4
    epochs: int = 1000
    learning_rate: float = 0.05
    sigma_init: float = 1.0
    unroll: int = 3


@dataclass
class GenerateSection:
    count: int = 10
    sigma: float = 0.1


@dataclass
class OutputSection:
    directory: str = "out"


@dataclass
class CliConfig:
    seed: int = 0
    engine: str = "gmm"
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    memory: MemorySection = field(default_factory=MemorySection)
    prior: PriorSection = field(default_factory=PriorSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    capacity: CapacitySection = field(default_factory=CapacitySection)
    landscape: LandscapeSection = field(default_factory=LandscapeSection)
    precision: PrecisionSection = field(default_factory=PrecisionSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def parse_config(data):
    return _build(CliConfig, data, "")


def load_config(path):
    if path is None:
        return CliConfig()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)
