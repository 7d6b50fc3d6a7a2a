"""Run configuration: one TOML file with sections per module.

Paths inside the file resolve relative to the file itself, so a config can
travel with its fixtures.  The only environment override is the API key, which
never belongs in a committed file.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigurationError
from .evidence import SourceConfig
from .rewards import RewardWeights
from .training import TrainingConfig

API_KEY_ENV = "LATENTSCOUT_API_KEY"
TRAINING_ENVS = ("pipeline", "synthetic")
BACKEND_MODES = ("mock", "http")


@dataclass(frozen=True)
class BackendSpec:
    mode: str
    executor_tables: Tuple[Path, ...] = ()
    coordinator_table: Optional[Path] = None
    endpoint: Optional[str] = None
    model: Optional[str] = None
    api_key: Optional[str] = None
    identities: Tuple[str, ...] = ()
    timeout: float = 30.0

    def __post_init__(self):
        if self.mode not in BACKEND_MODES:
            raise ConfigurationError(f"backend mode must be one of {BACKEND_MODES}")
        if self.mode == "mock":
            if not self.executor_tables or self.coordinator_table is None:
                raise ConfigurationError(
                    "mock mode needs executor table files and a coordinator table")
        else:
            if not self.endpoint or not self.model or not self.identities:
                raise ConfigurationError(
                    "http mode needs endpoint, model, and executor identities")


@dataclass(frozen=True)
class RunConfig:
    graph_path: Path
    output_dir: Path
    seed: int
    domain: str
    rounds: int
    blanket_policy: str
    training_env: str
    training: TrainingConfig
    weights: RewardWeights
    r_max: float
    sources: SourceConfig
    backends: BackendSpec
    ground_truth_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None


def _section(payload: dict, name: str) -> dict:
    value = payload.get(name, {})
    if not isinstance(value, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    return dict(value)


def _build(cls, section: dict, context: str):
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigurationError(f"bad [{context}] section: {exc}") from exc


def _require_exists(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigurationError(f"{what} {path} does not exist")
    return path


def load_config(path, seed: Optional[int] = None, offline: Optional[bool] = None,
                out: Optional[str] = None,
                checkpoint: Optional[str] = None) -> RunConfig:
    """Load and validate a run config, applying command-line overrides."""
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigurationError(f"config file {config_path} does not exist")
    try:
        with open(config_path, "rb") as fh:
            payload = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config file {config_path} is not TOML: {exc}") from exc
    base = config_path.parent

    def resolve(rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else (base / p)

    run = _section(payload, "run")
    graph_rel = run.get("graph")
    if not graph_rel:
        raise ConfigurationError("[run] graph is required")
    graph_path = _require_exists(resolve(graph_rel), "graph file")

    effective_seed = seed if seed is not None else run.get("seed")

    training_section = _section(payload, "training")
    training_env = training_section.pop("env", "pipeline")
    if training_env not in TRAINING_ENVS:
        raise ConfigurationError(f"[training] env must be one of {TRAINING_ENVS}")
    if effective_seed is not None:
        training_section["seed"] = int(effective_seed)
    training = _build(TrainingConfig, training_section, "training")

    reward_section = _section(payload, "reward")
    r_max = float(reward_section.pop("r_max", 1.0))
    weights = _build(RewardWeights, reward_section, "reward")

    sources_section = _section(payload, "sources")
    for key in ("fixture_dir", "corpus_dir"):
        if sources_section.get(key) is not None:
            sources_section[key] = str(resolve(sources_section[key]))
    if offline is not None:
        sources_section["offline"] = offline
    sources = _build(SourceConfig, sources_section, "sources")
    if sources.offline and sources.fixture_dir is not None:
        _require_exists(Path(sources.fixture_dir), "fixture directory")
    if sources.local_enabled and sources.corpus_dir is not None:
        _require_exists(Path(sources.corpus_dir), "corpus directory")

    backend_section = _section(payload, "backends")
    mode = backend_section.get("mode", "mock")
    if mode == "mock":
        tables = tuple(
            _require_exists(resolve(p), "executor table")
            for p in backend_section.get("executors", []))
        coordinator = backend_section.get("coordinator")
        coordinator_path = (_require_exists(resolve(coordinator), "coordinator table")
                            if coordinator else None)
        backends = BackendSpec(mode="mock", executor_tables=tables,
                               coordinator_table=coordinator_path)
        if effective_seed is None:
            raise ConfigurationError("mock mode requires a seed (config or --seed)")
    else:
        api_key = os.environ.get(API_KEY_ENV, backend_section.get("api_key"))
        backends = BackendSpec(
            mode="http",
            endpoint=backend_section.get("endpoint"),
            model=backend_section.get("model"),
            api_key=api_key,
            identities=tuple(backend_section.get("identities", [])),
            timeout=float(backend_section.get("timeout", 30.0)))

    if effective_seed is None:
        raise ConfigurationError("a seed is required (config [run] or --seed)")

    truth = run.get("ground_truth")
    truth_path = _require_exists(resolve(truth), "ground-truth file") if truth else None

    checkpoint_rel = checkpoint if checkpoint is not None else run.get("checkpoint")
    checkpoint_path = resolve(checkpoint_rel) if checkpoint_rel else None

    output_dir = Path(out) if out is not None else resolve(run.get("output", "out"))

    blanket_policy = run.get("blanket_policy", "strict")
    if blanket_policy not in ("strict", "superset"):
        raise ConfigurationError(
            f"[run] blanket_policy must be strict or superset, got {blanket_policy!r}")

    rounds = int(run.get("rounds", 2))
    if rounds < 1:
        raise ConfigurationError(f"[run] rounds must be >= 1, got {rounds}")

    return RunConfig(
        graph_path=graph_path,
        output_dir=output_dir,
        seed=int(effective_seed),
        domain=str(run.get("domain", "general")),
        rounds=rounds,
        blanket_policy=blanket_policy,
        training_env=training_env,
        training=training,
        weights=weights,
        r_max=r_max,
        sources=sources,
        backends=backends,
        ground_truth_path=truth_path,
        checkpoint_path=checkpoint_path,
    )
