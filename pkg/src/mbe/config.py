"""One JSON run configuration shared by every subcommand."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from mbe.agent import TrainConfig
from mbe.dataset import BuildConfig
from mbe.evaluation import SETTINGS
from mbe.planted import PlantedConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    setting: str = "all"
    beam_size: int | None = None

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"eval.setting must be one of {SETTINGS}")
        if self.beam_size is not None and self.beam_size < 1:
            raise ValueError("eval.beam_size must be >= 1")


@dataclass
class RunConfig:
    """Sections ``build``, ``planted``, ``train``, ``eval`` plus one ``seed`` for all randomness."""

    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    build: BuildConfig = field(default_factory=BuildConfig)
    planted: PlantedConfig = field(default_factory=PlantedConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved(self) -> "RunConfig":
        """Copy with the global seed pushed into every section."""
        return replace(self, build=replace(self.build, rng_seed=self.seed),
                       planted=replace(self.planted, seed=self.seed),
                       train=replace(self.train, rng_seed=self.seed), eval=replace(self.eval))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["build"]["split_ratio"] = list(self.build.split_ratio)
        for section in ("build", "planted", "train"):
            d[section].pop({"build": "rng_seed", "planted": "seed", "train": "rng_seed"}[section])
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {"build": BuildConfig, "planted": PlantedConfig, "train": TrainConfig, "eval": EvalConfig}
_SEED_FIELDS = {"build": "rng_seed", "planted": "seed", "train": "rng_seed"}


def _section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)} - {_SEED_FIELDS.get(name)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kw = dict(raw)
    if name == "build" and "split_ratio" in kw:
        kw["split_ratio"] = tuple(kw["split_ratio"])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(raw) - {"schema_version", "seed", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    kw = {name: _section(name, cls, raw[name]) for name, cls in _SECTIONS.items() if name in raw}
    return RunConfig(schema_version=version, seed=seed, **kw).resolved()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().resolved()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw)
