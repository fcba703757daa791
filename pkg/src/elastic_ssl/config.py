"""One YAML document drives every command.

Parsing is strict: unknown keys and invalid values are all collected and
reported together, and every default is materialized so the persisted
effective config fully describes a run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .archspace import BudgetSpec, ModelSpace, desk_space, parse_flops
from .rankeval import ProbeConfig
from .training import TrainConfig

DESK_BUDGET_BOUNDARIES = tuple(range(0, 320_000_000, 40_000_000))  # 7 groups


class ConfigError(ValueError):
    """Every problem found in a config document, reported together."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in problems))


@dataclass(frozen=True)
class ModelSettings:
    embed_dim: int = 128
    projection_hidden: int = 512
    space: ModelSpace = field(default_factory=desk_space)

    def validate(self) -> list[str]:
        problems = []
        if self.embed_dim < 1:
            problems.append(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.projection_hidden < 1:
            problems.append(f"projection_hidden must be >= 1, got {self.projection_hidden}")
        return problems

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "projection_hidden": self.projection_hidden,
            "space": self.space.to_dict(),
        }


@dataclass(frozen=True)
class SearchSettings:
    task: str = "classification"
    candidates: int = 20
    boundaries: tuple[int, ...] = DESK_BUDGET_BOUNDARIES
    lower: "int | None" = None
    upper: "int | None" = None
    relation_temperature: float = 0.2
    batch_size: int = 64
    calibration_passes: int = 1
    max_sample_tries: int = 1000
    hw_cap: "int | None" = None
    seed: int = 0

    def validate(self) -> list[str]:
        problems = []
        if self.candidates < 1:
            problems.append(f"candidates must be >= 1, got {self.candidates}")
        if len(self.boundaries) < 2:
            problems.append("boundaries needs at least two values")
        elif any(b >= a for b, a in zip(self.boundaries, self.boundaries[1:])):
            problems.append(f"boundaries must be strictly ascending: {self.boundaries}")
        if self.relation_temperature <= 0:
            problems.append("relation_temperature must be > 0")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.calibration_passes < 1:
            problems.append("calibration_passes must be >= 1")
        if self.max_sample_tries < 1:
            problems.append("max_sample_tries must be >= 1")
        if self.hw_cap is not None and self.hw_cap < 1:
            problems.append(f"hw_cap must be positive, got {self.hw_cap}")
        if (self.lower is None) != (self.upper is None):
            problems.append("lower and upper must be given together")
        elif self.lower is not None and not self.lower < self.upper:
            problems.append(f"need lower < upper, got [{self.lower}, {self.upper})")
        return problems

    def budget_spec(self) -> BudgetSpec:
        """Window defaults to the full grouped range."""
        lower = self.lower if self.lower is not None else self.boundaries[0]
        upper = self.upper if self.upper is not None else self.boundaries[-1]
        return BudgetSpec(lower, upper, self.boundaries)

    def to_dict(self) -> dict:
        record = asdict(self)
        record["boundaries"] = list(self.boundaries)
        return record


@dataclass(frozen=True)
class RankSettings:
    subnets: int = 12
    seed: int = 0

    def validate(self) -> list[str]:
        return [] if self.subnets >= 2 else [f"subnets must be >= 2, got {self.subnets}"]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AblationSettings:
    seeds: tuple[int, ...] = (0, 1, 2)

    def validate(self) -> list[str]:
        return [] if len(self.seeds) >= 1 else ["seeds must not be empty"]

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds)}


@dataclass(frozen=True)
class DataSettings:
    source: str = "synthetic"
    path: "str | None" = None
    classes: int = 10
    train_size: int = 1024
    val_size: int = 256
    seed: int = 0

    def validate(self) -> list[str]:
        problems = []
        if self.source not in ("synthetic", "cifar10"):
            problems.append(f"source must be 'synthetic' or 'cifar10', got {self.source!r}")
        if self.source == "cifar10" and not self.path:
            problems.append("cifar10 source needs a path")
        if self.classes < 2:
            problems.append(f"classes must be >= 2, got {self.classes}")
        if self.train_size < 1 or self.val_size < 1:
            problems.append("train_size and val_size must be positive")
        return problems

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunConfig:
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchSettings = field(default_factory=SearchSettings)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    rank: RankSettings = field(default_factory=RankSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    data: DataSettings = field(default_factory=DataSettings)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "search": self.search.to_dict(),
            "probe": self.probe.to_dict(),
            "rank": self.rank.to_dict(),
            "ablation": self.ablation.to_dict(),
            "data": self.data.to_dict(),
        }

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _section_fields(cls) -> dict:
    return {f.name: f for f in fields(cls)}


def _parse_flat_section(name: str, record: dict, cls, problems: list[str],
                        tuple_fields: tuple[str, ...] = ()):
    """Build a flat dataclass section, collecting unknown keys and bad values."""
    known = _section_fields(cls)
    clean = {}
    for key, value in record.items():
        if key not in known:
            problems.append(f"{name}.{key}: unknown key")
            continue
        if key in tuple_fields and isinstance(value, list):
            value = tuple(value)
        clean[key] = value
    try:
        section = cls(**clean)
    except (TypeError, ValueError) as exc:
        problems.append(f"{name}: {exc}")
        return cls()
    if hasattr(section, "validate"):
        for issue in section.validate():
            problems.append(f"{name}: {issue}")
    return section


def config_from_dict(record: dict) -> RunConfig:
    """Strict parse; raises ConfigError listing every offending key."""
    if not isinstance(record, dict):
        raise ConfigError([f"top level must be a mapping, got {type(record).__name__}"])
    problems: list[str] = []
    known_sections = {"model", "train", "search", "probe", "rank", "ablation", "data"}
    for key in record:
        if key not in known_sections:
            problems.append(f"{key}: unknown section")

    model_record = dict(record.get("model", {}))
    space = ModelSettings().space
    if "space" in model_record:
        try:
            space = ModelSpace.from_dict(model_record.pop("space"))
        except (ValueError, KeyError, TypeError) as exc:
            problems.append(f"model.space: {exc}")
            model_record.pop("space", None)
    model = _parse_flat_section("model", model_record, ModelSettings, problems)
    model = replace(model, space=space)

    train = _parse_flat_section("train", dict(record.get("train", {})), TrainConfig, problems)
    search = _parse_flat_section(
        "search", dict(record.get("search", {})), SearchSettings, problems,
        tuple_fields=("boundaries",),
    )
    probe = _parse_flat_section("probe", dict(record.get("probe", {})), ProbeConfig, problems)
    rank = _parse_flat_section("rank", dict(record.get("rank", {})), RankSettings, problems)
    ablation = _parse_flat_section(
        "ablation", dict(record.get("ablation", {})), AblationSettings, problems,
        tuple_fields=("seeds",),
    )
    data = _parse_flat_section("data", dict(record.get("data", {})), DataSettings, problems)

    if problems:
        raise ConfigError(problems)
    return RunConfig(
        model=model, train=train, search=search, probe=probe,
        rank=rank, ablation=ablation, data=data,
    )


def load_config(path: "str | Path | None" = None) -> RunConfig:
    """Read a YAML config; None gives the all-defaults config."""
    if path is None:
        return RunConfig()
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def parse_budget_flag(text: str) -> tuple[int, int]:
    """Accepts a group label like '3G~4G' or an explicit window 'lo:hi'."""
    for sep in ("~", ":"):
        if sep in text:
            lo_text, _, hi_text = text.partition(sep)
            lo, hi = parse_flops(lo_text), parse_flops(hi_text)
            if not lo < hi:
                raise ValueError(f"need lower < upper in budget {text!r}")
            return lo, hi
    raise ValueError(f"budget {text!r} must look like '3G~4G' or 'lo:hi'")
