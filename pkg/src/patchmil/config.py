"""Run configuration (JSON) for training, cross-validation, extraction and inference.

Relative paths in a config file are resolved against the file's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .data import IMAGENET_MEAN, IMAGENET_STD, Normalization
from .encoder import TOY, VIT_BASE, EncoderConfig
from .extraction import DEFAULT_BAND_WIDTH, DEFAULT_CONFIDENCE_FLOOR, DEFAULT_OVERLAP_THRESHOLD
from .losses import LossConfig

CONFIG_VERSION = 1
CONFIG_ENV_VAR = "PATCHMIL_CONFIG"
DECISION_RULES = ("micm_masked", "cls_head", "either")
ENCODER_PRESETS = {"vit_base": VIT_BASE, "toy": TOY}


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the dotted field name."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-5
    epochs: int = 30
    weight_decay: float = 0.01
    restart_period: int = 10
    restart_mult: int = 2
    precision: str = "float32"
    val_fraction: float = 0.1
    selection: str = "max"
    decision_rule: str = "micm_masked"
    num_workers: int = 0

    def __post_init__(self) -> None:
        checks = [
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("learning_rate", self.learning_rate >= 0, "must be >= 0"),
            ("weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("restart_period", self.restart_period >= 1, "must be >= 1"),
            ("restart_mult", self.restart_mult >= 1, "must be >= 1"),
            ("precision", self.precision in ("float32", "float64"), "must be float32 or float64"),
            ("val_fraction", 0 <= self.val_fraction < 1, "must lie in [0, 1)"),
            ("selection", self.selection in ("max", "noisy_or"), "must be 'max' or 'noisy_or'"),
            ("decision_rule", self.decision_rule in DECISION_RULES, f"must be one of {DECISION_RULES}"),
            ("num_workers", self.num_workers >= 0, "must be >= 0"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"train.{name}: {msg} (got {getattr(self, name)!r})")


@dataclass(frozen=True)
class DataConfig:
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD

    @property
    def normalization(self) -> Normalization:
        return Normalization(tuple(self.mean), tuple(self.std))


@dataclass(frozen=True)
class ExtractionConfig:
    band_width: int = DEFAULT_BAND_WIDTH
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD
    margin: int = 8
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR

    def __post_init__(self) -> None:
        if self.band_width < 1:
            raise ConfigError(f"extraction.band_width: must be >= 1 (got {self.band_width})")
        if not 0 <= self.overlap_threshold <= 1:
            raise ConfigError(f"extraction.overlap_threshold: must lie in [0, 1] (got {self.overlap_threshold})")
        if self.margin < 0:
            raise ConfigError(f"extraction.margin: must be >= 0 (got {self.margin})")
        if not 0 <= self.confidence_floor <= 1:
            raise ConfigError(f"extraction.confidence_floor: must lie in [0, 1] (got {self.confidence_floor})")


@dataclass(frozen=True)
class InferenceConfig:
    tau: float = 0.5
    decision_rule: str = "micm_masked"
    merge: bool = False
    edge_mask: bool = True

    def __post_init__(self) -> None:
        if not 0 <= self.tau <= 1:
            raise ConfigError(f"inference.tau: must lie in [0, 1] (got {self.tau})")
        if self.decision_rule not in DECISION_RULES:
            raise ConfigError(f"inference.decision_rule: must be one of {DECISION_RULES}")


@dataclass(frozen=True)
class PathsConfig:
    manifest: str | None = None
    output_dir: str = "runs"
    checkpoint: str | None = None
    pretrained: str | None = None


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    folds: int = 5
    head_hidden: int | None = None
    paths: PathsConfig = field(default_factory=PathsConfig)
    encoder: EncoderConfig = VIT_BASE
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"version: unsupported config version {self.version!r}")
        if self.folds < 2:
            raise ConfigError(f"folds: must be >= 2 (got {self.folds})")

    # --- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        d["data"] = {"mean": list(self.data.mean), "std": list(self.data.std)}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: str | os.PathLike | None = None) -> "RunConfig":
        raw = dict(raw)
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
        kwargs: dict[str, Any] = {}
        for key in ("version", "seed", "folds", "head_hidden"):
            if key in raw:
                kwargs[key] = raw[key]
        sections = {
            "paths": PathsConfig,
            "train": TrainConfig,
            "loss": LossConfig,
            "data": DataConfig,
            "extraction": ExtractionConfig,
            "inference": InferenceConfig,
        }
        for key, klass in sections.items():
            if key in raw:
                kwargs[key] = _section(key, klass, raw[key])
        if "encoder" in raw:
            enc = raw["encoder"]
            if isinstance(enc, str):
                if enc not in ENCODER_PRESETS:
                    raise ConfigError(f"encoder: unknown preset {enc!r}")
                kwargs["encoder"] = ENCODER_PRESETS[enc]
            else:
                kwargs["encoder"] = _section("encoder", EncoderConfig, enc)
        if "data" in kwargs:
            kwargs["data"] = DataConfig(tuple(kwargs["data"].mean), tuple(kwargs["data"].std))
        try:
            config = cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: {exc}") from None
        if base_dir is not None:
            config = config.resolve_paths(base_dir)
        return config

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> "RunConfig":
        if path is None:
            path = os.environ.get(CONFIG_ENV_VAR)
            if not path:
                raise ConfigError(f"config: no --config given and {CONFIG_ENV_VAR} is unset")
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config: file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON in {path}: {exc}") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def resolve_paths(self, base_dir: str | os.PathLike) -> "RunConfig":
        base = Path(base_dir)

        def fix(p: str | None) -> str | None:
            if p is None or Path(p).is_absolute():
                return p
            return str(base / p)

        paths = self.paths
        return replace(
            self,
            paths=PathsConfig(
                manifest=fix(paths.manifest),
                output_dir=fix(paths.output_dir),
                checkpoint=fix(paths.checkpoint),
                pretrained=fix(paths.pretrained),
            ),
        )

    def require(self, *names: str) -> None:
        """Check that the named ``paths.*`` entries are set and exist."""
        for name in names:
            value = getattr(self.paths, name)
            if not value:
                raise ConfigError(f"paths.{name}: required but not set")
            if not Path(value).exists():
                raise ConfigError(f"paths.{name}: not found: {value}")


def _section(name: str, klass, raw) -> Any:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{name}: expected an object")
    allowed = {f.name for f in fields(klass)}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}: unknown field")
    values = dict(raw)
    for f in fields(klass):
        if f.name in values and isinstance(values[f.name], list):
            values[f.name] = tuple(values[f.name])
    try:
        return klass(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None
