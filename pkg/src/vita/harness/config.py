"""Experiment configuration: strict JSON schema with path-qualified errors."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..attacks import METHODS
from ..training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class SyntheticSource(_Strict):
    kind: Literal["synthetic"] = "synthetic"
    n_train: int = Field(512, ge=2, le=5000)
    n_test: int = Field(200, ge=1)
    jitter: int = Field(1, ge=0)
    noise: float = Field(0.03, ge=0)
    contrast: float = Field(1.0, gt=0, le=1)


class CifarSource(_Strict):
    kind: Literal["cifar"]
    train_path: str
    test_path: str
    n_train: Optional[int] = Field(5000, ge=2, le=5000)
    n_test: Optional[int] = Field(None, ge=1)


class ModelConfig(_Strict):
    classifier_width: int = Field(16, ge=1)
    translator_depth: int = Field(3, ge=1)
    translator_base: int = Field(32, ge=1)
    discriminator_hidden: int = Field(64, ge=1)


class AttackEvalConfig(_Strict):
    methods: Tuple[str, ...] = ("fgsm", "pgd_linf")
    n_samples: int = Field(200, ge=1)

    @model_validator(mode="after")
    def _known(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown attack methods {bad}; expected a subset of {METHODS}")
        return self


class ExperimentConfig(_Strict):
    dataset: Union[SyntheticSource, CifarSource] = Field(default_factory=SyntheticSource, discriminator="kind")
    image_size: int = 32
    classes: int = Field(4, ge=2, le=10)
    train: TrainConfig = Field(default_factory=TrainConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    attack_eval: AttackEvalConfig = Field(default_factory=AttackEvalConfig)
    severity_table: Optional[str] = None
    normalized_report: bool = False
    suite_workers: int = Field(1, ge=1)
    output_dir: str = "runs/default"
    seed: int = 0

    @model_validator(mode="after")
    def _consistent(self):
        if isinstance(self.dataset, CifarSource) and self.image_size != 32:
            raise ValueError("image_size must be 32 for cifar data")
        if isinstance(self.dataset, SyntheticSource) and self.image_size not in (16, 32):
            raise ValueError(f"image_size must be 16 or 32 for synthetic data, got {self.image_size}")
        if isinstance(self.dataset, CifarSource) and self.classes != 10:
            raise ValueError("cifar data has 10 classes")
        if "seed" in self.train.model_fields_set and self.train.seed != self.seed:
            raise ValueError("train.seed is derived from the top-level seed; set 'seed' instead")
        self.train.seed = self.seed
        return self

    def echo(self) -> Dict[str, Any]:
        """Every field with defaults filled in, as written to the manifest."""
        return self.model_dump(mode="json", by_alias=True)

    def digest(self) -> str:
        return config_digest(self.echo())


def config_digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        lines.append(f"{loc}: {msg}")
    return "; ".join(lines)


def validate_config(doc: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"<root>: expected a JSON object, got {type(doc).__name__}")
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config_document(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not UTF-8") from None
    if not text.strip():
        return {}
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from None


def parse_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read a JSON config (empty document means all defaults) and apply dotted overrides."""
    doc = load_config_document(path)
    for dotted, value in (overrides or {}).items():
        set_dotted(doc, dotted, value)
    return validate_config(doc)


def set_dotted(doc: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{dotted}: cannot descend into non-object {k!r}")
        node = nxt
    node[keys[-1]] = value


def _submodels(annotation) -> List[type]:
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return [annotation]
    return [a for a in getattr(annotation, "__args__", ()) if isinstance(a, type) and issubclass(a, BaseModel)]


def schema_paths(model=ExperimentConfig, prefix: str = "") -> List[str]:
    """Dotted names of every leaf field, used to mirror the schema as CLI flags."""
    out: List[str] = []
    for name, info in model.model_fields.items():
        key = info.alias or name
        subs = _submodels(info.annotation)
        if not subs:
            out.append(prefix + key)
        for sub in subs:
            out += [p for p in schema_paths(sub, f"{prefix}{key}.") if p not in out]
    return out
