"""Run configuration: one JSON document describing data, model, and training.

Precedence is flags > file > defaults; the CLI passes its flag values as
overrides here. Everything is validated up front so a bad config never leaves
partial output behind.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .backbone import PARAM_GROUPS, BackboneConfig, FreezePolicy
from .data import (
    DataError,
    PreparedData,
    RawSeries,
    SplitSpec,
    SynthComponent,
    SynthSpec,
    generate_synthetic,
    load_csv,
    prepare_splits,
)
from .encode import DEFAULT_ATTRIBUTES, POOLING_MODES, EncoderConfig, TemporalAttributeSpec
from .train import PatchSpec, TrainConfig

DATA_DIR_ENV = "TSALIGN_DATA_DIR"

_DEFAULT_ATTRIBUTE_NAMES = tuple(name for name, _ in DEFAULT_ATTRIBUTES)


class ConfigError(ValueError):
    pass


def _from_mapping(cls, doc: Mapping[str, Any], context: str):
    """Build a dataclass from a mapping, rejecting unknown keys."""
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{context}: expected an object, got {type(doc).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {unknown}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _synth_from_dict(doc: Mapping[str, Any]) -> SynthSpec:
    doc = dict(doc)
    raw_components = doc.pop("components", None)
    if raw_components is None:
        raise ConfigError("synth: a components list is required")
    components = tuple(
        _from_mapping(SynthComponent, c, f"synth.components[{i}]")
        for i, c in enumerate(raw_components)
    )
    return _from_mapping(SynthSpec, {**doc, "components": components}, "synth")


def _train_from_dict(doc: Mapping[str, Any], stage: str, context: str) -> TrainConfig:
    doc = dict(doc)
    doc.setdefault("stage", stage)
    cfg = _from_mapping(TrainConfig, doc, context)
    if cfg.stage != stage:
        raise ConfigError(f"{context}: stage must be {stage!r}, got {cfg.stage!r}")
    return cfg


@dataclass(frozen=True)
class RunConfig:
    """Full description of one experiment run."""

    data_path: str | None = None
    synth: SynthSpec | None = None
    t_in: int = 336
    patch_len: int = 16
    stride: int = 8
    horizons: tuple[int, ...] = (96,)
    split: SplitSpec = field(default_factory=SplitSpec)
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(l=3, d=64, heads=4))
    trainable_groups: tuple[str, ...] = PARAM_GROUPS
    train_core: bool = False
    lora_r: int | None = 4
    lora_alpha: float = 8.0
    attributes: tuple[str, ...] = _DEFAULT_ATTRIBUTE_NAMES
    pooling: str = "select_first"
    kernel_width: int = 3
    max_patches: int | None = None  # default: exactly the patch count of t_in
    align_train: TrainConfig = field(default_factory=lambda: TrainConfig(stage="alignment"))
    forecast_train: TrainConfig = field(default_factory=lambda: TrainConfig(stage="forecast"))
    seed: int = 0
    out_dir: str = "runs/default"
    transfer: str = "required"  # "required" | "none"
    metric_scale: str = "standardized"  # "standardized" | "raw"

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(self.horizons))
        object.__setattr__(self, "trainable_groups", tuple(self.trainable_groups))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if self.data_path is not None and self.synth is not None:
            raise ConfigError("configure either data_path or synth, not both")
        if self.t_in < self.patch_len:
            raise ConfigError(f"t_in {self.t_in} must be >= patch_len {self.patch_len}")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not self.horizons or any(h < 1 for h in self.horizons):
            raise ConfigError("horizons must be non-empty with every T_out >= 1")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")
        if self.transfer not in ("required", "none"):
            raise ConfigError("transfer must be 'required' or 'none'")
        if self.metric_scale not in ("standardized", "raw"):
            raise ConfigError("metric_scale must be 'standardized' or 'raw'")
        if self.lora_r is not None and self.lora_r < 1:
            raise ConfigError("lora_r must be >= 1 (or null to disable adapters)")
        unknown = sorted(set(self.trainable_groups) - set(PARAM_GROUPS))
        if unknown:
            raise ConfigError(f"unknown trainable groups {unknown}")
        if self.align_train.stage != "alignment":
            raise ConfigError("align_train.stage must be 'alignment'")
        if self.forecast_train.stage != "forecast":
            raise ConfigError("forecast_train.stage must be 'forecast'")
        n_patches = (self.t_in - self.patch_len) // self.stride + 1
        limit = self.max_patches if self.max_patches is not None else n_patches
        if n_patches > limit:
            raise ConfigError(f"{n_patches} patches exceed max_patches {limit}")
        if n_patches > self.backbone.max_positions:
            raise ConfigError(
                f"{n_patches} patches exceed the backbone's {self.backbone.max_positions} positions"
            )
        try:
            TemporalAttributeSpec.from_names(self.attributes)
        except Exception as exc:
            raise ConfigError(str(exc)) from exc

    # -- derived pieces ----------------------------------------------------

    def patching(self) -> PatchSpec:
        return PatchSpec(t_in=self.t_in, patch_len=self.patch_len, stride=self.stride)

    def encoder_config(self) -> EncoderConfig:
        n_patches = self.patching().num_patches
        return EncoderConfig(
            patch_len=self.patch_len,
            embed_dim=self.backbone.d,
            kernel_width=self.kernel_width,
            max_patches=self.max_patches if self.max_patches is not None else n_patches,
            temporal=TemporalAttributeSpec.from_names(self.attributes),
            pooling=self.pooling,
        )

    def policy(self) -> FreezePolicy:
        return FreezePolicy(trainable=frozenset(self.trainable_groups), train_core=self.train_core)

    def dataset_tag(self) -> str:
        if self.data_path is not None:
            return Path(self.data_path).stem
        return "synthetic"

    def resolve_data_path(self) -> Path:
        if self.data_path is None:
            raise ConfigError("no data_path configured")
        path = Path(self.data_path)
        if not path.is_absolute():
            root = os.environ.get(DATA_DIR_ENV)
            if root:
                path = Path(root) / path
        if not path.exists():
            raise ConfigError(f"data file not found: {path}")
        return path

    def load_series(self) -> RawSeries:
        if self.synth is not None:
            return generate_synthetic(self.synth)
        if self.data_path is None:
            raise ConfigError("configure a data source: data_path or synth")
        try:
            return load_csv(self.resolve_data_path())
        except DataError as exc:
            raise ConfigError(str(exc)) from exc

    def prepare(self) -> PreparedData:
        return prepare_splits(self.load_series(), self.split)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["split"] = dataclasses.asdict(self.split)
        doc["backbone"] = dataclasses.asdict(self.backbone)
        doc["align_train"] = dataclasses.asdict(self.align_train)
        doc["forecast_train"] = dataclasses.asdict(self.forecast_train)
        if self.synth is not None:
            synth = dataclasses.asdict(self.synth)
            synth["components"] = [dataclasses.asdict(c) for c in self.synth.components]
            doc["synth"] = synth
        for key in ("horizons", "trainable_groups", "attributes"):
            doc[key] = list(doc[key])
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "RunConfig":
        doc = dict(doc)
        parsed: dict[str, Any] = {}
        if doc.get("synth") is not None:
            parsed["synth"] = _synth_from_dict(doc.pop("synth"))
        else:
            doc.pop("synth", None)
        if "split" in doc:
            parsed["split"] = _from_mapping(SplitSpec, doc.pop("split"), "split")
        if "backbone" in doc:
            parsed["backbone"] = _from_mapping(BackboneConfig, doc.pop("backbone"), "backbone")
        if "align_train" in doc:
            parsed["align_train"] = _train_from_dict(doc.pop("align_train"), "alignment", "align_train")
        if "forecast_train" in doc:
            parsed["forecast_train"] = _train_from_dict(doc.pop("forecast_train"), "forecast", "forecast_train")
        merged = {**doc, **parsed}
        return _from_mapping(cls, merged, "config")


def apply_overrides(doc: dict, overrides: Mapping[str, Any]) -> dict:
    """Merge dotted-path overrides (e.g. ``backbone.l``) into a config dict."""
    out = json.loads(json.dumps(doc))  # deep copy of plain JSON data
    for key, value in overrides.items():
        if value is None:
            continue
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[parts[-1]] = value
    return out


def load_run_config(
    path: str | Path | None = None, overrides: Mapping[str, Any] | None = None
) -> RunConfig:
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    if overrides:
        doc = apply_overrides(doc, overrides)
    return RunConfig.from_dict(doc)
