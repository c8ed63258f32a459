"""Pipeline configuration: one YAML file, validated strictly.

Unknown keys are rejected so typos fail fast; command-line flags override
file values. The effective configuration (after defaults) is written next
to every command's outputs for provenance.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .classifier import FeatureConfig, TrainConfig
from .errors import DataError
from .imaging import AugmentConfig, DogConfig


@dataclass
class SplitConfig:
    fractions: tuple = (0.68, 0.17, 0.15)
    seed: int = 0
    stratify: bool = False


@dataclass
class PipelineConfig:
    store: str = "./store"
    dog: DogConfig = field(default_factory=DogConfig)
    staff_line_thickness: object = "auto"  # "auto" or pixel count
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    confidence_levels: tuple = (0.0, 0.25, 0.5, 0.75, 0.9)
    merge_threshold: float = 0.5
    rare_factor: float = 0.75

    def to_dict(self) -> dict:
        return {
            "store": self.store,
            "dog": asdict(self.dog),
            "staff_line_thickness": self.staff_line_thickness,
            "train": self.train.to_dict(),
            "augment": {**asdict(self.augment), "target_size": list(self.augment.target_size)},
            "features": self.features.to_dict(),
            "splits": {**asdict(self.splits), "fractions": list(self.splits.fractions)},
            "confidence_levels": list(self.confidence_levels),
            "merge_threshold": self.merge_threshold,
            "rare_factor": self.rare_factor,
        }


def _build(cls, section: dict, name: str):
    defaults = cls()
    known = set(asdict(defaults))
    unknown = set(section) - known
    if unknown:
        raise DataError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    kwargs = dict(section)
    if "target_size" in kwargs:
        kwargs["target_size"] = tuple(kwargs["target_size"])
    if "fractions" in kwargs:
        kwargs["fractions"] = tuple(kwargs["fractions"])
    return cls(**kwargs)


TOP_LEVEL_KEYS = {
    "store", "dog", "staff_line_thickness", "train", "augment", "features",
    "splits", "confidence_levels", "merge_threshold", "rare_factor",
}


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read YAML config (optional), apply flag overrides, validate keys."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise DataError(f"config file {path} must hold a mapping")
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise DataError(f"unknown top-level config keys: {sorted(unknown)}")

    cfg = PipelineConfig(
        store=str(raw.get("store", PipelineConfig.store)),
        dog=_build(DogConfig, raw.get("dog", {}), "dog"),
        staff_line_thickness=raw.get("staff_line_thickness", "auto"),
        train=_build(TrainConfig, raw.get("train", {}), "train"),
        augment=_build(AugmentConfig, raw.get("augment", {}), "augment"),
        features=_build(FeatureConfig, raw.get("features", {}), "features"),
        splits=_build(SplitConfig, raw.get("splits", {}), "splits"),
        confidence_levels=tuple(raw.get("confidence_levels", PipelineConfig.confidence_levels)),
        merge_threshold=float(raw.get("merge_threshold", 0.5)),
        rare_factor=float(raw.get("rare_factor", 0.75)),
    )

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        head, _, tail = key.partition(".")
        if tail:
            section = getattr(cfg, head)
            obj = _build(type(section), {**_section_dict(section), tail: value}, head)
            setattr(cfg, head, obj)
        else:
            setattr(cfg, key, value)
    return cfg


def _section_dict(section) -> dict:
    d = asdict(section)
    if "target_size" in d:
        d["target_size"] = tuple(d["target_size"])
    if "fractions" in d:
        d["fractions"] = tuple(d["fractions"])
    return d


def write_effective_config(cfg: PipelineConfig, out_path) -> None:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
