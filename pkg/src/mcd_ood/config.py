"""Experiment configuration: one JSON document, validated with pydantic."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .model import TwoHeadConfig
from .trainer import EARLY_STOP_METRICS, TrainConfig

OodKind = Literal["ring", "shifted_blobs"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    kind: Literal["blobs", "csv", "idx"] = "blobs"
    # synthetic generators
    num_classes: int = Field(4, ge=2)
    n_train_per_class: int = Field(5000, ge=1)
    sigma: float = Field(0.5, gt=0)
    centers: Optional[list[list[float]]] = None
    ood_generator: OodKind = "ring"
    test_ood_generator: Optional[OodKind] = None
    ring_radius: float = Field(6.0, gt=0)
    ring_width: float = Field(0.5, ge=0)
    shifted_radius: float = Field(4.5, gt=0)
    # split protocol
    n_ul_id: int = Field(1000, ge=0)
    n_ul_ood: int = Field(1000, ge=0)
    n_test_id: Optional[int] = Field(None, ge=1)
    n_test_ood: Optional[int] = Field(None, ge=1)
    val_fraction: float = Field(0.10, gt=0, lt=1)
    disjoint_test: bool = False
    # csv datasets (header x0,...,label)
    train_csv: Optional[str] = None
    id_pool_csv: Optional[str] = None
    ood_pool_csv: Optional[str] = None
    test_ood_csv: Optional[str] = None
    # idx image datasets
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    id_classes: Optional[list[int]] = None

    @model_validator(mode="after")
    def _paths_for_kind(self):
        need = {
            "csv": ("train_csv", "id_pool_csv", "ood_pool_csv"),
            "idx": ("train_images", "train_labels", "test_images", "test_labels", "id_classes"),
        }.get(self.kind, ())
        for key in need:
            if getattr(self, key) is None:
                raise ValueError(f"data.{key} is required when data.kind is {self.kind!r}")
        return self

    def paths(self):
        keys = ("train_csv", "id_pool_csv", "ood_pool_csv", "test_ood_csv",
                "train_images", "train_labels", "test_images", "test_labels")
        return {k: getattr(self, k) for k in keys if getattr(self, k) is not None}


class ModelSection(_Section):
    extractor_spec: Optional[list[int]] = None

    def spec_for(self, input_kind):
        if self.extractor_spec is not None:
            return tuple(self.extractor_spec)
        return (64, 64) if input_kind == "vector" else (8, 16)


class TrainSection(_Section):
    pretrain_epochs: int = Field(100, ge=1)
    finetune_epochs: int = Field(10, ge=1)
    lr_pretrain: float = Field(0.1, ge=0)
    lr_finetune: float = Field(0.1, ge=0)
    lr_drop_points: list[float] = [0.5, 0.75]
    lr_drop_factor: float = Field(10.0, gt=0)
    batch_size: int = Field(64, ge=1)
    margin: float = Field(1.2, gt=0)
    early_stop_metric: str = "auroc"
    weight_decay: float = Field(0.0, ge=0)
    freeze_extractor_in_step_b: bool = False
    swap_heads: bool = False

    @model_validator(mode="after")
    def _metric_known(self):
        if self.early_stop_metric not in EARLY_STOP_METRICS:
            raise ValueError(f"early_stop_metric must be one of {sorted(EARLY_STOP_METRICS)}")
        return self

    def to_train_config(self, seed, **overrides):
        return TrainConfig(seed=seed, **{**self.model_dump(), **overrides})


class EvalSection(_Section):
    delta: float = 1.0
    histogram_bins: int = Field(50, ge=1)


class AblateCell(_Section):
    n_ul_id: int = Field(ge=0)
    n_ul_ood: int = Field(ge=0)
    ood_generator: Optional[OodKind] = None
    test_ood_generator: Optional[OodKind] = None
    disjoint_test: Optional[bool] = None
    finetune_epochs: Optional[int] = Field(None, ge=1)


class AblateSection(_Section):
    cells: list[AblateCell] = Field(min_length=1)


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0)
    output_dir: str = "runs/experiment"
    data: DataSection
    model: ModelSection
    train: TrainSection
    eval: EvalSection = EvalSection()
    ablate: Optional[AblateSection] = None
    base_dir: Path = Field(default=Path("."), exclude=True)

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _describe(err):
    loc = ".".join(str(p) for p in err["loc"])
    if err["type"] == "missing":
        return f"missing config key '{loc}'"
    if err["type"] == "extra_forbidden":
        return f"unknown config key '{loc}'"
    return f"{loc}: {err['msg']}" if loc else err["msg"]


def parse_config(doc, base_dir=".", source="<config>"):
    if isinstance(doc, dict) and "base_dir" in doc:
        raise ConfigError(f"{source}: unknown config key 'base_dir'")
    try:
        cfg = ExperimentConfig.model_validate({**doc, "base_dir": Path(base_dir)} if isinstance(doc, dict) else doc)
    except ValidationError as exc:
        raise ConfigError(f"{source}: " + "; ".join(_describe(e) for e in exc.errors())) from None
    for key, path in cfg.data.paths().items():
        if not cfg.resolve(path).exists():
            raise ConfigError(f"{source}: data.{key} points to missing file {path}")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc, base_dir=path.parent, source=str(path))


def model_config_for(input_kind, input_shape, num_classes, section, seeds):
    return TwoHeadConfig(
        input_kind=input_kind,
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        extractor_spec=section.spec_for(input_kind),
        seed_extractor=seeds["extractor"],
        seed_head1=seeds["head1"],
        seed_head2=seeds["head2"],
    )
