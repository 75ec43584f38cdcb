"""Experiment configuration schema.

One YAML (or JSON) file describes one experiment.  Unknown keys are
rejected; every field has the default listed here.

Seeds: ``seed`` is the master seed.  Partitioning uses
``derive_seed(seed, "partition")``, the attacker ``derive_seed(seed,
"attack")``, training ``seed`` itself.  Synthetic data and the trigger
pattern have their own seeds so replicate runs share data and trigger.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticData(_Strict):
    kind: Literal["synthetic"] = "synthetic"
    n_train: int = Field(6000, ge=1)
    n_test: int = Field(1000, ge=1)
    d: int = Field(784, ge=1)
    n_classes: int = Field(10, ge=2)
    noise: float = Field(0.15, ge=0)
    seed: int = 0


class IdxData(_Strict):
    kind: Literal["idx"] = "idx"
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    n_classes: int = Field(10, ge=2)
    # optional subsampling for quick runs; None keeps everything
    n_train: Optional[int] = Field(None, ge=1)
    n_test: Optional[int] = Field(None, ge=1)


class ModelConfig(_Strict):
    hidden: list[int] = [128]
    activation: Literal["relu", "tanh"] = "relu"


class FederationConfig(_Strict):
    n_clients: int = Field(5, ge=2)
    n_rounds: int = Field(30, ge=0)
    aggregation: Literal["fedsgd", "fedavg", "fedprox", "median", "trimean"] = "fedavg"
    global_lr: Optional[float] = Field(None, gt=0)
    trim_fraction: float = Field(0.2, ge=0, lt=0.5)


class PartitionConfig(_Strict):
    scheme: Literal["dominant", "dirichlet", "iid"] = "dominant"
    ratio: float = Field(0.7, gt=0, le=1)
    classes_per_client: Optional[int] = Field(None, ge=1)
    alpha: float = Field(0.3, gt=0)


class TrainingConfig(_Strict):
    lr: float = Field(0.01, ge=0)
    batch_size: int = Field(32, ge=1)
    local_epochs: Optional[int] = Field(None, ge=1)
    prox_mu: float = Field(0.01, ge=0)


class TriggerConfig(_Strict):
    kind: Literal["badnet_patch", "blended"] = "badnet_patch"
    target_label: int = Field(0, ge=0)
    patch_size: int = Field(3, ge=1)
    corner: Literal["bottom_right", "bottom_left", "top_right", "top_left"] = "bottom_right"
    intensity: float = Field(1.0, ge=0, le=1)
    alpha: float = Field(0.2, gt=0, lt=1)
    seed: int = 0


class AttackConfig(_Strict):
    malicious_client: int = Field(1, ge=1)
    trigger: TriggerConfig = TriggerConfig()
    n_bd: int = Field(600, ge=0)
    camouflage_ratio: float = Field(1.0, gt=0)


class FedEraserParams(_Strict):
    cal_epochs: int = Field(1, ge=1)


class FedUParams(_Strict):
    lam: float = Field(0.5, ge=0)
    beta: float = Field(0.5, ge=0)


class SifuParams(_Strict):
    sigma_scale: float = Field(0.05, ge=0)
    recovery_rounds: Optional[int] = Field(None, ge=0)


class UnlearnConfig(_Strict):
    federaser: FedEraserParams = FedEraserParams()
    fedu: FedUParams = FedUParams()
    sifu: SifuParams = SifuParams()

    def params(self, method: str) -> dict:
        if method == "retrain":
            return {}
        return getattr(self, method).model_dump()


class BenignUnlearnConfig(_Strict):
    client: int = Field(2, ge=1)
    fraction: float = Field(0.2, gt=0, le=1)


class NCConfig(_Strict):
    steps: int = Field(300, ge=1)
    lr: float = Field(0.1, gt=0)
    l1_weight: float = Field(0.01, ge=0)
    probe_size: int = Field(200, ge=1)


class ExperimentConfig(_Strict):
    dataset: SyntheticData | IdxData = Field(default_factory=SyntheticData, discriminator="kind")
    model: ModelConfig = ModelConfig()
    federation: FederationConfig = FederationConfig()
    partition: PartitionConfig = PartitionConfig()
    training: TrainingConfig = TrainingConfig()
    attack: Optional[AttackConfig] = None
    unlearn: UnlearnConfig = UnlearnConfig()
    benign_unlearn: Optional[BenignUnlearnConfig] = None
    nc: NCConfig = NCConfig()
    benign_baseline: bool = False
    seed: int = 0
    eval_every: int = Field(1, ge=1)
    output_dir: Optional[str] = None

    @model_validator(mode="before")
    @classmethod
    def _default_dataset_kind(cls, data):
        if isinstance(data, dict) and isinstance(data.get("dataset"), dict) and "kind" not in data["dataset"]:
            data = {**data, "dataset": {**data["dataset"], "kind": "synthetic"}}
        return data

    @model_validator(mode="after")
    def _cross_checks(self) -> ExperimentConfig:
        K = self.federation.n_clients
        if self.attack is not None and self.attack.malicious_client > K:
            raise ValueError(f"malicious_client {self.attack.malicious_client} exceeds n_clients {K}")
        if self.attack is not None and self.attack.trigger.target_label >= self.dataset.n_classes:
            raise ValueError("trigger target_label must be a valid class")
        if self.benign_unlearn is not None:
            if self.benign_unlearn.client > K:
                raise ValueError(f"benign_unlearn.client exceeds n_clients {K}")
            if self.attack is not None and self.benign_unlearn.client == self.attack.malicious_client:
                raise ValueError("benign_unlearn.client must not be the malicious client")
        if self.federation.aggregation == "fedsgd" and self.training.local_epochs not in (None, 1):
            raise ValueError("fedsgd uses exactly one local epoch")
        return self

    @property
    def local_epochs(self) -> int:
        if self.training.local_epochs is not None:
            return self.training.local_epochs
        return 1 if self.federation.aggregation == "fedsgd" else 5

    @property
    def global_lr(self) -> float:
        return self.federation.global_lr if self.federation.global_lr is not None else self.training.lr

    def with_overrides(self, **changes) -> ExperimentConfig:
        """Copy with dotted-path overrides, e.g. ``{"attack.camouflage_ratio": 2.0}``."""
        data = self.model_dump()
        for path, value in changes.items():
            node = data
            *parents, leaf = path.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return parse_config(data)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        lines = [f"  {'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()]
        raise ConfigError("invalid experiment config:\n" + "\n".join(lines)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = parse_config(data or {})
    if isinstance(cfg.dataset, IdxData):
        base = path.parent
        resolved = {k: str((base / getattr(cfg.dataset, k)).resolve())
                    for k in ("train_images", "train_labels", "test_images", "test_labels")
                    if not Path(getattr(cfg.dataset, k)).is_absolute()}
        if resolved:
            cfg = cfg.model_copy(update={"dataset": cfg.dataset.model_copy(update=resolved)})
    return cfg
