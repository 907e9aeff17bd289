"""Experiment configuration: one flat record, one JSON document per run."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError, FormatError


@dataclass
class ExperimentConfig:
    # model dimensions
    feature_dim: int = 48
    hidden_dim: int = 64
    decoder_hidden: int = 128
    num_centers: int = 64
    expansion: int = 8

    # prior retrieval and selection
    prior_count: int = 3            # shape priors fetched per query
    strata: int = 6                 # disjoint blocks of the prior feature
    temperature: float = 0.1
    chamfer_threshold: float = 0.0015   # positive-match bound for memory writes
    loss_mix: float = 0.5               # weight of the stratified loss term
    magnitude_rule: str | float = "median"   # prior-feature threshold rule
    memory_capacity: int = 256
    freeze_complete_encoder: bool = True
    mmd_metric: str = "cd_l2"

    # training
    epochs: int = 30
    pretrain_epochs: int = 60
    batch_size: int = 16
    optimizer: str = "adamw"
    learning_rate: float = 2e-3
    pretrain_learning_rate: float = 2e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    lr_decay: float = 0.76
    lr_decay_every: int = 20
    seed: int = 0

    # ablation switches
    use_memory: bool = True
    use_pretrain: bool = True
    use_causal: bool = True

    # dataset
    categories: list = field(default_factory=lambda: ["box", "cylinder", "torus"])
    samples_per_category: int = 80
    complete_points: int = 512
    partial_points: int = 128
    train_fraction: float = 0.8
    fractions: list = field(default_factory=lambda: [0.25, 0.50, 0.75])

    # evaluation extras
    eval_fidelity: bool = False
    eval_mmd: bool = False

    # paths and execution
    data_dir: str = "desk_data"
    out_dir: str = "runs"
    threads: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.feature_dim < 1 or self.hidden_dim < 1 or self.decoder_hidden < 1:
            raise ContractError("model dimensions must be positive")
        if self.prior_count < 0:
            raise ContractError("prior count must be >= 0")
        if self.strata < 1:
            raise ContractError("strata count must be >= 1")
        prior_dim = self.prior_count * self.feature_dim
        if prior_dim % self.strata != 0:
            raise ContractError(
                f"strata {self.strata} must divide the prior feature size {prior_dim}"
            )
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if self.chamfer_threshold <= 0:
            raise ContractError("chamfer threshold must be positive")
        if not 0.0 <= self.loss_mix <= 1.0:
            raise ContractError("loss mix must lie in [0, 1]")
        if isinstance(self.magnitude_rule, str):
            if self.magnitude_rule != "median":
                raise ContractError(
                    f"magnitude rule must be 'median' or a number, got {self.magnitude_rule!r}"
                )
        elif float(self.magnitude_rule) < 0:
            raise ContractError("numeric magnitude threshold must be >= 0")
        if self.memory_capacity < 1:
            raise ContractError("memory capacity must be >= 1")
        if self.batch_size < 2:
            raise ContractError("batch size must be >= 2 for contrastive batches")
        if not 0.0 < self.train_fraction < 1.0:
            raise ContractError("train fraction must lie strictly in (0, 1)")
        if any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ContractError("crop fractions must lie in (0, 1]")
        if self.threads < 1:
            raise ContractError("threads must be >= 1")
        if self.mmd_metric not in ("cd_l2", "cd_l1"):
            raise ContractError("mmd metric must be cd_l2 or cd_l1")
        if self.optimizer not in ("adamw", "sgd"):
            raise ContractError("optimizer must be adamw or sgd")
        if self.partial_points > int(round(min(self.fractions) * self.complete_points)):
            raise ContractError("partial size exceeds the smallest crop")
        return self

    @property
    def prior_dim(self) -> int:
        return self.prior_count * self.feature_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - names
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload).validate()

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable config ({exc})") from None
        return cls.from_dict(payload)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Apply key=value overrides (values already parsed to Python types)."""
        payload = self.to_dict()
        for key, value in overrides.items():
            if key not in payload:
                raise ContractError(f"unknown config key {key!r}")
            payload[key] = value
        return self.from_dict(payload)
