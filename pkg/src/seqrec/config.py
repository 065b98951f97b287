"""Flat JSON experiment configuration.

Every key is optional except ``data_path``.  Unset values resolve to the
standard per-dataset defaults: hidden size 64 (256 for ML-20M), maximum
sequence length 200 for MovieLens and 50 otherwise, 2 blocks, 1 attention
head for SASRec and 2 for BERT4Rec, patience 10 / 100 epochs (20 / 200 for
BERT4Rec), batch size 128, Adam at 1e-3.  Unknown keys are an error.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import LossSpec
from .models import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    data_path: str
    data_format: str = "timestamped-csv"
    dataset: str | None = None
    name: str | None = None
    min_per_user: int = 5
    subsample_users: int | None = None
    subsample_seed: int = 0
    model: str = "sasrec"
    loss: str | None = None
    num_negatives: int | None = None
    negative_scope: str | None = None
    shared_negatives: bool = False
    hidden_size: int | None = None
    num_blocks: int | None = None
    num_heads: int | None = None
    max_len: int | None = None
    dropout_prob: float = 0.1
    mask_prob: float = 0.2
    bert_head: str = "tied"
    dtype: str = "float64"
    batch_size: int = 128
    learning_rate: float = 1e-3
    max_epochs: int | None = None
    patience: int | None = None
    validation_user_cap: int = 10000
    validation_seed: int = 0
    bprmf_reg: float = 0.01
    seeds: list = field(default_factory=lambda: [0])
    filter_seen: bool = False
    sweep_negatives: list | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        if self.dataset is None:
            self.dataset = dataset_name_from_path(self.data_path)
        defaults = dataset_defaults(self.dataset, self.model)
        for key, value in defaults.items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.name is None:
            self.name = display_name(self.model, self.loss, self.num_negatives)
        if self.sweep_negatives is not None:
            ns = list(self.sweep_negatives)
            if any(b <= a for a, b in zip(ns, ns[1:])) or not ns or min(ns) < 1:
                raise ConfigError("sweep_negatives must be a non-empty, strictly increasing list of positive ints")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "data_path" not in raw:
            raise ConfigError("config must set data_path")
        try:
            return cls(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def loss_spec(self, num_negatives: int | None = None) -> LossSpec:
        n = num_negatives if num_negatives is not None else self.num_negatives
        kind = "sampled_ce" if num_negatives is not None else self.loss
        return LossSpec(kind=kind, num_negatives=n if kind == "sampled_ce" else None,
                        negative_scope=self.negative_scope, shared_negatives=self.shared_negatives)

    def model_config(self, num_items: int) -> ModelConfig:
        return ModelConfig(kind=self.model, num_items=num_items, hidden_size=self.hidden_size,
                           num_blocks=self.num_blocks, num_heads=self.num_heads, max_len=self.max_len,
                           dropout_prob=self.dropout_prob, mask_prob=self.mask_prob,
                           bert_head=self.bert_head, dtype=self.dtype)

    def train_config(self, seed: int, num_negatives: int | None = None) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           max_epochs=self.max_epochs, patience=self.patience,
                           loss=self.loss_spec(num_negatives), seed=seed,
                           validation_user_cap=self.validation_user_cap,
                           validation_seed=self.validation_seed, bprmf_reg=self.bprmf_reg)


_KNOWN_DATASETS = ("ml-1m", "ml-20m", "steam", "beauty", "yelp")


def dataset_name_from_path(path: str) -> str:
    stem = Path(path).name.lower()
    for name in _KNOWN_DATASETS:
        if stem.startswith(name):
            return name
    return Path(path).stem or "dataset"


def dataset_defaults(dataset: str, model: str) -> dict:
    name = (dataset or "").lower()
    bert = model == "bert4rec"
    return {
        "hidden_size": 256 if name == "ml-20m" else 64,
        "max_len": 200 if name.startswith("ml-") else 50,
        "num_blocks": 2,
        "num_heads": 2 if bert else 1,
        "max_epochs": 200 if bert else 100,
        "patience": 20 if bert else 10,
        "loss": "bce" if model in ("sasrec", "bprmf") else "full_ce",
    }


def display_name(model: str, loss: str, num_negatives: int | None = None) -> str:
    """Row label in the comparison table (e.g. ``SASRec+ 3000``)."""
    if model == "sasrec":
        return {"bce": "SASRec", "full_ce": "SASRec+"}.get(loss, f"SASRec+ {num_negatives}")
    return {"bprmf": "BPR-MF", "gru4rec": "GRU4Rec", "bert4rec": "BERT4Rec"}[model]
