"""Epoch loop with validation-driven early stopping and best-weight restore."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import LeaveOneOutSplit, causal_batches, masked_batches, sample_validation_users
from .evaluator import metrics_from_ranks, user_ranks
from .losses import LossSpec, bce_loss, catalog_cross_entropy, item_scores, sample_negatives, sampled_ce_loss
from .models import BPRMF, ModelConfig, build_model
from .optim import Adam, AdamState

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    validation_user_cap: int = 10000
    validation_seed: int = 0
    eval_cutoff_for_stopping: int = 10
    bprmf_reg: float = 0.01

    def __post_init__(self):
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")
        if isinstance(self.loss, dict):
            self.loss = LossSpec(**self.loss)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = asdict(self.loss)
        return d


@dataclass
class EpochRecord:
    index: int
    train_loss: float
    val_ndcg10: float
    elapsed_s: float
    train_s: float


@dataclass
class TrainRecord:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_reason: str = ""

    @property
    def best_metric(self) -> float:
        return self.epochs[self.best_epoch - 1].val_ndcg10 if self.best_epoch else float("nan")

    def deterministic_view(self) -> dict:
        """Everything except wall-clock columns."""
        return {"epochs": [{"index": e.index, "train_loss": e.train_loss, "val_ndcg10": e.val_ndcg10}
                           for e in self.epochs],
                "best_epoch": self.best_epoch, "stopped_reason": self.stopped_reason}


class EarlyStopping:
    """Track the best epoch (earliest on ties) and stop ``patience`` epochs after it."""

    def __init__(self, patience: int, max_epochs: int):
        self.patience = patience
        self.max_epochs = max_epochs
        self.best_epoch = 0
        self.best_metric = -math.inf

    def update(self, epoch: int, metric: float) -> bool:
        if metric > self.best_metric:
            self.best_metric, self.best_epoch = metric, epoch
            return True
        return False

    def stop_reason(self, epoch: int) -> str | None:
        if epoch - self.best_epoch >= self.patience:
            return "patience"
        if epoch >= self.max_epochs:
            return "max_epochs"
        return None

    def state(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_metric": self.best_metric}

    def load(self, state: dict):
        self.best_epoch, self.best_metric = state["best_epoch"], state["best_metric"]


def validate_epoch(model, split: LeaveOneOutSplit, user_subset, k: int = 10) -> float:
    """Mean NDCG@k on the validation targets of ``user_subset`` (full catalog)."""
    user_subset = np.asarray(user_subset)
    if user_subset.size == 0:
        raise ValueError("validation user subset is empty")
    ranks = user_ranks(model, split, "validation", users=user_subset)
    return metrics_from_ranks(ranks, (k,))[f"ndcg{k}"]


def batch_loss(model, batch, loss: LossSpec, split: LeaveOneOutSplit, rng: np.random.Generator) -> T.DiffArray:
    """Loss of one batch under the configured objective, averaged over valid positions."""
    hidden = model.hidden_states(batch.inputs, train=True, rng=rng)
    B, L, d = hidden.shape
    flat = np.flatnonzero(batch.valid_mask.reshape(-1))
    h = T.take_rows(T.reshape(hidden, (B * L, d)), flat)
    targets = batch.targets.reshape(-1)[flat]
    table = model.item_table
    if loss.kind == "full_ce":
        return catalog_cross_entropy(h, table, targets)
    histories = None
    if loss.scope == "exclude_user_history":
        histories = [split.train_prefix[u] for u in batch.users[flat // L]]
    negatives = sample_negatives(targets, loss.negatives, loss.scope, rng, model.num_items,
                                 histories=histories, shared=loss.shared_negatives)
    scores = item_scores(h, table, np.concatenate([targets[:, None], negatives], axis=1))
    if loss.kind == "bce":
        return bce_loss(T.take(scores, (slice(None), 0)), T.take(scores, (slice(None), 1)))
    return sampled_ce_loss(T.take(scores, (slice(None), 0)), T.take(scores, (slice(None), slice(1, None))),
                           negatives != targets[:, None])


def _batches(model_config: ModelConfig, train_config: TrainConfig, split, rng):
    if model_config.kind == "bert4rec":
        return masked_batches(split, model_config.max_len, model_config.mask_prob, rng, train_config.batch_size)
    return causal_batches(split, model_config.max_len, train_config.batch_size, rng)


def _snapshot(model) -> dict:
    return {k: p.values.copy() for k, p in model.params.items()}


def _restore(model, values: dict):
    for k, v in values.items():
        model.params[k].values = v.copy()


def _optimizer_state(opt: Adam | None) -> dict | None:
    if opt is None:
        return None
    first = next(iter(opt.states.values()))
    return {"lr": opt.lr, "step_count": first.step_count, "beta1": opt.beta1, "beta2": opt.beta2,
            "epsilon": opt.epsilon, "m": {k: s.first_moment for k, s in opt.states.items()},
            "v": {k: s.second_moment for k, s in opt.states.items()}}


def _load_optimizer(opt: Adam, state: dict):
    for k, s in opt.states.items():
        opt.states[k] = AdamState(state["m"][k].copy(), state["v"][k].copy(), state["step_count"],
                                  state["beta1"], state["beta2"], state["epsilon"])


def progress_line(rec: EpochRecord) -> str:
    return f"epoch={rec.index} loss={rec.train_loss:.6f} val_ndcg10={rec.val_ndcg10:.6f} elapsed_s={rec.elapsed_s:.3f}"


def train(model_config: ModelConfig, train_config: TrainConfig, split: LeaveOneOutSplit, *,
          validation_users=None, validator: Callable | None = None, checkpoint_path=None,
          resume_from=None, stop_after_epoch: int | None = None,
          progress: Callable[[str], None] | None = None):
    """Train until early stopping; return ``(model with best-epoch weights, TrainRecord)``.

    ``validator(model, epoch)`` replaces the validation metric (used to drive
    synthetic traces).  ``checkpoint_path`` receives the full training state
    after every epoch; ``resume_from`` continues from such a file.
    ``stop_after_epoch`` interrupts the run after that epoch without restoring.
    """
    cfg, tc = model_config, train_config
    if cfg.num_items != split.num_items:
        raise ValueError(f"model catalog size {cfg.num_items} != dataset catalog size {split.num_items}")
    if cfg.kind != "bprmf":
        tc.loss.validate(split.num_items)
    model = build_model(cfg, seed=tc.seed, num_users=split.num_users)
    opt = None if isinstance(model, BPRMF) else Adam(model.params, lr=tc.learning_rate)
    rng = np.random.default_rng(tc.seed + 1)
    if validation_users is None:
        validation_users = sample_validation_users(split, tc.validation_user_cap, tc.validation_seed)
    stopper = EarlyStopping(tc.patience, tc.max_epochs)
    record = TrainRecord()
    best = _snapshot(model)
    start_epoch = 1
    elapsed = train_elapsed = 0.0

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        _restore(model, ckpt.params)
        if opt is not None:
            _load_optimizer(opt, ckpt.optimizer)
        rng.bit_generator.state = ckpt.rng_state
        stopper.load(ckpt.stopper)
        best = ckpt.best_params
        record.epochs = [EpochRecord(**e) for e in ckpt.extra["epochs"]]
        record.best_epoch = stopper.best_epoch
        start_epoch = ckpt.epoch + 1
        if record.epochs:
            elapsed, train_elapsed = record.epochs[-1].elapsed_s, record.epochs[-1].train_s

    reason = stopper.stop_reason(start_epoch - 1) if start_epoch > 1 else None
    epoch = start_epoch - 1
    clock = time.perf_counter()
    while reason is None:
        epoch += 1
        tick = time.perf_counter()
        if isinstance(model, BPRMF):
            mean_loss = model.fit_epoch(split, rng, tc.learning_rate, tc.bprmf_reg)
        else:
            losses = []
            for b, batch in enumerate(_batches(cfg, tc, split, rng)):
                opt.zero_grad()
                loss = batch_loss(model, batch, tc.loss, split, rng)
                value = float(loss.values)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite training loss {value} at epoch {epoch}, batch {b}")
                loss.backward()
                opt.step()
                losses.append(value)
            mean_loss = float(np.mean(losses))
        train_elapsed += time.perf_counter() - tick
        metric = validator(model, epoch) if validator is not None else validate_epoch(
            model, split, validation_users, tc.eval_cutoff_for_stopping)
        now = time.perf_counter()
        elapsed += now - clock
        clock = now
        rec = EpochRecord(epoch, mean_loss, float(metric), elapsed, train_elapsed)
        record.epochs.append(rec)
        if stopper.update(epoch, metric):
            best = _snapshot(model)
        record.best_epoch = stopper.best_epoch
        if progress is not None:
            progress(progress_line(rec))
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, Checkpoint(
                config={"model": cfg.to_dict(), "train": tc.to_dict()}, params=_snapshot(model), epoch=epoch,
                history=record.deterministic_view()["epochs"], optimizer=_optimizer_state(opt),
                best_params=best, rng_state=copy.deepcopy(rng.bit_generator.state), stopper=stopper.state(),
                extra={"epochs": [asdict(e) for e in record.epochs]}))
        reason = stopper.stop_reason(epoch)
        if stop_after_epoch is not None and epoch >= stop_after_epoch and reason is None:
            record.stopped_reason = "interrupted"
            return model, record

    record.stopped_reason = reason
    _restore(model, best)
    return model, record


def time_epochs(record: TrainRecord) -> dict:
    if not record.epochs:
        raise ValueError("empty training record")
    total = record.epochs[-1].elapsed_s
    to_best = record.epochs[record.best_epoch - 1].elapsed_s if record.best_epoch else total
    return {"total_seconds": total, "train_only_seconds": record.epochs[-1].train_s,
            "seconds_to_best": to_best, "mean_epoch_seconds": total / len(record.epochs),
            "epochs": len(record.epochs)}
