"""Training losses and negative sampling.

Three objectives over next-item scores:

* ``bce``: per position, logistic loss on the target's score against one
  sampled negative.
* ``full_ce``: softmax cross-entropy over the whole catalog.
* ``sampled_ce``: softmax cross-entropy over the target plus N sampled
  negatives; a negative equal to the target is dropped from the denominator.

All reduce by the mean over valid positions of the whole batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import DiffArray, _result, _sigmoid, as_diff, logsumexp

logger = logging.getLogger(__name__)

LOSS_KINDS = ("bce", "full_ce", "sampled_ce")
SCOPES = ("exclude_target", "exclude_user_history")
_CHUNK_ROWS = 2048


@dataclass(frozen=True)
class LossSpec:
    kind: str = "full_ce"
    num_negatives: int | None = None
    negative_scope: str | None = None
    shared_negatives: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.kind == "sampled_ce" and (self.num_negatives is None or self.num_negatives < 1):
            raise ValueError("sampled_ce needs num_negatives >= 1")
        if self.negative_scope is not None and self.negative_scope not in SCOPES:
            raise ValueError(f"unknown negative scope {self.negative_scope!r}")

    @property
    def negatives(self) -> int:
        return {"bce": 1, "full_ce": 0}.get(self.kind, self.num_negatives or 0)

    @property
    def scope(self) -> str:
        if self.negative_scope is not None:
            return self.negative_scope
        return "exclude_user_history" if self.kind == "bce" else "exclude_target"

    def validate(self, num_items: int):
        if self.kind == "sampled_ce" and self.num_negatives >= num_items:
            raise ValueError(f"num_negatives={self.num_negatives} must be < catalog size {num_items}")

    def describe(self) -> dict:
        return {"loss": self.kind, "num_negatives": self.negatives, "negative_scope": self.scope,
                "shared_negatives": self.shared_negatives}


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def bce_loss(pos_scores, neg_scores) -> DiffArray:
    """Mean of ``-log σ(pos) - log(1 - σ(neg))`` via stable softplus."""
    pos = as_diff(pos_scores)
    neg = as_diff(neg_scores, dtype=pos.dtype)
    if pos.values.size == 0:
        raise ValueError("bce_loss needs at least one valid position")
    if pos.shape != neg.shape:
        raise ValueError("bce_loss expects one negative per positive position")
    count = pos.values.size
    value = (_softplus(-pos.values) + _softplus(neg.values)).sum() / count

    def backward(g):
        return -g * _sigmoid(-pos.values) / count, g * _sigmoid(neg.values) / count

    return _result(np.asarray(value, dtype=pos.dtype), (pos, neg), backward)


def full_ce_loss(logits, targets) -> DiffArray:
    """Mean softmax cross-entropy; column ``j`` of ``logits`` scores item ``j + 1``."""
    logits = as_diff(logits)
    targets = np.asarray(targets, dtype=np.int64)
    count, num_items = logits.shape
    if count == 0:
        raise ValueError("full_ce_loss needs at least one valid position")
    if targets.min() < 1 or targets.max() > num_items:
        raise ValueError(f"targets must lie in [1, {num_items}]")
    rows = np.arange(count)
    lse = logsumexp(logits.values, axis=1)
    value = (lse - logits.values[rows, targets - 1]).sum() / count

    def backward(g):
        probs = np.exp(logits.values - lse[:, None])
        probs[rows, targets - 1] -= 1.0
        return (probs * (g / count),)

    return _result(np.asarray(value, dtype=logits.dtype), (logits,), backward)


def sampled_ce_loss(pos_scores, neg_scores, neg_valid: np.ndarray | None = None) -> DiffArray:
    """Mean of ``-log(e^pos / (e^pos + Σ_valid e^neg))`` over positions.

    ``neg_valid`` marks which negatives enter the denominator (False where a
    draw collides with the position's target).
    """
    pos = as_diff(pos_scores)
    neg = as_diff(neg_scores, dtype=pos.dtype)
    pos_v = pos.values.reshape(-1)
    neg_v = neg.values.reshape(pos_v.size, -1)
    count = pos_v.size
    if count == 0:
        raise ValueError("sampled_ce_loss needs at least one valid position")
    valid = np.ones(neg_v.shape, dtype=bool) if neg_valid is None else np.asarray(neg_valid, dtype=bool).reshape(neg_v.shape)
    empty = ~valid.any(axis=1)
    if empty.any():
        logger.debug("%d positions have no usable negatives; their loss is 0", int(empty.sum()))
    joint = np.concatenate([pos_v[:, None], np.where(valid, neg_v, -np.inf)], axis=1)
    lse = logsumexp(joint, axis=1)
    value = (lse - pos_v).sum() / count

    def backward(g):
        probs = np.exp(joint - lse[:, None])
        scale = g / count
        gp = (probs[:, 0] - 1.0) * scale
        gn = probs[:, 1:] * scale
        return gp.reshape(pos.shape), gn.reshape(neg.shape)

    return _result(np.asarray(value, dtype=pos.dtype), (pos, neg), backward)


# ----------------------------------------------------------------- negatives

def sample_negatives(targets: np.ndarray, num_negatives: int, scope: str, rng, num_items: int,
                     histories: list | None = None, shared: bool = False) -> np.ndarray:
    """Uniform draws from ``[1, V]`` with replacement, rejecting excluded items.

    ``targets`` holds one target per position; ``histories[p]`` the item ids
    excluded for position ``p`` under ``exclude_user_history`` (pass one array
    per position, or share array objects between positions of one user).
    With ``shared`` one set of draws is reused by every position and collisions
    are left for the loss to mask.
    """
    if scope not in SCOPES:
        raise ValueError(f"unknown negative scope {scope!r}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    count = targets.size
    if shared:
        draws = rng.integers(1, num_items + 1, size=num_negatives)
        return np.broadcast_to(draws, (count, num_negatives)).copy()

    if scope == "exclude_target":
        if num_items < 2 and count:
            raise ValueError("exclusion set covers the whole catalog")
        excluded = None
    else:
        if histories is None:
            raise ValueError("exclude_user_history requires per-position histories")
        excluded, row_of = _history_table(histories, num_items)
    draws = rng.integers(1, num_items + 1, size=(count, num_negatives))
    while True:
        if excluded is None:
            bad = draws == targets[:, None]
        else:
            bad = excluded[row_of[:, None], draws]
        n_bad = int(bad.sum())
        if n_bad == 0:
            return draws
        draws[bad] = rng.integers(1, num_items + 1, size=n_bad)


def _history_table(histories: list, num_items: int):
    rows, row_of, table = {}, np.empty(len(histories), dtype=np.int64), []
    for p, hist in enumerate(histories):
        key = id(hist)
        if key not in rows:
            seen = np.zeros(num_items + 2, dtype=bool)
            seen[np.asarray(hist, dtype=np.int64)] = True
            if seen[1:num_items + 1].all():
                raise ValueError("exclusion set covers the whole catalog")
            rows[key] = len(table)
            table.append(seen)
        row_of[p] = rows[key]
    return (np.stack(table) if table else np.zeros((0, num_items + 2), dtype=bool)), row_of


# ----------------------------------------------------------------- fused scoring heads

def item_scores(hidden, table, ids: np.ndarray) -> DiffArray:
    """``out[p, k] = hidden[p] · table[ids[p, k]]`` without materialising large gathers.

    Wide id sets go through a dense product with the full table (BLAS),
    narrow ones through an explicit gather.
    """
    hidden = as_diff(hidden)
    table = as_diff(table, dtype=hidden.dtype)
    ids = np.asarray(ids, dtype=np.int64)
    count, width = ids.shape
    dense = width * 20 > table.shape[0]
    out = np.empty((count, width), dtype=hidden.dtype)
    for lo in range(0, count, _CHUNK_ROWS):
        hi = min(lo + _CHUNK_ROWS, count)
        h = hidden.values[lo:hi]
        if dense:
            out[lo:hi] = np.take_along_axis(h @ table.values.T, ids[lo:hi], axis=1)
        else:
            out[lo:hi] = np.einsum("pd,pkd->pk", h, table.values[ids[lo:hi]])

    def backward(g):
        gh = np.empty_like(hidden.values)
        gt = np.zeros_like(table.values)
        for lo in range(0, count, _CHUNK_ROWS):
            hi = min(lo + _CHUNK_ROWS, count)
            h, gc, ic = hidden.values[lo:hi], g[lo:hi], ids[lo:hi]
            if dense:
                rows = table.shape[0]
                flat = (np.arange(hi - lo)[:, None] * rows + ic).reshape(-1)
                scatter = np.bincount(flat, weights=gc.reshape(-1), minlength=(hi - lo) * rows)
                scatter = scatter.reshape(hi - lo, rows).astype(g.dtype, copy=False)
                gh[lo:hi] = scatter @ table.values
                gt += scatter.T @ h
            else:
                gh[lo:hi] = np.einsum("pk,pkd->pd", gc, table.values[ic])
                np.add.at(gt, ic.reshape(-1), (gc[:, :, None] * h[:, None, :]).reshape(-1, h.shape[1]))
        return gh, gt

    return _result(out, (hidden, table), backward)


def catalog_cross_entropy(hidden, table, targets, cache_bytes: int = 1 << 30) -> DiffArray:
    """Full-catalog cross-entropy from hidden states and the tied item table.

    Equivalent to ``full_ce_loss(hidden @ table[1:V+1].T, targets)`` but
    processed in row chunks.  Softmax probabilities are kept for the backward
    pass when they fit in ``cache_bytes``, otherwise recomputed.
    """
    hidden = as_diff(hidden)
    table = as_diff(table, dtype=hidden.dtype)
    targets = np.asarray(targets, dtype=np.int64)
    num_items = table.shape[0] - 2
    count = hidden.shape[0]
    if count == 0:
        raise ValueError("catalog_cross_entropy needs at least one valid position")
    if targets.min() < 1 or targets.max() > num_items:
        raise ValueError(f"targets must lie in [1, {num_items}]")
    items = table.values[1:num_items + 1]
    keep = count * num_items * hidden.dtype.itemsize <= cache_bytes
    cached, lse = [], np.empty(count, dtype=hidden.dtype)
    total = 0.0
    for lo in range(0, count, _CHUNK_ROWS):
        hi = min(lo + _CHUNK_ROWS, count)
        h = hidden.values[lo:hi]
        target_logits = np.einsum("pd,pd->p", h, items[targets[lo:hi] - 1])
        probs, chunk_lse = _softmax_rows(h @ items.T)
        lse[lo:hi] = chunk_lse
        total += float((chunk_lse - target_logits).sum())
        if keep:
            cached.append(probs)

    def backward(g):
        scale = g / count
        gh = np.empty_like(hidden.values)
        gt = np.zeros_like(table.values)
        for n, lo in enumerate(range(0, count, _CHUNK_ROWS)):
            hi = min(lo + _CHUNK_ROWS, count)
            h = hidden.values[lo:hi]
            if keep:
                probs = cached[n]
            else:
                probs = np.exp(h @ items.T - lse[lo:hi, None])
            probs[np.arange(hi - lo), targets[lo:hi] - 1] -= 1.0
            probs *= scale
            gh[lo:hi] = probs @ items
            gt[1:num_items + 1] += probs.T @ h
        cached.clear()
        return gh, gt

    return _result(np.asarray(total / count, dtype=hidden.dtype), (hidden, table), backward)


def _softmax_rows(logits: np.ndarray):
    """In-place row softmax; returns (probabilities, log-sum-exp)."""
    m = logits.max(axis=1, keepdims=True)
    logits -= m
    np.exp(logits, out=logits)
    z = logits.sum(axis=1, keepdims=True)
    logits /= z
    return logits, (np.log(z) + m)[:, 0]
