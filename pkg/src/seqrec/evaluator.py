"""Unsampled leave-one-out ranking metrics over the full catalog."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .data import LeaveOneOutSplit

CUTOFFS = (10, 100)
TIE_POLICY = "optimistic"


def rank_of_target(scores: np.ndarray, target: int) -> int:
    """1 + number of items scoring strictly higher than ``target`` (1-based id)."""
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    if not 1 <= target <= scores.size:
        raise ValueError(f"target {target} outside [1, {scores.size}]")
    return 1 + int(np.count_nonzero(scores > scores[target - 1]))


def metric_at_k(rank: int, k: int, kind: str) -> float:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    if rank > k:
        return 0.0
    if kind == "hr":
        return 1.0
    if kind == "ndcg":
        return 1.0 / math.log2(rank + 1)
    raise ValueError(f"unknown metric kind {kind!r}")


def ranks_from_scores(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rank_of_target` for a (n, V) score matrix; -inf entries are allowed."""
    if np.isnan(scores).any():
        raise ValueError("scores contain NaN")
    target_scores = scores[np.arange(len(targets)), targets - 1]
    return 1 + np.count_nonzero(scores > target_scores[:, None], axis=1)


def metrics_from_ranks(ranks: np.ndarray, cutoffs=CUTOFFS) -> dict:
    ranks = np.asarray(ranks)
    out = {}
    for k in cutoffs:
        hit = ranks <= k
        out[f"hr{k}"] = float(hit.mean()) if ranks.size else 0.0
        out[f"ndcg{k}"] = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean()) if ranks.size else 0.0
    return out


@dataclass
class MetricsReport:
    metrics: dict
    num_users: int
    filter_seen: bool
    model: str = ""
    dataset: str = ""
    seed: int | list | None = None
    train_seconds: float | None = None
    best_epoch: int | None = None
    phase: str = "test"
    tie_policy: str = TIE_POLICY
    extra: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.metrics[key]

    def to_dict(self) -> dict:
        d = {key: self.metrics.get(key) for key in ("hr10", "hr100", "ndcg10", "ndcg100")}
        d.update(train_seconds=self.train_seconds, best_epoch=self.best_epoch, filter_seen=self.filter_seen,
                 tie_policy=self.tie_policy, model=self.model, dataset=self.dataset, seed=self.seed,
                 phase=self.phase, num_users=self.num_users)
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        known = {"hr10", "hr100", "ndcg10", "ndcg100", "train_seconds", "best_epoch", "filter_seen",
                 "tie_policy", "model", "dataset", "seed", "phase", "num_users"}
        missing = {"hr10", "hr100", "ndcg10", "ndcg100", "model"} - d.keys()
        if missing:
            raise ValueError(f"report is missing keys {sorted(missing)}")
        return cls(metrics={k: d[k] for k in ("hr10", "hr100", "ndcg10", "ndcg100")},
                   num_users=d.get("num_users", 0), filter_seen=d.get("filter_seen", False),
                   model=d["model"], dataset=d.get("dataset", ""), seed=d.get("seed"),
                   train_seconds=d.get("train_seconds"), best_epoch=d.get("best_epoch"),
                   phase=d.get("phase", "test"), tie_policy=d.get("tie_policy", TIE_POLICY),
                   extra={k: v for k, v in d.items() if k not in known})


def user_ranks(model, split: LeaveOneOutSplit, phase: str, users=None, filter_seen: bool = False,
               batch_size: int = 256) -> np.ndarray:
    """Rank of the held-out item for each user against the full catalog."""
    if phase not in ("validation", "test"):
        raise ValueError(f"unknown phase {phase!r}")
    users = np.arange(split.num_users) if users is None else np.asarray(users, dtype=np.int64)
    ranks = np.empty(len(users), dtype=np.int64)
    for lo in range(0, len(users), batch_size):
        chunk = users[lo:lo + batch_size]
        contexts = [split.context(u, phase) for u in chunk]
        targets = np.array([split.target(u, phase) for u in chunk], dtype=np.int64)
        scores = model.score_users(chunk, contexts).astype(np.float64)
        if filter_seen:
            for row, ctx in enumerate(contexts):
                scores[row, np.asarray(ctx, dtype=np.int64) - 1] = -np.inf
        ranks[lo:lo + len(chunk)] = ranks_from_scores(scores, targets)
    return ranks


def evaluate(model, split: LeaveOneOutSplit, /, phase: str = "test", cutoffs=CUTOFFS, filter_seen: bool = False,
             users=None, **labels) -> MetricsReport:
    """HR@k / NDCG@k means over users; ``labels`` fill the report's descriptive fields."""
    ranks = user_ranks(model, split, phase, users=users, filter_seen=filter_seen)
    return MetricsReport(metrics=metrics_from_ranks(ranks, cutoffs), num_users=len(ranks),
                         filter_seen=filter_seen, phase=phase, **labels)


# ----------------------------------------------------------------- comparison table

COLUMNS = ("Dataset", "Model", "HR@10", "HR@100", "NDCG@10", "NDCG@100", "Training time", "Best epoch")
_KEYS = ("dataset", "model", "hr10", "hr100", "ndcg10", "ndcg100", "train_seconds", "best_epoch")
METRIC_KEYS = ("hr10", "hr100", "ndcg10", "ndcg100")
_DATASET_ORDER = ("ml-1m", "ml-20m", "steam", "beauty", "yelp")
_MODEL_ORDER = ("BPR-MF", "GRU4Rec", "BERT4Rec", "SASRec", "SASRec+")


def _model_rank(name: str):
    match = re.fullmatch(r"SASRec\+ (\d+)", name)
    if match:
        return (len(_MODEL_ORDER), int(match.group(1)), name)
    if name in _MODEL_ORDER:
        return (_MODEL_ORDER.index(name), 0, name)
    return (len(_MODEL_ORDER) + 1, 0, name)


def _dataset_rank(name: str):
    key = name.lower()
    return (_DATASET_ORDER.index(key), name) if key in _DATASET_ORDER else (len(_DATASET_ORDER), name)


@dataclass
class ComparisonTable:
    rows: list  # dicts keyed by _KEYS
    marks: dict  # (row index, metric key) -> "best" | "second"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(_KEYS) + ["marks"])
        for i, row in enumerate(self.rows):
            marks = ";".join(f"{k}={self.marks[(i, k)]}" for k in METRIC_KEYS if (i, k) in self.marks)
            writer.writerow([_fmt(row[k]) for k in _KEYS] + [marks])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ComparisonTable":
        reader = csv.DictReader(io.StringIO(text))
        rows, marks = [], {}
        for i, rec in enumerate(reader):
            row = {"dataset": rec["dataset"], "model": rec["model"]}
            for k in METRIC_KEYS:
                row[k] = float(rec[k])
            row["train_seconds"] = float(rec["train_seconds"]) if rec["train_seconds"] else None
            row["best_epoch"] = int(rec["best_epoch"]) if rec["best_epoch"] else None
            rows.append(row)
            for part in filter(None, rec["marks"].split(";")):
                key, value = part.split("=")
                marks[(i, key)] = value
        return cls(rows, marks)

    def to_text(self) -> str:
        """Fixed-width table; best per column in **bold**, second best _underlined_."""
        cells = [list(COLUMNS)]
        for i, row in enumerate(self.rows):
            line = [row["dataset"], row["model"]]
            for k in METRIC_KEYS:
                v = f"{row[k]:.4f}"
                mark = self.marks.get((i, k))
                line.append(f"**{v}**" if mark == "best" else f"_{v}_" if mark == "second" else v)
            line.append("" if row["train_seconds"] is None else f"{row['train_seconds']:.0f}")
            line.append("" if row["best_epoch"] is None else str(row["best_epoch"]))
            cells.append(line)
        widths = [max(len(r[c]) for r in cells) for c in range(len(COLUMNS))]
        return "\n".join(" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def comparison_table(reports) -> ComparisonTable:
    """Rows grouped by dataset in canonical order, best/second-best marked per dataset."""
    reports = list(reports)
    if not reports:
        raise ValueError("comparison_table needs at least one report")
    rows = []
    for r in reports:
        d = r.to_dict() if isinstance(r, MetricsReport) else dict(r)
        rows.append({k: d.get(k) for k in _KEYS})
    rows.sort(key=lambda row: (_dataset_rank(row["dataset"] or ""), _model_rank(row["model"] or "")))
    marks = {}
    groups: dict = {}
    for i, row in enumerate(rows):
        groups.setdefault(row["dataset"], []).append(i)
    for members in groups.values():
        for k in METRIC_KEYS:
            values = sorted({rows[i][k] for i in members}, reverse=True)
            for i in members:
                if rows[i][k] == values[0]:
                    marks[(i, k)] = "best"
                elif len(values) > 1 and rows[i][k] == values[1]:
                    marks[(i, k)] = "second"
    return ComparisonTable(rows, marks)
