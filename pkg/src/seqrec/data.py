"""Interaction ingestion, user filtering, leave-one-out splits and batching.

Item ids are remapped to ``1..V``; id ``0`` is padding and ``V + 1`` the
mask token.  Users are indexed ``0..U-1`` in order of first appearance.
Sequences are left-padded so the most recent item sits at the last slot.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FORMATS = ("timestamped-csv", "preordered-pairs")


class DataFormatError(ValueError):
    """Malformed or empty interaction file."""


@dataclass(frozen=True, slots=True)
class Interaction:
    user: str
    item: str
    timestamp: int | None = None

    def __post_init__(self):
        if not self.user or not self.item:
            raise ValueError("user and item ids must be non-empty")


def load_interactions(path, format: str = "timestamped-csv") -> list[Interaction]:
    """Parse an interaction log.

    ``timestamped-csv``: ``user,item,timestamp`` rows; a first row whose third
    field is non-numeric is treated as a header.  ``preordered-pairs``:
    whitespace-separated ``user item`` rows already in per-user order.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"interaction file not found: {path}")
    out: list[Interaction] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if format == "timestamped-csv":
                fields = [f.strip() for f in line.split(",")]
                if len(fields) != 3:
                    raise DataFormatError(f"{path}, line {lineno}: expected 3 comma-separated fields, got {len(fields)}")
                try:
                    ts = int(fields[2])
                except ValueError:
                    if lineno == 1 and not out:
                        continue  # header row
                    raise DataFormatError(f"{path}, line {lineno}: timestamp {fields[2]!r} is not an integer") from None
                user, item = fields[0], fields[1]
            else:
                fields = line.split()
                if len(fields) != 2:
                    raise DataFormatError(f"{path}, line {lineno}: expected 2 whitespace-separated fields, got {len(fields)}")
                user, item = fields
                ts = None
            if not user or not item:
                raise DataFormatError(f"{path}, line {lineno}: empty user or item id")
            out.append(Interaction(user, item, ts))
    if not out:
        raise DataFormatError(f"{path}: no interactions found")
    return out


@dataclass(frozen=True, eq=False)
class SequenceDataset:
    sequences: tuple  # per user index: int64 array of item indices in [1, V]
    user_ids: tuple  # user index -> raw id
    item_ids: tuple  # item index -> raw id; position 0 is the padding placeholder

    @property
    def num_users(self) -> int:
        return len(self.sequences)

    @property
    def num_items(self) -> int:
        return len(self.item_ids) - 1

    @property
    def mask_token(self) -> int:
        return self.num_items + 1

    @property
    def num_interactions(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    @property
    def avg_len(self) -> float:
        return self.num_interactions / self.num_users

    @property
    def density(self) -> float:
        return self.num_interactions / (self.num_users * self.num_items)

    def user_index(self, raw: str) -> int:
        return self._user_lookup()[raw]

    def item_index(self, raw: str) -> int:
        return self._item_lookup()[raw]

    def _user_lookup(self) -> dict:
        cached = self.__dict__.get("_users")
        if cached is None:
            cached = {u: i for i, u in enumerate(self.user_ids)}
            object.__setattr__(self, "_users", cached)
        return cached

    def _item_lookup(self) -> dict:
        cached = self.__dict__.get("_items")
        if cached is None:
            cached = {it: i for i, it in enumerate(self.item_ids) if i > 0}
            object.__setattr__(self, "_items", cached)
        return cached

    def stats(self) -> dict:
        return {
            "users": self.num_users,
            "items": self.num_items,
            "interactions": self.num_interactions,
            "avg_len": self.avg_len,
            "density": self.density,
        }

    def stats_json(self) -> str:
        return json.dumps(self.stats(), indent=2, sort_keys=False) + "\n"

    def write_pairs(self, path):
        """Write the canonical preordered-pairs file (raw ids, per-user order)."""
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for u, seq in enumerate(self.sequences):
                raw_user = self.user_ids[u]
                fh.writelines(f"{raw_user} {self.item_ids[i]}\n" for i in seq)


def build_dataset(interactions: Sequence[Interaction], min_per_user: int = 5) -> SequenceDataset:
    """Group by user, order by timestamp (stable), drop short users, remap ids."""
    if not interactions:
        raise ValueError("no interactions to build a dataset from")
    grouped: dict[str, list] = {}
    for order, it in enumerate(interactions):
        grouped.setdefault(it.user, []).append((it.timestamp, order, it.item))

    user_ids, raw_sequences = [], []
    for user, rows in grouped.items():
        if len(rows) < min_per_user:
            continue
        if rows[0][0] is not None:
            rows.sort(key=lambda r: (r[0], r[1]))
        user_ids.append(user)
        raw_sequences.append([r[2] for r in rows])
    if not user_ids:
        raise ValueError(f"all users have fewer than {min_per_user} interactions")

    item_lookup: dict[str, int] = {}
    item_ids = [""]
    sequences = []
    for raw_seq in raw_sequences:
        idx = np.empty(len(raw_seq), dtype=np.int64)
        for j, raw in enumerate(raw_seq):
            code = item_lookup.get(raw)
            if code is None:
                code = item_lookup[raw] = len(item_ids)
                item_ids.append(raw)
            idx[j] = code
        sequences.append(idx)
    dropped = len(grouped) - len(user_ids)
    if dropped:
        logger.info("dropped %d users with fewer than %d interactions", dropped, min_per_user)
    return SequenceDataset(tuple(sequences), tuple(user_ids), tuple(item_ids))


def load_dataset(path, format: str = "timestamped-csv", min_per_user: int = 5) -> SequenceDataset:
    return build_dataset(load_interactions(path, format), min_per_user)


def subsample_users(dataset: SequenceDataset, count: int, seed: int) -> SequenceDataset:
    """Keep ``count`` uniformly chosen users (original order) and recompact item ids."""
    if count >= dataset.num_users:
        return dataset
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(dataset.num_users, size=count, replace=False))
    rows = [Interaction(dataset.user_ids[u], dataset.item_ids[i])
            for u in keep for i in dataset.sequences[u]]
    return build_dataset(rows, min_per_user=1)


@dataclass(frozen=True, eq=False)
class LeaveOneOutSplit:
    train_prefix: tuple  # per user: int64 array, all but the last two items
    val_target: np.ndarray
    test_target: np.ndarray
    num_items: int

    @property
    def num_users(self) -> int:
        return len(self.train_prefix)

    @property
    def mask_token(self) -> int:
        return self.num_items + 1

    def context(self, user: int, phase: str) -> np.ndarray:
        """Model input history for a phase: train prefix, plus the validation item at test time."""
        if phase == "validation":
            return self.train_prefix[user]
        if phase == "test":
            return np.append(self.train_prefix[user], self.val_target[user])
        raise ValueError(f"unknown phase {phase!r}")

    def target(self, user: int, phase: str) -> int:
        return int(self.val_target[user] if phase == "validation" else self.test_target[user])


def split_leave_one_out(dataset: SequenceDataset) -> LeaveOneOutSplit:
    prefixes, val, test = [], [], []
    for u, seq in enumerate(dataset.sequences):
        if len(seq) < 3:
            raise ValueError(f"user {dataset.user_ids[u]!r} has {len(seq)} items; leave-one-out needs at least 3")
        prefixes.append(seq[:-2])
        val.append(seq[-2])
        test.append(seq[-1])
    return LeaveOneOutSplit(tuple(prefixes), np.array(val, dtype=np.int64),
                            np.array(test, dtype=np.int64), dataset.num_items)


@dataclass
class Batch:
    inputs: np.ndarray  # (B, L) item ids, left-padded with 0
    targets: np.ndarray  # (B, L) item ids, 0 where no loss term
    valid_mask: np.ndarray  # (B, L) bool
    users: np.ndarray  # (B,) user indices

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def left_pad(sequences: Sequence[np.ndarray], length: int) -> np.ndarray:
    """Stack the last ``length`` items of each sequence, right-aligned, zero-padded."""
    out = np.zeros((len(sequences), length), dtype=np.int64)
    for row, seq in enumerate(sequences):
        seq = seq[-length:]
        if len(seq):
            out[row, length - len(seq):] = seq
    return out


def causal_batches(split: LeaveOneOutSplit, L: int, batch_size: int, shuffle_seed) -> Iterator[Batch]:
    """Next-item batches: inputs are the last L+1 prefix items minus the final one, targets shifted by one."""
    if L < 2:
        raise ValueError("maximum sequence length must be at least 2")
    rng = _rng(shuffle_seed)
    order = rng.permutation(split.num_users)
    for start in range(0, len(order), batch_size):
        users = order[start:start + batch_size]
        windows = [split.train_prefix[u][-(L + 1):] for u in users]
        inputs = left_pad([w[:-1] for w in windows], L)
        targets = left_pad([w[1:] for w in windows], L)
        yield Batch(inputs, targets, targets > 0, users)


def masked_batches(split: LeaveOneOutSplit, L: int, mask_prob: float = 0.2, seed=0,
                   batch_size: int = 128) -> Iterator[Batch]:
    """Masked-item batches: each real position becomes the mask token with probability ``mask_prob``."""
    if not 0.0 < mask_prob < 1.0:
        raise ValueError(f"mask_prob must be in (0, 1), got {mask_prob}")
    rng = _rng(seed)
    order = rng.permutation(split.num_users)
    for start in range(0, len(order), batch_size):
        users = order[start:start + batch_size]
        items = left_pad([split.train_prefix[u] for u in users], L)
        real = items > 0
        masked = (rng.random(items.shape) < mask_prob) & real
        empty = ~masked.any(axis=1)
        masked[empty, -1] = True
        inputs = np.where(masked, split.mask_token, items)
        targets = np.where(masked, items, 0)
        yield Batch(inputs, targets, masked, users)


def sample_validation_users(split: LeaveOneOutSplit, count: int = 10000, seed: int = 0) -> np.ndarray:
    """Uniform subset of user indices without replacement, returned sorted."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if count >= split.num_users:
        return np.arange(split.num_users)
    return np.sort(np.random.default_rng(seed).choice(split.num_users, size=count, replace=False))


def synthetic_log(num_users: int = 200, num_items: int = 100, seed: int = 0, min_len: int = 8,
                  max_len: int = 40, follow_prob: float = 0.8) -> list[Interaction]:
    """A timestamped log with strong next-item structure, for smoke tests and demos.

    Each item has a fixed successor; with probability ``follow_prob`` a user's
    next item is the successor of the previous one, otherwise a popularity-
    skewed random item.
    """
    rng = np.random.default_rng(seed)
    successor = rng.permutation(num_items)
    popularity = 1.0 / np.arange(1, num_items + 1) ** 0.8
    popularity /= popularity.sum()
    rows = []
    clock = 0
    for u in range(num_users):
        length = int(rng.integers(min_len, max_len + 1))
        item = int(rng.choice(num_items, p=popularity))
        for _ in range(length):
            clock += 1
            rows.append(Interaction(f"u{u}", f"i{item}", clock))
            if rng.random() < follow_prob:
                item = int(successor[item])
            else:
                item = int(rng.choice(num_items, p=popularity))
    return rows


def write_csv(interactions: Sequence[Interaction], path):
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("user,item,timestamp\n")
        fh.writelines(f"{it.user},{it.item},{it.timestamp}\n" for it in interactions)
