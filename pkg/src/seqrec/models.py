"""Scoring models: SASRec, BERT4Rec, GRU4Rec and BPR-MF.

The three sequential models share an item-embedding table of shape
``(V + 2, d)`` (row 0 padding, row V+1 mask token) that also serves as the
output layer: the score of item ``i`` is ``hidden · item_embeddings[i]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import LeaveOneOutSplit, left_pad
from .tensor import DiffArray, no_grad

KINDS = ("sasrec", "bert4rec", "gru4rec", "bprmf")
BERT_HEADS = ("tied", "projection")


@dataclass
class ModelConfig:
    kind: str
    num_items: int
    hidden_size: int = 64
    num_blocks: int = 2
    num_heads: int = 1
    max_len: int = 200
    dropout_prob: float = 0.1
    mask_prob: float = 0.2
    ffn_multiplier: int | None = None
    bert_head: str = "tied"
    layer_norm_eps: float = 1e-8
    dtype: str = "float64"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")
        if self.bert_head not in BERT_HEADS:
            raise ValueError(f"bert_head must be one of {BERT_HEADS}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def ffn_size(self) -> int:
        mult = self.ffn_multiplier or (4 if self.kind == "bert4rec" else 1)
        return mult * self.hidden_size

    def to_dict(self) -> dict:
        return asdict(self)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def expected_parameter_count(cfg: ModelConfig, num_users: int = 0) -> int:
    """Closed-form parameter count.

    Transformers: ``(V+2)d + Ld + blocks * (4(d²+d) + 4d + 2df + f + d)`` with
    feed-forward width ``f``, plus ``d² + 3d`` for the BERT projection head.
    GRU4Rec: ``(V+2)d + 6d² + 3d``.  BPR-MF: ``(U + V + 1)d``.
    """
    V, d, L, f = cfg.num_items, cfg.hidden_size, cfg.max_len, cfg.ffn_size
    if cfg.kind == "bprmf":
        return (num_users + V + 1) * d
    if cfg.kind == "gru4rec":
        return (V + 2) * d + 6 * d * d + 3 * d
    count = (V + 2) * d + L * d + cfg.num_blocks * (4 * (d * d + d) + 4 * d + 2 * d * f + f + d)
    if cfg.kind == "bert4rec" and cfg.bert_head == "projection":
        count += d * d + 3 * d
    return count


class SequentialModel:
    """Shared machinery for the three sequence encoders."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict | None = None):
        if config.kind == "bprmf":
            raise ValueError("use BPRMF for matrix factorisation")
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))

    # ---------------------------------------------------------- parameters
    def _param(self, name, values):
        return DiffArray(np.asarray(values, dtype=self.dtype), requires_grad=True, name=name)

    def _init_params(self, rng) -> dict:
        cfg = self.config
        V, d, f = cfg.num_items, cfg.hidden_size, cfg.ffn_size
        p = {}
        table = _trunc_normal(rng, (V + 2, d))
        table[0] = 0.0
        p["item_embeddings"] = self._param("item_embeddings", table)
        if cfg.kind == "gru4rec":
            p["gru.W"] = self._param("gru.W", _trunc_normal(rng, (d, 3 * d)))
            p["gru.U"] = self._param("gru.U", _trunc_normal(rng, (d, 3 * d)))
            p["gru.b"] = self._param("gru.b", np.zeros(3 * d))
            return p
        p["positional_embeddings"] = self._param("positional_embeddings", _trunc_normal(rng, (cfg.max_len, d)))
        for b in range(cfg.num_blocks):
            for proj in ("q", "k", "v", "o"):
                p[f"block{b}.attn.{proj}.weight"] = self._param(f"block{b}.attn.{proj}.weight", _trunc_normal(rng, (d, d)))
                p[f"block{b}.attn.{proj}.bias"] = self._param(f"block{b}.attn.{proj}.bias", np.zeros(d))
            p[f"block{b}.ln1.gain"] = self._param(f"block{b}.ln1.gain", np.ones(d))
            p[f"block{b}.ln1.shift"] = self._param(f"block{b}.ln1.shift", np.zeros(d))
            p[f"block{b}.ffn.in.weight"] = self._param(f"block{b}.ffn.in.weight", _trunc_normal(rng, (d, f)))
            p[f"block{b}.ffn.in.bias"] = self._param(f"block{b}.ffn.in.bias", np.zeros(f))
            p[f"block{b}.ffn.out.weight"] = self._param(f"block{b}.ffn.out.weight", _trunc_normal(rng, (f, d)))
            p[f"block{b}.ffn.out.bias"] = self._param(f"block{b}.ffn.out.bias", np.zeros(d))
            p[f"block{b}.ln2.gain"] = self._param(f"block{b}.ln2.gain", np.ones(d))
            p[f"block{b}.ln2.shift"] = self._param(f"block{b}.ln2.shift", np.zeros(d))
        if cfg.kind == "bert4rec" and cfg.bert_head == "projection":
            p["head.weight"] = self._param("head.weight", _trunc_normal(rng, (d, d)))
            p["head.bias"] = self._param("head.bias", np.zeros(d))
            p["head.ln.gain"] = self._param("head.ln.gain", np.ones(d))
            p["head.ln.shift"] = self._param("head.ln.shift", np.zeros(d))
        return p

    def parameter_count(self) -> int:
        return int(sum(p.values.size for p in self.params.values()))

    @property
    def item_table(self) -> DiffArray:
        return self.params["item_embeddings"]

    @property
    def num_items(self) -> int:
        return self.config.num_items

    # ---------------------------------------------------------- forward
    def hidden_states(self, inputs: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> DiffArray:
        """(B, L) item ids -> (B, L, d) hidden states (output head applied)."""
        inputs = np.asarray(inputs, dtype=np.int64)
        if inputs.ndim != 2:
            raise ValueError("inputs must be a (batch, length) matrix")
        if inputs.shape[1] > self.config.max_len:
            raise ValueError(f"sequence length {inputs.shape[1]} exceeds max_len {self.config.max_len}; truncate first")
        if inputs.min() < 0 or inputs.max() > self.config.num_items + 1:
            raise ValueError("item ids outside [0, V+1]")
        if train and self.config.dropout_prob > 0 and rng is None:
            raise ValueError("training-mode forward with dropout needs an RNG")
        if self.config.kind == "gru4rec":
            return self._gru(inputs, train, rng)
        return self._transformer(inputs, train, rng, causal=self.config.kind == "sasrec")

    def _embed(self, inputs, valid, train, rng) -> DiffArray:
        x = T.embedding(self.item_table, inputs)
        if self.config.kind != "gru4rec":
            length = inputs.shape[1]
            pos = self.params["positional_embeddings"]
            x = x + T.take(pos, slice(self.config.max_len - length, None))
        x = x * valid[..., None].astype(self.dtype)
        return T.dropout(x, self.config.dropout_prob, rng, train)

    def _gru(self, inputs, train, rng) -> DiffArray:
        valid = inputs > 0
        x = self._embed(inputs, valid, train, rng)
        p = self.params
        return T.gru_sequence(x, p["gru.W"], p["gru.U"], p["gru.b"], step_mask=valid)

    def _transformer(self, inputs, train, rng, causal: bool) -> DiffArray:
        cfg, p = self.config, self.params
        batch, length = inputs.shape
        heads, d = cfg.num_heads, cfg.hidden_size
        valid = inputs > 0
        x = self._embed(inputs, valid, train, rng)

        allowed = valid[:, None, :] & (T.causal_mask(length) if causal else True)
        allowed = allowed | np.eye(length, dtype=bool)  # a position may always attend to itself
        if heads > 1:
            allowed = allowed[:, None]

        def split_heads(t):
            if heads == 1:
                return t
            return T.transpose(T.reshape(t, (batch, length, heads, d // heads)), (0, 2, 1, 3))

        for b in range(cfg.num_blocks):
            pre = f"block{b}."
            q = split_heads(T.linear(x, p[pre + "attn.q.weight"], p[pre + "attn.q.bias"]))
            k = split_heads(T.linear(x, p[pre + "attn.k.weight"], p[pre + "attn.k.bias"]))
            v = split_heads(T.linear(x, p[pre + "attn.v.weight"], p[pre + "attn.v.bias"]))
            a = T.attention(q, k, v, allowed)
            if heads > 1:
                a = T.reshape(T.transpose(a, (0, 2, 1, 3)), (batch, length, d))
            a = T.linear(a, p[pre + "attn.o.weight"], p[pre + "attn.o.bias"])
            x = T.layer_norm(x + T.dropout(a, cfg.dropout_prob, rng, train),
                             p[pre + "ln1.gain"], p[pre + "ln1.shift"], cfg.layer_norm_eps)
            act = T.gelu if cfg.kind == "bert4rec" else T.relu
            f = T.linear(act(T.linear(x, p[pre + "ffn.in.weight"], p[pre + "ffn.in.bias"])),
                         p[pre + "ffn.out.weight"], p[pre + "ffn.out.bias"])
            x = T.layer_norm(x + T.dropout(f, cfg.dropout_prob, rng, train),
                             p[pre + "ln2.gain"], p[pre + "ln2.shift"], cfg.layer_norm_eps)
        if cfg.kind == "bert4rec" and cfg.bert_head == "projection":
            x = T.layer_norm(T.gelu(T.linear(x, p["head.weight"], p["head.bias"])),
                             p["head.ln.gain"], p["head.ln.shift"], cfg.layer_norm_eps)
        return x

    # ---------------------------------------------------------- inference
    def encode_contexts(self, contexts: Sequence[np.ndarray]) -> np.ndarray:
        """Left-padded inputs whose last slot is the readout position."""
        L = self.config.max_len
        if self.config.kind == "bert4rec":
            rows = [np.append(np.asarray(c)[-(L - 1):], self.config.num_items + 1) for c in contexts]
            return left_pad(rows, L)
        return left_pad([np.asarray(c) for c in contexts], L)

    def readout(self, contexts: Sequence[np.ndarray]) -> np.ndarray:
        """Hidden state at the readout position for each context, shape (n, d)."""
        with no_grad():
            return self.hidden_states(self.encode_contexts(contexts), train=False).values[:, -1]

    def score_contexts(self, contexts: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
        """Scores over items 1..V for each context, shape (n, V)."""
        out = np.empty((len(contexts), self.num_items), dtype=self.dtype)
        items = self.item_table.values[1:self.num_items + 1]
        for lo in range(0, len(contexts), batch_size):
            out[lo:lo + batch_size] = self.readout(contexts[lo:lo + batch_size]) @ items.T
        return out

    def score_users(self, users: np.ndarray, contexts: Sequence[np.ndarray]) -> np.ndarray:
        return self.score_contexts(contexts)


class BPRMF:
    """Matrix factorisation trained with the pairwise BPR objective."""

    def __init__(self, config: ModelConfig, num_users: int, seed: int = 0, params: dict | None = None):
        self.config = config
        self.num_users = num_users
        self.dtype = np.dtype(config.dtype)
        if params is None:
            rng = np.random.default_rng(seed)
            k = config.hidden_size
            params = {
                "user_factors": DiffArray(rng.normal(0.0, 0.1, (num_users, k)), dtype=self.dtype, name="user_factors"),
                "item_factors": DiffArray(rng.normal(0.0, 0.1, (config.num_items + 1, k)), dtype=self.dtype, name="item_factors"),
            }
            params["item_factors"].values[0] = 0.0
        self.params = params

    @property
    def num_items(self) -> int:
        return self.config.num_items

    def parameter_count(self) -> int:
        return int(sum(p.values.size for p in self.params.values()))

    def score_users(self, users: np.ndarray, contexts=None) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise KeyError(f"unknown user index in {users.tolist()[:5]}...")
        return self.params["user_factors"].values[users] @ self.params["item_factors"].values[1:].T

    def fit_epoch(self, split: LeaveOneOutSplit, rng: np.random.Generator, lr: float, reg: float,
                  batch_size: int = 1024) -> float:
        """One pass of minibatch SGD over as many sampled triples as there are training interactions."""
        users = np.repeat(np.arange(split.num_users), [len(p) for p in split.train_prefix])
        positives = np.concatenate(split.train_prefix)
        seen = np.unique(users * (self.num_items + 2) + positives)
        P, Q = self.params["user_factors"].values, self.params["item_factors"].values
        total = 0.0
        order = rng.permutation(len(users))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            u, i = users[idx], positives[idx]
            j = _sample_unseen(rng, u, seen, self.num_items)
            loss, (gu, gi, gj) = bpr_triple_grads(P[u], Q[i], Q[j], reg)
            total += float(loss.sum())
            np.add.at(P, u, -lr * gu)
            np.add.at(Q, i, -lr * gi)
            np.add.at(Q, j, -lr * gj)
        return total / max(len(order), 1)


def _sample_unseen(rng, users, seen_codes, num_items) -> np.ndarray:
    j = rng.integers(1, num_items + 1, size=users.size)
    while True:
        codes = users * (num_items + 2) + j
        pos = np.searchsorted(seen_codes, codes)
        bad = (pos < seen_codes.size) & (seen_codes[np.minimum(pos, seen_codes.size - 1)] == codes)
        if not bad.any():
            return j
        j[bad] = rng.integers(1, num_items + 1, size=int(bad.sum()))


def bpr_triple_loss(pu, qi, qj, reg: float) -> np.ndarray:
    """``-log σ(pu·qi - pu·qj) + reg/2 (|pu|² + |qi|² + |qj|²)`` per row."""
    x = np.sum(pu * (qi - qj), axis=-1)
    return np.logaddexp(0.0, -x) + 0.5 * reg * (np.sum(pu * pu, -1) + np.sum(qi * qi, -1) + np.sum(qj * qj, -1))


def bpr_triple_grads(pu, qi, qj, reg: float):
    x = np.sum(pu * (qi - qj), axis=-1)
    s = T._sigmoid(-x)[..., None]
    return bpr_triple_loss(pu, qi, qj, reg), (-s * (qi - qj) + reg * pu, -s * pu + reg * qi, s * pu + reg * qj)


def bprmf_fit(split: LeaveOneOutSplit, factors: int = 64, lr: float = 1e-3, reg: float = 0.01,
              epochs: int = 20, seed: int = 0, dtype: str = "float64") -> BPRMF:
    cfg = ModelConfig(kind="bprmf", num_items=split.num_items, hidden_size=factors, dtype=dtype)
    model = BPRMF(cfg, split.num_users, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for _ in range(epochs):
        model.fit_epoch(split, rng, lr, reg)
    return model


def build_model(config: ModelConfig, seed: int = 0, num_users: int = 0, params: dict | None = None):
    if config.kind == "bprmf":
        return BPRMF(config, num_users, seed=seed, params=params)
    return SequentialModel(config, seed=seed, params=params)


def score_catalog(hidden: np.ndarray, model: SequentialModel) -> np.ndarray:
    """``hidden · item_embeddings[i]`` for items 1..V (padding and mask rows excluded)."""
    hidden = np.asarray(hidden.values if isinstance(hidden, DiffArray) else hidden)
    return hidden @ model.item_table.values[1:model.num_items + 1].T


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Item ids (1-based) of the k highest scores, descending; ties by lower id."""
    k = min(k, scores.shape[-1])
    order = np.argsort(-scores, kind="stable")[:k]
    return order + 1


def predict_next(user_items, model, k: int = 10, user: int | None = None) -> np.ndarray:
    """Top-k next items for one history (sequential models) or one user index (BPR-MF)."""
    if isinstance(model, BPRMF):
        if user is None or not 0 <= user < model.num_users:
            raise KeyError(f"unknown user {user!r} for BPR-MF")
        return top_k(model.score_users(np.array([user]))[0], k)
    user_items = np.asarray(user_items, dtype=np.int64)
    if user_items.size == 0:
        raise ValueError("user_items must be non-empty")
    return top_k(model.score_contexts([user_items])[0], k)
