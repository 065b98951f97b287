"""Checkpoint container.

A checkpoint is UTF-8 text with two lines: a JSON header
``{"format", "version", "sha256"}`` and a JSON payload whose SHA-256 the
header records.  Tensors are stored as name, dtype, shape and base64 of the
row-major little-endian bytes, so a round trip is bit-exact.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT = "seqrec-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {"dtype": le.dtype.str, "shape": list(a.shape), "data": base64.b64encode(le.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"])
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


def _arrays(named: dict | None) -> dict | None:
    if named is None:
        return None
    return {k: encode_array(getattr(v, "values", v)) for k, v in named.items()}


@dataclass
class Checkpoint:
    config: dict
    params: dict  # name -> ndarray
    epoch: int = 0
    history: list = field(default_factory=list)
    optimizer: dict | None = None  # {"step_count", "beta1", "beta2", "epsilon", "lr", "m": {...}, "v": {...}}
    best_params: dict | None = None
    rng_state: dict | None = None
    stopper: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint):
    optimizer = None
    if ckpt.optimizer is not None:
        optimizer = dict(ckpt.optimizer)
        optimizer["m"] = _arrays(optimizer["m"])
        optimizer["v"] = _arrays(optimizer["v"])
    payload = {
        "config": ckpt.config,
        "params": _arrays(ckpt.params),
        "best_params": _arrays(ckpt.best_params),
        "optimizer": optimizer,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "rng_state": ckpt.rng_state,
        "stopper": ckpt.stopper,
        "extra": ckpt.extra,
    }
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    header = json.dumps({"format": FORMAT, "version": VERSION,
                         "sha256": hashlib.sha256(body.encode("utf-8")).hexdigest()}, sort_keys=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n" + body + "\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
        header_line, body, *rest = text.split("\n")
        header = json.loads(header_line)
    except (OSError, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version mismatch (expected {VERSION}, found {header.get('version')})")
    if any(rest) or hashlib.sha256(body.encode("utf-8")).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: integrity check failed (checksum mismatch)")
    try:
        payload = json.loads(body)
        optimizer = payload["optimizer"]
        if optimizer is not None:
            optimizer = dict(optimizer, m={k: decode_array(v) for k, v in optimizer["m"].items()},
                             v={k: decode_array(v) for k, v in optimizer["v"].items()})
        best = payload["best_params"]
        return Checkpoint(
            config=payload["config"],
            params={k: decode_array(v) for k, v in payload["params"].items()},
            epoch=payload["epoch"],
            history=payload["history"],
            optimizer=optimizer,
            best_params=None if best is None else {k: decode_array(v) for k, v in best.items()},
            rng_state=payload["rng_state"],
            stopper=payload["stopper"],
            extra=payload.get("extra", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint payload ({exc})") from None
