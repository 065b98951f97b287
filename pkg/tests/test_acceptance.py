"""Acceptance gate: one check per criterion, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v`` (a per-criterion PASS/FAIL
summary is printed at the end) or ``python tests/test_acceptance.py``.

Criteria 4 and 6-8 need the preprocessed MovieLens-1M pairs file
(``user item`` per line).  It is looked up at ``$SEQREC_ML1M`` and then at
``data/ml-1m.txt``; when absent those criteria fail with that message.
Desk-scale artifacts go to ``$SEQREC_ACCEPTANCE_OUT`` (default
``acceptance_runs/``).  Criterion 9 runs the full-scale reproduction only when
``SEQREC_FULL_SCALE=1``.
"""

from __future__ import annotations

import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES, make_dataset, model_gradient_error  # noqa: E402
from seqrec.cli import cmd_train, evaluate_run, train_run  # noqa: E402
from seqrec.config import ExperimentConfig  # noqa: E402
from seqrec.data import (  # noqa: E402
    build_dataset,
    load_interactions,
    sample_validation_users,
    split_leave_one_out,
    subsample_users,
    synthetic_log,
    write_csv,
)
from seqrec.evaluator import metric_at_k, rank_of_target, ranks_from_scores  # noqa: E402
from seqrec.losses import bce_loss, full_ce_loss, sampled_ce_loss  # noqa: E402
from seqrec.models import ModelConfig  # noqa: E402
from seqrec.trainer import LossSpec, TrainConfig, train, validate_epoch  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
DESK_USERS, DESK_SEED, SEEDS = 1500, 0, (0, 1, 2)
SWEEP = (1, 16, 256, 1024)


class Unmet(AssertionError):
    pass


def ml1m_path() -> Path:
    env = os.environ.get("SEQREC_ML1M")
    path = Path(env) if env else ROOT / "data" / "ml-1m.txt"
    if not path.is_file():
        raise Unmet(f"preprocessed ML-1M file not found at {path} (set SEQREC_ML1M)")
    return path


def out_dir() -> Path:
    return Path(os.environ.get("SEQREC_ACCEPTANCE_OUT", ROOT / "acceptance_runs"))


# ----------------------------------------------------------------- criteria

def criterion_1():
    start = time.perf_counter()
    worst = {}
    for kind in ("sasrec", "bert4rec", "gru4rec"):
        for loss in ("bce", "full_ce", "sampled_ce"):
            worst[(kind, loss)] = max(model_gradient_error(kind, loss, seed) for seed in range(5))
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok = top < 1e-3 and elapsed < 60
    return ok, f"max rel err {top:.2e} over 9 arch/loss pairs x 5 seeds (< 1e-3), {elapsed:.1f}s (< 60s)"


def criterion_2():
    rng = np.random.default_rng(2024)
    gap = 0.0
    for _ in range(100):
        V = int(rng.integers(2, 51))
        logits = rng.normal(scale=3.0, size=(1, V))
        t = int(rng.integers(1, V + 1))
        negs = np.delete(logits[0], t - 1)[None]
        gap = max(gap, abs(float(sampled_ce_loss([logits[0, t - 1]], negs).values)
                           - float(full_ce_loss(logits, [t]).values)))
    units = [
        abs(float(full_ce_loss(np.zeros((1, V)), [1]).values) - math.log(V)) for V in (2, 7, 50, 3416)
    ] + [abs(float(bce_loss([0.0], [0.0]).values) - 2 * math.log(2)),
         abs(float(sampled_ce_loss([0.0], [[0.0]]).values) - math.log(2))]
    ok = gap < 1e-9 and max(units) < 1e-12
    return ok, f"sampled(V-1) vs full max gap {gap:.1e} (< 1e-9); unit values off by <= {max(units):.1e}"


def criterion_3():
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        V = int(rng.integers(2, 2001))
        scores = np.round(rng.normal(size=V), int(rng.integers(0, 3)))
        t = int(rng.integers(1, V + 1))
        order = sorted(range(V), key=lambda i: (-scores[i], i != t - 1))
        brute = order.index(t - 1) + 1
        ours = int(ranks_from_scores(scores[None], np.array([t]))[0])
        mismatches += ours != brute or rank_of_target(scores, t) != brute
    spots = (metric_at_k(1, 10, "hr"), metric_at_k(1, 10, "ndcg"), metric_at_k(2, 10, "ndcg"),
             metric_at_k(11, 10, "hr"), metric_at_k(11, 10, "ndcg"))
    ok = (mismatches == 0 and spots[:2] == (1.0, 1.0) and abs(spots[2] - 0.63093) <= 1e-5
          and spots[3:] == (0.0, 0.0))
    return ok, f"{mismatches} mismatches over 1000 vectors; NDCG(rank 2, k=10) = {spots[2]:.5f}"


def criterion_4():
    ds = build_dataset(load_interactions(ml1m_path(), "preordered-pairs"))
    s = ds.stats()
    ok = (s["users"] == 6040 and s["items"] == 3416 and s["interactions"] == 999_611
          and abs(s["avg_len"] - 165.49) <= 0.01 and abs(100 * s["density"] - 4.85) <= 0.01)
    return ok, (f"users={s['users']} items={s['items']} interactions={s['interactions']} "
                f"avg_len={s['avg_len']:.2f} density={100 * s['density']:.3f}%")


def criterion_5():
    split = split_leave_one_out(build_dataset(synthetic_log(60, 25, seed=5, min_len=6, max_len=14)))
    rng = np.random.default_rng(5)
    bad = []
    for trial in range(50):
        max_epochs, patience = int(rng.integers(1, 15)), int(rng.integers(1, 6))
        trace = np.round(rng.random(max_epochs), 1)
        by_weights = {}

        def validator(model, epoch):
            key = tuple(p.values.tobytes() for p in model.params.values())
            by_weights[key] = float(trace[epoch - 1])
            return by_weights[key]

        mc = ModelConfig("sasrec", num_items=split.num_items, hidden_size=8, num_blocks=1, max_len=8)
        tc = TrainConfig(batch_size=32, max_epochs=max_epochs, patience=patience, seed=trial)
        model, record = train(mc, tc, split, validator=validator)
        best = int(np.argmax(trace[: len(record.epochs)])) + 1
        restored = by_weights[tuple(p.values.tobytes() for p in model.params.values())]
        if not (record.best_epoch == best and len(record.epochs) == min(max_epochs, best + patience)
                and restored == record.best_metric):
            bad.append(trial)
    # and with the real validator: the restored model re-evaluates to the recorded best exactly
    users = sample_validation_users(split, 10_000, 0)
    mc = ModelConfig("sasrec", num_items=split.num_items, hidden_size=8, num_blocks=1, max_len=8)
    model, record = train(mc, TrainConfig(batch_size=32, max_epochs=8, patience=2), split, validation_users=users)
    exact = validate_epoch(model, split, users) == record.best_metric
    return not bad and exact, f"{50 - len(bad)}/50 traces stop at min(max_epochs, best+patience); re-eval exact={exact}"


# ----------------------------------------------------------------- desk-scale runs (ML-1M subsample)

_RUNS: dict = {}


def desk_config(model: str, loss: str | None = None, **extra) -> ExperimentConfig:
    raw = {"data_path": str(ml1m_path()), "data_format": "preordered-pairs", "dataset": "ml-1m",
           "subsample_users": DESK_USERS, "subsample_seed": DESK_SEED, "model": model,
           "dtype": "float32", "seeds": list(SEEDS)} | extra
    if loss is not None:
        raw["loss"] = loss
    return ExperimentConfig.from_dict(raw)


def _desk_split(exp: ExperimentConfig):
    if "split" not in _RUNS:
        ds = build_dataset(load_interactions(exp.data_path, exp.data_format))
        _RUNS["split"] = split_leave_one_out(subsample_users(ds, DESK_USERS, DESK_SEED))
    return _RUNS["split"]


def desk_run(model: str, loss: str | None, seed: int, num_negatives: int | None = None):
    """Train + test-evaluate one desk-scale configuration (cached for the session)."""
    key = (model, loss, seed, num_negatives)
    if key not in _RUNS:
        exp = desk_config(model, loss)
        split = _desk_split(exp)
        tag = f"{model}_{loss or 'default'}" + (f"_n{num_negatives}" if num_negatives else "")
        run_dir = out_dir() / tag / f"seed_{seed}"
        _, record = train_run(exp, split, seed, run_dir, num_negatives=num_negatives, echo=lambda s: None)
        report = evaluate_run(run_dir / "best.ckpt", "test", False)
        _RUNS[key] = (record, report)
    return _RUNS[key]


def criterion_6():
    start = time.perf_counter()
    rows = []
    for seed in SEEDS:
        base = desk_run("sasrec", "bce", seed)[1]["ndcg10"]
        plus = desk_run("sasrec", "full_ce", seed)[1]["ndcg10"]
        rows.append((seed, base, plus))
    elapsed = time.perf_counter() - start
    ok = all(p > b for _, b, p in rows) and elapsed < 7200
    detail = "; ".join(f"seed {s}: SASRec {b:.4f} vs SASRec+ {p:.4f}" for s, b, p in rows)
    return ok, f"{detail}; {elapsed / 60:.1f} min (< 120)"


def criterion_7():
    seed = SEEDS[0]
    vals = {n: desk_run("sasrec", "sampled_ce", seed, num_negatives=n)[1]["ndcg10"] for n in SWEEP}
    full = desk_run("sasrec", "full_ce", seed)[1]["ndcg10"]
    top = vals[SWEEP[-1]]
    rel = abs(top - full) / full if full > 0 else math.inf
    ok = top >= vals[1] and rel <= 0.15
    curve = ", ".join(f"N={n}: {v:.4f}" for n, v in vals.items())
    return ok, f"{curve}; full_ce {full:.4f}; N=1024 off by {100 * rel:.1f}% (<= 15%)"


def criterion_8():
    wins, parts = 0, []
    for seed in SEEDS:
        bert = desk_run("bert4rec", None, seed)[0].best_epoch
        plus = desk_run("sasrec", "full_ce", seed)[0].best_epoch
        wins += bert > plus
        parts.append(f"seed {seed}: BERT4Rec {bert} vs SASRec+ {plus}")
    return wins >= 2, "; ".join(parts) + f" ({wins}/3 seeds, need >= 2)"


def criterion_9():
    """Extended: the full-scale configuration resolves to the standard protocol unchanged."""
    exp = ExperimentConfig.from_dict({"data_path": "data/ml-1m.txt", "data_format": "preordered-pairs",
                                      "model": "sasrec", "loss": "full_ce"})
    bert = ExperimentConfig.from_dict({"data_path": "data/ml-1m.txt", "model": "bert4rec"})
    capable = ((exp.hidden_size, exp.max_len, exp.num_blocks, exp.num_heads, exp.batch_size, exp.learning_rate,
                exp.patience, exp.max_epochs, exp.validation_user_cap) == (64, 200, 2, 1, 128, 1e-3, 10, 100, 10000)
               and (bert.num_heads, bert.patience, bert.max_epochs, bert.loss) == (2, 20, 200, "full_ce"))
    if os.environ.get("SEQREC_FULL_SCALE") != "1":
        return capable, "EXTENDED: full-scale run not executed (set SEQREC_FULL_SCALE=1); config resolves to protocol"
    path = ml1m_path()
    results = {}
    for name, raw in (("SASRec+", {"model": "sasrec", "loss": "full_ce"}), ("BERT4Rec", {"model": "bert4rec"})):
        e = ExperimentConfig.from_dict({"data_path": str(path), "data_format": "preordered-pairs",
                                        "dataset": "ml-1m"} | raw)
        split = split_leave_one_out(build_dataset(load_interactions(path, "preordered-pairs")))
        run_dir = out_dir() / "full_scale" / name / "seed_0"
        train_run(e, split, 0, run_dir)
        results[name] = evaluate_run(run_dir / "best.ckpt", "test", False)["ndcg10"]
    ok = abs(results["SASRec+"] - 0.1821) <= 0.015 and abs(results["BERT4Rec"] - 0.1537) <= 0.015
    return ok, f"SASRec+ NDCG@10 {results['SASRec+']:.4f} (0.1821 +- 0.015), BERT4Rec {results['BERT4Rec']:.4f}"


def criterion_10(tmp: Path | None = None):
    import tempfile
    tmp = Path(tmp or tempfile.mkdtemp())
    write_csv(synthetic_log(100, 40, seed=10), tmp / "log.csv")
    cfg = tmp / "cfg.json"
    cfg.write_text(ExperimentConfig.from_dict({
        "data_path": str(tmp / "log.csv"), "model": "sasrec", "loss": "bce", "hidden_size": 16,
        "max_len": 20, "max_epochs": 4, "patience": 2}).to_json())

    class Args:
        config, seed, format, filter_seen = str(cfg), 7, None, False

    runs = []
    for name in ("first", "second"):
        args = Args()
        args.out = str(tmp / name)
        cmd_train(args)
        runs.append((tmp / name / "seed_7" / "curve.csv").read_bytes())
    return runs[0] == runs[1], f"curve.csv identical across two runs: {runs[0] == runs[1]} ({len(runs[0])} bytes)"


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 11)}
NAMES = {1: "gradient suite", 2: "loss oracle equivalence", 3: "metric oracle equivalence",
         4: "ML-1M golden statistics", 5: "early-stopping arithmetic", 6: "desk-scale SASRec+ > SASRec",
         7: "negative-sweep trend", 8: "convergence-speed direction", 9: "full-scale reproduction (extended)",
         10: "train determinism"}


def run_criterion(number: int):
    try:
        ok, detail = CRITERIA[number]()
    except Unmet as exc:
        ok, detail = False, str(exc)
    line = f"criterion {number:>2} [{NAMES[number]}]: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    return ok, line


@pytest.mark.parametrize("number", list(CRITERIA))
def test_criterion(number):
    ok, line = run_criterion(number)
    print(line)
    assert ok, line


if __name__ == "__main__":
    chosen = [int(a) for a in sys.argv[1:]] or list(CRITERIA)
    results = [run_criterion(n) for n in chosen]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
