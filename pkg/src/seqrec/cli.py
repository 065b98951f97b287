"""Command-line harness: ``seqrec prepare|train|evaluate|sweep|report``.

Primary outputs are deterministic under fixed seeds; wall-clock timings go
to a separate ``meta/`` directory next to them.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, display_name
from .data import DataFormatError, LeaveOneOutSplit, load_dataset, split_leave_one_out, subsample_users
from .evaluator import MetricsReport, comparison_table, evaluate
from .models import ModelConfig, build_model
from .tensor import DiffArray
from .trainer import TrainConfig, TrainingDiverged, time_epochs, train


class CommandError(RuntimeError):
    pass


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_cell(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ----------------------------------------------------------------- data loading

def load_experiment_data(exp: ExperimentConfig):
    path = Path(exp.data_path)
    fmt = exp.data_format
    if path.is_dir():
        path, fmt = path / "dataset.txt", "preordered-pairs"
    dataset = load_dataset(path, fmt, exp.min_per_user)
    if exp.subsample_users:
        dataset = subsample_users(dataset, exp.subsample_users, exp.subsample_seed)
    return dataset, split_leave_one_out(dataset)


def _params_view(model) -> dict:
    return {k: p.values for k, p in model.params.items()}


def train_run(exp: ExperimentConfig, split: LeaveOneOutSplit, seed: int, run_dir: Path,
              num_negatives: int | None = None, echo=print):
    """Train one seed into ``run_dir``: best.ckpt, curve.csv, record.json and meta/ timings."""
    mc = exp.model_config(split.num_items)
    tc = exp.train_config(seed, num_negatives)
    meta = run_dir / "meta"
    meta.mkdir(parents=True, exist_ok=True)
    started = time.time()
    model, record = train(mc, tc, split, checkpoint_path=meta / "state.ckpt", progress=echo)
    view = record.deterministic_view()
    experiment = exp.to_dict()
    if num_negatives is not None:
        experiment.update(loss="sampled_ce", num_negatives=num_negatives, name=display_name(exp.model, "sampled_ce", num_negatives))
    save_checkpoint(run_dir / "best.ckpt", Checkpoint(
        config={"experiment": experiment, "model": mc.to_dict(), "train": tc.to_dict(),
                "num_users": split.num_users},
        params=_params_view(model), epoch=record.best_epoch, history=view["epochs"],
        extra={"best_epoch": record.best_epoch, "stopped_reason": record.stopped_reason}))
    _write(run_dir / "curve.csv", _csv_text(
        ("epoch", "train_loss", "val_ndcg10"),
        [(e.index, e.train_loss, e.val_ndcg10) for e in record.epochs]))
    _write(run_dir / "record.json", json.dumps(view, indent=2) + "\n")
    _write(meta / "timing.csv", _csv_text(
        ("epoch", "val_ndcg10", "elapsed_s", "train_s"),
        [(e.index, e.val_ndcg10, e.elapsed_s, e.train_s) for e in record.epochs]))
    summary = time_epochs(record)
    summary.update(started_at=started, finished_at=time.time())
    _write(meta / "timing.json", json.dumps(summary, indent=2) + "\n")
    return model, record


def restore_model(ckpt: Checkpoint):
    cfg = ModelConfig(**ckpt.config["model"])
    params = {k: DiffArray(v, requires_grad=cfg.kind != "bprmf", name=k) for k, v in ckpt.params.items()}
    return build_model(cfg, num_users=ckpt.config.get("num_users", 0), params=params)


def evaluate_run(ckpt_path: Path, phase: str, filter_seen: bool, cache: dict | None = None) -> MetricsReport:
    ckpt = load_checkpoint(ckpt_path)
    exp = ExperimentConfig.from_dict(ckpt.config["experiment"])
    key = (exp.data_path, exp.data_format, exp.min_per_user, exp.subsample_users, exp.subsample_seed)
    if cache is not None and key in cache:
        split = cache[key]
    else:
        split = load_experiment_data(exp)[1]
        if cache is not None:
            cache[key] = split
    model = restore_model(ckpt)
    if model.num_items != split.num_items:
        raise CommandError(f"{ckpt_path}: checkpoint catalog size {model.num_items} != dataset catalog size {split.num_items}")
    timing = ckpt_path.parent / "meta" / "timing.json"
    seconds = json.loads(timing.read_text())["total_seconds"] if timing.is_file() else None
    seed = ckpt.config["train"]["seed"]
    return evaluate(model, split, phase, filter_seen=filter_seen, model=exp.name, dataset=exp.dataset,
                    seed=seed, train_seconds=seconds, best_epoch=ckpt.extra.get("best_epoch"))


def aggregate(reports: list) -> MetricsReport:
    """Mean over seeds, keeping each seed's values under ``per_seed``."""
    if len(reports) == 1:
        return reports[0]
    first = reports[0]
    metrics = {k: float(np.mean([r.metrics[k] for r in reports])) for k in first.metrics}
    seconds = [r.train_seconds for r in reports]
    return MetricsReport(
        metrics=metrics, num_users=first.num_users, filter_seen=first.filter_seen, model=first.model,
        dataset=first.dataset, seed=[r.seed for r in reports], phase=first.phase,
        train_seconds=None if None in seconds else float(np.mean(seconds)),
        best_epoch=int(round(float(np.mean([r.best_epoch for r in reports])))),
        extra={"per_seed": [r.to_dict() for r in reports]})


def _checkpoints(target: Path) -> list:
    if target.is_file():
        return [target]
    found = sorted(target.glob("seed_*/best.ckpt"), key=lambda p: int(p.parent.name.split("_")[1]))
    if not found and (target / "best.ckpt").is_file():
        found = [target / "best.ckpt"]
    if not found:
        raise CommandError(f"no checkpoints found under {target}")
    return found


def _summary(report: MetricsReport) -> str:
    m = report.metrics
    return (f"model={report.model} dataset={report.dataset} phase={report.phase} "
            f"hr10={m['hr10']:.4f} hr100={m['hr100']:.4f} ndcg10={m['ndcg10']:.4f} ndcg100={m['ndcg100']:.4f}")


def _report_name(phase: str, filter_seen: bool) -> str:
    return f"report_{phase}{'_filtered' if filter_seen else ''}.json"


# ----------------------------------------------------------------- subcommands

def cmd_prepare(args) -> int:
    dataset = load_dataset(args.input, args.format, args.min_per_user)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset.write_pairs(out / "dataset.txt")
    split = split_leave_one_out(dataset)
    lines = []
    for u in range(split.num_users):
        train_items = " ".join(dataset.item_ids[i] for i in split.train_prefix[u])
        lines.append(f"{dataset.user_ids[u]}\t{train_items}\t{dataset.item_ids[split.val_target[u]]}"
                     f"\t{dataset.item_ids[split.test_target[u]]}\n")
    _write(out / "split.tsv", "".join(lines))
    _write(out / "stats.json", dataset.stats_json())
    print(dataset.stats_json(), end="")
    return 0


def _experiment(args) -> ExperimentConfig:
    raw = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if getattr(args, "seed", None) is not None:
        raw["seeds"] = [args.seed]
    if getattr(args, "format", None):
        raw["data_format"] = args.format
    if getattr(args, "filter_seen", False):
        raw["filter_seen"] = True
    exp = ExperimentConfig.from_dict(raw)
    exp.data_path = str(Path(exp.data_path).resolve())
    return exp


def cmd_train(args) -> int:
    exp = _experiment(args)
    out = Path(args.out)
    _, split = load_experiment_data(exp)
    _write(out / "config.json", exp.to_json())
    for seed in exp.seeds:
        train_run(exp, split, seed, out / f"seed_{seed}")
    return 0


def cmd_evaluate(args) -> int:
    target = Path(args.target)
    cache: dict = {}
    reports = [evaluate_run(p, args.phase, args.filter_seen, cache) for p in _checkpoints(target)]
    report = aggregate(reports)
    out = Path(args.out) if args.out else (target.parent if target.is_file() else target)
    _write(out / _report_name(args.phase, args.filter_seen), report.to_json())
    print(_summary(report))
    return 0


def cmd_sweep(args) -> int:
    exp = _experiment(args)
    if not exp.sweep_negatives:
        raise ConfigError("sweep needs sweep_negatives in the config")
    out = Path(args.out)
    _, split = load_experiment_data(exp)
    too_big = [n for n in exp.sweep_negatives if n >= split.num_items]
    if too_big:
        raise ConfigError(f"sweep_negatives {too_big} must be < catalog size {split.num_items}")
    _write(out / "config.json", exp.to_json())
    seed = exp.seeds[0]
    csv_path = out / "sweep.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n_negatives", "ndcg10", "hr10", "train_seconds"])
        fh.flush()
        for n in exp.sweep_negatives:
            run_dir = out / f"n_{n}" / f"seed_{seed}"
            try:
                train_run(exp, split, seed, run_dir, num_negatives=n)
                report = evaluate_run(run_dir / "best.ckpt", "test", exp.filter_seen)
            except Exception as exc:  # keep finished rows, report the failure
                print(f"seqrec: error: sweep run N={n} failed: {exc}", file=sys.stderr)
                return 1
            _write(run_dir / _report_name("test", exp.filter_seen), report.to_json())
            writer.writerow([n, repr(report["ndcg10"]), repr(report["hr10"]), repr(report.train_seconds)])
            fh.flush()
    return 0


def load_reports(directory: Path) -> list:
    if not directory.is_dir():
        raise CommandError(f"report directory not found: {directory}")
    reports = []
    for path in sorted(directory.rglob("report*.json")):
        try:
            reports.append(MetricsReport.from_dict(json.loads(path.read_text(encoding="utf-8"))))
        except (ValueError, TypeError, AttributeError) as exc:
            raise CommandError(f"malformed report {path}: {exc}") from None
    if not reports:
        raise CommandError(f"no report*.json files under {directory}")
    return reports


def cmd_report(args) -> int:
    directory = Path(args.directory)
    reports = [r for r in load_reports(directory) if r.phase == "test"]
    if not reports:
        raise CommandError(f"no test-phase reports under {directory}")
    table = comparison_table(reports)
    out = Path(args.out) if args.out else directory
    _write(out / "table.csv", table.to_csv())
    _write(out / "table.txt", table.to_text())
    print(table.to_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqrec", description="Sequential recommendation training and benchmarking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest a log, filter users, write split artifacts and stats")
    p.add_argument("input")
    p.add_argument("--format", default="timestamped-csv", choices=("timestamped-csv", "preordered-pairs"))
    p.add_argument("--min-per-user", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    for name, func, helptext in (("train", cmd_train, "train every configured seed"),
                                 ("sweep", cmd_sweep, "train+evaluate sampled cross-entropy for each N")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--format", choices=("timestamped-csv", "preordered-pairs"))
        p.add_argument("--filter-seen", action="store_true")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="unsampled evaluation of a run directory or checkpoint")
    p.add_argument("target")
    p.add_argument("--phase", default="test", choices=("validation", "test"))
    p.add_argument("--filter-seen", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="collect report*.json files into the comparison table")
    p.add_argument("directory")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ConfigError, CheckpointError, DataFormatError, FileNotFoundError,
            TrainingDiverged, ValueError) as exc:
        print(f"seqrec: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
