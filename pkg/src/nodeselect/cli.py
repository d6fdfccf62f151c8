"""Command-line front door: train, eval, bench, and gradcheck subcommands.

Standard output carries only machine-parseable key=value summary lines;
human-readable diagnostics go to standard error. Exit codes: 0 success,
1 runtime failure or tolerance breach, 2 bad configuration or usage,
3 bad dataset/checkpoint input. Every run directory gets a manifest written
before any training starts, sufficient to replay the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (
    BenchSpec,
    SbmRecipe,
    layer_diagnostics,
    noise_bench,
    scale_bench,
    stacking_compare,
    sweep_layers,
    sweep_threshold,
    write_diagnostics_csvs,
)
from .gradcheck import run_gradcheck
from .graph import DatasetError, load_graph, make_splits
from .model import (
    ConfigError,
    Model,
    ModelConfig,
    evaluate,
    init_model,
    load_checkpoint,
    load_config,
    save_checkpoint,
    train,
)

DATASET_FILES = ("edges.csv", "features.csv", "labels.csv", "meta.csv")

EXPERIMENT_FLAGS = {
    "noise": "noise",
    "scale": "scale",
    "sweep-t": "sweep_T",
    "sweep-l": "sweep_L",
    "stacking": "stacking",
    "diag": "diagnostics",
}


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def dataset_fingerprint(data_dir: Path) -> str:
    """SHA-256 over the four container files (order-fixed), hex digest."""
    h = hashlib.sha256()
    for name in DATASET_FILES:
        path = data_dir / name
        h.update(name.encode())
        h.update(path.read_bytes() if path.is_file() else b"<missing>")
    return h.hexdigest()


def write_manifest(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(payload, tool_version=__version__)
    (out_dir / "manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _resolve_config(args) -> ModelConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "config", None):
        return load_config(args.config, **overrides)
    return ModelConfig(**overrides)


def _write_metrics_csv(path: Path, report) -> None:
    lines = ["epoch,train_loss,val_acc"]
    for epoch, (loss, acc) in enumerate(zip(report.train_loss, report.val_acc)):
        lines.append(f"{epoch},{loss!r},{acc!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    data_dir = Path(args.data)
    g = load_graph(data_dir)
    out_dir = Path(args.out)
    write_manifest(
        out_dir,
        {
            "subcommand": "train",
            "config": cfg.to_dict(),
            "dataset": str(data_dir),
            "dataset_fingerprint": dataset_fingerprint(data_dir),
            "seed": cfg.seed,
            "artifacts": {"metrics": "metrics.csv", "checkpoint": "checkpoint.npz"},
        },
    )
    masks = make_splits(g, (0.2, 0.2, 0.6), cfg.seed)
    model = init_model(cfg, g.feat_dim, g.num_classes)
    trace = tuple(args.trace_nodes) if args.trace_nodes else ()
    report = train(model, g, masks, trace_nodes=trace)
    _write_metrics_csv(out_dir / "metrics.csv", report)
    save_checkpoint(out_dir / "checkpoint.npz", model)
    _err(
        f"trained {report.epochs_run} epochs, best epoch {report.best_epoch}, "
        f"wall time {report.wall_time_s:.1f}s"
    )
    print(f"test_acc={report.test_acc!r}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    g = load_graph(Path(args.data))
    if g.feat_dim != model.in_dim:
        raise DatasetError(
            f"checkpoint expects {model.in_dim} features, dataset has {g.feat_dim}"
        )
    out_dim = model.config.out_dim
    if out_dim is not None and out_dim != g.num_classes and model.out_dim != g.num_classes:
        raise DatasetError("checkpoint output dimension does not match dataset classes")
    masks = make_splits(g, (0.2, 0.2, 0.6), model.config.seed)
    mask = {"train": masks.train, "val": masks.val, "test": masks.test}[args.split]
    acc = evaluate(model, g, mask)
    print(f"{args.split}_acc={acc!r}")
    return 0


def _parse_grid(text: str, cast):
    return tuple(cast(tok) for tok in text.split(",") if tok.strip())


def _parse_seeds(text: str) -> tuple[int, ...]:
    """Either a count ('5' -> seeds 0..4) or an explicit comma list ('3,7,9')."""
    if "," in text:
        return _parse_grid(text, int)
    return tuple(range(int(text)))


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(args.out)
    data_dir = Path(args.data) if args.data else None
    seeds = _parse_seeds(args.seeds)
    jobs = int(os.environ.get("NS_THREADS", args.jobs))
    spec = BenchSpec(
        experiment=EXPERIMENT_FLAGS[args.experiment],
        data_dir=data_dir,
        fractions=_parse_grid(args.fractions, float),
        seeds=seeds,
        sizes=_parse_grid(args.sizes, int),
        t_grid=_parse_grid(args.t_grid, float),
        l_grid=_parse_grid(args.l_grid, int),
        cfg=cfg,
        jobs=jobs,
    )
    write_manifest(
        out_dir,
        {
            "subcommand": "bench",
            "experiment": spec.experiment,
            "config": cfg.to_dict(),
            "dataset": str(data_dir) if data_dir else asdict(spec.recipe),
            "dataset_fingerprint": dataset_fingerprint(data_dir) if data_dir else None,
            "seeds": list(seeds),
            "artifacts": {"report": "report.csv", "aggregate": "aggregate.csv"},
        },
    )
    g = spec.resolve_graph()

    if spec.experiment == "noise":
        report = noise_bench(spec)
    elif spec.experiment == "scale":
        report = scale_bench(spec.sizes, cfg)
    elif spec.experiment == "sweep_T":
        report = sweep_threshold(spec.t_grid, cfg, g, seeds, jobs)
    elif spec.experiment == "sweep_L":
        report = sweep_layers(spec.l_grid, cfg, g, seeds, jobs)
    elif spec.experiment == "stacking":
        report = stacking_compare(cfg, g, seeds, jobs)
    else:  # diagnostics
        masks = make_splits(g, (0.2, 0.2, 0.6), cfg.seed)
        train_report = None
        if args.checkpoint:
            model = load_checkpoint(args.checkpoint)
        else:
            model = init_model(cfg, g.feat_dim, g.num_classes)
            trace = tuple(args.trace_nodes) if args.trace_nodes else ()
            train_report = train(model, g, masks, trace_nodes=trace)
        diag = layer_diagnostics(model, g, masks, train_report)
        paths = write_diagnostics_csvs(diag, out_dir)
        for p in paths:
            print(f"diagnostic_csv={p}")
        print(f"embed_similarity={diag.embed_similarity!r}")
        return 0

    report.write_csv(out_dir / "report.csv")
    report.write_aggregate_csv(out_dir / "aggregate.csv")
    print(f"rows={len(report.rows)}")
    print(f"report_csv={out_dir / 'report.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.nodes > 16:
        raise ConfigError("--nodes is capped at 16")
    result = run_gradcheck(
        mode=args.mode, nodes=args.nodes, trials=args.trials, seed=args.seed
    )
    print(f"max_rel_err={result.max_rel_err!r}")
    if result.max_rel_err > args.tol:
        _err(f"gradient check failed at {result.worst_coord}")
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nodeselect",
        description="Selective node-propagation graph network: train, evaluate, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on a dataset directory")
    p_train.add_argument("--data", required=True, help="dataset container directory")
    p_train.add_argument("--config", help="flat key=value config file")
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.add_argument("--out", required=True, help="run directory for artifacts")
    p_train.add_argument(
        "--trace-nodes", type=lambda s: _parse_grid(s, int), default=(),
        help="comma list of node ids (max 8) whose scores are traced per epoch",
    )

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")

    p_bench = sub.add_parser("bench", help="run an experiment and write CSV reports")
    p_bench.add_argument(
        "--experiment",
        required=True,
        choices=("noise", "scale", "sweep-t", "sweep-l", "stacking", "diag"),
    )
    p_bench.add_argument("--data", help="dataset directory (default: synthetic graph)")
    p_bench.add_argument("--out", required=True)
    p_bench.add_argument("--config", help="flat key=value config file")
    p_bench.add_argument("--seed", type=int, help="override the config seed")
    p_bench.add_argument("--fractions", default="0.1,0.25")
    p_bench.add_argument("--sizes", default="1000,2000,4000")
    p_bench.add_argument("--t-grid", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p_bench.add_argument("--l-grid", default="1,3,5,10,20")
    p_bench.add_argument("--seeds", default="5", help="count N (seeds 0..N-1) or comma list")
    p_bench.add_argument("--jobs", type=int, default=1, help="parallel cells (NS_THREADS overrides)")
    p_bench.add_argument("--checkpoint", help="diagnose this checkpoint instead of training")
    p_bench.add_argument(
        "--trace-nodes", type=lambda s: _parse_grid(s, int), default=(),
        help="node ids traced during the diagnostics training run",
    )

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p_grad.add_argument("--mode", choices=("soft", "hard-frozen"), default="soft")
    p_grad.add_argument("--nodes", type=int, default=6)
    p_grad.add_argument("--trials", type=int, default=20)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "bench": cmd_bench,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return 2
    except (DatasetError, FileNotFoundError) as exc:
        _err(f"dataset error: {exc}")
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _err(f"error: {exc}")
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
