"""Command-line front end.

Subcommands: gen (synthetic dataset), train, eval, sweep, report. Exit codes
are part of the contract: 0 ok, 2 bad flags/config, 3 missing files, 4
integrity/contract violations in inputs, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint
from .errors import (
    EXIT_FILE,
    EXIT_INTEGRITY,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    ConfigError,
    ContractError,
    GrafterError,
    IntegrityError,
    NumericError,
    ParseError,
)
from .harness import (
    RunSettings,
    load_run_manifest,
    parse_grid,
    run_sweep,
    run_training_job,
)
from .metrics import ComputeCounter
from .routing import RoutingConfig
from .synth import SynthSpec, dataset_fingerprint, generate, load_dataset, save_dataset, split_dataset
from .training import evaluate


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _add_run_settings_flags(p: argparse.ArgumentParser, data_required: bool = True) -> None:
    p.add_argument("--data", required=data_required, default=None, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for run artifacts")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", dest="learning_rate", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--tau", dest="temperature", type=float, default=0.1,
                   help="routing softmax temperature")
    p.add_argument("--theta", dest="threshold", type=float, default=0.15,
                   help="gating threshold on routing probabilities")
    p.add_argument("--lambda", dest="consistency_weight", type=float, default=0.1,
                   help="weight of the pairwise consistency term")
    p.add_argument("--rho", dest="relation_weight", type=float, default=1e-3,
                   help="weight of the relation-matrix norm term")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--adapters", dest="num_adapters", type=int, default=3)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--d-hidden", dest="d_hidden", type=int, default=64)
    p.add_argument("--insertion", dest="insertion_layers", default="all",
                   help='comma-separated layer indices, or "all"')
    p.add_argument("--inner-relu", action="store_true", help="nonlinear adapters")
    p.add_argument("--pretrain-epochs", type=int, default=15,
                   help="self-supervised backbone warmup before fine-tuning")
    p.add_argument("--split-fraction", type=float, default=0.75)
    p.add_argument("--no-freeze-backbone", action="store_true",
                   help="update backbone weights during fine-tuning as well")
    p.add_argument("--plots", action="store_true", help="render figures next to the CSVs")


def _settings_from_args(args) -> RunSettings:
    return RunSettings(
        data_dir=args.data,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed,
        optimizer=args.optimizer,
        freeze_backbone=not args.no_freeze_backbone,
        temperature=args.temperature,
        threshold=args.threshold,
        consistency_weight=args.consistency_weight,
        relation_weight=args.relation_weight,
        rank=args.rank,
        num_adapters=args.num_adapters,
        depth=args.depth,
        d_hidden=args.d_hidden,
        insertion_layers=args.insertion_layers,
        inner_relu=args.inner_relu,
        pretrain_epochs=args.pretrain_epochs,
        split_fraction=args.split_fraction,
    )


def _validate_settings(s: RunSettings) -> None:
    # surface bad flag values as usage errors before any heavy work
    s.routing_cfg()
    s.objective_cfg()
    s.train_cfg()
    s.insertion()
    if s.rank < 1:
        raise ConfigError(f"--rank must be >= 1, got {s.rank}")
    if s.num_adapters < 1:
        raise ConfigError(f"--adapters must be >= 1, got {s.num_adapters}")
    if s.rank * 4 > s.d_hidden:
        raise ConfigError(
            f"--rank {s.rank} too large for --d-hidden {s.d_hidden} (limit {s.d_hidden // 4})"
        )
    if not 0.0 < s.split_fraction < 1.0:
        raise ConfigError(f"--split-fraction must be in (0, 1), got {s.split_fraction}")
    if s.pretrain_epochs < 0:
        raise ConfigError("--pretrain-epochs must be >= 0")


def cmd_gen(args) -> int:
    try:
        spec = SynthSpec(
            num_graphs=args.graphs,
            n_min=args.n_min,
            n_max=args.n_max,
            edge_prob=args.edge_prob,
            num_tasks=args.tasks,
            num_clusters=args.clusters,
            label_noise=args.noise,
            missing_prob=args.missing,
            seed=args.seed,
        )
    except ContractError as exc:  # bad flag values, not bad files
        raise ConfigError(str(exc)) from None
    ds = generate(spec)
    save_dataset(ds, args.out)
    print(f"wrote {spec.num_graphs} graphs, {spec.num_tasks} tasks to {args.out}")
    print(f"fingerprint: {dataset_fingerprint(args.out)}")
    return EXIT_OK


def cmd_train(args) -> int:
    expected_fp = None
    if args.manifest is not None:
        settings, entries = load_run_manifest(args.manifest)
        if args.data is not None:
            settings = replace(settings, data_dir=args.data)
        expected_fp = entries.get("dataset_fingerprint")
    else:
        if args.data is None:
            raise ConfigError("--data is required unless --manifest is given")
        settings = _settings_from_args(args)
    _validate_settings(settings)
    job = run_training_job(settings, args.out, expected_fingerprint=expected_fp)
    if args.plots and not job.diverged:
        from .plots import render_run_dir

        for fig in render_run_dir(job.out_dir):
            print(f"figure: {fig}")
    for name in ("metrics.csv", "run_manifest.txt") + (() if job.diverged else ("alpha.csv", "checkpoint")):
        print(f"wrote {job.out_dir / name}")
    if job.diverged:
        _err("training diverged; metrics.csv holds the finite epochs")
        return EXIT_NUMERIC
    final = job.rows[-1]
    print(f"final epoch {final.epoch}: ap_mean={final.ap_mean:.4f}"
          + ("" if final.awa is None else f" awa={final.awa:.4f}"))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    d_in = ds.graphs[0].x.cols
    if model.backbone.d_in != d_in or model.num_tasks != ds.num_tasks:
        raise IntegrityError(
            f"checkpoint expects d_in={model.backbone.d_in}, tasks={model.num_tasks}; "
            f"dataset has d_in={d_in}, tasks={ds.num_tasks}"
        )
    if args.temperature is not None or args.threshold is not None:
        cfg = model.routing_cfg
        model.routing_cfg = RoutingConfig(
            args.temperature if args.temperature is not None else cfg.temperature,
            args.threshold if args.threshold is not None else cfg.threshold,
        )
    if args.split == "all":
        graphs = ds.graphs
    else:
        train_graphs, eval_graphs = split_dataset(ds, args.split_fraction)
        graphs = train_graphs if args.split == "train" else eval_graphs
    counter = ComputeCounter()
    ap, allocation, outcome = evaluate(model, graphs, cluster_map=ds.cluster_map, counter=counter)
    counts = model.count_params()
    header = ("split,num_graphs,ap_mean,awa,active_adapters_mean,"
              "trainable_params,total_params,adapter_evals,compose_terms")
    row = ",".join(
        [
            args.split,
            str(len(graphs)),
            repr(ap.mean),
            "" if allocation is None else repr(allocation),
            repr(float(outcome.active.sum(axis=1).mean())),
            str(counts.trainable),
            str(counts.total),
            str(counter.adapter_evals),
            str(counter.compose_terms),
        ]
    )
    print(header)
    print(row)
    return EXIT_OK


def cmd_sweep(args) -> int:
    axes = parse_grid(args.grid)
    base = _settings_from_args(args)
    _validate_settings(base)
    sweep_path, results = run_sweep(base, axes, args.out)
    print(f"wrote {sweep_path} ({len(results)} points)")
    if args.plots:
        from .plots import render_sweep_curves

        print(f"figure: {render_sweep_curves(sweep_path)}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.run is None and args.sweep is None:
        raise ConfigError("report needs --run and/or --sweep")
    written = []
    from .plots import render_run_dir, render_sweep_curves

    if args.run is not None:
        run_dir = Path(args.run)
        if not run_dir.is_dir():
            raise FileNotFoundError(f"run directory {run_dir} does not exist")
        figures = render_run_dir(run_dir)
        if not figures:
            raise ContractError(f"{run_dir} holds no metrics.csv/alpha.csv/sweep.csv to render")
        written.extend(figures)
    if args.sweep is not None:
        written.append(render_sweep_curves(args.sweep))
    for fig in written:
        print(f"figure: {fig}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grafter",
        description="composable multi-task fine-tuning for graph networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multi-task graph dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--graphs", type=int, default=800)
    p.add_argument("--tasks", type=int, default=6)
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-min", type=int, default=10)
    p.add_argument("--n-max", type=int, default=30)
    p.add_argument("--edge-prob", type=float, default=0.2)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--missing", type=float, default=0.1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="fine-tune adapters and routing on a dataset")
    # --data stays optional here because a manifest replay brings its own
    _add_run_settings_flags(p, data_required=False)
    p.add_argument("--manifest", default=None,
                   help="replay every setting from a previous run_manifest.txt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--split-fraction", type=float, default=0.75)
    p.add_argument("--tau", dest="temperature", type=float, default=None,
                   help="override the stored routing temperature")
    p.add_argument("--theta", dest="threshold", type=float, default=None,
                   help="override the stored gating threshold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="retrain over a small hyperparameter grid")
    _add_run_settings_flags(p)
    p.add_argument("--grid", required=True,
                   help='e.g. "rho=0,0.001,0.01" or "tau=0.1,0.5|theta=0,0.1"')
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render figures for an existing run or sweep")
    p.add_argument("--run", default=None, help="run directory with metrics.csv/alpha.csv")
    p.add_argument("--sweep", default=None, help="path to a sweep.csv")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on usage errors; keep it in-process
        code = exc.code
        return EXIT_OK if code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except (ParseError, IntegrityError, ContractError) as exc:
        _err(str(exc))
        return EXIT_INTEGRITY
    except NumericError as exc:
        _err(str(exc))
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        _err(str(exc))
        return EXIT_FILE
    except OSError as exc:
        _err(str(exc))
        return EXIT_FILE
    except GrafterError as exc:  # anything else of ours is an internal contract hole
        _err(str(exc))
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
