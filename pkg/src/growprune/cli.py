"""Command-line entry point: ``growprune <verb> [--config FILE] [--key value ...]``.

Verbs:
  train-initial  grow-and-prune model from the initial partitions
  update         incremental update of an updatable checkpoint with new partitions
  compress       non-recoverable pruning into a separate deployment checkpoint
  compare        grow_prune / tfs / nft over all updates, metrics CSV and density maps
  density        class-addition experiment: first-layer density before/after growth
  eval           error rates and sparsity of a checkpoint

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint
from .config import CONFIG_KEYS, ExperimentConfig, load_config
from .engine import check_recoverable, nonrecoverable_prune
from .errors import ConfigError, GrowPruneError, PreconditionError
from .metrics import MetricsSink, write_metrics
from .network import sparsity_report
from .orchestrator import (MetricsRow, UpdateResult, data_digest, incremental_update,
                           initial_grow_prune, run_experiment)
from .report import density_grid, plot_density, plot_metrics, write_pgm
from .training import evaluate

log = logging.getLogger("growprune")

BOOL_KEYS = {"deterministic"}


def _parser():
    p = argparse.ArgumentParser(
        prog="growprune", description="Grow-and-prune incremental training of sparse networks.",
        epilog="Every configuration key can be set as --key VALUE: " + ", ".join(CONFIG_KEYS))
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, help):
        sp = sub.add_parser(name, help=help, description=help,
                            epilog="configuration keys (--key VALUE): " + ", ".join(CONFIG_KEYS))
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("-v", "--verbose", action="store_true")
        for key in CONFIG_KEYS:
            flags = {f"--{key}", f"--{key.replace('_', '-')}"}
            extra = {"nargs": "?", "const": "true"} if key in BOOL_KEYS else {}
            sp.add_argument(*sorted(flags), dest=f"cfg_{key}", metavar="VALUE", default=None,
                            help=argparse.SUPPRESS, **extra)
        return sp

    sp = verb("train-initial", "train and recoverably prune the first model")
    sp.add_argument("--out", required=True, help="checkpoint to write")
    sp.add_argument("--metrics", help="metrics CSV to append to")

    sp = verb("update", "incremental grow-and-prune update")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--parts", default="", help="comma-separated new partition ids (may be empty)")
    sp.add_argument("--metrics")

    sp = verb("compress", "non-recoverable pruning into a deployment checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--slack", type=float, default=None, help="accepted accuracy loss (fraction)")

    sp = verb("compare", "run all methods and write metrics + density maps")
    sp.add_argument("--out-dir", default=None)

    sp = verb("density", "first-layer density shift when a class is added")
    sp.add_argument("--initial-classes", default="1,2")
    sp.add_argument("--added-class", type=int, default=0)
    sp.add_argument("--out-dir", default=None)

    sp = verb("eval", "evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    return p


def _config(args):
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


@contextlib.contextmanager
def _determinism(cfg):
    if not cfg.deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    # one BLAS thread fixes the reduction order inside matrix products
    with threadpool_limits(limits=1):
        yield


def _data(cfg: ExperimentConfig, classes=None):
    if not cfg.data_dir:
        raise ConfigError("data_dir", "no dataset directory given")
    root = Path(cfg.data_dir)
    missing = [name for name in D.MNIST_SHA256 if not (root / name).exists()]
    if missing:
        raise ConfigError("data_dir", f"{root} lacks {', '.join(missing)}")
    return D.mnist_subset(root, cfg.n_train, cfg.val_size, cfg.n_test, cfg.data_seed, classes)


def _plan(cfg, train):
    return D.partition(train, cfg.partition_count, cfg.shuffle_seed)


def _row(method, update, idx, n_total, result, val, test, note=""):
    model = result.model
    rep = sparsity_report(model)
    return MetricsRow(
        method=method, update=update, parts=len(model.meta.get("parts", [])),
        data_fraction=round(len(idx) / n_total, 6), n_train=len(idx),
        val_error=round(evaluate(model, val), 6), test_error=round(evaluate(model, test), 6),
        active_params=rep.active_params, total_params=rep.total_params,
        norm_epochs=round(result.norm_epochs, 6), grad_eval_passes=result.grad_eval_passes,
        prune_iterations=len(result.prune_reports),
        rollbacks=sum(1 for r in result.prune_reports if r.rolled_back),
        recoverable=bool(check_recoverable(model)[0]), data_digest=data_digest(idx),
        note=note or result.note,
    )


def cmd_train_initial(args, cfg):
    setup = cfg.setup()
    train, val, test = _data(cfg)
    plan = _plan(cfg, train)
    parts = setup.schedule.parts_at(1)
    idx = plan.indices(parts)
    trainer = setup.trainer()
    result = initial_grow_prune(train.subset(idx), val, setup.schedule, setup.growth, setup.prune, trainer,
                                setup.arch, setup.density, setup.seed, setup.widths,
                                class_count=train.class_count)
    model = result.model
    model.meta.update(parts=parts, update=1)
    row = _row("grow_prune", 1, idx, len(train), result, val, test)
    save_checkpoint(args.out, model, trainer, row.as_dict())
    if args.metrics:
        write_metrics(args.metrics, [row], append=True)
    print(json.dumps(row.as_dict()))
    return 0


def _parse_parts(text):
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_update(args, cfg):
    setup = cfg.setup()
    ck = load_checkpoint(args.checkpoint)
    model, trainer = ck.model, ck.trainer or setup.trainer()
    if model.meta.get("deploy_only"):
        raise PreconditionError("checkpoint is a compressed deployment model and cannot be updated")
    ok, violations = check_recoverable(model)
    if not ok:
        raise PreconditionError("checkpoint is not recoverable", violations)
    train, val, test = _data(cfg)
    plan = _plan(cfg, train)
    try:
        new_parts = _parse_parts(args.parts)
    except ValueError:
        raise ConfigError("parts", f"cannot parse {args.parts!r}") from None
    old_parts = list(model.meta.get("parts", []))
    bad = [p for p in new_parts if p < 0 or p >= plan.k or p in old_parts]
    if bad:
        raise ConfigError("parts", f"invalid or already used partition ids {bad}")
    parts = old_parts + new_parts
    idx = plan.indices(parts)
    result = incremental_update(model, train.subset(plan.indices(new_parts)), train.subset(idx), val,
                                setup.schedule, setup.growth, setup.prune, trainer)
    update = int(model.meta.get("update", 1)) + 1
    model.meta.update(parts=parts, update=update)
    row = _row("grow_prune", update, idx, len(train), result, val, test)
    save_checkpoint(args.out, model, trainer, row.as_dict())
    if args.metrics:
        write_metrics(args.metrics, [row], append=True)
    print(json.dumps(row.as_dict()))
    return 0


def cmd_compress(args, cfg):
    if Path(args.out).resolve() == Path(args.checkpoint).resolve():
        raise ConfigError("out", "compress never overwrites the updatable checkpoint")
    slack = cfg.accuracy_slack if args.slack is None else args.slack
    setup = cfg.setup()
    ck = load_checkpoint(args.checkpoint)
    model, trainer = ck.model, ck.trainer or setup.trainer()
    train, val, test = _data(cfg)
    plan = _plan(cfg, train)
    parts = model.meta.get("parts") or list(range(plan.k))
    idx = plan.indices(parts)
    before = sparsity_report(model).active_params
    trainer.reset_schedule()
    model, reports = nonrecoverable_prune(model, train.subset(idx), val, cfg.compress(slack), trainer)
    after = sparsity_report(model).active_params
    model.meta.update(source_params=before, slack=slack)
    result = UpdateResult(model, float(sum(r.retrain_epochs for r in reports)), prune_reports=reports)
    row = _row("compress", int(model.meta.get("update", 1)), idx, len(train), result, val, test,
               note=f"non-recoverable x{before / after:.3f}")
    save_checkpoint(args.out, model, trainer, row.as_dict())
    print(json.dumps(row.as_dict()))
    return 0


def cmd_compare(args, cfg):
    setup = cfg.setup()
    out = Path(args.out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    train, val, test = _data(cfg)
    sink = MetricsSink(out / "metrics.csv")
    grids = {}

    def on_update(method, update, model):
        if model.layers[0].kind == "affine":
            grid = density_grid(model)
            write_pgm(out / f"density_{method}_u{update}.pgm", grid)
            grids.setdefault(method, []).append((update, grid))

    rows = run_experiment(train, val, test, setup, cfg.methods, sink, on_update)
    plot_metrics(rows, out / "metrics.png")
    for method, series in grids.items():
        plot_density([g for _, g in series], out / f"density_{method}.png",
                     [f"{method} u{u}" for u, _ in series])
    print(Path(out / "metrics.csv").read_text(), end="")
    return 0


def cmd_density(args, cfg):
    from .experiments import class_addition_density

    out = Path(args.out_dir or cfg.output_dir)
    initial = _parse_parts(args.initial_classes)
    if not cfg.data_dir:
        raise ConfigError("data_dir", "no dataset directory given")
    result = class_addition_density(cfg, initial, args.added_class)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("before", "after", "pruned_before", "pruned_after"):
        write_pgm(out / f"density_{name}.pgm", result[f"grid_{name}"])
    plot_density([result["grid_before"], result["grid_after"], result["region"].astype(int)],
                 out / "density_shift.png",
                 [f"classes {initial}", f"+ class {args.added_class}", f"class {args.added_class} pixels"])
    summary = {k: v for k, v in result.items() if not isinstance(v, np.ndarray)}
    (out / "density_shift.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args, cfg):
    ck = load_checkpoint(args.checkpoint)
    _, val, test = _data(cfg)
    rep = sparsity_report(ck.model)
    ok, violations = check_recoverable(ck.model)
    print(json.dumps({
        "val_error": evaluate(ck.model, val), "test_error": evaluate(ck.model, test),
        "active_params": rep.active_params, "total_params": rep.total_params,
        "recoverable": ok, "violations": len(violations), "meta": ck.model.meta,
    }, sort_keys=True))
    return 0


COMMANDS = {
    "train-initial": cmd_train_initial, "update": cmd_update, "compress": cmd_compress,
    "compare": cmd_compare, "density": cmd_density, "eval": cmd_eval,
}


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        cfg.setup()
        with _determinism(cfg):
            return COMMANDS[args.verb](args, cfg)
    except ConfigError as exc:
        print(f"growprune: configuration error: {exc}", file=sys.stderr)
        return 2
    except PreconditionError as exc:
        print(f"growprune: {exc}", file=sys.stderr)
        for v in exc.violations[:20]:
            print(f"  {v}", file=sys.stderr)
        return 1
    except (GrowPruneError, OSError) as exc:
        print(f"growprune: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
