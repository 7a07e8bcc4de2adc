"""Command-line entry point: gen-data, train, finetune, predict, evaluate, ablate."""

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
from dataclasses import replace

import torch

from . import __version__
from ._validation import ConfigError
from .config import RunConfig
from .data import (DataGapError, IngestionError, compute_norm_stats, export_store, generate_synthetic,
                   ingest_raw, parse_timestamp)
from .evaluate import (AblationVariant, InferenceModel, RolloutError, evaluate, evaluation_inits,
                       persist_run, rollout_from_store, run_ablation, synthetic_buoys, write_report)
from .grid import synthetic_mask
from .train import (CHECKPOINT_VERSION, CheckpointError, NonFiniteLossError, Trainer, file_sha256,
                    load_checkpoint, save_checkpoint)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
WORKERS_ENV = "MOTCAST_WORKERS"
LOCK_NAME = ".motcast.lock"

log = logging.getLogger("motcast")


class OutputDirError(OSError):
    pass


@contextlib.contextmanager
def output_dir(path, force):
    """Claim ``path`` for writing: refuse non-empty dirs without --force, hold a lock file."""
    if os.path.isdir(path) and os.listdir(path):
        if os.path.exists(os.path.join(path, LOCK_NAME)):
            raise OutputDirError(f"{path}: locked by another writer")
        if not force:
            raise OutputDirError(f"{path}: exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    lock = os.path.join(path, LOCK_NAME)
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputDirError(f"{path}: locked by another writer") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield path
    finally:
        os.unlink(lock)


def _load_config(args):
    if getattr(args, "config", None):
        try:
            return RunConfig.load(args.config)
        except FileNotFoundError as exc:
            raise OSError(f"{args.config}: not found") from exc
    return RunConfig({})


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    cfg = _load_config(args)
    grid, layout, land_fraction = cfg.grid_and_layout()
    recipe = cfg.recipe(layout, seed=args.seed)
    n_steps = args.steps or cfg.section("data").n_steps
    mask = synthetic_mask(grid, seed=recipe.seed, land_fraction=land_fraction)
    store = generate_synthetic(recipe, grid, layout, n_steps, start=cfg.start(), mask=mask)
    with output_dir(args.out, args.force):
        export_store(store, args.out, recipe=recipe.to_dict(), config_sha256=cfg.digest())
    print(f"wrote {len(store)} states ({layout.total_channels}x{grid.n_lat}x{grid.n_lon}) to {args.out}")


def _train_common(args, cfg, store, trainer, stage):
    with output_dir(args.out, args.force):
        _write_json(os.path.join(args.out, "config.json"), cfg.raw)
        trainer.stats.save(os.path.join(args.out, "norm_stats.json"))
        trainer.run(log_path=os.path.join(args.out, "train_log.csv"), checkpoint_dir=args.out)
        ckpt = trainer.checkpoint()
        path = save_checkpoint(ckpt, os.path.join(args.out, f"ckpt_{stage}.bin"))
        trainer.mot.selection_.to_csv(os.path.join(args.out, "selection_matrix.csv"),
                                      store.layout.labels(store.grid))
    print(f"{stage}: {trainer.iteration} iterations, final loss "
          f"{trainer.loss_history[-1] if trainer.loss_history else float('nan'):.5f}; checkpoint {path}")


def cmd_train(args):
    cfg = _load_config(args)
    store = ingest_raw(args.data)
    tcfg = cfg.section("train", iterations=args.iterations, seed=args.seed)
    if tcfg.stage != "pretrain":
        raise ConfigError("train.stage must be 'pretrain'")
    train_range = store.split()[0]
    stats = compute_norm_stats(store, train_range)
    loss = cfg.section("loss", horizon=tcfg.horizon)
    trainer = Trainer(store, stats, cfg.section("net"), tcfg, loss, train_range)
    _train_common(args, cfg, store, trainer, "pretrain")


def cmd_finetune(args):
    cfg = _load_config(args)
    ckpt = load_checkpoint(args.from_)
    store = ingest_raw(args.data)
    tcfg = cfg.section("finetune", iterations=args.iterations, seed=args.seed)
    tcfg = replace(tcfg, stage="finetune")
    if tcfg.horizon < 2:
        raise ConfigError("finetune horizon must be at least 2")
    trainer = Trainer.from_checkpoint(ckpt, store, tcfg, store.split()[0])
    _train_common(args, cfg, store, trainer, "finetune")


def _model(args):
    return InferenceModel.from_checkpoint(load_checkpoint(args.from_), file_sha256(args.from_))


def cmd_predict(args):
    model = _model(args)
    store = ingest_raw(args.data)
    try:
        t0 = parse_timestamp(args.init)
    except ValueError as exc:
        raise ConfigError(f"--init: {exc}") from exc
    run = rollout_from_store(store, model, store.index_of(t0), args.steps)
    with output_dir(args.out, args.force):
        persist_run(run, model, args.out)
    print(f"wrote {len(run.states)} forecast states from {args.init} to {args.out}")


def cmd_evaluate(args):
    cfg = _load_config(args)
    ev = cfg.section("eval", steps=args.steps)
    model = _model(args)
    store = ingest_raw(args.data)
    inits = evaluation_inits(store, store.split()[2], model.n_inputs, ev.steps, ev.max_inits)
    if not inits:
        raise ConfigError("test split too short for the requested lead time")
    runs = [rollout_from_store(store, model, t, ev.steps) for t in inits]
    obs = None
    if ev.buoys_per_step:
        times = sorted({t for r in runs for t in r.timestamps})
        obs = synthetic_buoys(store, model.stats, times, ev.buoys_per_step, ev.buoy_variable,
                              sigma=ev.buoy_sigma, seed=0)
    report = evaluate(runs, store, model, obs)
    out = os.path.join(args.out, args.run_id)
    with output_dir(out, args.force):
        write_report(report, out)
    print(f"report written to {out}")


def cmd_ablate(args):
    cfg = _load_config(args)
    ab = cfg.section("ablate")
    variants = args.variants.split(",") if args.variants else ab.variants
    variants = [AblationVariant(v) for v in variants]
    seeds = list(range(args.seeds)) if args.seeds is not None else list(ab.seeds)
    store = ingest_raw(args.data)
    tcfg = cfg.section("train", iterations=args.iterations)
    train_range = store.split()[0]
    stats = compute_norm_stats(store, train_range)
    result = run_ablation(variants, store, stats, cfg.section("net"), tcfg, seeds,
                          steps=args.steps or ab.steps, train_range=train_range)
    out = os.path.join(args.out, args.run_id)
    with output_dir(out, args.force):
        result.to_csv(os.path.join(out, "ablation_compare.csv"))
    print(f"ablation report written to {out}")


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="motcast", description=__doc__)
    p.add_argument("--version", action="version",
                   version=f"motcast {__version__} (checkpoint format {CHECKPOINT_VERSION})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, force=True):
        if config:
            sp.add_argument("--config", help="run config JSON")
        if force:
            sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    sp = sub.add_parser("gen-data", help="generate a synthetic series store")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="single-step pretraining")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="multi-step autoregressive finetuning")
    common(sp)
    sp.add_argument("--from", dest="from_", required=True, help="checkpoint to start from")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("predict", help="autoregressive forecast from a ground-truth window")
    common(sp, config=False)
    sp.add_argument("--from", dest="from_", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", required=True, help="newest input instant (ISO 8601)")
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="RMSE report over the test split")
    common(sp)
    sp.add_argument("--from", dest="from_", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", default="reports")
    sp.add_argument("--run-id", default="eval")
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="train and compare ablation variants")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--variants", help="comma list of full,woMoT,woMoT_2times")
    sp.add_argument("--seeds", type=int, help="number of seeds (0..k-1)")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", default="reports")
    sp.add_argument("--run-id", default="ablation")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    workers = os.environ.get(WORKERS_ENV)
    if workers:
        torch.set_num_threads(int(workers))
    try:
        args.func(args)
    except (ConfigError, DataGapError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLossError, RolloutError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, IngestionError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
