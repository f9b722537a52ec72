"""Command-line entry point.

    codistill distill <config> [--out DIR] [--steps N]
    codistill gradcheck [--seed S]
    codistill probe <config> <checkpoint> [--epochs N] [--images N] [--projector TID]
    codistill dump-features <config> <target> <out> [--checkpoint PATH] [--dataset ID ...]
    codistill analyze pca <features.bin> [--pool patch|cls|all] [--dataset PREFIX] [--out CSV]
    codistill analyze losscorr <log.csv> [--pair A,B] [--out CSV]
    codistill analyze attn <config> <checkpoint> [--source S] [--layer L] [--k K] ...

Failures print a single ``error: <Kind>: <message>`` line on stderr and exit 1.
``DUNE_SEED_OVERRIDE`` replaces the seed of any loaded config.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    correlation_table,
    dump_features,
    explained_variance_curve,
    features_from_file,
    kmedoids_attention,
    loss_update_correlation,
    patch_attention_maps,
    read_loss_history,
    write_rows,
)
from .config import RunConfig, parse_config
from .errors import CodistillError, ConfigError, ContractError
from .gradcheck import format_table, run_gradcheck
from .teachers import read_features, teacher_forward
from .tensor import no_grad
from .trainer import (
    Trainer,
    linear_probe,
    load_checkpoint,
    make_patch_task,
    rng_stream,
    train,
)

SEED_ENV = "DUNE_SEED_OVERRIDE"


def load_config(path) -> RunConfig:
    cfg = parse_config(path)
    raw = os.environ.get(SEED_ENV)
    if raw is not None and raw.strip():
        try:
            seed = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
        cfg = cfg.replace(seed=seed)
    return cfg


def _restored(cfg: RunConfig, checkpoint) -> Trainer:
    trainer = Trainer(cfg)
    if checkpoint is not None:
        trainer.load_state(load_checkpoint(checkpoint))
    return trainer


# subcommands


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        if args.steps < 1:
            raise ContractError("--steps must be positive")
        cfg = cfg.replace(steps=args.steps)
    out = Path(args.out or cfg.out_dir)
    result = train(cfg, out)
    totals = result.totals
    print(f"steps={len(totals)} first_total={totals[0]!r} final_total={totals[-1]!r}")
    print(f"checkpoint={out / f'ckpt-{result.checkpoint.step:06d}.bin'}")
    print(f"log={out / 'log.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed)
    print(format_table(results))
    bad = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} ok")
    return 0 if not bad else 1


def cmd_probe(args) -> int:
    cfg = load_config(args.config)
    trainer = _restored(cfg, args.checkpoint)
    projector = None
    if args.projector:
        if args.projector not in trainer.projectors:
            raise ContractError(f"unknown teacher {args.projector!r} for --projector")
        projector = trainer.projectors[args.projector]
    task = make_patch_task(args.images, cfg.student, rng_stream(cfg.seed, "probe"))
    res = linear_probe(trainer.student, task, args.epochs, projector, seed=cfg.seed)
    print(f"accuracy={res.accuracy!r} baseline={res.baseline_accuracy!r} "
          f"train_accuracy={res.train_accuracy!r}")
    return 0


def _producer(trainer: Trainer, target: str):
    teachers = {t.id: t for t in trainer.teachers}
    if target == "student":
        def run(images, ids):
            with no_grad():
                return trainer.student.forward(images)[0]
        return run
    if target.startswith("proj:"):
        tid = target[5:]
        if tid not in trainer.projectors:
            raise ContractError(f"unknown teacher {tid!r} in target {target!r}")
        proj = trainer.projectors[tid]

        def run(images, ids):
            with no_grad():
                final, inter = trainer.student.forward(
                    images, collect_intermediates=proj.needs_intermediates)
                return proj(final, inter)
        return run
    if target in teachers:
        spec = teachers[target]
        return lambda images, ids: teacher_forward(spec, images, ids)
    raise ContractError(
        f"unknown target {target!r}; expected student, proj:<teacher> or a teacher id"
    )


def cmd_dump_features(args) -> int:
    cfg = load_config(args.config)
    datasets = args.dataset or [d.id for d in cfg.datasets]
    if args.checkpoint is None and (args.target == "student" or args.target.startswith("proj:")):
        trainer = Trainer(cfg)
    else:
        trainer = _restored(cfg, args.checkpoint)
    for ds in datasets:
        trainer.registry.size(ds)
    count = dump_features(_producer(trainer, args.target), trainer.registry, datasets, args.out)
    print(f"records={count} out={args.out}")
    return 0


def cmd_analyze_pca(args) -> int:
    fm = features_from_file(read_features(args.features), args.pool, args.dataset,
                            source=str(args.features))
    curve = explained_variance_curve(fm)
    rows = [(k + 1, float(v)) for k, v in enumerate(curve)]
    write_rows(args.out or sys.stdout, ["components", "cumulative_explained_variance"], rows)
    return 0


def cmd_analyze_losscorr(args) -> int:
    history = read_loss_history(args.log)
    if args.pair:
        parts = [p.strip() for p in args.pair.split(",")]
        if len(parts) != 2 or not all(parts):
            raise ContractError(f"--pair needs two teacher ids separated by a comma, got {args.pair!r}")
        print(repr(loss_update_correlation(history, *parts)))
        return 0
    write_rows(args.out or sys.stdout, ["teacher_a", "teacher_b", "r"], correlation_table(history))
    return 0


def cmd_analyze_attn(args) -> int:
    cfg = load_config(args.config)
    trainer = _restored(cfg, args.checkpoint)
    ds = args.dataset or cfg.datasets[0].id
    n = min(args.images, trainer.registry.size(ds))
    images = np.stack([trainer.registry.pixels(ds, i) for i in range(n)])
    with no_grad():
        if args.source == "student":
            layer = args.layer + cfg.student.depth if args.layer < 0 else args.layer
            probs = trainer.student.attention_probabilities(images, layer)
        elif args.source.startswith("proj:") and args.source[5:] in trainer.projectors:
            final, _ = trainer.student.forward(images)
            probs = trainer.projectors[args.source[5:]].attention_probabilities(final)
        else:
            raise ContractError(f"unknown attention source {args.source!r}")
    maps = patch_attention_maps(probs)
    res = kmedoids_attention(maps, args.k, rng=rng_stream(cfg.seed, "kmedoids"))
    rows = [(i, int(c)) for i, c in enumerate(res.labels)]
    write_rows(args.out or sys.stdout, ["map_index", "cluster"], rows)
    print(f"cost={res.cost!r} iterations={res.iterations} medoids="
          + ",".join(str(int(m)) for m in res.medoids), file=sys.stderr)
    return 0


# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="codistill",
                                description="Multi-teacher feature co-distillation at desk scale.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    d = sub.add_parser("distill", help="train a student against the configured teachers")
    d.add_argument("config", help="run config file")
    d.add_argument("--out", help="output directory (default: run.out_dir)")
    d.add_argument("--steps", type=int, help="override run.steps")
    d.set_defaults(func=cmd_distill)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, default=0, help="seed for the random test inputs")
    g.set_defaults(func=cmd_gradcheck)

    pr = sub.add_parser("probe", help="linear patch probe on frozen student features")
    pr.add_argument("config")
    pr.add_argument("checkpoint")
    pr.add_argument("--epochs", type=int, default=200, help="full-batch optimisation steps")
    pr.add_argument("--images", type=int, default=32, help="number of probe images")
    pr.add_argument("--projector", metavar="TID", help="probe the projected features of this teacher")
    pr.set_defaults(func=cmd_probe)

    f = sub.add_parser("dump-features", help="write a DUNEFEAT file for a teacher or the student")
    f.add_argument("config")
    f.add_argument("target", help="teacher id, 'student' or 'proj:<teacher id>'")
    f.add_argument("out", help="output .bin path")
    f.add_argument("--checkpoint", help="student checkpoint (default: initial weights)")
    f.add_argument("--dataset", action="append", metavar="ID",
                   help="dataset to dump; repeatable (default: all)")
    f.set_defaults(func=cmd_dump_features)

    a = sub.add_parser("analyze", help="feature compactness, loss correlation or attention clustering")
    asub = a.add_subparsers(dest="analysis", metavar="analysis")
    asub.required = True

    pca = asub.add_parser("pca", help="cumulative explained variance of a feature file")
    pca.add_argument("features")
    pca.add_argument("--pool", choices=("patch", "cls", "all"), default="patch")
    pca.add_argument("--dataset", metavar="PREFIX", help="only image ids with this prefix")
    pca.add_argument("--out", help="CSV path (default: stdout)")
    pca.set_defaults(func=cmd_analyze_pca)

    lc = asub.add_parser("losscorr", help="Pearson r of per-step loss changes between teachers")
    lc.add_argument("log", help="log.csv written by distill")
    lc.add_argument("--pair", metavar="A,B", help="print a single r for this pair")
    lc.add_argument("--out", help="CSV path for the full table (default: stdout)")
    lc.set_defaults(func=cmd_analyze_losscorr)

    at = asub.add_parser("attn", help="k-medoids clustering of patch attention maps")
    at.add_argument("config")
    at.add_argument("checkpoint")
    at.add_argument("--source", default="student", help="'student' or 'proj:<teacher id>'")
    at.add_argument("--layer", type=int, default=-1, help="student block index (default: last)")
    at.add_argument("--k", type=int, default=9, help="number of clusters")
    at.add_argument("--images", type=int, default=4, help="images taken from the dataset")
    at.add_argument("--dataset", metavar="ID", help="dataset id (default: first declared)")
    at.add_argument("--out", help="CSV path (default: stdout)")
    at.set_defaults(func=cmd_analyze_attn)
    return p


def _one_line(exc: BaseException) -> str:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    return f"error: {exc.__class__.__name__}: {msg}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CodistillError, OSError, ValueError, KeyError, IndexError, FloatingPointError) as exc:
        print(_one_line(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
