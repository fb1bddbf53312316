"""Command-line pipeline driver: generate, stats, partition, train, eval, bench.

Every command is deterministic given --seed (wall-clock timings aside). Exit
codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

import importlib

# the package re-exports the evaluate() function under the same name as the
# submodule, so fetch the module explicitly
ev = importlib.import_module("kgdist.evaluate")
from . import graph as gmod
from . import model as mmod
from . import partition as pmod
from . import trainer as tmod
from .errors import KGError, NumericError, ValidationError


def _load_dataset(args):
    graph, split = gmod.load_dataset_dir(args.data)
    if getattr(args, "features", None):
        gmod.load_features(args.features, graph)
    return graph, split


def _write_run_config(out_dir: str, args, extra: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.txt"), "w", encoding="utf-8") as fh:
        for key, val in sorted(vars(args).items()):
            if key in ("func",):
                continue
            fh.write(f"{key}={val}\n")
        for key, val in sorted(extra.items()):
            fh.write(f"{key}={val}\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    graph, split = gmod.generate_synthetic(
        args.entities, args.relations, args.avg_degree, args.seed)
    gmod.write_dataset_dir(graph, split, args.out)
    print(gmod.graph_stats(graph).format())
    print(f"train/valid/test = {len(split.train)}/{len(split.valid)}/{len(split.test)}")
    return 0


def cmd_stats(args) -> int:
    graph, split = _load_dataset(args)
    print(gmod.graph_stats(graph).format())
    print(f"train/valid/test = {len(split.train)}/{len(split.valid)}/{len(split.test)}")
    return 0


def cmd_partition(args) -> int:
    graph, _ = _load_dataset(args)
    if args.partitioner == "vertexcut":
        pset = pmod.vertex_cut_partition(graph, args.parts, args.seed, epsilon=args.epsilon)
    elif args.partitioner == "random":
        pset = pmod.random_edge_partition(graph, args.parts, args.seed)
    else:
        raise ValidationError(f"unknown partitioner {args.partitioner!r}")
    pset = pmod.neighborhood_expand(pset, graph, args.hops)
    pmod.write_partitions(pset, args.out)
    _write_run_config(args.out, args, {"graph_checksum": pset.graph_checksum})
    print(pmod.partition_stats(pset).format())
    return 0


def _model_config(args, graph) -> mmod.ModelConfig:
    if args.mode == mmod.MODE_FEATURE:
        if graph.features is None:
            raise ValidationError("feature mode needs --features")
        d_in = graph.features.shape[1]
    else:
        d_in = args.dim
    dims = [d_in] + [args.dim] * args.layers
    return mmod.ModelConfig(
        num_layers=args.layers,
        dims=dims,
        num_bases=args.bases,
        num_relations=graph.num_relations,
        negatives_per_positive=args.negatives,
        dropout=args.dropout,
        mode=args.mode,
    )


def _train_config(args) -> tmod.TrainConfig:
    return tmod.TrainConfig(
        epochs=args.epochs,
        batch_size=None if args.full_batch else args.batch_size,
        fixed_num_batches=args.fixed_batches,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        seed=args.seed,
        eval_every=args.eval_every,
        grad_clip=args.grad_clip,
    )


def cmd_train(args) -> int:
    graph, split = _load_dataset(args)
    pset = pmod.read_partitions(args.parts_dir, graph)
    if pset.hops != args.layers:
        raise ValidationError(
            f"partition directory was expanded for {pset.hops} hops, model has "
            f"{args.layers} layers; re-partition or change --layers")
    model_config = _model_config(args, graph)
    train_config = _train_config(args)

    eval_fn = None
    if args.eval_every and len(split.valid):
        def eval_fn(params):
            res = ev.evaluate(params, model_config, graph, split, which="valid")
            return res.mrr

    params, report = tmod.train(pset, graph, model_config, train_config, eval_fn=eval_fn)

    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.npz")
    mmod.save_checkpoint(params, model_config, ckpt)
    with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8") as fh:
        metrics = report.format_metrics()
        fh.write(metrics + ("\n" if metrics else ""))
    _write_run_config(args.out, args, {
        "graph_checksum": pset.graph_checksum,
        "rounds_per_epoch": report.rounds_per_epoch,
        "num_parameters": params.num_parameters(),
    })
    print(report.format_metrics())
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_eval(args) -> int:
    graph, split = _load_dataset(args)
    params, model_config = mmod.load_checkpoint(args.checkpoint)
    candidates = None
    if args.protocol == "candidates":
        if not args.candidates:
            raise ValidationError("--protocol candidates requires --candidates FILE")
        candidates = ev.read_candidates(args.candidates)
    result = ev.evaluate(params, model_config, graph, split, which=args.split,
                         protocol=args.protocol, candidates=candidates,
                         tie_policy=args.tie_policy)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        ev.write_results(result, os.path.join(args.out, "results.tsv"))
        _write_run_config(args.out, args, {"graph_checksum": graph.checksum()})
    print(f"{'split':>8} {'records':>8} {'MRR':>8} {'Hits@1':>8} {'Hits@3':>8} {'Hits@10':>8}")
    print(f"{args.split:>8} {len(result.records):>8} {result.mrr:>8.4f} "
          f"{result.hits[1]:>8.4f} {result.hits[3]:>8.4f} {result.hits[10]:>8.4f}")
    return 0


def cmd_bench(args) -> int:
    graph, split = _load_dataset(args)
    model_config = _model_config(args, graph)
    train_config = _train_config(args)
    workers = [int(x) for x in args.workers.split(",")]
    partitioners = args.partitioners.split(",")
    rows = tmod.bench_components(graph, model_config, train_config, workers,
                                 partitioners=partitioners, partition_seed=args.seed)
    table = tmod.format_bench_rows(rows)
    print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.txt"), "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
        with open(os.path.join(args.out, "bench.tsv"), "w", encoding="utf-8") as fh:
            keys = ["partitioner", "workers", "rounds", "epoch_time", "cg_build",
                    "encode", "loss_step"]
            fh.write("\t".join(keys) + "\n")
            for r in rows:
                fh.write("\t".join(str(r[k]) for k in keys) + "\n")
        _write_run_config(args.out, args, {"graph_checksum": graph.checksum()})
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=2, help="graph conv layers (= hops)")
    p.add_argument("--dim", type=int, default=32, help="embedding width")
    p.add_argument("--bases", type=int, default=2, help="basis matrices per layer")
    p.add_argument("--negatives", type=int, default=1, help="negatives per positive")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--mode", choices=[mmod.MODE_FEATURE, mmod.MODE_EMBEDDING],
                   default=mmod.MODE_EMBEDDING)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--full-batch", action="store_true")
    p.add_argument("--fixed-batches", type=int, default=None,
                   help="force this many reduction rounds per epoch")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--grad-clip", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgdist",
        description="Distributed training toolkit for GNN-based knowledge graph "
                    "embeddings (partition / train / eval / bench).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--entities", type=int, required=True)
    p.add_argument("--relations", type=int, required=True)
    p.add_argument("--avg-degree", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("stats", help="print dataset statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("partition", help="partition + expand a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--parts", type=int, required=True)
    p.add_argument("--hops", type=int, required=True)
    p.add_argument("--partitioner", choices=["vertexcut", "random"], default="vertexcut")
    p.add_argument("--epsilon", type=float, default=0.05, help="core-edge balance bound")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="distributed training on a partition directory")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--parts-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank a split with a trained checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["valid", "test"], default="test")
    p.add_argument("--protocol", choices=["filtered", "candidates"], default="filtered")
    p.add_argument("--candidates", default=None)
    p.add_argument("--tie-policy", choices=[ev.TIE_MEAN, ev.TIE_OPTIMISTIC,
                                            ev.TIE_PESSIMISTIC], default=ev.TIE_MEAN)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="component timing across worker counts")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--workers", default="1,2,4", help="comma-separated worker counts")
    p.add_argument("--partitioners", default="vertexcut",
                   help="comma-separated: vertexcut,random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_bench)

    return parser


def _apply_config_file(argv: list) -> list:
    """Splice key=value pairs from --config FILE in as flags, so explicit
    command-line flags still win (argparse keeps the last occurrence)."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise ValidationError("--config requires a file path")
    path = argv[i + 1]
    rest = argv[:i] + argv[i + 2:]
    if not rest:
        raise ValidationError("--config needs a subcommand")
    if not os.path.isfile(path):
        raise ValidationError(f"config file {path} not found")
    injected = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"malformed config line {line!r}")
            key, val = (x.strip() for x in line.split("=", 1))
            flag = "--" + key.replace("_", "-")
            if val.lower() in ("true", "false"):
                if val.lower() == "true":
                    injected.append(flag)
            else:
                injected.extend([flag, val])
    return rest[:1] + injected + rest[1:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _apply_config_file(argv)
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return 0 if exc.code in (0, None) else 1
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (KGError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
