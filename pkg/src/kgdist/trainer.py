"""Data-parallel training over self-sufficient partitions.

One worker per partition. Workers are OS processes (or run inline when
P == 1) joined by a reduce-then-broadcast barrier: every round each worker
contributes its dense gradient blocks, the coordinator computes a
deterministic pairwise-tree mean, and every worker applies the same averaged
gradients with the same optimizer schedule, so dense parameter replicas stay
bit-identical. Entity-embedding rows (embedding mode) are partition-local and
never reduced.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import os
import time
import traceback
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import KGError, NumericError, ProtocolError, ValidationError
from .graph import KnowledgeGraph
from .model import (MODE_EMBEDDING, MODE_FEATURE, EncodeCache, Gradients,
                    ModelConfig, ModelParams, encode, init_params,
                    loss_from_cache)
from .partition import PartitionSet
from .sampler import PartitionView, build_compute_graph, build_view, make_batches, sample_negatives

_DROPOUT_STREAM_OFFSET = 0x9E3779B9


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: Optional[int] = None       # None = full batch
    fixed_num_batches: Optional[int] = None
    learning_rate: float = 0.01
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0
    grad_clip: Optional[float] = None
    mp_start: str = "fork"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# Reduction
# ---------------------------------------------------------------------------

def allreduce_mean(payloads: list) -> list:
    """Elementwise mean of dense gradient payloads via a fixed pairwise tree.

    The tree shape depends only on worker count, so the reduction is
    deterministic, and the mean of P identical payloads is bit-identical to
    any one of them for power-of-two P.
    """
    if not payloads:
        raise ProtocolError("empty reduction")
    shapes = [a.shape for a in payloads[0]]
    for p in payloads[1:]:
        if [a.shape for a in p] != shapes:
            raise ProtocolError("gradient payloads disagree in shape")
    items = [list(p) for p in payloads]
    while len(items) > 1:
        merged = [
            [a + b for a, b in zip(items[i], items[i + 1])]
            for i in range(0, len(items) - 1, 2)
        ]
        if len(items) % 2:
            merged.append(items[-1])
        items = merged
    count = float(len(payloads))
    return [a / count for a in items[0]]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Optimizer:
    """SGD or Adam over the dense blocks, with lazy sparse updates for the
    entity-embedding table (moments touched only at updated rows)."""

    def __init__(self, config: TrainConfig, params: ModelParams):
        self.config = config
        self.t = 0
        self._adam = config.optimizer == "adam"
        if self._adam:
            self.m = [np.zeros_like(b) for b in params.dense_blocks()]
            self.v = [np.zeros_like(b) for b in params.dense_blocks()]
            if params.entity_embed is not None:
                self.em = np.zeros_like(params.entity_embed)
                self.ev = np.zeros_like(params.entity_embed)

    def step(self, params: ModelParams, dense_grads: list,
             embed_ids: Optional[np.ndarray] = None,
             embed_rows: Optional[np.ndarray] = None) -> None:
        cfg = self.config
        self.t += 1
        if cfg.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in dense_grads))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                dense_grads = [g * scale for g in dense_grads]

        blocks = params.dense_blocks()
        if len(blocks) != len(dense_grads):
            raise ProtocolError("gradient/parameter block count mismatch")
        lr = cfg.learning_rate
        if not self._adam:
            for p, g in zip(blocks, dense_grads):
                p -= lr * g
        else:
            bc1 = 1.0 - cfg.beta1 ** self.t
            bc2 = 1.0 - cfg.beta2 ** self.t
            for p, g, m, v in zip(blocks, dense_grads, self.m, self.v):
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * g * g
                p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)

        if embed_ids is not None and params.entity_embed is not None and len(embed_ids):
            table = params.entity_embed
            if not self._adam:
                table[embed_ids] -= lr * embed_rows
            else:
                bc1 = 1.0 - cfg.beta1 ** self.t
                bc2 = 1.0 - cfg.beta2 ** self.t
                m = self.em[embed_ids] * cfg.beta1 + (1.0 - cfg.beta1) * embed_rows
                v = self.ev[embed_ids] * cfg.beta2 + (1.0 - cfg.beta2) * embed_rows ** 2
                self.em[embed_ids] = m
                self.ev[embed_ids] = v
                table[embed_ids] -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)

        for p in blocks:
            if not np.all(np.isfinite(p)):
                raise NumericError("non-finite parameter after optimizer step")


def optimizer_step(params: ModelParams, averaged_grads: Gradients,
                   config: TrainConfig, optimizer: Optimizer) -> ModelParams:
    """Apply one synchronized update (dense averaged blocks plus the caller's
    own sparse embedding rows)."""
    optimizer.step(params, averaged_grads.dense_blocks(),
                   averaged_grads.embed_ids, averaged_grads.embed_rows)
    return params


# ---------------------------------------------------------------------------
# Worker
# ---------------------------------------------------------------------------

@dataclass
class WorkerArgs:
    wid: int
    view: PartitionView
    model_config: ModelConfig
    train_config: TrainConfig
    params: ModelParams
    input_table: Optional[np.ndarray]   # None in embedding mode (table lives in params)
    rounds: int
    batch_size: int
    eval_epochs: frozenset


class Worker:
    def __init__(self, args: WorkerArgs):
        self.args = args
        self.view = args.view
        self.params = args.params
        self.rng = np.random.default_rng(args.train_config.seed ^ self.view.partition_id)
        self.dropout_rng = np.random.default_rng(
            (args.train_config.seed ^ self.view.partition_id) + _DROPOUT_STREAM_OFFSET)
        self.opt = Optimizer(args.train_config, self.params)
        self.round_index = 0
        if args.model_config.mode == MODE_FEATURE:
            self.input_table = args.input_table
            self.input_ids = self.view.local_ids
        else:
            self.input_table = None  # resolved per batch from params.entity_embed
            self.input_ids = self.view.local_ids

    def _table(self) -> np.ndarray:
        if self.args.model_config.mode == MODE_EMBEDDING:
            return self.params.entity_embed
        return self.input_table

    def run_epoch(self, reduce_fn) -> dict:
        mc, tc = self.args.model_config, self.args.train_config
        view = self.view
        t_epoch = time.perf_counter()
        negatives = sample_negatives(view, mc.negatives_per_positive, self.rng)
        batches = make_batches(view.core_edges, negatives, self.args.batch_size,
                               self.rng, num_batches=self.args.rounds)
        training = mc.dropout > 0.0
        t_cg = t_enc = t_ls = 0.0
        losses = []
        for batch in batches:
            t0 = time.perf_counter()
            cg = build_compute_graph(batch, view, mc.num_layers)
            t1 = time.perf_counter()
            cache = EncodeCache()
            encode(self.params, mc, cg, self._table(), self.input_ids,
                   training=training, dropout_rng=self.dropout_rng, cache=cache)
            t2 = time.perf_counter()
            loss, grads = loss_from_cache(self.params, mc, batch, cg, cache, self.input_ids)
            averaged = reduce_fn(self.round_index, grads.dense_blocks())
            self.opt.step(self.params, averaged, grads.embed_ids, grads.embed_rows)
            t3 = time.perf_counter()
            self.round_index += 1
            t_cg += t1 - t0
            t_enc += t2 - t1
            t_ls += t3 - t2
            losses.append(loss)
        return {
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "batches": len(batches),
            "t_cg": t_cg,
            "t_encode": t_enc,
            "t_loss_step": t_ls,
            "t_epoch": time.perf_counter() - t_epoch,
        }


def _worker_process(conn, args: WorkerArgs) -> None:
    try:
        worker = Worker(args)

        def reduce_fn(round_index, blocks):
            conn.send(("grad", round_index, blocks))
            kind, payload = conn.recv()
            if kind != "mean":
                raise ProtocolError(f"worker expected mean, got {kind!r}")
            return payload

        for epoch in range(args.train_config.epochs):
            stats = worker.run_epoch(reduce_fn)
            conn.send(("epoch", epoch, stats))
            if epoch in args.eval_epochs:
                conn.send(("state",
                           worker.params.dense_blocks() if args.wid == 0 else None,
                           worker.params.entity_embed))
        conn.send(("done", worker.params.dense_blocks(), worker.params.entity_embed))
        conn.close()
    except BaseException as exc:  # surfaced to the coordinator
        try:
            conn.send(("error", args.wid, f"{type(exc).__name__}: {exc}",
                       traceback.format_exc()))
            conn.close()
        except Exception:
            pass


# ---------------------------------------------------------------------------
# Coordinator
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    rounds_per_epoch: int
    batch_sizes: list
    epoch_seconds: list = field(default_factory=list)
    loss_curve: list = field(default_factory=list)
    val_mrr: list = field(default_factory=list)          # (epoch, mrr)
    cg_build_per_batch: list = field(default_factory=list)
    encode_per_batch: list = field(default_factory=list)
    loss_step_per_batch: list = field(default_factory=list)

    def mean_timings(self) -> dict:
        def m(x):
            return float(np.mean(x)) if x else 0.0
        return {
            "epoch_time": m(self.epoch_seconds),
            "cg_build": m(self.cg_build_per_batch),
            "encode": m(self.encode_per_batch),
            "loss_step": m(self.loss_step_per_batch),
        }

    def format_metrics(self) -> str:
        lines = []
        for e, (loss, secs) in enumerate(zip(self.loss_curve, self.epoch_seconds)):
            parts = [f"epoch={e}", f"loss={loss:.6f}", f"time={secs:.3f}"]
            mrr = dict(self.val_mrr).get(e)
            if mrr is not None:
                parts.append(f"val_mrr={mrr:.4f}")
            lines.append(" ".join(parts))
        return "\n".join(lines)


def _plan_batches(views: list, model_config: ModelConfig, train_config: TrainConfig) -> tuple:
    """Per-worker batch size and the shared number of reduction rounds."""
    s = model_config.negatives_per_positive
    stream_lens = [v.num_core * (s + 1) for v in views]
    if any(L == 0 for L in stream_lens):
        raise ValidationError("a partition has no core edges to train on")
    if train_config.fixed_num_batches is not None:
        rounds = train_config.fixed_num_batches
        sizes = [max(1, math.ceil(L / rounds)) for L in stream_lens]
    else:
        sizes = [train_config.batch_size or L for L in stream_lens]
        rounds = max(math.ceil(L / b) for L, b in zip(stream_lens, sizes))
    return sizes, rounds


def _assemble_embed(pset: PartitionSet, tables: list, base: np.ndarray) -> np.ndarray:
    """Merge per-worker embedding tables, taking each vertex's row from the
    lowest-id partition holding it as a core-edge endpoint."""
    out = base.copy()
    owner = np.full(len(base), -1, dtype=np.int64)
    for part in sorted(pset.partitions, key=lambda p: p.id):
        ends = np.concatenate([part.core_vertices, part.replicated_vertices])
        free = ends[owner[ends] < 0]
        owner[free] = part.id
    for wid, table in enumerate(tables):
        pid = pset.partitions[wid].id
        rows = np.flatnonzero(owner == pid)
        if len(rows):
            out[rows] = table[rows]
    return out


def train(
    pset: PartitionSet,
    graph: KnowledgeGraph,
    model_config: ModelConfig,
    train_config: TrainConfig,
    initial_params: Optional[ModelParams] = None,
    eval_fn=None,
) -> tuple:
    """Run synchronized data-parallel training; returns (params, report).

    eval_fn, when given, is called as eval_fn(params) -> float at epochs
    selected by train_config.eval_every and its result logged as val_mrr.
    """
    if pset.hops != model_config.num_layers:
        raise ValidationError(
            f"partitions expanded for {pset.hops} hops but model has "
            f"{model_config.num_layers} layers")
    if model_config.num_relations != pset.num_relations:
        raise ValidationError("model num_relations != partition set num_relations")

    views = [build_view(p, pset.num_entities, pset.num_relations) for p in pset.partitions]
    P = len(views)

    params = initial_params.copy() if initial_params is not None else init_params(
        model_config, np.random.default_rng(train_config.seed),
        num_entities=pset.num_entities)

    if model_config.mode == MODE_FEATURE:
        if graph.features is None:
            raise ValidationError("feature mode requires graph features")
        input_table = graph.features
    else:
        if params.entity_embed is None:
            raise ValidationError("embedding mode requires an entity table in params")
        input_table = None

    sizes, rounds = _plan_batches(views, model_config, train_config)
    eval_epochs = frozenset(
        e for e in range(train_config.epochs)
        if train_config.eval_every and (e + 1) % train_config.eval_every == 0
    ) if eval_fn is not None else frozenset()

    report = TrainReport(rounds_per_epoch=rounds, batch_sizes=sizes)

    def record_epoch(stats_list):
        report.loss_curve.append(float(np.mean([s["loss"] for s in stats_list])))
        report.epoch_seconds.append(max(s["t_epoch"] for s in stats_list))
        nb = sum(s["batches"] for s in stats_list)
        report.cg_build_per_batch.append(sum(s["t_cg"] for s in stats_list) / nb)
        report.encode_per_batch.append(sum(s["t_encode"] for s in stats_list) / nb)
        report.loss_step_per_batch.append(sum(s["t_loss_step"] for s in stats_list) / nb)

    if P == 1:
        worker = Worker(WorkerArgs(0, views[0], model_config, train_config,
                                   params, input_table, rounds, sizes[0], eval_epochs))

        def reduce_fn(_round, blocks):
            return allreduce_mean([blocks])

        for epoch in range(train_config.epochs):
            stats = worker.run_epoch(reduce_fn)
            record_epoch([stats])
            if epoch in eval_epochs:
                report.val_mrr.append((epoch, float(eval_fn(worker.params))))
        return worker.params, report

    # multi-worker: one process per partition, coordinator reduces
    ctx = mp.get_context(os.environ.get("KGDIST_MP_START", train_config.mp_start))
    conns, procs = [], []
    try:
        for wid in range(P):
            parent_conn, child_conn = ctx.Pipe()
            wargs = WorkerArgs(wid, views[wid], model_config, train_config,
                               params.copy(), input_table, rounds, sizes[wid], eval_epochs)
            proc = ctx.Process(target=_worker_process, args=(child_conn, wargs), daemon=True)
            proc.start()
            child_conn.close()
            conns.append(parent_conn)
            procs.append(proc)

        def recv_expect(conn, kinds):
            msg = conn.recv()
            if msg[0] == "error":
                _, wid, summary, tb = msg
                cls = NumericError if summary.startswith("NumericError") else KGError
                raise cls(f"worker {wid} failed: {summary}\n{tb}")
            if msg[0] not in kinds:
                raise ProtocolError(f"unexpected message {msg[0]!r}, wanted {kinds}")
            return msg

        final_dense = None
        final_tables = [None] * P
        for epoch in range(train_config.epochs):
            for rnd in range(rounds):
                payloads = []
                for conn in conns:
                    _, round_index, blocks = recv_expect(conn, ("grad",))
                    if round_index != epoch * rounds + rnd:
                        raise ProtocolError(
                            f"reduction round mismatch: worker at {round_index}, "
                            f"coordinator at {epoch * rounds + rnd}")
                    payloads.append(blocks)
                mean = allreduce_mean(payloads)
                for conn in conns:
                    conn.send(("mean", mean))
            stats_list = []
            for conn in conns:
                _, _, stats = recv_expect(conn, ("epoch",))
                stats_list.append(stats)
            record_epoch(stats_list)
            if epoch in eval_epochs:
                dense = None
                tables = []
                for conn in conns:
                    _, d, table = recv_expect(conn, ("state",))
                    dense = d if d is not None else dense
                    tables.append(table)
                snap = params.copy()
                snap.set_dense_blocks(dense)
                if model_config.mode == MODE_EMBEDDING:
                    snap.entity_embed = _assemble_embed(pset, tables, params.entity_embed)
                report.val_mrr.append((epoch, float(eval_fn(snap))))

        dense_all = []
        for wid, conn in enumerate(conns):
            _, dense, table = recv_expect(conn, ("done",))
            dense_all.append(dense)
            final_tables[wid] = table
        final_dense = dense_all[0]
        for wid, dense in enumerate(dense_all[1:], 1):
            for a, b in zip(final_dense, dense):
                if not np.array_equal(a, b):
                    raise ProtocolError(
                        f"replica divergence: worker {wid} dense blocks differ from worker 0")

        out = params.copy()
        out.set_dense_blocks(final_dense)
        if model_config.mode == MODE_EMBEDDING:
            out.entity_embed = _assemble_embed(pset, final_tables, params.entity_embed)
        return out, report
    finally:
        for proc in procs:
            if proc.is_alive():
                proc.terminate()
            proc.join(timeout=5)


# ---------------------------------------------------------------------------
# Component benchmark
# ---------------------------------------------------------------------------

def bench_components(
    graph: KnowledgeGraph,
    model_config: ModelConfig,
    train_config: TrainConfig,
    worker_counts: list,
    partitioners: list = ("vertexcut",),
    partition_seed: int = 0,
) -> list:
    """Time the per-batch components for each (partitioner, worker count).

    Returns one row per combination with epoch time and mean per-batch
    timings for compute-graph build, encode, and loss+backward+step.
    """
    from .partition import neighborhood_expand, random_edge_partition, vertex_cut_partition

    rows = []
    for method in partitioners:
        for count in worker_counts:
            part_fn = vertex_cut_partition if method == "vertexcut" else random_edge_partition
            pset = part_fn(graph, count, partition_seed)
            pset = neighborhood_expand(pset, graph, model_config.num_layers)
            _, report = train(pset, graph, model_config, train_config)
            timings = report.mean_timings()
            rows.append({
                "partitioner": method,
                "workers": count,
                "rounds": report.rounds_per_epoch,
                **timings,
            })
    return rows


def format_bench_rows(rows: list) -> str:
    header = (f"{'partitioner':>12} {'workers':>7} {'rounds':>6} {'epoch_s':>10} "
              f"{'cg_build_s':>11} {'encode_s':>10} {'loss_step_s':>12}")
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['partitioner']:>12} {r['workers']:>7} {r['rounds']:>6} "
            f"{r['epoch_time']:>10.4f} {r['cg_build']:>11.6f} "
            f"{r['encode']:>10.6f} {r['loss_step']:>12.6f}")
    return "\n".join(lines)
