"""Partition-local sampling machinery.

Everything here speaks partition-local vertex ids. A PartitionView holds the
bidirectional message-edge structure of one partition (forward relations r,
inverse relations r+R; self-loops are synthesized per compute graph with
relation id 2R) plus the local positive-triple set used to reject false
negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import IntegrityError, SamplingError, ValidationError
from .partition import Partition


def _gather_ranges(indptr: np.ndarray, items: np.ndarray, keys: np.ndarray) -> np.ndarray:
    starts = indptr[keys]
    counts = indptr[keys + 1] - starts
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=items.dtype)
    out_idx = np.repeat(starts + counts, counts)
    out_idx += np.arange(total) - np.repeat(np.cumsum(counts), counts)
    return items[out_idx]


@dataclass
class PartitionView:
    partition_id: int
    num_relations: int               # R before inverse doubling
    local_ids: np.ndarray            # global id per local id
    edges: np.ndarray                # (m, 3) local-id triples, core first
    num_core: int
    pool: np.ndarray                 # local ids legal as corruption targets
    hop_count: int
    # message edges sorted by destination
    msg_indptr: np.ndarray = field(repr=False)
    msg_src: np.ndarray = field(repr=False)
    msg_rel: np.ndarray = field(repr=False)
    msg_norm: np.ndarray = field(repr=False)
    positive_keys: np.ndarray = field(repr=False)   # sorted triple keys

    @property
    def num_vertices(self) -> int:
        return len(self.local_ids)

    @property
    def core_edges(self) -> np.ndarray:
        return self.edges[:self.num_core]

    @property
    def self_loop_rel(self) -> int:
        return 2 * self.num_relations

    def triple_keys(self, triples: np.ndarray) -> np.ndarray:
        n = self.num_vertices
        return (triples[:, 0] * self.num_relations + triples[:, 1]) * n + triples[:, 2]

    def is_positive(self, triples: np.ndarray) -> np.ndarray:
        keys = self.triple_keys(triples)
        idx = np.searchsorted(self.positive_keys, keys)
        idx = np.minimum(idx, len(self.positive_keys) - 1) if len(self.positive_keys) else idx
        if len(self.positive_keys) == 0:
            return np.zeros(len(triples), dtype=bool)
        return self.positive_keys[idx] == keys


def build_view(partition: Partition, num_entities: int, num_relations: int) -> PartitionView:
    """Local-id view of one partition with bidirectional message edges and
    per-(destination, relation) mean normalization."""
    local = partition.local_vertices()
    g2l = partition.global_to_local(num_entities)
    glob_edges = partition.all_edges()
    edges = glob_edges.copy()
    edges[:, 0] = g2l[glob_edges[:, 0]]
    edges[:, 2] = g2l[glob_edges[:, 2]]
    if len(edges) and edges[:, [0, 2]].min() < 0:
        raise IntegrityError("partition edge references a vertex missing from its vertex list")

    h, r, t = edges[:, 0], edges[:, 1], edges[:, 2]
    msg_src = np.concatenate([h, t])
    msg_dst = np.concatenate([t, h])
    msg_rel = np.concatenate([r, r + num_relations])

    n_local = len(local)
    order = np.argsort(msg_dst, kind="stable")
    msg_src, msg_dst, msg_rel = msg_src[order], msg_dst[order], msg_rel[order]
    indptr = np.zeros(n_local + 1, dtype=np.int64)
    np.add.at(indptr, msg_dst + 1, 1)
    np.cumsum(indptr, out=indptr)

    # 1 / c_{v,r}: per-relation in-degree of the destination
    pair = msg_dst * (2 * num_relations) + msg_rel
    uniq, inv, counts = np.unique(pair, return_inverse=True, return_counts=True)
    msg_norm = 1.0 / counts[inv]

    n_core_ends = len(partition.core_vertices) + len(partition.replicated_vertices)
    keys = np.sort((edges[:, 0] * num_relations + edges[:, 1]) * n_local + edges[:, 2])

    return PartitionView(
        partition_id=partition.id,
        num_relations=num_relations,
        local_ids=local,
        edges=edges,
        num_core=partition.num_core_edges,
        pool=np.arange(n_core_ends, dtype=np.int64),
        hop_count=partition.hop_count,
        msg_indptr=indptr,
        msg_src=msg_src,
        msg_rel=msg_rel,
        msg_norm=msg_norm,
        positive_keys=np.unique(keys),
    )


def full_graph_view(graph) -> PartitionView:
    """Whole graph as a single partition (used for evaluation-time encoding)."""
    whole = Partition(
        id=0,
        core=graph.triples,
        support=np.zeros((0, 3), dtype=np.int64),
        core_vertices=np.arange(graph.num_entities, dtype=np.int64),
        replicated_vertices=np.zeros(0, dtype=np.int64),
        support_vertices=np.zeros(0, dtype=np.int64),
        hop_count=0,
        core_edge_ids=np.arange(graph.num_edges, dtype=np.int64),
    )
    whole._local = np.arange(graph.num_entities, dtype=np.int64)
    return build_view(whole, graph.num_entities, graph.num_relations)


# ---------------------------------------------------------------------------
# Negative sampling
# ---------------------------------------------------------------------------

MAX_RESAMPLE_ROUNDS = 100


def sample_negatives(view: PartitionView, negatives_per_positive: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Corrupt each core edge s times within the partition's core vertices.

    Head or tail is replaced with probability 1/2 by a uniform draw from the
    core-vertex pool, rejecting draws that reproduce the original entity or
    any local positive triple. Returns an (s * num_core, 3) local triple
    array in per-edge order.
    """
    s = negatives_per_positive
    if s < 0:
        raise ValidationError("negatives_per_positive must be >= 0")
    core = view.core_edges
    if s == 0 or len(core) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if len(view.pool) < 2:
        raise SamplingError("partition has fewer than 2 core vertices")

    neg = np.repeat(core, s, axis=0)
    original = neg.copy()
    corrupt_head = rng.random(len(neg)) < 0.5
    side_col = np.where(corrupt_head, 0, 2)
    rows = np.arange(len(neg))

    pending = np.ones(len(neg), dtype=bool)
    for _ in range(MAX_RESAMPLE_ROUNDS):
        idx = np.flatnonzero(pending)
        if len(idx) == 0:
            break
        draw = view.pool[rng.integers(len(view.pool), size=len(idx))]
        neg[idx, side_col[idx]] = draw
        bad = (draw == original[idx, side_col[idx]]) | view.is_positive(neg[idx])
        pending[idx] = bad
    if pending.any():
        e = int(np.flatnonzero(pending)[0])
        raise SamplingError(
            f"could not corrupt edge {tuple(original[e])} after {MAX_RESAMPLE_ROUNDS} rounds"
        )
    return neg


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class EdgeMiniBatch:
    triples: np.ndarray       # (b, 3) local ids
    labels: np.ndarray        # (b,) float64 in {0, 1}

    @property
    def seed_vertices(self) -> np.ndarray:
        return np.unique(self.triples[:, [0, 2]])

    def __len__(self) -> int:
        return len(self.triples)


def make_batches(positives: np.ndarray, negatives: np.ndarray, batch_size: int,
                 rng: np.random.Generator, num_batches: Optional[int] = None) -> list:
    """Jointly shuffle positives and negatives, chunk into batches of at most
    batch_size. With num_batches forced the shuffled stream wraps around so
    exactly that many full batches come out (synchronization across workers).
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(-1, 3)
    triples = np.concatenate([positives, negatives], axis=0)
    labels = np.concatenate([
        np.ones(len(positives), dtype=np.float64),
        np.zeros(len(negatives), dtype=np.float64),
    ])
    total = len(triples)
    if total == 0:
        return []
    perm = rng.permutation(total)
    triples, labels = triples[perm], labels[perm]

    batches = []
    if num_batches is None:
        for start in range(0, total, batch_size):
            sl = slice(start, min(start + batch_size, total))
            batches.append(EdgeMiniBatch(triples[sl], labels[sl]))
    else:
        for i in range(num_batches):
            idx = np.arange(i * batch_size, (i + 1) * batch_size) % total
            batches.append(EdgeMiniBatch(triples[idx], labels[idx]))
    return batches


# ---------------------------------------------------------------------------
# Compute graph
# ---------------------------------------------------------------------------

@dataclass
class LayerBlock:
    """Message edges feeding one convolution, sorted by (relation, dst, src).

    dst/src are positions in the compute graph's compact vertex order. The
    scatter permutations let forward/backward accumulate segment sums
    deterministically via reduceat instead of np.add.at.
    """
    dst: np.ndarray
    src: np.ndarray
    rel: np.ndarray
    norm: np.ndarray
    rel_indptr: np.ndarray        # (2R + 2,) group boundaries by relation
    num_targets: int
    by_dst: np.ndarray            # permutation sorting edges by dst
    dst_segs: np.ndarray          # segment starts within by_dst
    dst_uniq: np.ndarray          # unique dst position per segment
    by_src: np.ndarray
    src_segs: np.ndarray
    src_uniq: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.dst)


def _segments(sorted_vals: np.ndarray) -> tuple:
    if len(sorted_vals) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    starts = np.flatnonzero(np.diff(sorted_vals, prepend=sorted_vals[0] - 1))
    return starts, sorted_vals[starts]


@dataclass
class ComputeGraph:
    seed_vertices: np.ndarray     # local ids, ascending
    vertex_order: np.ndarray      # local id per compact position; nested prefixes per layer
    pos: np.ndarray               # local id -> compact position (-1 when absent)
    layers: list                  # LayerBlock, output layer first
    layer_vertex_counts: list     # |A_0| .. |A_n|; A_k = vertex_order[:count_k]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_seeds(self) -> int:
        return len(self.seed_vertices)

    def layer_vertex_sets(self) -> list:
        return [self.vertex_order[:c] for c in self.layer_vertex_counts]

    def seed_positions(self, local_ids: np.ndarray) -> np.ndarray:
        p = self.pos[local_ids]
        if len(p) and p.min() < 0:
            raise IntegrityError("vertex not present in compute graph")
        return p


def _make_block(dst, src, rel, norm, num_targets: int, num_rel_groups: int) -> LayerBlock:
    order = np.lexsort((src, dst, rel))
    dst, src, rel, norm = dst[order], src[order], rel[order], norm[order]
    rel_indptr = np.searchsorted(rel, np.arange(num_rel_groups + 1))
    by_dst = np.argsort(dst, kind="stable")
    dst_segs, dst_uniq = _segments(dst[by_dst])
    by_src = np.argsort(src, kind="stable")
    src_segs, src_uniq = _segments(src[by_src])
    return LayerBlock(dst, src, rel, norm, rel_indptr, num_targets,
                      by_dst, dst_segs, dst_uniq, by_src, src_segs, src_uniq)


def build_compute_graph(batch: EdgeMiniBatch, view: PartitionView, hops: int) -> ComputeGraph:
    """Layered n-hop dependency closure of the batch endpoints.

    Layer k's edges are every partition message edge entering a vertex active
    at depth k, plus one self-loop per active vertex. Minimal by construction:
    nothing outside the closure is touched.
    """
    return compute_graph_for_seeds(batch.seed_vertices, view, hops)


def compute_graph_for_seeds(seeds: np.ndarray, view: PartitionView, hops: int) -> ComputeGraph:
    if hops < 0:
        raise ValidationError("hops must be >= 0")
    seeds = np.unique(np.asarray(seeds, dtype=np.int64))
    if len(seeds) == 0:
        raise ValidationError("empty batch")
    if seeds.min() < 0 or seeds.max() >= view.num_vertices:
        raise IntegrityError("batch references a vertex outside the partition")

    n_local = view.num_vertices
    pos = np.full(n_local, -1, dtype=np.int64)
    pos[seeds] = np.arange(len(seeds))
    order_parts = [seeds]
    counts = [len(seeds)]
    active = seeds
    total = len(seeds)

    raw_layers = []
    for _ in range(hops):
        starts = view.msg_indptr[active]
        ends = view.msg_indptr[active + 1]
        eidx = _gather_ranges(view.msg_indptr, np.arange(len(view.msg_src)), active)
        dst_edges = np.repeat(active, ends - starts)  # destinations repeat per CSR slice
        src_edges = view.msg_src[eidx]
        rel_edges = view.msg_rel[eidx]
        norm_edges = view.msg_norm[eidx]
        raw_layers.append((dst_edges, src_edges, rel_edges, norm_edges))

        new = np.unique(src_edges)
        new = new[pos[new] < 0]
        pos[new] = total + np.arange(len(new))
        total += len(new)
        order_parts.append(new)
        counts.append(total)
        active = np.concatenate([active, new]) if len(new) else active
        # next layer's targets are the full active set so far
        active = np.sort(active)

    vertex_order = np.concatenate(order_parts) if len(order_parts) > 1 else seeds.copy()

    blocks = []
    sl_rel = view.self_loop_rel
    for (dst_e, src_e, rel_e, norm_e), num_t in zip(raw_layers, counts[:-1]):
        tgt = vertex_order[:num_t]
        dst = np.concatenate([pos[dst_e], pos[tgt]])
        src = np.concatenate([pos[src_e], pos[tgt]])
        rel = np.concatenate([rel_e, np.full(num_t, sl_rel, dtype=np.int64)])
        norm = np.concatenate([norm_e, np.ones(num_t)])
        blocks.append(_make_block(dst, src, rel, norm, num_t, sl_rel + 1))

    return ComputeGraph(
        seed_vertices=seeds,
        vertex_order=vertex_order,
        pos=pos,
        layers=blocks,
        layer_vertex_counts=counts,
    )
