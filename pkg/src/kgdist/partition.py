"""Vertex-cut edge partitioning and neighborhood expansion.

Edges are split into disjoint per-partition core sets; expansion then copies
in the n-hop dependency closure (support vertices/edges) of every core-edge
endpoint so a worker can run n message-passing layers without touching any
other partition. Expansion follows the bidirectional edge view because the
encoder uses inverse relations.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import FormatError, ProvenanceError, ValidationError
from .graph import KnowledgeGraph, _as_triple_array

ROLE_CORE = "core"
ROLE_REPLICATED = "replicated"
ROLE_SUPPORT = "support"


def _first_appearance(arr: np.ndarray) -> np.ndarray:
    _, idx = np.unique(arr, return_index=True)
    return arr[np.sort(idx)]


@dataclass
class Partition:
    id: int
    core: np.ndarray                      # (m, 3) global-id triples owned here
    support: np.ndarray                   # (k, 3) triples copied by expansion
    core_vertices: np.ndarray             # core-edge endpoints unique to this partition
    replicated_vertices: np.ndarray       # core-edge endpoints shared with other partitions
    support_vertices: np.ndarray          # vertices added only by expansion
    hop_count: int
    core_edge_ids: Optional[np.ndarray] = None    # indices into the source graph edge list
    support_edge_ids: Optional[np.ndarray] = None
    _local: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.core = _as_triple_array(self.core)
        self.support = _as_triple_array(self.support)

    @property
    def num_core_edges(self) -> int:
        return len(self.core)

    @property
    def num_total_edges(self) -> int:
        return len(self.core) + len(self.support)

    def all_edges(self) -> np.ndarray:
        return np.concatenate([self.core, self.support], axis=0)

    def local_vertices(self) -> np.ndarray:
        """Global id per local id: core-edge endpoints in first-appearance
        order, then support vertices in first-appearance order."""
        if self._local is None:
            ends = self.core[:, [0, 2]].ravel()
            sup = self.support[:, [0, 2]].ravel()
            core_order = _first_appearance(ends) if len(ends) else np.zeros(0, np.int64)
            if len(sup):
                mask = ~np.isin(sup, core_order)
                sup_order = _first_appearance(sup[mask])
            else:
                sup_order = np.zeros(0, np.int64)
            self._local = np.concatenate([core_order, sup_order])
        return self._local

    def global_to_local(self, num_entities: int) -> np.ndarray:
        g2l = np.full(num_entities, -1, dtype=np.int64)
        local = self.local_vertices()
        g2l[local] = np.arange(len(local))
        return g2l

    def vertex_roles(self) -> dict:
        roles = {ROLE_CORE: self.core_vertices,
                 ROLE_REPLICATED: self.replicated_vertices,
                 ROLE_SUPPORT: self.support_vertices}
        return roles


@dataclass
class PartitionSet:
    partitions: list
    num_entities: int
    num_relations: int
    hops: int                 # 0 until neighborhood expansion runs
    seed: int
    method: str
    graph_checksum: str

    @property
    def num_parts(self) -> int:
        return len(self.partitions)

    @property
    def expanded(self) -> bool:
        return self.hops > 0 or any(len(p.support) for p in self.partitions)


# ---------------------------------------------------------------------------
# Partitioners
# ---------------------------------------------------------------------------

def _assemble(graph, split_ids, hops, seed, method) -> PartitionSet:
    """Build Partition records from per-partition core edge-id arrays."""
    n = graph.num_entities
    incidence = np.zeros(n, dtype=np.int64)
    endpoint_sets = []
    for ids in split_ids:
        ends = np.unique(graph.triples[ids][:, [0, 2]])
        endpoint_sets.append(ends)
        incidence[ends] += 1
    replicated_mask = incidence >= 2

    parts = []
    for pid, ids in enumerate(split_ids):
        ends = endpoint_sets[pid]
        rep = ends[replicated_mask[ends]]
        core = ends[~replicated_mask[ends]]
        parts.append(Partition(
            id=pid,
            core=graph.triples[ids],
            support=np.zeros((0, 3), dtype=np.int64),
            core_vertices=core,
            replicated_vertices=rep,
            support_vertices=np.zeros(0, dtype=np.int64),
            hop_count=hops,
            core_edge_ids=np.asarray(ids, dtype=np.int64),
        ))
    return PartitionSet(parts, n, graph.num_relations, hops, seed, method, graph.checksum())


def vertex_cut_partition(
    graph: KnowledgeGraph,
    num_parts: int,
    seed: int,
    epsilon: float = 0.05,
    balance_weight: float = 1.0,
) -> PartitionSet:
    """Greedy streaming vertex cut (HDRF-family).

    Edges are visited in a seeded random order; each partition is scored by
    replication affinity (whether it already holds an endpoint, weighted by
    the endpoint's partial-degree share) plus a balance bonus for small
    partitions. A hard cap keeps every partition within (1+epsilon) of the
    mean core-edge count. Deterministic for fixed seed and edge order.
    """
    m = graph.num_edges
    if num_parts < 1:
        raise ValidationError("num_parts must be >= 1")
    if num_parts > m:
        raise ValidationError(f"num_parts ({num_parts}) exceeds edge count ({m})")

    rng = np.random.default_rng(seed)
    order = rng.permutation(m)
    triples = graph.triples
    n = graph.num_entities

    theta = np.zeros(n, dtype=np.int64)            # partial vertex degree
    member = np.zeros((num_parts, n), dtype=bool)  # partition already holds vertex
    sizes = np.zeros(num_parts, dtype=np.int64)
    cap = max(math.ceil(m / num_parts), math.floor((1.0 + epsilon) * m / num_parts))
    assign = np.empty(m, dtype=np.int64)

    for e in order:
        u, _, v = triples[e]
        du, dv = theta[u], theta[v]
        tot = du + dv
        share_u = du / tot if tot else 0.5
        share_v = dv / tot if tot else 0.5
        score = member[:, u] * (2.0 - share_u) + member[:, v] * (2.0 - share_v)
        max_s = sizes.max()
        score += balance_weight * (max_s - sizes) / (1.0 + max_s - sizes.min())
        score[sizes >= cap] = -np.inf
        p = int(np.argmax(score))  # argmax takes the lowest index on ties
        assign[e] = p
        member[p, u] = member[p, v] = True
        sizes[p] += 1
        theta[u] += 1
        theta[v] += 1

    split_ids = [np.flatnonzero(assign == p) for p in range(num_parts)]
    return _assemble(graph, split_ids, 0, seed, "vertexcut")


def random_edge_partition(graph: KnowledgeGraph, num_parts: int, seed: int) -> PartitionSet:
    """Uniform random edge assignment (the Table-5-style baseline)."""
    m = graph.num_edges
    if num_parts < 1:
        raise ValidationError("num_parts must be >= 1")
    if num_parts > m:
        raise ValidationError(f"num_parts ({num_parts}) exceeds edge count ({m})")
    rng = np.random.default_rng(seed)
    assign = rng.integers(num_parts, size=m)
    split_ids = [np.flatnonzero(assign == p) for p in range(num_parts)]
    return _assemble(graph, split_ids, 0, seed, "random")


# ---------------------------------------------------------------------------
# Neighborhood expansion
# ---------------------------------------------------------------------------

def _incident_csr(graph: KnowledgeGraph):
    """CSR of edge ids incident to each vertex (either endpoint)."""
    ends = graph.triples[:, [0, 2]].ravel()
    edge_ids = np.repeat(np.arange(graph.num_edges, dtype=np.int64), 2)
    order = np.argsort(ends, kind="stable")
    indptr = np.zeros(graph.num_entities + 1, dtype=np.int64)
    np.add.at(indptr, ends + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, edge_ids[order]


def _gather_ranges(indptr, items, keys):
    """Concatenate items[indptr[k]:indptr[k+1]] over all k in keys."""
    starts = indptr[keys]
    counts = indptr[keys + 1] - starts
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=items.dtype)
    out_idx = np.repeat(starts + counts, counts)
    out_idx += np.arange(total) - np.repeat(np.cumsum(counts), counts)
    return items[out_idx]


def neighborhood_expand(pset: PartitionSet, graph: KnowledgeGraph, hops: int) -> PartitionSet:
    """Copy the n-hop bidirectional closure of core-edge endpoints into each
    partition as support vertices/edges. Idempotent at the same hop count."""
    if hops < 0:
        raise ValidationError("hops must be >= 0")
    if pset.expanded:
        if pset.hops == hops:
            return pset
        raise ValidationError(
            f"partition set already expanded with hops={pset.hops}, cannot re-expand to {hops}"
        )
    if hops == 0:
        return pset

    indptr, inc_edges = _incident_csr(graph)
    triples = graph.triples
    new_parts = []
    for part in pset.partitions:
        core_ids = part.core_edge_ids
        if core_ids is None:
            raise ValidationError("partition lacks edge ids; reload with the source graph")
        included = np.zeros(graph.num_edges, dtype=bool)
        included[core_ids] = True
        active = np.zeros(graph.num_entities, dtype=bool)
        frontier = np.unique(triples[core_ids][:, [0, 2]])
        active[frontier] = True
        for _ in range(hops):
            eids = np.unique(_gather_ranges(indptr, inc_edges, frontier))
            included[eids] = True
            ends = np.unique(triples[eids][:, [0, 2]])
            frontier = ends[~active[ends]]
            active[frontier] = True
            if len(frontier) == 0:
                break
        support_ids = np.flatnonzero(included)
        support_ids = support_ids[~np.isin(support_ids, core_ids)]
        core_ends = np.unique(triples[core_ids][:, [0, 2]])
        all_verts = np.flatnonzero(active)
        support_verts = all_verts[~np.isin(all_verts, core_ends)]
        new_parts.append(replace(
            part,
            support=triples[support_ids],
            support_vertices=support_verts,
            support_edge_ids=support_ids,
            hop_count=hops,
            _local=None,
        ))
    return PartitionSet(new_parts, pset.num_entities, pset.num_relations,
                        hops, pset.seed, pset.method, pset.graph_checksum)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def replication_factor(pset: PartitionSet) -> float:
    """Mean covered-vertex count over partitions, normalized by |V|.

    Covered vertices are the endpoints of whatever edges a partition holds
    (core plus support). Isolated vertices count in |V| only.
    """
    if pset.num_entities == 0:
        raise ValidationError("replication factor undefined for an empty graph")
    total = 0
    for part in pset.partitions:
        total += len(np.unique(part.all_edges()[:, [0, 2]]))
    return total / pset.num_entities


@dataclass
class PartitionStats:
    num_parts: int
    hops: int
    method: str
    core_edges: list
    support_edges: list
    total_edges: list
    vertices: list
    rf: float

    def mean_std(self, values):
        arr = np.asarray(values, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    def format(self) -> str:
        lines = [
            f"partitioner={self.method} parts={self.num_parts} hops={self.hops}",
            f"{'part':>4} {'core edges':>12} {'support edges':>14} {'total edges':>12} {'vertices':>10}",
        ]
        for i in range(self.num_parts):
            lines.append(
                f"{i:>4} {self.core_edges[i]:>12} {self.support_edges[i]:>14} "
                f"{self.total_edges[i]:>12} {self.vertices[i]:>10}"
            )
        cm, cs = self.mean_std(self.core_edges)
        tm, ts = self.mean_std(self.total_edges)
        lines.append(f"core edges  mean±std = {cm:.1f} ± {cs:.1f}")
        lines.append(f"total edges mean±std = {tm:.1f} ± {ts:.1f}")
        lines.append(f"RF = {self.rf:.4f}")
        return "\n".join(lines)


def partition_stats(pset: PartitionSet) -> PartitionStats:
    return PartitionStats(
        num_parts=pset.num_parts,
        hops=pset.hops,
        method=pset.method,
        core_edges=[p.num_core_edges for p in pset.partitions],
        support_edges=[len(p.support) for p in pset.partitions],
        total_edges=[p.num_total_edges for p in pset.partitions],
        vertices=[len(p.local_vertices()) for p in pset.partitions],
        rf=replication_factor(pset),
    )


# ---------------------------------------------------------------------------
# Disk format
# ---------------------------------------------------------------------------

_META_KEYS = ("version", "num_parts", "hops", "seed", "partitioner",
              "num_entities", "num_relations", "graph_checksum")


def _meta_digest(fields: dict) -> str:
    blob = "\n".join(f"{k}={fields[k]}" for k in _META_KEYS)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_partitions(pset: PartitionSet, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    fields = {
        "version": 1,
        "num_parts": pset.num_parts,
        "hops": pset.hops,
        "seed": pset.seed,
        "partitioner": pset.method,
        "num_entities": pset.num_entities,
        "num_relations": pset.num_relations,
        "graph_checksum": pset.graph_checksum,
    }
    with open(os.path.join(out_dir, "meta"), "w", encoding="utf-8") as fh:
        for k in _META_KEYS:
            fh.write(f"{k}={fields[k]}\n")
        fh.write(f"meta_checksum={_meta_digest(fields)}\n")

    for part in pset.partitions:
        pdir = os.path.join(out_dir, f"p{part.id}")
        os.makedirs(pdir, exist_ok=True)
        np.savetxt(os.path.join(pdir, "core_edges.tsv"), part.core, fmt="%d", delimiter="\t")
        np.savetxt(os.path.join(pdir, "support_edges.tsv"), part.support, fmt="%d", delimiter="\t")
        g2l = {int(g): i for i, g in enumerate(part.local_vertices())}
        with open(os.path.join(pdir, "vertices.tsv"), "w", encoding="utf-8") as fh:
            for role, verts in part.vertex_roles().items():
                for g in verts:
                    fh.write(f"{int(g)}\t{role}\t{g2l[int(g)]}\n")


def _load_tsv_triples(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise FormatError(f"missing partition file {path}")
    arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    return arr.reshape(-1, 3)


def _resolve_edge_ids(graph: KnowledgeGraph, triples: np.ndarray, used: dict) -> np.ndarray:
    """Map triples back to edge indices, consuming duplicate occurrences in order."""
    index = used.setdefault("_index", None)
    if index is None:
        index = {}
        for eid, (h, r, t) in enumerate(graph.triples.tolist()):
            index.setdefault((h, r, t), []).append(eid)
        used["_index"] = index
    out = np.empty(len(triples), dtype=np.int64)
    for i, (h, r, t) in enumerate(triples.tolist()):
        key = (h, r, t)
        ids = index.get(key)
        if not ids:
            raise ProvenanceError(f"partition edge {key} not found in graph")
        n_used = used.get(key, 0)
        if n_used >= len(ids):
            raise ProvenanceError(f"partition edge {key} occurs more often than in the graph")
        out[i] = ids[n_used]
        used[key] = n_used + 1
    return out


def read_partitions(in_dir: str, graph: Optional[KnowledgeGraph] = None) -> PartitionSet:
    meta_path = os.path.join(in_dir, "meta")
    if not os.path.isfile(meta_path):
        raise FormatError(f"missing manifest {meta_path}")
    fields = {}
    with open(meta_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"malformed manifest line {line!r}")
            k, v = line.split("=", 1)
            fields[k] = v
    for key in _META_KEYS + ("meta_checksum",):
        if key not in fields:
            raise FormatError(f"manifest missing key {key!r}")
    if _meta_digest(fields) != fields["meta_checksum"]:
        raise ProvenanceError("manifest checksum mismatch (tampered or corrupt meta file)")
    if graph is not None and graph.checksum() != fields["graph_checksum"]:
        raise ProvenanceError("partition directory was built from a different graph")

    num_parts = int(fields["num_parts"])
    hops = int(fields["hops"])
    n = int(fields["num_entities"])

    core_used: dict = {}
    parts = []
    for pid in range(num_parts):
        pdir = os.path.join(in_dir, f"p{pid}")
        core = _load_tsv_triples(os.path.join(pdir, "core_edges.tsv"))
        support = _load_tsv_triples(os.path.join(pdir, "support_edges.tsv"))
        vpath = os.path.join(pdir, "vertices.tsv")
        if not os.path.isfile(vpath):
            raise FormatError(f"missing partition file {vpath}")
        roles = {ROLE_CORE: [], ROLE_REPLICATED: [], ROLE_SUPPORT: []}
        local_pairs = []
        with open(vpath, "r", encoding="utf-8") as fh:
            for line in fh:
                g, role, loc = line.strip().split("\t")
                if role not in roles:
                    raise FormatError(f"unknown vertex role {role!r}")
                roles[role].append(int(g))
                local_pairs.append((int(loc), int(g)))
        local_pairs.sort()
        local = np.array([g for _, g in local_pairs], dtype=np.int64)
        part = Partition(
            id=pid,
            core=core,
            support=support,
            core_vertices=np.array(sorted(roles[ROLE_CORE]), dtype=np.int64),
            replicated_vertices=np.array(sorted(roles[ROLE_REPLICATED]), dtype=np.int64),
            support_vertices=np.array(sorted(roles[ROLE_SUPPORT]), dtype=np.int64),
            hop_count=hops,
        )
        part._local = local
        if graph is not None:
            part.core_edge_ids = _resolve_edge_ids(graph, core, core_used)
            part.support_edge_ids = _resolve_edge_ids(graph, support, {})
        parts.append(part)

    return PartitionSet(parts, n, int(fields["num_relations"]), hops,
                        int(fields["seed"]), fields["partitioner"], fields["graph_checksum"])
