"""Knowledge-graph data model, loaders, statistics and a synthetic generator.

A knowledge graph is a directed multigraph of (head, relation, tail)
triplets over dense 0-based integer ids. Adjacency is always built from the
training edges only; validation/test triplets live in the DatasetSplit.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ParseError, ReferenceError_, ShapeError, ValidationError


class Triplet(NamedTuple):
    head: int
    rel: int
    tail: int


def _as_triple_array(triples) -> np.ndarray:
    arr = np.asarray(triples, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeError(f"expected an (n, 3) triple array, got shape {arr.shape}")
    return arr


@dataclass
class KnowledgeGraph:
    num_entities: int
    num_relations: int
    triples: np.ndarray  # (m, 3) int64, training edges in file order
    features: Optional[np.ndarray] = None
    entity_names: Optional[list] = None
    relation_names: Optional[list] = None
    _out: Optional[tuple] = field(default=None, repr=False, compare=False)
    _in: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.triples = _as_triple_array(self.triples)
        if self.num_entities < 0 or self.num_relations < 0:
            raise ValidationError("entity/relation counts must be non-negative")
        if len(self.triples):
            if self.triples[:, [0, 2]].max() >= self.num_entities or self.triples.min() < 0:
                raise ValidationError("triple ids out of range for this graph")
            if self.triples[:, 1].max() >= self.num_relations:
                raise ValidationError("relation id out of range for this graph")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape[0] != self.num_entities:
                raise ShapeError(
                    f"feature rows ({self.features.shape[0]}) != num_entities ({self.num_entities})"
                )

    @property
    def num_edges(self) -> int:
        return len(self.triples)

    @property
    def edges(self) -> list:
        return [Triplet(*row) for row in self.triples.tolist()]

    def _csr(self, key_col: int) -> tuple:
        """CSR over edge indices keyed by the given endpoint column."""
        order = np.argsort(self.triples[:, key_col], kind="stable")
        keys = self.triples[order, key_col]
        indptr = np.zeros(self.num_entities + 1, dtype=np.int64)
        np.add.at(indptr, keys + 1, 1)
        np.cumsum(indptr, out=indptr)
        return indptr, order

    def out_edge_ids(self, v: int) -> np.ndarray:
        if self._out is None:
            self._out = self._csr(0)
        indptr, order = self._out
        return order[indptr[v]:indptr[v + 1]]

    def in_edge_ids(self, v: int) -> np.ndarray:
        if self._in is None:
            self._in = self._csr(2)
        indptr, order = self._in
        return order[indptr[v]:indptr[v + 1]]

    def out_index(self, v: int) -> list:
        """(rel, tail) pairs of edges leaving v."""
        ids = self.out_edge_ids(v)
        return [(int(r), int(t)) for r, t in self.triples[ids][:, 1:3]]

    def in_index(self, v: int) -> list:
        """(rel, head) pairs of edges entering v."""
        ids = self.in_edge_ids(v)
        return [(int(r), int(h)) for h, r in self.triples[ids][:, [1, 0]][:, ::-1]]

    def checksum(self, split: Optional["DatasetSplit"] = None) -> str:
        h = hashlib.sha256()
        h.update(b"kg-v1")
        h.update(np.int64([self.num_entities, self.num_relations]).tobytes())
        h.update(np.ascontiguousarray(self.triples).tobytes())
        if split is not None:
            h.update(np.ascontiguousarray(split.valid).tobytes())
            h.update(np.ascontiguousarray(split.test).tobytes())
        return h.hexdigest()


@dataclass
class DatasetSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.train = _as_triple_array(self.train)
        self.valid = _as_triple_array(self.valid)
        self.test = _as_triple_array(self.test)

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test], axis=0)


# ---------------------------------------------------------------------------
# Loading / writing
# ---------------------------------------------------------------------------

def read_dictionary(path: str) -> dict:
    """Read an `id<TAB>name` file into a name -> id mapping."""
    mapping = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 columns, got {len(parts)}")
            try:
                idx = int(parts[0])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-integer id {parts[0]!r}") from exc
            mapping[parts[1]] = idx
    return mapping


def _read_raw_triples(path: str) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) == 1:
                # tolerate space-separated files
                parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 columns, got {len(parts)}")
            rows.append(tuple(parts))
    return rows


class _IdMapper:
    """Resolves raw tokens to dense ids, via dictionary or first occurrence."""

    def __init__(self, mapping: Optional[dict], what: str):
        self.fixed = mapping is not None
        self.map = dict(mapping) if mapping else {}
        self.what = what

    def resolve(self, token: str, where: str) -> int:
        if token in self.map:
            return self.map[token]
        if self.fixed:
            raise ReferenceError_(f"{where}: unknown {self.what} {token!r}")
        idx = len(self.map)
        self.map[token] = idx
        return idx

    def count(self) -> int:
        if self.fixed and self.map:
            return max(self.map.values()) + 1
        return len(self.map)

    def names(self) -> Optional[list]:
        if not self.map:
            return None
        out = [None] * self.count()
        for name, idx in self.map.items():
            out[idx] = name
        return out


def load_triples(
    train_path: str,
    valid_path: Optional[str] = None,
    test_path: Optional[str] = None,
    entity_dict: Optional[dict] = None,
    relation_dict: Optional[dict] = None,
) -> tuple:
    """Load tab-separated triple files into a KnowledgeGraph + DatasetSplit.

    Without dictionaries, files of pure integer tokens keep their ids;
    anything else gets dense ids assigned on first occurrence.
    """
    raw = {"train": _read_raw_triples(train_path)}
    raw["valid"] = _read_raw_triples(valid_path) if valid_path else []
    raw["test"] = _read_raw_triples(test_path) if test_path else []

    all_rows = raw["train"] + raw["valid"] + raw["test"]
    integer_mode = False
    if entity_dict is None and relation_dict is None and all_rows:
        integer_mode = all(
            h.lstrip("-").isdigit() and r.lstrip("-").isdigit() and t.lstrip("-").isdigit()
            for h, r, t in all_rows
        )

    if integer_mode:
        parsed = {
            k: np.array([(int(h), int(r), int(t)) for h, r, t in v], dtype=np.int64).reshape(-1, 3)
            for k, v in raw.items()
        }
        allv = np.concatenate(list(parsed.values()), axis=0)
        if allv.min(initial=0) < 0:
            raise ParseError("negative ids in integer-mode triple file")
        num_e = int(allv[:, [0, 2]].max(initial=-1)) + 1
        num_r = int(allv[:, 1].max(initial=-1)) + 1
        ent_names = rel_names = None
    else:
        emap = _IdMapper(entity_dict, "entity")
        rmap = _IdMapper(relation_dict, "relation")
        parsed = {}
        for key in ("train", "valid", "test"):
            rows = [
                (emap.resolve(h, key), rmap.resolve(r, key), emap.resolve(t, key))
                for h, r, t in raw[key]
            ]
            parsed[key] = np.array(rows, dtype=np.int64).reshape(-1, 3)
        num_e, num_r = emap.count(), rmap.count()
        ent_names, rel_names = emap.names(), rmap.names()

    split = DatasetSplit(parsed["train"], parsed["valid"], parsed["test"])
    graph = KnowledgeGraph(
        num_entities=num_e,
        num_relations=num_r,
        triples=split.train,
        entity_names=ent_names,
        relation_names=rel_names,
    )
    return graph, split


def load_dataset_dir(path: str) -> tuple:
    """Load a dataset directory: train.txt [valid.txt test.txt entities.dict relations.dict]."""
    train = os.path.join(path, "train.txt")
    if not os.path.isfile(train):
        raise ParseError(f"no train.txt under {path}")
    opt = lambda name: os.path.join(path, name) if os.path.isfile(os.path.join(path, name)) else None
    edict = opt("entities.dict")
    rdict = opt("relations.dict")
    return load_triples(
        train,
        opt("valid.txt"),
        opt("test.txt"),
        entity_dict=read_dictionary(edict) if edict else None,
        relation_dict=read_dictionary(rdict) if rdict else None,
    )


def write_triples(triples: np.ndarray, path: str, entity_names=None, relation_names=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3):
            hn = entity_names[h] if entity_names else str(h)
            rn = relation_names[r] if relation_names else str(r)
            tn = entity_names[t] if entity_names else str(t)
            fh.write(f"{hn}\t{rn}\t{tn}\n")


def write_dictionary(names: Sequence[str], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for idx, name in enumerate(names):
            fh.write(f"{idx}\t{name}\n")


def write_dataset_dir(graph: KnowledgeGraph, split: DatasetSplit, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    for name, arr in (("train.txt", split.train), ("valid.txt", split.valid), ("test.txt", split.test)):
        write_triples(arr, os.path.join(path, name), graph.entity_names, graph.relation_names)
    if graph.entity_names:
        write_dictionary(graph.entity_names, os.path.join(path, "entities.dict"))
    if graph.relation_names:
        write_dictionary(graph.relation_names, os.path.join(path, "relations.dict"))


def load_features(path: str, graph: KnowledgeGraph) -> KnowledgeGraph:
    """Attach a `vertex_id v1 ... vd` feature file to the graph."""
    rows = {}
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                vid = int(parts[0])
                vals = [float(x) for x in parts[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric token") from exc
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ShapeError(f"{path}:{lineno}: expected {width} values, got {len(vals)}")
            if not 0 <= vid < graph.num_entities:
                raise ShapeError(f"{path}:{lineno}: vertex id {vid} out of range")
            rows[vid] = vals
    if len(rows) != graph.num_entities:
        raise ShapeError(
            f"feature file has {len(rows)} rows, graph has {graph.num_entities} entities"
        )
    mat = np.zeros((graph.num_entities, width or 0), dtype=np.float64)
    for vid, vals in rows.items():
        mat[vid] = vals
    graph.features = mat
    return graph


# ---------------------------------------------------------------------------
# Synthetic graphs
# ---------------------------------------------------------------------------

def generate_synthetic(
    num_entities: int,
    num_relations: int,
    avg_degree: float,
    seed: int,
    train_fraction: float = 0.9,
) -> tuple:
    """Deterministic skewed random multidigraph with a 90/5/5 split.

    Tails are drawn by preferential attachment so a handful of hub vertices
    accumulate most in-edges, mimicking real KG degree skew. No duplicate
    triplets, no self-loops.
    """
    if num_entities < 2:
        raise ValidationError("num_entities must be >= 2")
    if num_relations < 1:
        raise ValidationError("num_relations must be >= 1")
    if avg_degree <= 0:
        raise ValidationError("avg_degree must be > 0")

    rng = np.random.default_rng(seed)
    target = max(1, round(num_entities * avg_degree / train_fraction))
    pref_prob = 0.75

    seen = set()
    edges = []
    tail_pool = []
    attempts = 0
    max_attempts = 50 * target + 1000
    while len(edges) < target and attempts < max_attempts:
        attempts += 1
        h = int(rng.integers(num_entities))
        if tail_pool and rng.random() < pref_prob:
            t = tail_pool[int(rng.integers(len(tail_pool)))]
        else:
            t = int(rng.integers(num_entities))
        if h == t:
            continue
        r = int(rng.integers(num_relations))
        key = (h, r, t)
        if key in seen:
            continue
        seen.add(key)
        edges.append(key)
        tail_pool.append(t)

    triples = np.array(edges, dtype=np.int64).reshape(-1, 3)
    m = len(triples)
    n_valid = int(m * (1.0 - train_fraction) / 2.0)
    n_test = n_valid
    perm = rng.permutation(m)
    valid = triples[np.sort(perm[:n_valid])]
    test = triples[np.sort(perm[n_valid:n_valid + n_test])]
    train = triples[np.sort(perm[n_valid + n_test:])]

    split = DatasetSplit(train, valid, test)
    graph = KnowledgeGraph(num_entities, num_relations, train)
    return graph, split


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

@dataclass
class GraphStats:
    num_entities: int
    num_relations: int
    num_edges: int
    out_degree_min: int
    out_degree_mean: float
    out_degree_max: int
    in_degree_min: int
    in_degree_mean: float
    in_degree_max: int

    def format(self) -> str:
        return (
            f"entities={self.num_entities} relations={self.num_relations} "
            f"edges={self.num_edges}\n"
            f"out-degree min/mean/max = {self.out_degree_min}/"
            f"{self.out_degree_mean:.3f}/{self.out_degree_max}\n"
            f"in-degree  min/mean/max = {self.in_degree_min}/"
            f"{self.in_degree_mean:.3f}/{self.in_degree_max}"
        )


def graph_stats(graph: KnowledgeGraph) -> GraphStats:
    n = graph.num_entities
    out_deg = np.bincount(graph.triples[:, 0], minlength=n) if n else np.zeros(0, dtype=int)
    in_deg = np.bincount(graph.triples[:, 2], minlength=n) if n else np.zeros(0, dtype=int)
    zero = GraphStats(n, graph.num_relations, graph.num_edges, 0, 0.0, 0, 0, 0.0, 0)
    if n == 0:
        return zero
    return GraphStats(
        num_entities=n,
        num_relations=graph.num_relations,
        num_edges=graph.num_edges,
        out_degree_min=int(out_deg.min()),
        out_degree_mean=float(out_deg.mean()),
        out_degree_max=int(out_deg.max()),
        in_degree_min=int(in_deg.min()),
        in_degree_mean=float(in_deg.mean()),
        in_degree_max=int(in_deg.max()),
    )
