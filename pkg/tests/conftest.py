"""Shared fixtures and independent oracles for the test suite.

Oracles here deliberately avoid the library's vectorized code paths: BFS
closures use python sets, encodes loop per vertex, ranking loops per
candidate. Slow but obviously correct.
"""

import numpy as np
import pytest

from kgdist.graph import KnowledgeGraph, DatasetSplit, generate_synthetic
from kgdist.model import ModelConfig, ModelParams, layer_weights, MODE_EMBEDDING


def make_graph(num_entities, num_relations, num_edges, seed, features=None):
    """Random multigraph without self loops; duplicates allowed."""
    rng = np.random.default_rng(seed)
    heads = rng.integers(0, num_entities, num_edges)
    rels = rng.integers(0, num_relations, num_edges)
    tails = rng.integers(0, num_entities, num_edges)
    bad = heads == tails
    while bad.any():
        tails[bad] = rng.integers(0, num_entities, int(bad.sum()))
        bad = heads == tails
    triples = np.stack([heads, rels, tails], axis=1).astype(np.int64)
    return KnowledgeGraph(num_entities=num_entities, num_relations=num_relations,
                          triples=triples, features=features)


@pytest.fixture
def tiny_graph():
    return make_graph(12, 3, 30, seed=7)


@pytest.fixture
def small_graph():
    return make_graph(40, 5, 160, seed=11)


@pytest.fixture
def synth_dataset():
    return generate_synthetic(80, 6, 4.0, seed=5)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def bfs_closure(triples, seeds, hops):
    """n-hop bidirectional closure: (vertex set, set of traversed edge ids)."""
    current = set(int(s) for s in seeds)
    seen = set(current)
    edge_ids = set()
    for _ in range(hops):
        nxt = set()
        for eid, (h, r, t) in enumerate(triples.tolist()):
            if h in current or t in current:
                edge_ids.add(eid)
                nxt.add(h)
                nxt.add(t)
        seen |= nxt
        current = seen
    return seen, edge_ids


def naive_encode(params: ModelParams, config: ModelConfig, edges, num_vertices,
                 input_rows):
    """Per-vertex loop encode over an explicit local edge list.

    edges: (m, 3) local triples. Message passing uses forward, inverse and
    self-loop relation groups with per-(vertex, group) mean normalization.
    """
    R = config.num_relations
    H = np.asarray(input_rows, dtype=np.float64).copy()
    for layer in range(config.num_layers):
        W = layer_weights(params, layer)
        incoming = [[] for _ in range(num_vertices)]
        for h, r, t in edges.tolist():
            incoming[t].append((r, h))
            incoming[h].append((r + R, t))
        out = np.zeros((num_vertices, W.shape[2]))
        for v in range(num_vertices):
            msgs = incoming[v] + [(2 * R, v)]
            counts = {}
            for g, _ in msgs:
                counts[g] = counts.get(g, 0) + 1
            for g, u in msgs:
                out[v] += (H[u] @ W[g]) / counts[g]
        if layer < config.num_layers - 1:
            out = np.maximum(out, 0.0)
        H = out
    return H


def brute_rank(scores, true_score, policy="mean"):
    greater = int(np.sum(scores > true_score))
    ties = int(np.sum(scores == true_score))
    if policy == "optimistic":
        return float(1 + greater)
    if policy == "pessimistic":
        return float(1 + greater + ties)
    return 1.0 + greater + ties / 2.0


def random_params(config: ModelConfig, seed=0, num_entities=20) -> ModelParams:
    from kgdist.model import init_params
    return init_params(config, np.random.default_rng(seed), num_entities=num_entities)


def tiny_config(num_relations, dims=(4, 5, 3), num_bases=2, mode=MODE_EMBEDDING,
                **kw) -> ModelConfig:
    return ModelConfig(num_layers=len(dims) - 1, dims=list(dims), num_bases=num_bases,
                       num_relations=num_relations, mode=mode, **kw)
