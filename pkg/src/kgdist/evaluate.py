"""Ranking-based link-prediction evaluation: filtered candidate generation,
rank computation with a configurable tie policy, MRR and Hits@k.

Evaluation always encodes on the full, unpartitioned graph; partitioning is
a training-time artifact only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import IntegrityError, ValidationError
from .graph import DatasetSplit, KnowledgeGraph
from .model import MODE_EMBEDDING, ModelConfig, ModelParams, encode
from .sampler import compute_graph_for_seeds, full_graph_view

TIE_MEAN = "mean"
TIE_OPTIMISTIC = "optimistic"
TIE_PESSIMISTIC = "pessimistic"

SIDE_TAIL = "tail"
SIDE_HEAD = "head"

HITS_KS = (1, 3, 10)


class RankRecord(NamedTuple):
    head: int
    rel: int
    tail: int
    corrupted_side: str
    rank: float
    num_candidates: int


@dataclass
class EvalResult:
    mrr: float
    hits: dict
    records: list

    def format_summary(self) -> str:
        cols = " ".join(f"hits@{k}={self.hits[k]:.4f}" for k in sorted(self.hits))
        return f"records={len(self.records)} mrr={self.mrr:.4f} {cols}"


# ---------------------------------------------------------------------------
# Candidates and ranks
# ---------------------------------------------------------------------------

def filtered_candidates(test_triplet, side: str, all_known_triples,
                        num_entities: int) -> np.ndarray:
    """Entities whose substitution on `side` is not a known triple, plus the
    true entity itself. Ascending id order."""
    h, r, t = (int(x) for x in test_triplet)
    known = all_known_triples
    if not isinstance(known, set):
        known = {tuple(row) for row in np.asarray(known).reshape(-1, 3).tolist()}
    out = []
    for e in range(num_entities):
        if side == SIDE_TAIL:
            cand = (h, r, e)
            true = e == t
        elif side == SIDE_HEAD:
            cand = (e, r, t)
            true = e == h
        else:
            raise ValidationError(f"unknown side {side!r}")
        if true or cand not in known:
            out.append(e)
    return np.array(out, dtype=np.int64)


def rank_triplet(candidate_scores: np.ndarray, true_index: int,
                 tie_policy: str = TIE_MEAN) -> float:
    """Rank of the true entity among candidate scores (descending order).

    Mean policy assigns tied scores the average of their tied positions, so
    a constant scorer cannot collect Hits@1 for free.
    """
    scores = np.asarray(candidate_scores, dtype=np.float64)
    if not 0 <= true_index < len(scores):
        raise IntegrityError("true entity missing from candidate list")
    true_score = scores[true_index]
    greater = int((scores > true_score).sum())
    ties = int((scores == true_score).sum()) - 1
    return _rank(greater, ties, tie_policy)


def _rank(num_greater: int, num_ties: int, tie_policy: str) -> float:
    if tie_policy == TIE_MEAN:
        return 1.0 + num_greater + num_ties / 2.0
    if tie_policy == TIE_OPTIMISTIC:
        return 1.0 + num_greater
    if tie_policy == TIE_PESSIMISTIC:
        return 1.0 + num_greater + num_ties
    raise ValidationError(f"unknown tie policy {tie_policy!r}")


# ---------------------------------------------------------------------------
# Full-graph encoding
# ---------------------------------------------------------------------------

def encode_all_entities(params: ModelParams, config: ModelConfig,
                        graph: KnowledgeGraph) -> np.ndarray:
    """Embeddings of every entity from message passing over the whole graph."""
    view = full_graph_view(graph)
    cg = compute_graph_for_seeds(np.arange(graph.num_entities), view, config.num_layers)
    if config.mode == MODE_EMBEDDING:
        if params.entity_embed is None:
            raise ValidationError("embedding mode requires an entity table")
        table = params.entity_embed
    else:
        if graph.features is None:
            raise ValidationError("feature mode requires graph features")
        table = graph.features
    emb = encode(params, config, cg, table, view.local_ids)
    # seed order is ascending entity id, so rows align with entity ids
    return emb


# ---------------------------------------------------------------------------
# Evaluation protocols
# ---------------------------------------------------------------------------

def _grouped(triples: np.ndarray, key_cols, value_col) -> dict:
    index: dict = {}
    for row in triples.tolist():
        index.setdefault((row[key_cols[0]], row[key_cols[1]]), []).append(row[value_col])
    return {k: np.unique(v) for k, v in index.items()}


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    graph: KnowledgeGraph,
    split: DatasetSplit,
    which: str = "test",
    protocol: str = "filtered",
    candidates: Optional[dict] = None,
    tie_policy: str = TIE_MEAN,
    chunk: int = 512,
) -> EvalResult:
    """Rank every triplet of the chosen split.

    Filtered protocol ranks both corrupted sides against all entities minus
    known collisions; given-candidates protocol ranks the tail against a
    supplied candidate list per test index (the true tail is appended when
    absent).
    """
    if which not in ("valid", "test"):
        raise ValidationError("which must be valid or test")
    eval_triples = split.valid if which == "valid" else split.test
    if len(eval_triples) == 0:
        raise ValidationError(f"{which} split is empty")
    if protocol not in ("filtered", "candidates"):
        raise ValidationError(f"unknown protocol {protocol!r}")
    if protocol == "candidates" and candidates is None:
        raise ValidationError("candidates protocol requires a candidate map")

    H = encode_all_entities(params, config, graph)
    decoder = params.decoder
    records: list = []

    if protocol == "candidates":
        for i, (h, r, t) in enumerate(eval_triples.tolist()):
            cand = np.asarray(candidates.get(i, []), dtype=np.int64)
            if len(cand) == 0:
                raise ValidationError(f"no candidates for test index {i}")
            true_pos = np.flatnonzero(cand == t)
            if len(true_pos) == 0:
                cand = np.concatenate([cand, [t]])
                true_pos = [len(cand) - 1]
            scores = (H[h] * decoder[r]) @ H[cand].T
            rank = rank_triplet(scores, int(true_pos[0]), tie_policy)
            records.append(RankRecord(h, r, t, SIDE_TAIL, rank, len(cand) - 1))
        return _result(records)

    known = split.all_triples()
    known_tails = _grouped(known, (0, 1), 2)   # (h, r) -> tails
    known_heads = _grouped(known, (2, 1), 0)   # (t, r) -> heads
    n = graph.num_entities

    for start in range(0, len(eval_triples), chunk):
        block = eval_triples[start:start + chunk]
        h, r, t = block[:, 0], block[:, 1], block[:, 2]
        for side in (SIDE_TAIL, SIDE_HEAD):
            if side == SIDE_TAIL:
                q = H[h] * decoder[r]
                true_ids = t
                filt_map, anchor = known_tails, list(zip(h.tolist(), r.tolist()))
            else:
                q = H[t] * decoder[r]
                true_ids = h
                filt_map, anchor = known_heads, list(zip(t.tolist(), r.tolist()))
            scores = q @ H.T
            true_scores = scores[np.arange(len(block)), true_ids]
            greater = (scores > true_scores[:, None]).sum(axis=1)
            ties = (scores == true_scores[:, None]).sum(axis=1) - 1
            for i in range(len(block)):
                key = anchor[i]
                knowns = filt_map.get(key)
                g_i, t_i, n_known = int(greater[i]), int(ties[i]), 0
                if knowns is not None:
                    others = knowns[knowns != true_ids[i]]
                    n_known = len(others)
                    if n_known:
                        sc = scores[i, others]
                        g_i -= int((sc > true_scores[i]).sum())
                        t_i -= int((sc == true_scores[i]).sum())
                rank = _rank(g_i, t_i, tie_policy)
                records.append(RankRecord(
                    int(block[i, 0]), int(block[i, 1]), int(block[i, 2]),
                    side, rank, n - 1 - n_known))
    return _result(records)


def _result(records: list) -> EvalResult:
    ranks = np.array([rec.rank for rec in records], dtype=np.float64)
    mrr = float((1.0 / ranks).mean())
    hits = {k: float((ranks <= k).mean()) for k in HITS_KS}
    return EvalResult(mrr=mrr, hits=hits, records=records)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_candidates(path: str) -> dict:
    """`test_index<TAB>cand_1,cand_2,...` per line."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            idx, ids = line.split("\t")
            out[int(idx)] = np.array([int(x) for x in ids.split(",")], dtype=np.int64)
    return out


def write_results(result: EvalResult, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(f"{rec.head}\t{rec.rel}\t{rec.tail}\t{rec.corrupted_side}\t{rec.rank}\n")
        fh.write(f"# mrr={result.mrr:.6f}\n")
        for k in sorted(result.hits):
            fh.write(f"# hits@{k}={result.hits[k]:.6f}\n")
