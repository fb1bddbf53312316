"""Relational graph convolution encoder with basis-decomposed weights, a
diagonal bilinear decoder, sigmoid cross-entropy loss, and exact analytic
gradients. Plain dense float64 numpy throughout; no autograd framework.

Relation w ids inside a layer: 0..R-1 forward, R..2R-1 inverse, 2R self-loop.
Every per-relation weight matrix, the self-loop included, is a coefficient
combination of the layer's shared basis tensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import FormatError, IntegrityError, NumericError, ShapeError, ValidationError
from .sampler import ComputeGraph, EdgeMiniBatch, LayerBlock

MODE_FEATURE = "feature"
MODE_EMBEDDING = "embedding"


@dataclass
class ModelConfig:
    num_layers: int
    dims: list                      # [d_in, d_1, ..., d_out]
    num_bases: int
    num_relations: int              # R before inverse doubling
    negatives_per_positive: int = 1
    dropout: float = 0.0
    mode: str = MODE_FEATURE

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValidationError("num_layers must be >= 1")
        if self.num_bases < 1:
            raise ValidationError("num_bases must be >= 1")
        if len(self.dims) != self.num_layers + 1:
            raise ValidationError("dims must have num_layers + 1 entries")
        if self.mode not in (MODE_FEATURE, MODE_EMBEDDING):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")

    @property
    def num_rel_groups(self) -> int:
        return 2 * self.num_relations + 1

    def to_json(self) -> str:
        return json.dumps({
            "num_layers": self.num_layers, "dims": list(self.dims),
            "num_bases": self.num_bases, "num_relations": self.num_relations,
            "negatives_per_positive": self.negatives_per_positive,
            "dropout": self.dropout, "mode": self.mode,
        })

    @classmethod
    def from_json(cls, blob: str) -> "ModelConfig":
        return cls(**json.loads(blob))


@dataclass
class ModelParams:
    bases: list                     # per layer: (B, d_l, d_{l+1})
    coeffs: list                    # per layer: (2R + 1, B)
    decoder: np.ndarray             # (R, d_out) diagonal relation matrices
    entity_embed: Optional[np.ndarray] = None   # (N, d_in) in embedding mode

    def dense_blocks(self) -> list:
        return [*self.bases, *self.coeffs, self.decoder]

    def set_dense_blocks(self, blocks: list) -> None:
        n = len(self.bases)
        self.bases = list(blocks[:n])
        self.coeffs = list(blocks[n:2 * n])
        self.decoder = blocks[2 * n]

    def copy(self) -> "ModelParams":
        return ModelParams(
            [b.copy() for b in self.bases],
            [c.copy() for c in self.coeffs],
            self.decoder.copy(),
            None if self.entity_embed is None else self.entity_embed.copy(),
        )

    def num_parameters(self) -> int:
        total = sum(b.size for b in self.dense_blocks())
        if self.entity_embed is not None:
            total += self.entity_embed.size
        return total


@dataclass
class Gradients:
    bases: list
    coeffs: list
    decoder: np.ndarray
    embed_ids: Optional[np.ndarray] = None    # rows touched (table row ids)
    embed_rows: Optional[np.ndarray] = None

    def dense_blocks(self) -> list:
        return [*self.bases, *self.coeffs, self.decoder]


def init_params(config: ModelConfig, rng: np.random.Generator,
                num_entities: Optional[int] = None) -> ModelParams:
    """Fan-scaled uniform init for bases and decoder, small-uniform coeffs."""
    bases, coeffs = [], []
    for l in range(config.num_layers):
        din, dout = config.dims[l], config.dims[l + 1]
        limit = np.sqrt(6.0 / (din + dout))
        bases.append(rng.uniform(-limit, limit, size=(config.num_bases, din, dout)))
        climit = 1.0 / np.sqrt(config.num_bases)
        coeffs.append(rng.uniform(-climit, climit, size=(config.num_rel_groups, config.num_bases)))
    d_out = config.dims[-1]
    decoder = rng.uniform(-np.sqrt(3.0 / d_out), np.sqrt(3.0 / d_out),
                          size=(config.num_relations, d_out))
    embed = None
    if config.mode == MODE_EMBEDDING:
        if num_entities is None:
            raise ValidationError("embedding mode needs num_entities at init")
        d_in = config.dims[0]
        embed = rng.uniform(-np.sqrt(3.0 / d_in), np.sqrt(3.0 / d_in),
                            size=(num_entities, d_in))
    return ModelParams(bases, coeffs, decoder, embed)


def layer_weights(params: ModelParams, layer: int) -> np.ndarray:
    """Materialize all (2R + 1) relation matrices of a layer from its bases."""
    return np.tensordot(params.coeffs[layer], params.bases[layer], axes=(1, 0))


# ---------------------------------------------------------------------------
# Forward / backward primitives
# ---------------------------------------------------------------------------

def _scatter_add(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """out[idx] += rows with a deterministic summation order."""
    if len(idx) == 0:
        return
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.diff(sorted_idx, prepend=sorted_idx[0] - 1))
    sums = np.add.reduceat(rows[order], starts, axis=0)
    out[sorted_idx[starts]] += sums


def _conv_forward(H: np.ndarray, W: np.ndarray, block: LayerBlock) -> np.ndarray:
    dout = W.shape[2]
    msgs = np.empty((block.num_edges, dout))
    for g in range(W.shape[0]):
        a, b = block.rel_indptr[g], block.rel_indptr[g + 1]
        if a == b:
            continue
        msgs[a:b] = H[block.src[a:b]] @ W[g]
    msgs *= block.norm[:, None]
    out = np.zeros((block.num_targets, dout))
    if block.num_edges:
        sums = np.add.reduceat(msgs[block.by_dst], block.dst_segs, axis=0)
        out[block.dst_uniq] = sums
    return out


def _conv_backward(G: np.ndarray, H: np.ndarray, W: np.ndarray,
                   block: LayerBlock) -> tuple:
    """Gradients of the conv output wrt its weights and its input rows."""
    din = W.shape[1]
    g_msg = G[block.dst] * block.norm[:, None]
    dW = np.zeros_like(W)
    contrib = np.empty((block.num_edges, din))
    for g in range(W.shape[0]):
        a, b = block.rel_indptr[g], block.rel_indptr[g + 1]
        if a == b:
            continue
        Hs = H[block.src[a:b]]
        dW[g] = Hs.T @ g_msg[a:b]
        contrib[a:b] = g_msg[a:b] @ W[g].T
    dH = np.zeros((len(H), din))
    if block.num_edges:
        sums = np.add.reduceat(contrib[block.by_src], block.src_segs, axis=0)
        dH[block.src_uniq] = sums
    return dW, dH


@dataclass
class EncodeCache:
    inputs: list = field(default_factory=list)     # H entering each conv
    pre_act: list = field(default_factory=list)    # Z of each conv
    drop_masks: list = field(default_factory=list)
    seed_embeddings: Optional[np.ndarray] = None


def encode(params: ModelParams, config: ModelConfig, cg: ComputeGraph,
           input_table: np.ndarray, input_ids: np.ndarray,
           training: bool = False,
           dropout_rng: Optional[np.random.Generator] = None,
           cache: Optional[EncodeCache] = None) -> np.ndarray:
    """Run the graph convolutions over a compute graph.

    input_table holds one row per table id; input_ids maps the compute
    graph's local vertex ids to table rows. Returns seed-vertex embeddings
    in cg.seed_vertices order. ReLU between layers, identity on the last.
    """
    n = config.num_layers
    if cg.num_layers != n:
        raise ShapeError(f"compute graph has {cg.num_layers} layers, model has {n}")
    if input_table.shape[1] != config.dims[0]:
        raise ShapeError(
            f"input width {input_table.shape[1]} != d_in {config.dims[0]}")

    H = input_table[input_ids[cg.vertex_order]]
    for l in range(n):
        block = cg.layers[n - 1 - l]
        W = layer_weights(params, l)
        Z = _conv_forward(H, W, block)
        last = l == n - 1
        A = Z if last else np.maximum(Z, 0.0)
        mask = None
        if training and config.dropout > 0.0 and not last:
            if dropout_rng is None:
                raise ValidationError("training with dropout needs a dropout rng")
            keep = dropout_rng.random(A.shape) >= config.dropout
            mask = keep / (1.0 - config.dropout)
            A = A * mask
        if cache is not None:
            cache.inputs.append(H)
            cache.pre_act.append(Z)
            cache.drop_masks.append(mask)
        H = A
    if cache is not None:
        cache.seed_embeddings = H
    return H


def score(head_embedding: np.ndarray, relation_diag: np.ndarray,
          tail_embedding: np.ndarray) -> float:
    """Bilinear diagonal score sum_k h_s[k] * m_r[k] * h_t[k]."""
    if not (head_embedding.shape == relation_diag.shape == tail_embedding.shape):
        raise IntegrityError("score operands must share one embedding width")
    return float(np.sum(head_embedding * relation_diag * tail_embedding))


def score_batch(seed_embeddings: np.ndarray, params: ModelParams,
                cg: ComputeGraph, triples: np.ndarray) -> np.ndarray:
    hs = seed_embeddings[cg.seed_positions(triples[:, 0])]
    ht = seed_embeddings[cg.seed_positions(triples[:, 2])]
    m = params.decoder[triples[:, 1]]
    return np.einsum("ij,ij,ij->i", hs, m, ht)


def loss_from_cache(params: ModelParams, config: ModelConfig,
                    batch: EdgeMiniBatch, cg: ComputeGraph,
                    cache: EncodeCache, input_ids: np.ndarray) -> tuple:
    """Cross-entropy loss over the batch plus exact gradients, reusing the
    forward activations recorded in cache."""
    Hout = cache.seed_embeddings
    hpos = cg.seed_positions(batch.triples[:, 0])
    tpos = cg.seed_positions(batch.triples[:, 2])
    rels = batch.triples[:, 1]
    hs, ht = Hout[hpos], Hout[tpos]
    m = params.decoder[rels]
    g = np.einsum("ij,ij,ij->i", hs, m, ht)
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NumericError(f"non-finite score for triplet {tuple(batch.triples[bad])}")

    y = batch.labels
    per_example = np.logaddexp(0.0, g) - y * g   # -[y log l(g) + (1-y) log(1-l(g))]
    loss = float(per_example.mean())
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")

    dg = (expit(g) - y) / len(g)
    d_dec = np.zeros_like(params.decoder)
    _scatter_add(d_dec, rels, dg[:, None] * hs * ht)
    dH = np.zeros_like(Hout)
    _scatter_add(dH, hpos, dg[:, None] * (m * ht))
    _scatter_add(dH, tpos, dg[:, None] * (m * hs))

    n = config.num_layers
    d_bases = [None] * n
    d_coeffs = [None] * n
    dA = dH
    for l in range(n - 1, -1, -1):
        block = cg.layers[n - 1 - l]
        mask = cache.drop_masks[l]
        if mask is not None:
            dA = dA * mask
        dZ = dA if l == n - 1 else dA * (cache.pre_act[l] > 0.0)
        dW, dA = _conv_backward(dZ, cache.inputs[l], layer_weights(params, l), block)
        d_coeffs[l] = np.einsum("rio,bio->rb", dW, params.bases[l])
        d_bases[l] = np.einsum("rb,rio->bio", params.coeffs[l], dW)

    embed_ids = embed_rows = None
    if config.mode == MODE_EMBEDDING:
        embed_ids = input_ids[cg.vertex_order]
        embed_rows = dA
    return loss, Gradients(d_bases, d_coeffs, d_dec, embed_ids, embed_rows)


def loss_and_grad(params: ModelParams, config: ModelConfig,
                  batch: EdgeMiniBatch, cg: ComputeGraph,
                  input_table: np.ndarray, input_ids: np.ndarray,
                  training: bool = False,
                  dropout_rng: Optional[np.random.Generator] = None) -> tuple:
    cache = EncodeCache()
    encode(params, config, cg, input_table, input_ids,
           training=training, dropout_rng=dropout_rng, cache=cache)
    return loss_from_cache(params, config, batch, cg, cache, input_ids)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, config: ModelConfig, path: str) -> None:
    arrays = {"decoder": params.decoder}
    for l, (b, c) in enumerate(zip(params.bases, params.coeffs)):
        arrays[f"bases_{l}"] = b
        arrays[f"coeffs_{l}"] = c
    if params.entity_embed is not None:
        arrays["entity_embed"] = params.entity_embed
    meta = json.dumps({"version": CHECKPOINT_VERSION, "config": config.to_json()})
    np.savez_compressed(path, _meta=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str) -> tuple:
    with np.load(path) as data:
        if "_meta" not in data:
            raise FormatError(f"{path} is not a model checkpoint")
        meta = json.loads(bytes(data["_meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
        config = ModelConfig.from_json(meta["config"])
        bases = [data[f"bases_{l}"] for l in range(config.num_layers)]
        coeffs = [data[f"coeffs_{l}"] for l in range(config.num_layers)]
        embed = data["entity_embed"] if "entity_embed" in data else None
        params = ModelParams(bases, coeffs, data["decoder"], embed)
    return params, config
