"""Distributed knowledge graph embedding toolkit.

Partition a triple store into self-sufficient vertex-cut pieces, train a
basis-decomposed graph convolution encoder with a diagonal bilinear decoder
over edge mini-batches in data parallel, and rank held-out triples.
"""

from .errors import (
    KGError, ParseError, ShapeError, ValidationError, FormatError,
    ProvenanceError, SamplingError, IntegrityError, NumericError, ProtocolError,
)
from .graph import (
    KnowledgeGraph, DatasetSplit, Triplet, load_dataset_dir, load_triples,
    load_features, write_dataset_dir, generate_synthetic, graph_stats,
)
from .partition import (
    Partition, PartitionSet, vertex_cut_partition, random_edge_partition,
    neighborhood_expand, replication_factor, partition_stats,
    write_partitions, read_partitions,
)
from .sampler import (
    PartitionView, build_view, full_graph_view, sample_negatives,
    EdgeMiniBatch, make_batches, ComputeGraph, build_compute_graph,
    compute_graph_for_seeds,
)
from .model import (
    ModelConfig, ModelParams, Gradients, init_params, encode, score,
    score_batch, loss_and_grad, save_checkpoint, load_checkpoint,
    MODE_FEATURE, MODE_EMBEDDING,
)
from .trainer import (
    TrainConfig, TrainReport, allreduce_mean, Optimizer, train,
    bench_components,
)
from .evaluate import (
    EvalResult, RankRecord, evaluate, encode_all_entities, rank_triplet,
    filtered_candidates, read_candidates, write_results,
    TIE_MEAN, TIE_OPTIMISTIC, TIE_PESSIMISTIC,
)

__version__ = "0.1.0"
