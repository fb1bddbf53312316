import copy

import numpy as np
import pytest

from kgdist.errors import NumericError, ProtocolError, ValidationError
from kgdist.model import (
    MODE_EMBEDDING, MODE_FEATURE, EncodeCache, encode, init_params,
    loss_from_cache, loss_and_grad,
)
from kgdist.partition import PartitionSet, vertex_cut_partition, neighborhood_expand
from kgdist.sampler import (
    build_view, full_graph_view, sample_negatives, make_batches,
    build_compute_graph,
)
from kgdist.trainer import (
    TrainConfig, Optimizer, allreduce_mean, train, bench_components,
    format_bench_rows, _plan_batches,
)

from conftest import make_graph, tiny_config, random_params


def _expanded(graph, parts, hops=2, seed=1):
    pset = vertex_cut_partition(graph, parts, seed)
    return neighborhood_expand(pset, graph, hops)


def _replicated_pset(graph, copies, hops=2):
    """PartitionSet of identical whole-graph partitions, all with id 0 so the
    per-partition rng streams coincide."""
    single = _expanded(graph, 1, hops=hops)
    base = single.partitions[0]
    parts = [copy.deepcopy(base) for _ in range(copies)]
    for p in parts:
        p.id = 0
    return PartitionSet(parts, single.num_entities, single.num_relations,
                        single.hops, single.seed, single.method,
                        single.graph_checksum)


# ---------------------------------------------------------------------------
# Reduction
# ---------------------------------------------------------------------------

def test_allreduce_mean_matches_numpy_mean():
    rng = np.random.default_rng(0)
    payloads = [[rng.normal(size=(3, 4)), rng.normal(size=(5,))] for _ in range(5)]
    got = allreduce_mean(payloads)
    for k in range(2):
        want = np.mean([p[k] for p in payloads], axis=0)
        np.testing.assert_allclose(got[k], want, rtol=1e-14)


@pytest.mark.parametrize("copies", [1, 2, 4, 8])
def test_allreduce_mean_identity_for_identical_payloads(copies):
    rng = np.random.default_rng(1)
    blocks = [rng.normal(size=(4, 3)), rng.normal(size=(7,))]
    got = allreduce_mean([[b.copy() for b in blocks] for _ in range(copies)])
    for g, b in zip(got, blocks):
        np.testing.assert_array_equal(g, b)  # bitwise


def test_allreduce_mean_rejects_bad_payloads():
    with pytest.raises(ProtocolError):
        allreduce_mean([])
    with pytest.raises(ProtocolError):
        allreduce_mean([[np.zeros(3)], [np.zeros(4)]])


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def test_sgd_step_is_exact():
    config = tiny_config(2)
    params = random_params(config, seed=2)
    before = [b.copy() for b in params.dense_blocks()]
    grads = [np.ones_like(b) for b in before]
    opt = Optimizer(TrainConfig(optimizer="sgd", learning_rate=0.5), params)
    opt.step(params, grads)
    for p, b in zip(params.dense_blocks(), before):
        np.testing.assert_array_equal(p, b - 0.5)


def test_adam_first_step_size():
    config = tiny_config(2)
    params = random_params(config, seed=3)
    before = [b.copy() for b in params.dense_blocks()]
    grads = [np.full_like(b, 2.0) for b in before]
    tc = TrainConfig(optimizer="adam", learning_rate=0.1)
    opt = Optimizer(tc, params)
    opt.step(params, grads)
    # first adam step moves every coordinate by ~lr regardless of magnitude
    for p, b in zip(params.dense_blocks(), before):
        np.testing.assert_allclose(b - p, 0.1 * 2.0 / (2.0 + tc.adam_eps), rtol=1e-12)


def test_sparse_embed_update_touches_only_given_rows():
    config = tiny_config(2, mode=MODE_EMBEDDING)
    params = random_params(config, seed=4, num_entities=9)
    before = params.entity_embed.copy()
    opt = Optimizer(TrainConfig(optimizer="adam"), params)
    ids = np.array([2, 5])
    rows = np.ones((2, config.dims[0]))
    opt.step(params, [np.zeros_like(b) for b in params.dense_blocks()], ids, rows)
    changed = np.flatnonzero(np.any(params.entity_embed != before, axis=1))
    np.testing.assert_array_equal(changed, ids)


def test_grad_clip_rescales():
    config = tiny_config(2)
    params = random_params(config, seed=5)
    before = [b.copy() for b in params.dense_blocks()]
    grads = [np.full_like(b, 10.0) for b in before]
    total = np.sqrt(sum(g.size for g in grads) * 100.0)
    opt = Optimizer(TrainConfig(optimizer="sgd", learning_rate=1.0, grad_clip=1.0), params)
    opt.step(params, grads)
    moved = np.sqrt(sum(float(np.sum((p - b) ** 2))
                        for p, b in zip(params.dense_blocks(), before)))
    assert moved == pytest.approx(1.0, rel=1e-12)
    assert total > 1.0


def test_optimizer_flags_non_finite_params():
    config = tiny_config(2)
    params = random_params(config, seed=6)
    grads = [np.full_like(b, np.inf) for b in params.dense_blocks()]
    opt = Optimizer(TrainConfig(optimizer="sgd"), params)
    with pytest.raises(NumericError):
        opt.step(params, grads)


# ---------------------------------------------------------------------------
# Batch planning
# ---------------------------------------------------------------------------

def test_plan_batches_fixed_rounds(small_graph):
    pset = _expanded(small_graph, 4)
    views = [build_view(p, pset.num_entities, pset.num_relations) for p in pset.partitions]
    mc = tiny_config(small_graph.num_relations, dims=(3, 4, 2))
    sizes, rounds = _plan_batches(views, mc, TrainConfig(fixed_num_batches=5))
    assert rounds == 5
    for v, b in zip(views, sizes):
        assert b == max(1, int(np.ceil(v.num_core * 2 / 5)))


def test_plan_batches_rounds_is_max_over_workers(small_graph):
    pset = _expanded(small_graph, 3)
    views = [build_view(p, pset.num_entities, pset.num_relations) for p in pset.partitions]
    mc = tiny_config(small_graph.num_relations, dims=(3, 4, 2))
    sizes, rounds = _plan_batches(views, mc, TrainConfig(batch_size=16))
    assert rounds == max(int(np.ceil(v.num_core * 2 / 16)) for v in views)
    assert all(b == 16 for b in sizes)


# ---------------------------------------------------------------------------
# Training equivalences
# ---------------------------------------------------------------------------

def _plain_loop(pset, model_config, train_config, initial):
    """Sequential reference implementation of the training loop (P=1)."""
    view = build_view(pset.partitions[0], pset.num_entities, pset.num_relations)
    params = initial.copy()
    rng = np.random.default_rng(train_config.seed ^ view.partition_id)
    opt = Optimizer(train_config, params)
    sizes, rounds = _plan_batches([view], model_config, train_config)
    for _ in range(train_config.epochs):
        neg = sample_negatives(view, model_config.negatives_per_positive, rng)
        batches = make_batches(view.core_edges, neg, sizes[0], rng, num_batches=rounds)
        for batch in batches:
            cg = build_compute_graph(batch, view, model_config.num_layers)
            cache = EncodeCache()
            table = params.entity_embed
            encode(params, model_config, cg, table, view.local_ids, cache=cache)
            _, grads = loss_from_cache(params, model_config, batch, cg, cache,
                                       view.local_ids)
            mean = allreduce_mean([grads.dense_blocks()])
            opt.step(params, mean, grads.embed_ids, grads.embed_rows)
    return params


def _assert_params_equal(a, b, bitwise=True):
    check = np.testing.assert_array_equal if bitwise else np.testing.assert_allclose
    for x, y in zip(a.dense_blocks(), b.dense_blocks()):
        check(x, y)
    if a.entity_embed is not None:
        check(a.entity_embed, b.entity_embed)


def test_p1_train_equals_plain_loop_bitwise(small_graph):
    pset = _expanded(small_graph, 1)
    mc = tiny_config(small_graph.num_relations, dims=(3, 4, 2), mode=MODE_EMBEDDING)
    tc = TrainConfig(epochs=3, batch_size=32, optimizer="adam", seed=9)
    initial = init_params(mc, np.random.default_rng(tc.seed),
                          num_entities=small_graph.num_entities)
    got, report = train(pset, small_graph, mc, tc, initial_params=initial)
    want = _plain_loop(pset, mc, tc, initial)
    _assert_params_equal(got, want, bitwise=True)
    assert len(report.loss_curve) == 3


def test_replicated_partitions_match_single_worker_bitwise(small_graph):
    mc = tiny_config(small_graph.num_relations, dims=(3, 4, 2), mode=MODE_EMBEDDING)
    tc = TrainConfig(epochs=2, batch_size=64, optimizer="adam", seed=13)
    initial = init_params(mc, np.random.default_rng(tc.seed),
                          num_entities=small_graph.num_entities)
    single, _ = train(_replicated_pset(small_graph, 1), small_graph, mc, tc,
                      initial_params=initial)
    quad, _ = train(_replicated_pset(small_graph, 4), small_graph, mc, tc,
                    initial_params=initial)
    _assert_params_equal(single, quad, bitwise=True)


def test_mean_of_disjoint_batch_grads_equals_union_grad(small_graph):
    mc = tiny_config(small_graph.num_relations, dims=(3, 4, 2), mode=MODE_EMBEDDING)
    params = init_params(mc, np.random.default_rng(0),
                         num_entities=small_graph.num_entities)
    view = full_graph_view(small_graph)
    rng = np.random.default_rng(2)
    neg = sample_negatives(view, 1, rng)
    union = make_batches(view.core_edges, neg, 10 ** 9, rng)[0]
    k = len(union) // 2 * 2
    triples, labels = union.triples[:k], union.labels[:k]
    halves = [
        type(union)(triples[: k // 2], labels[: k // 2]),
        type(union)(triples[k // 2:], labels[k // 2:]),
    ]
    union_b = type(union)(triples, labels)

    def dense_grads(batch):
        cg = build_compute_graph(batch, view, mc.num_layers)
        _, g = loss_and_grad(params, mc, batch, cg, params.entity_embed,
                             view.local_ids)
        return g.dense_blocks()

    mean = allreduce_mean([dense_grads(h) for h in halves])
    want = dense_grads(union_b)
    for a, b in zip(mean, want):
        denom = np.maximum(np.abs(b), 1e-300)
        assert (np.abs(a - b) / denom).max() < 1e-12


def test_multi_worker_real_partitions_run_and_agree(small_graph):
    # dense replicas must stay bit-identical (asserted inside train); the
    # loss should also drop on this easy objective
    pset = _expanded(small_graph, 2)
    mc = tiny_config(small_graph.num_relations, dims=(3, 4, 2), mode=MODE_EMBEDDING)
    tc = TrainConfig(epochs=4, batch_size=64, optimizer="adam",
                     learning_rate=0.05, seed=3)
    params, report = train(pset, small_graph, mc, tc)
    assert report.loss_curve[-1] < report.loss_curve[0]
    assert all(np.isfinite(l) for l in report.loss_curve)


def test_feature_mode_training(small_graph):
    feats = np.random.default_rng(1).normal(size=(small_graph.num_entities, 3))
    small_graph.features = feats
    pset = _expanded(small_graph, 2)
    mc = tiny_config(small_graph.num_relations, dims=(3, 4, 2), mode=MODE_FEATURE)
    tc = TrainConfig(epochs=2, batch_size=64, seed=3)
    params, report = train(pset, small_graph, mc, tc)
    assert params.entity_embed is None
    assert len(report.loss_curve) == 2


def test_eval_fn_called_at_requested_epochs(small_graph):
    pset = _expanded(small_graph, 2)
    mc = tiny_config(small_graph.num_relations, dims=(3, 4, 2), mode=MODE_EMBEDDING)
    tc = TrainConfig(epochs=4, batch_size=64, seed=3, eval_every=2)
    calls = []

    def eval_fn(params):
        calls.append(params.decoder.copy())
        return 0.5

    _, report = train(pset, small_graph, mc, tc, eval_fn=eval_fn)
    assert [e for e, _ in report.val_mrr] == [1, 3]
    assert len(calls) == 2
    assert not np.array_equal(calls[0], calls[1])


def test_train_rejects_hop_layer_mismatch(small_graph):
    pset = _expanded(small_graph, 2, hops=1)
    mc = tiny_config(small_graph.num_relations, dims=(3, 4, 2))
    with pytest.raises(ValidationError):
        train(pset, small_graph, mc, TrainConfig(epochs=1))


def test_worker_failure_propagates(small_graph):
    # relation count mismatch blows up inside the workers, not the parent
    pset = _expanded(small_graph, 2)
    mc = tiny_config(small_graph.num_relations + 1, dims=(3, 4, 2))
    with pytest.raises(ValidationError):
        train(pset, small_graph, mc, TrainConfig(epochs=1))


def test_report_metrics_format(small_graph):
    pset = _expanded(small_graph, 1)
    mc = tiny_config(small_graph.num_relations, dims=(3, 4, 2), mode=MODE_EMBEDDING)
    _, report = train(pset, small_graph, mc, TrainConfig(epochs=2, seed=1))
    text = report.format_metrics()
    assert "epoch=0" in text and "loss=" in text and "time=" in text
    timings = report.mean_timings()
    assert set(timings) == {"epoch_time", "cg_build", "encode", "loss_step"}


def test_bench_components_rows(small_graph):
    mc = tiny_config(small_graph.num_relations, dims=(3, 4, 2), mode=MODE_EMBEDDING)
    tc = TrainConfig(epochs=1, fixed_num_batches=3, seed=0)
    rows = bench_components(small_graph, mc, tc, [1, 2],
                            partitioners=["vertexcut", "random"])
    assert len(rows) == 4
    assert {r["partitioner"] for r in rows} == {"vertexcut", "random"}
    assert all(r["rounds"] == 3 for r in rows)
    table = format_bench_rows(rows)
    assert "vertexcut" in table and "random" in table
