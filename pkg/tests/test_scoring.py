import math

import numpy as np
import pytest

import descsel.autodiff as ad
from descsel.descriptors import ClassPool, DescriptorSet
from descsel.errors import ContractViolationError, InvalidInputError
from descsel.scoring import (EpisodeScores, accuracy, episode_loss,
                             episode_score, support_auxiliary_loss)
from descsel.selection import SelectionModel, select_support_subset

import oracle


def make_subset(rng, n=3, p=4, d=4):
    pools = [ClassPool(i, rng.standard_normal((p, d))) for i in range(n)]
    disabled = SelectionModel.build(d, seed=0, dtype=np.float64,
                                    enable_support_selection=False)
    return pools, select_support_subset(pools, disabled).subset


def test_episode_score_sums_gamma_when_all_kept():
    rng = np.random.default_rng(30)
    pools, subset = make_subset(rng)
    model = SelectionModel.build(4, seed=1, strategy="all", dtype=np.float64)
    queries = [rng.standard_normal((5, 4)) for _ in range(2)]
    es = episode_score(queries, subset, model)
    for qi, q in enumerate(queries):
        for c, pool in enumerate(pools):
            want = sum(oracle.gamma(row.tolist(), pool.pool.tolist(), 1)
                       for row in q)
            assert es.per_query[qi, c] == pytest.approx(want, abs=1e-10)


def test_episode_score_applies_query_gates():
    rng = np.random.default_rng(31)
    pools, subset = make_subset(rng)
    soft = SelectionModel.build(4, seed=2, dtype=np.float64)
    es = episode_score([rng.standard_normal((5, 4))], subset, soft)
    g = es.query_selection
    want = (g.gamma * g.gates[:, None]).sum(axis=0)
    assert np.allclose(es.per_query[0], want, atol=1e-12)


def test_episode_score_accepts_stacked_matrix_with_block():
    rng = np.random.default_rng(32)
    _, subset = make_subset(rng)
    model = SelectionModel.build(4, seed=3, strategy="all", dtype=np.float64)
    stacked = rng.standard_normal((6, 4))
    via_block = episode_score(stacked, subset, model, block=3)
    via_list = episode_score([stacked[:3], stacked[3:]], subset, model)
    assert np.allclose(via_block.per_query, via_list.per_query, atol=1e-15)
    with pytest.raises(InvalidInputError):
        episode_score(stacked, subset, model)  # stacked input needs block


def test_posteriors_rows_sum_to_one_and_argmax_consistent():
    rng = np.random.default_rng(33)
    _, subset = make_subset(rng)
    model = SelectionModel.build(4, seed=4, dtype=np.float64)
    es = episode_score([rng.standard_normal((4, 4)) for _ in range(3)], subset, model)
    assert np.allclose(es.posteriors.sum(axis=1), 1.0, atol=1e-9)
    assert np.array_equal(es.predicted, np.argmax(es.per_query, axis=1))
    assert es.n_way == 3


def test_loss_on_uniform_scores_is_log_n():
    for n in (2, 5):
        scores = np.zeros((4, n))
        es = EpisodeScores(per_query=scores,
                           posteriors=np.full((4, n), 1.0 / n),
                           predicted=np.zeros(4, dtype=int),
                           scores_node=ad.constant(scores),
                           query_selection=None)
        loss = episode_loss(es, [0] * 4)
        assert loss.value == pytest.approx(math.log(n), abs=1e-12)


def test_loss_matches_oracle_cross_entropy():
    rng = np.random.default_rng(34)
    _, subset = make_subset(rng)
    model = SelectionModel.build(4, seed=5, strategy="all", dtype=np.float64)
    es = episode_score([rng.standard_normal((4, 4)) for _ in range(3)], subset, model)
    labels = [2, 0, 1]
    loss = episode_loss(es, labels)
    want = sum(oracle.cross_entropy(row.tolist(), lab)
               for row, lab in zip(es.per_query, labels)) / 3
    assert loss.value == pytest.approx(want, rel=1e-12)


def test_loss_shift_invariance_per_query():
    rng = np.random.default_rng(35)
    raw = rng.standard_normal((3, 4))

    def loss_of(scores):
        es = EpisodeScores(per_query=scores,
                           posteriors=np.exp(scores - scores.max(1, keepdims=True)) /
                           np.exp(scores - scores.max(1, keepdims=True)).sum(1, keepdims=True),
                           predicted=np.argmax(scores, axis=1),
                           scores_node=ad.constant(scores),
                           query_selection=None)
        return episode_loss(es, [0, 1, 2]).value

    assert loss_of(raw + 7.5) == pytest.approx(loss_of(raw), rel=1e-9)


def test_loss_validates_labels():
    scores = np.zeros((2, 3))
    es = EpisodeScores(per_query=scores, posteriors=np.full((2, 3), 1 / 3),
                       predicted=np.zeros(2, dtype=int),
                       scores_node=ad.constant(scores), query_selection=None)
    with pytest.raises(InvalidInputError):
        episode_loss(es, [0, 3])
    with pytest.raises(InvalidInputError):
        episode_loss(es, [0])


def test_auxiliary_loss_requires_soft_nodes():
    rng = np.random.default_rng(36)
    pools = [ClassPool(i, rng.standard_normal((4, 4))) for i in range(2)]
    disabled = SelectionModel.build(4, seed=0, dtype=np.float64,
                                    enable_support_selection=False)
    sel = select_support_subset(pools, disabled)
    with pytest.raises(ContractViolationError):
        support_auxiliary_loss(sel, block=4)


def test_auxiliary_loss_matches_hand_computation():
    rng = np.random.default_rng(37)
    pools = [ClassPool(i, rng.standard_normal((4, 3))) for i in range(3)]
    model = SelectionModel.build(3, seed=6, dtype=np.float64)
    sel = select_support_subset(pools, model)
    loss = support_auxiliary_loss(sel, block=4)
    # logit row per class: gated gamma summed over that class's pool rows
    rows = []
    for c in range(3):
        gam = sel.gamma_nodes[c].value
        gates = sel.gate_nodes[c].value.reshape(-1, 1)
        rows.append((gam * gates).sum(axis=0))
    want = sum(oracle.cross_entropy(row.tolist(), c) for c, row in enumerate(rows)) / 3
    assert loss.value == pytest.approx(want, rel=1e-10)


def test_auxiliary_loss_backpropagates_to_threshold_net():
    rng = np.random.default_rng(38)
    pools = [ClassPool(i, rng.standard_normal((4, 3))) for i in range(2)]
    model = SelectionModel.build(3, seed=7, dtype=np.float64)
    sel = select_support_subset(pools, model)
    loss = support_auxiliary_loss(sel, block=4)
    ad.backward(loss)
    for name, p in model.f_gamma.parameters().items():
        assert p.grad is not None and np.any(p.grad != 0), name


def test_accuracy_counts_matches():
    scores = np.array([[2.0, 1.0], [0.0, 1.0], [3.0, 0.5], [0.2, 0.4]])
    exp = np.exp(scores - scores.max(axis=1, keepdims=True))
    es = EpisodeScores(per_query=scores,
                       posteriors=exp / exp.sum(axis=1, keepdims=True),
                       predicted=np.argmax(scores, axis=1),
                       scores_node=ad.constant(scores), query_selection=None)
    assert accuracy(es, [0, 1, 1, 1]) == pytest.approx(0.75)
