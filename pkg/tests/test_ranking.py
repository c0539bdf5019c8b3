import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from protoconf.core import Modality, PrototypeSet, WeightVector, ZeroNormVector
from protoconf.ranking import CandidatePool, global_embedding, initial_rank, rerank


def ps(i, z, modality=Modality.REPORT):
    return PrototypeSet(i, modality, z)


def test_global_embedding_examples():
    u = np.array([0.3, -2.0])
    np.testing.assert_allclose(global_embedding(ps("a", [u, u, u]), WeightVector.uniform(3)), 3 * u, atol=1e-15)
    h = global_embedding(ps("a", [[1, 0], [0, 1]]), WeightVector.uniform(2))
    np.testing.assert_array_equal(h, [1, 1])


def test_global_embedding_zero_weight_limit():
    # w = [2, 0] is the theta -> (+inf, -inf) limit; a large gap gets within rounding of it
    w = WeightVector([400.0, -400.0])
    a, b = np.array([1.0, 2.0]), np.array([5.0, -1.0])
    np.testing.assert_allclose(global_embedding(ps("a", [a, b]), w), 2 * a, atol=1e-12)


def test_identical_candidate_ranks_first(rng, make_sets):
    q = PrototypeSet("q", Modality.IMAGE, rng.standard_normal((4, 6)))
    cands = make_sets(rng, 9, 4, 6) + [ps("twin", q.prototypes)]
    rl = initial_rank(q, cands, WeightVector.uniform(4))
    assert rl.ids[0] == "twin"
    assert rl.scores[0] == pytest.approx(1.0, abs=1e-15)


def test_equal_scores_break_ties_by_id(rng):
    q = PrototypeSet("q", Modality.IMAGE, rng.standard_normal((3, 4)))
    z = rng.standard_normal((3, 4))
    rl = initial_rank(q, [ps("b", z), ps("a", z), ps("c", -z)], WeightVector.uniform(3))
    assert rl.ids == ["a", "b", "c"] or rl.ids == ["c", "a", "b"]
    assert rl.ids.index("a") < rl.ids.index("b")


def test_three_candidates_against_oracle(rng, make_sets):
    q = rng.standard_normal((3, 5))
    cands = make_sets(rng, 3, 3, 5)
    w = WeightVector([0.2, -0.4, 0.1])
    rl = initial_rank(ps("q", q, Modality.IMAGE), cands, w)
    ref = oracle.initial_rank(q.tolist(), [(c.item_id, c.prototypes.tolist()) for c in cands], list(w.w))
    assert rl.ids == [r[0] for r in ref]
    np.testing.assert_allclose(rl.scores, [r[1] for r in ref], atol=1e-12)


def test_zero_norm_global_embedding():
    w = WeightVector.uniform(2)
    q = ps("q", [[1.0, 0.0], [-1.0, 0.0]], Modality.IMAGE)
    with pytest.raises(ZeroNormVector):
        initial_rank(q, [ps("a", [[1.0, 0.0], [0.0, 1.0]])], w)


def test_rerank_constant_confidence_keeps_order():
    # every candidate's prototypes are rotated by the same angle away from the query's,
    # in different directions: equal confidences, distinct global similarities
    c, s_ = np.cos(0.4), np.sin(0.4)
    e = np.eye(4)
    q = ps("q", [e[0], e[1]], Modality.IMAGE)
    cands = [
        ps("x", [c * e[0] + s_ * e[2], c * e[1] + s_ * e[3]]),
        ps("y", [c * e[0] + s_ * e[1], c * e[1] + s_ * e[0]]),
        ps("z", [c * e[0] + s_ * e[2], c * e[1] + s_ * e[2]]),
    ]
    w = WeightVector.uniform(2)
    rr = rerank(q, cands, w)
    assert len({round(sc.confidence, 12) for _, sc in rr.entries}) == 1
    assert len({round(sc.initial, 12) for _, sc in rr.entries}) == 3
    assert rr.ids == initial_rank(q, cands, w).ids


def test_rerank_zero_initial_gives_zero_final():
    q = ps("q", [[1.0, 0.0], [1.0, 0.0]], Modality.IMAGE)
    c = ps("c", [[0.0, 1.0], [0.0, 1.0]])
    (cid, s), = rerank(q, [c], WeightVector.uniform(2)).entries
    assert s.initial == 0.0 and s.final == 0.0


def test_rerank_can_reorder(rng):
    # candidate whose global matches well but regional prototypes disagree loses to a consistent one
    q = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    consistent = q + 0.35 * np.array([[0, 0, 1], [0, 0, 1], [1, -1, 0]])
    scrambled = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    w = WeightVector.uniform(3)
    query = ps("q", q, Modality.IMAGE)
    cands = [ps("A", scrambled), ps("B", consistent)]
    init = initial_rank(query, cands, w)
    rr = rerank(query, cands, w)
    assert init.ids[0] == "A"
    assert rr.ids[0] == "B"
    scores = dict(rr.entries)
    assert scores["A"].initial > scores["B"].initial
    assert scores["A"].confidence < scores["B"].confidence


def test_rerank_final_is_product(rng, make_sets):
    q = PrototypeSet("q", Modality.IMAGE, rng.standard_normal((5, 7)))
    w = WeightVector(rng.normal(size=5))
    for _, s in rerank(q, make_sets(rng, 40, 5, 7), w).entries:
        assert s.final == pytest.approx(s.initial * s.confidence, abs=1e-12)


def test_rerank_warns_on_sign_flip(rng, make_sets, caplog):
    q = PrototypeSet("q", Modality.IMAGE, rng.standard_normal((3, 4)))
    with caplog.at_level(logging.WARNING, logger="protoconf.ranking"):
        rerank(q, make_sets(rng, 50, 3, 4), WeightVector.uniform(3), transform="raw")
    assert any("changed sign" in r.message for r in caplog.records)


def test_shortlist_larger_than_pool_is_noop(rng, make_sets):
    q = PrototypeSet("q", Modality.IMAGE, rng.standard_normal((4, 5)))
    cands = make_sets(rng, 30, 4, 5)
    w = WeightVector(rng.normal(size=4))
    assert rerank(q, cands, w, shortlist=10**6) == rerank(q, cands, w)


def test_shortlist_reranks_initial_top(rng, make_sets):
    q = PrototypeSet("q", Modality.IMAGE, rng.standard_normal((4, 5)))
    cands = make_sets(rng, 30, 4, 5)
    w = WeightVector.uniform(4)
    rr = rerank(q, cands, w, shortlist=7)
    assert set(rr.ids) == set(initial_rank(q, cands, w).ids[:7])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**32 - 1), st.sampled_from(["raw", "shifted"]))
def test_rerank_matches_oracle(n, K, d, seed, transform):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((K, d))
    cands = [ps(f"c{i:03d}", rng.standard_normal((K, d))) for i in range(n)]
    w = WeightVector(rng.normal(size=K))
    rr = rerank(ps("q", q, Modality.IMAGE), cands, w, transform)
    ref = oracle.rerank(q.tolist(), [(c.item_id, c.prototypes.tolist()) for c in cands], list(w.w), transform == "shifted")
    assert rr.ids == [r[0] for r in ref]
    for (cid, s), r in zip(rr.entries, ref):
        assert abs(s.initial - r[1]) <= 1e-12 and abs(s.confidence - r[2]) <= 1e-12 and abs(s.final - r[3]) <= 1e-12


def test_positive_confidence_rescale_keeps_order(rng, make_sets):
    q = PrototypeSet("q", Modality.IMAGE, np.abs(rng.standard_normal((4, 6))))
    cands = [PrototypeSet(c.item_id, c.modality, np.abs(c.prototypes)) for c in make_sets(rng, 25, 4, 6)]
    rr = rerank(q, cands, WeightVector.uniform(4))
    scaled = sorted(rr.entries, key=lambda e: (-(e[1].initial * (3.7 * e[1].confidence)), e[0]))
    assert [e[0] for e in scaled] == rr.ids


def test_worker_count_does_not_change_output(rng, make_sets):
    q = PrototypeSet("q", Modality.IMAGE, rng.standard_normal((5, 16)))
    cands = make_sets(rng, 1500, 5, 16)
    w = WeightVector(rng.normal(size=5))
    pool = CandidatePool(cands, w)
    ref = rerank(q, pool, w, workers=1)
    for workers in (2, 3, 8):
        assert rerank(q, pool, w, workers=workers) == ref
    assert initial_rank(q, pool, w, workers=4) == initial_rank(q, pool, w, workers=1)


def test_pool_weight_mismatch(rng, make_sets):
    pool = CandidatePool(make_sets(rng, 3, 2, 2), WeightVector.uniform(2))
    q = PrototypeSet("q", Modality.IMAGE, rng.standard_normal((2, 2)))
    with pytest.raises(ValueError):
        rerank(q, pool, WeightVector([1.0, 0.0]))
