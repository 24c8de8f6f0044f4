import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compatfam.compat import FamilyEmbedding
from compatfam.evaluate import (CandidateIndex, auc, auc_bruteforce, error_rate, min_prototype_distance,
                                parallel_executor, read_metrics_csv, read_rankings_csv, recommend_approx,
                                recommend_exact, recommend_l2, symmetric_auc_bound, write_metrics_csv,
                                write_rankings_csv)


def test_auc_examples():
    assert auc([0.9, 0.1], [1, -1]) == 1.0
    assert auc([0.1, 0.9], [1, -1]) == 0.0
    assert auc([0.8, 0.8, 0.2], [1, -1, -1]) == 0.75


def test_auc_single_class():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_bruteforce_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.choice([-1, 1], size=n)
        labels[:2] = [1, -1]
        scores = rng.integers(0, 6, size=n) / 5.0  # plenty of ties
        assert auc(scores, labels) == auc_bruteforce(scores, labels)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=2, max_size=40))
def test_auc_bruteforce_property(rows):
    scores = [s for s, _ in rows]
    labels = [1 if b else -1 for _, b in rows]
    if len(set(labels)) < 2:
        return
    assert auc(scores, labels) == auc_bruteforce(scores, labels)


def test_error_rate_examples():
    assert error_rate([0.9, 0.2], [1, -1]) == 0.0
    assert error_rate([0.4, 0.6], [1, -1]) == 1.0
    assert error_rate([0.6, 0.6, 0.4, 0.2], [1, -1, 1, -1]) == 0.5


def _family(protos, e0=None):
    protos = np.asarray(protos, dtype=np.float64)
    return FamilyEmbedding(np.zeros(protos.shape[1]) if e0 is None else e0, protos)


def test_exact_single_candidate():
    index = CandidateIndex([7], np.array([[1.0, 2.0]]))
    r = recommend_exact(_family([[0.0, 0.0]]), index, 5)
    assert r.ids.tolist() == [7]


def test_exact_zero_distance_first():
    index = CandidateIndex([1, 2, 3], np.array([[5.0], [0.3], [-2.0]]))
    r = recommend_exact(_family([[0.3], [9.0]]), index, 3)
    assert r.ids[0] == 2 and r.scores[0] == 0.0


def test_exact_matches_hand_oracle():
    protos = np.array([[0.0, 0.0], [4.0, 0.0]])
    cands = np.array([[1.0, 0.0], [3.5, 0.5], [2.0, 2.0]])

    def d(y):
        dk = [np.sum((p - y) ** 2) for p in protos]
        w = np.exp(-np.array(dk)) / np.sum(np.exp(-np.array(dk)))
        return np.sum((w @ protos - y) ** 2)

    expect = [i for _, i in sorted((d(y), i) for i, y in zip([10, 11, 12], cands))]
    r = recommend_exact(_family(protos), CandidateIndex([10, 11, 12], cands), 3)
    assert r.ids.tolist() == expect
    np.testing.assert_allclose(-r.scores, sorted(d(y) for y in cands), rtol=1e-12)


def test_ties_broken_by_id():
    index = CandidateIndex([9, 3, 5], np.array([[1.0], [1.0], [-1.0]]))
    r = recommend_exact(_family([[0.0]]), index, 3)
    assert r.ids.tolist() == [3, 5, 9]


def test_approx_k1_equals_exact():
    rng = np.random.default_rng(2)
    index = CandidateIndex(np.arange(30), rng.standard_normal((30, 3)))
    fam = _family(rng.standard_normal((1, 3)))
    a, e = recommend_approx(fam, index, 10), recommend_exact(fam, index, 10)
    assert a.ids.tolist() == e.ids.tolist()
    np.testing.assert_allclose(a.scores, e.scores, rtol=1e-12)


def test_approx_min_k_oracle():
    protos = np.array([[0.0], [10.0]])
    cands = np.array([[1.0], [9.0], [4.0], [10.5]])
    table = (cands[:, None, 0] - protos[None, :, 0]) ** 2
    expect = np.lexsort((np.arange(4), table.min(axis=1)))
    r = recommend_approx(_family(protos), CandidateIndex(np.arange(4), cands), 4)
    assert r.ids.tolist() == expect.tolist()


def test_approx_separated_top1_agrees():
    rng = np.random.default_rng(5)
    agree = 0
    for _ in range(50):
        protos = rng.standard_normal((3, 2)) * 20
        cands = np.vstack([protos[0] + 0.1 * rng.standard_normal(2), rng.standard_normal((20, 2)) * 20])
        index = CandidateIndex(np.arange(len(cands)), cands)
        fam = _family(protos)
        agree += recommend_approx(fam, index, 1).ids[0] == recommend_exact(fam, index, 1).ids[0]
    assert agree == 50


def test_approx_parallel_same_result():
    rng = np.random.default_rng(1)
    index = CandidateIndex(np.arange(100), rng.standard_normal((100, 4)))
    fam = _family(rng.standard_normal((4, 4)))
    ex = parallel_executor(4)
    try:
        par = recommend_approx(fam, index, 8, executor=ex)
    finally:
        ex.shutdown()
    seq = recommend_approx(fam, index, 8)
    assert par.ids.tolist() == seq.ids.tolist()


def test_empty_index():
    with pytest.raises(ValueError):
        CandidateIndex([], np.zeros((0, 2)))


def test_l2_recommend():
    index = CandidateIndex([1, 2], np.array([[0.0], [3.0]]))
    assert recommend_l2(np.array([2.5]), index, 1).ids.tolist() == [2]


def test_min_prototype_distance():
    protos = np.array([[[0.0], [3.0]]])
    assert min_prototype_distance(protos, np.array([[2.0]])).tolist() == [1.0]


def _bound_bruteforce(C, shifts):
    """Best AUC over every symmetric scorer that is constant on unordered class pairs.

    Enumerates all weak orderings of the blocks via integer score assignments.
    """
    blocks = [(a, b) for a in range(C) for b in range(a + 1, C)]
    best = 0.0
    for values in itertools.product(range(len(blocks)), repeat=len(blocks)):
        score = {}
        for (a, b), v in zip(blocks, values):
            score[(a, b)] = score[(b, a)] = v
        s, lab = [], []
        for a in range(C):
            for b in range(C):
                if a != b:
                    s.append(score[(a, b)])
                    lab.append(1 if (b - a) % C in shifts else -1)
        if len(set(lab)) == 2:
            best = max(best, auc(s, lab))
    return best


@pytest.mark.parametrize("C,shifts", [(3, {1}), (4, {1}), (4, {1, 2})])
def test_bound_matches_bruteforce(C, shifts):
    assert symmetric_auc_bound(C, shifts) == pytest.approx(_bound_bruteforce(C, shifts), abs=1e-12)


def test_bound_examples():
    # one unordered pair per direction-positive pair, each tied with its negative mirror
    assert symmetric_auc_bound(3, {1}) == 0.5
    assert symmetric_auc_bound(10, {5}) == 1.0
    # every positive (a, a+s) is tied with its negative mirror
    assert symmetric_auc_bound(10, {1, 2}) == pytest.approx(1 - 0.5 * 20 / 70, abs=1e-15)


def test_bound_undefined_when_shift_is_its_own_mirror():
    # 1 = -1 mod 2, so both off-diagonal pairs are compatible
    with pytest.raises(ValueError, match="undefined"):
        symmetric_auc_bound(2, {1})


def test_bound_holds_for_symmetric_embedding():
    # any symmetric pair score (here a random class embedding distance) stays under the bound
    rng = np.random.default_rng(0)
    C, shifts = 10, {1, 2}
    bound = symmetric_auc_bound(C, shifts)
    for _ in range(50):
        z = rng.standard_normal((C, 3))
        s, lab = [], []
        for a in range(C):
            for b in range(C):
                if a != b:
                    s.append(-np.sum((z[a] - z[b]) ** 2))
                    lab.append(1 if (b - a) % C in shifts else -1)
        assert auc(s, lab) <= bound + 1e-12


def test_rankings_csv_roundtrip(tmp_path):
    index = CandidateIndex([4, 8, 15], np.array([[0.1], [0.2], [0.3]]))
    ranked = [recommend_exact(_family([[1 / 3]]), index, 3, query_id=42)]
    write_rankings_csv(ranked, tmp_path / "r.csv")
    rows = read_rankings_csv(tmp_path / "r.csv")
    assert [r[2] for r in rows] == ranked[0].ids.tolist()
    assert [r[3] for r in rows] == ranked[0].scores.tolist()
    assert rows[0][:2] == (42, 1)


def test_metrics_csv_roundtrip(tmp_path):
    rows = [{"split": "test", "K": 2, "auc": 2 / 3, "error_rate": 0.1 + 0.2}]
    write_metrics_csv(rows, tmp_path / "m.csv")
    assert read_metrics_csv(tmp_path / "m.csv") == rows
