import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from conftest import ELEPHANT, HORSE, MAN, RIDE, WOMAN, random_sample
from structsg.corpus import RelationVocab, SceneSample
from structsg.errors import ContractError, InputError
from structsg.kg import (KnowledgeGraph, build_kg, conditional_probability, connection_sets,
                         cooccurrence_counts, degrees)


def test_two_samples_same_triple_count_two(vocab):
    s = SceneSample("x", 10, 10, [MAN, HORSE], [(0, 0, 1, 1)] * 2, [(0, RIDE, 1)])
    kg = build_kg([s, s], vocab)
    assert kg.triple_counts == {(MAN, RIDE, HORSE): 2}


def test_empty_corpus(vocab):
    kg = build_kg([], vocab)
    assert kg.triple_counts == {}
    assert kg.node_set == {0, 1, 2, 3}


def test_toy_counts(vocab, samples):
    kg = build_kg(samples, vocab)
    assert kg.triple_counts == {(MAN, RIDE, HORSE): 2, (WOMAN, RIDE, ELEPHANT): 1,
                                (MAN, RIDE, ELEPHANT): 1}


def test_out_of_range_names_sample_and_field(vocab):
    bad = SceneSample("img7", 10, 10, [MAN, 9], [(0, 0, 1, 1)] * 2, [])
    with pytest.raises(InputError, match=r"img7.*objects\[1\]\.class"):
        build_kg([bad], vocab)
    bad = SceneSample("img8", 10, 10, [MAN, HORSE], [(0, 0, 1, 1)] * 2, [(0, 5, 1)])
    with pytest.raises(InputError, match=r"img8.*relations\[0\]\.pred"):
        build_kg([bad], vocab)


@pytest.mark.parametrize("labels,expected", [
    ([MAN, HORSE], {(MAN, HORSE): 1, (HORSE, MAN): 1}),
    ([MAN, MAN, HORSE], {(MAN, MAN): 2, (MAN, HORSE): 2, (HORSE, MAN): 2}),
    ([MAN], {}),
])
def test_cooccurrence_examples(vocab, labels, expected):
    s = SceneSample("x", 10, 10, labels, [(0, 0, 1, 1)] * len(labels))
    T = cooccurrence_counts([s], vocab)
    want = np.zeros((4, 4), dtype=np.int64)
    for (i, j), v in expected.items():
        want[i, j] = v
    np.testing.assert_array_equal(T, want)


def _ordered_pair_oracle(samples, n):
    T = np.zeros((n, n), dtype=np.int64)
    for s in samples:
        for a in range(len(s.labels)):
            for b in range(len(s.labels)):
                if a != b:
                    T[s.labels[a], s.labels[b]] += 1
    return T


@given(st.integers(0, 10_000))
def test_cooccurrence_matches_enumeration_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    v = RelationVocab(6, 3)
    samples = [random_sample(rng, str(i), v) for i in range(5)]
    T = cooccurrence_counts(samples, v)
    np.testing.assert_array_equal(T, _ordered_pair_oracle(samples, 6))
    np.testing.assert_array_equal(T, T.T)


def test_image_unit_counts_presence(vocab):
    s = SceneSample("x", 10, 10, [MAN, MAN, HORSE], [(0, 0, 1, 1)] * 3)
    T = cooccurrence_counts([s, s], vocab, unit="image")
    assert T[MAN, MAN] == 2 and T[MAN, HORSE] == 2 and T[HORSE, MAN] == 2
    assert T[HORSE, HORSE] == 0


@pytest.mark.parametrize("row,expected", [
    ([2, 1, 1, 0], [0.5, 0.25, 0.25, 0.0]),
    ([0, 0, 0, 0], [0.0, 0.0, 0.0, 0.0]),
])
def test_conditional_probability_rows(row, expected):
    P = conditional_probability(np.array([row]))
    np.testing.assert_array_equal(P[0], expected)


def test_conditional_probability_diagonal():
    np.testing.assert_array_equal(conditional_probability(np.diag([5, 5, 5])), np.eye(3))


@given(st.integers(0, 10_000))
def test_probability_rows_stochastic(seed):
    rng = np.random.default_rng(seed)
    T = rng.integers(0, 20, size=(7, 7)) * (rng.random((7, 7)) < 0.6)
    T[rng.integers(7)] = 0
    P = conditional_probability(T)
    sums = T.sum(axis=1)
    assert np.all(np.abs(P[sums > 0].sum(axis=1) - 1) <= 1e-9)
    assert np.all(P[sums == 0] == 0)
    assert np.all((P >= 0) & (P <= 1))


def test_degrees_toy(vocab, samples):
    kg = build_kg(samples, vocab)
    assert degrees(kg, HORSE) == (2, 0)
    assert degrees(kg, MAN) == (0, 3)
    assert degrees(build_kg([], vocab), WOMAN) == (0, 0)
    with pytest.raises(KeyError):
        degrees(kg, 42)


def test_connection_sets_toy(vocab, samples):
    kg = build_kg(samples, vocab)
    assert connection_sets(kg, HORSE, ELEPHANT) == ({MAN}, set())
    assert connection_sets(kg, MAN, WOMAN) == (set(), {ELEPHANT})
    assert connection_sets(build_kg([], vocab), MAN, WOMAN) == (set(), set())
    with pytest.raises(ContractError):
        connection_sets(kg, MAN, MAN)


def random_kg(rng, n=6, r=3, triples=25):
    v = RelationVocab(n, r)
    kg = KnowledgeGraph(v)
    for _ in range(triples):
        kg.add(int(rng.integers(n)), int(rng.integers(r)), int(rng.integers(n)), int(rng.integers(1, 3)))
    return kg


@given(st.integers(0, 10_000))
def test_connection_sets_match_oracle_and_bounds(seed):
    rng = np.random.default_rng(seed)
    kg = random_kg(rng)
    for a in range(6):
        for b in range(a + 1, 6):
            L_s, L_o = connection_sets(kg, a, b)
            assert (L_s, L_o) == oracles.connection_sets(kg.triple_counts, kg.nodes, a, b)
            assert (L_s, L_o) == connection_sets(kg, b, a)
            in_nb = [{s for (s, _, o) in kg.triple_counts if o == q} for q in (a, b)]
            out_nb = [{o for (s, _, o) in kg.triple_counts if s == q} for q in (a, b)]
            assert len(L_s) <= min(map(len, in_nb))
            assert len(L_o) <= min(map(len, out_nb))
            assert kg.degrees(a) == oracles.degrees(kg.triple_counts, a)


@given(st.integers(0, 10_000))
def test_build_kg_order_independent(seed):
    rng = np.random.default_rng(seed)
    v = RelationVocab(5, 4)
    samples = [random_sample(rng, str(i), v) for i in range(6)]
    shuffled = list(samples)
    random.Random(seed).shuffle(shuffled)
    assert build_kg(samples, v).triple_counts == build_kg(shuffled, v).triple_counts


def test_total_count_matches_relations():
    rng = np.random.default_rng(3)
    v = RelationVocab(5, 4)
    samples = [random_sample(rng, str(i), v) for i in range(10)]
    kg = build_kg(samples, v)
    assert sum(kg.triple_counts.values()) == sum(len(s.relations) for s in samples)

