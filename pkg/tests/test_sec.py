import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import ELEPHANT, HORSE, MAN, WOMAN, random_sample
from structsg.corpus import RelationVocab
from structsg.errors import ContractError, InputError, NumericError
from structsg.hsa import ContextDictionary, hsa_cluster
from structsg.kg import build_kg, conditional_probability, cooccurrence_counts
from structsg.sec import (SecConfig, SecHead, box_features, build_frequency_bias, compose_classifier,
                          embed_contexts, encode_context, encode_contexts, flat_score, fuse_bias,
                          gcn_forward, local_adjacency, normalized_adjacency,
                          relation_representation, score, spatial_representation)


def test_encode_context_examples(vocab, samples):
    np.testing.assert_array_equal(encode_context(ContextDictionary.identity(10), 7), np.eye(10)[7])
    one = ContextDictionary.from_partition([range(5)])
    for c in range(5):
        np.testing.assert_array_equal(encode_context(one, c), [1.0])
    d, _ = hsa_cluster(build_kg(samples, vocab), 2)
    np.testing.assert_array_equal(encode_context(d, MAN), [1, 0])
    np.testing.assert_array_equal(encode_context(d, HORSE), [0, 1])
    with pytest.raises(KeyError):
        encode_context(d, 99)


def test_embed_contexts():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((5, 3))
    E = embed_contexts(W, encode_contexts(ContextDictionary.identity(3), [2, 0, 2]))
    np.testing.assert_array_equal(E[0], W[:, 2])
    np.testing.assert_array_equal(E[1], W[:, 0])
    np.testing.assert_array_equal(E[0], E[2])
    C = np.eye(3)[[1, 0]]
    np.testing.assert_array_equal(embed_contexts(np.eye(3), C), C)
    with pytest.raises(ContractError):
        embed_contexts(W, np.eye(4)[:1])


def test_local_adjacency():
    P = np.arange(16, dtype=float).reshape(4, 4) / 16
    assert local_adjacency(P, [2]).A.tolist() == [[P[2, 2]]]
    np.testing.assert_array_equal(local_adjacency(P, [1, 3]).A, [[P[1, 1], P[1, 3]], [P[3, 1], P[3, 3]]])
    A = local_adjacency(P, [1, 1, 3]).A
    np.testing.assert_array_equal(A[0], A[1])
    with pytest.raises(InputError):
        local_adjacency(P, [4])


def test_normalized_adjacency_matches_formula():
    A = np.array([[0.5, 0.5], [0.25, 0.75]])
    A_hat = A + np.eye(2)
    D = np.diag(A_hat.sum(axis=1) ** -0.5)
    np.testing.assert_allclose(normalized_adjacency(A), D @ A_hat @ D, rtol=0, atol=1e-15)


def test_gcn_examples():
    rng = np.random.default_rng(1)
    E = rng.standard_normal((1, 4))
    np.testing.assert_array_equal(gcn_forward(E, np.ones((1, 1)), [np.eye(4)], "identity", "identity"), E)
    E = rng.standard_normal((2, 3))
    U = rng.standard_normal((3, 5))
    out = gcn_forward(E, np.array([[0.0, 1.0], [1.0, 0.0]]), [U], "identity", "identity")
    np.testing.assert_allclose(out[0], E[1] @ U, rtol=1e-14)
    np.testing.assert_allclose(out[1], E[0] @ U, rtol=1e-14)


def test_gcn_errors():
    with pytest.raises(ContractError):
        gcn_forward(np.ones((2, 2)), np.ones((2, 2)), [])
    with pytest.raises(ContractError):
        gcn_forward(np.ones((2, 2)), np.ones((3, 3)), [np.eye(2)])
    with pytest.raises(NumericError, match="layer 1"), np.errstate(over="ignore"):
        gcn_forward(np.full((1, 1), 1e200), np.ones((1, 1)), [np.ones((1, 1)), np.full((1, 1), 1e200)],
                    "identity")


def test_compose_classifier():
    W = np.array([[1, 2, 3, 4], [5, 6, 7, 8]], dtype=float)
    np.testing.assert_array_equal(compose_classifier(W, 0, 1, 2), [[1, 2, 5, 6], [3, 4, 7, 8]])
    swapped = compose_classifier(W, 1, 0, 2)
    np.testing.assert_array_equal(swapped, [[5, 6, 1, 2], [7, 8, 3, 4]])
    Z = W.copy()
    Z[0] = 0
    assert not compose_classifier(Z, 0, 1, 2)[:, :2].any()
    with pytest.raises(ContractError):
        compose_classifier(W, 1, 1, 2)


def test_relation_representation():
    rng = np.random.default_rng(2)
    f_u, f_s, f_t = rng.standard_normal((3, 4))
    sel = np.hstack([np.eye(4), np.zeros((4, 8))])
    np.testing.assert_array_equal(relation_representation(f_u, f_s, f_t, sel), f_u)
    psi = rng.standard_normal((3, 12))
    assert not relation_representation(np.zeros(4), np.zeros(4), np.zeros(4), psi).any()
    x = np.concatenate([f_u, f_s, f_t])
    want = [sum(psi[i, j] * x[j] for j in range(12)) for i in range(3)]
    np.testing.assert_allclose(relation_representation(f_u, f_s, f_t, psi), want, rtol=1e-13)
    with pytest.raises(ContractError):
        relation_representation(f_u, f_s, f_t, psi[:, :11])


def test_spatial_examples():
    b = (20, 10, 40, 20)
    feats = box_features(b, b, 200, 100)
    np.testing.assert_allclose(feats[:5], [0.1, 0.1, 0.3, 0.3, 0.04], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(feats[10:], [0, 0, 0, 0])
    full = box_features((0, 0, 640, 480), (5, 5, 10, 10), 640, 480)
    np.testing.assert_allclose(full[:5], [0, 0, 1, 1, 1], rtol=0, atol=1e-12)
    psi = np.eye(14)
    np.testing.assert_array_equal(spatial_representation(b, b, 200, 100, psi), feats)
    with pytest.raises(InputError):
        box_features((0, 0, 0, 5), b, 200, 100)
    with pytest.raises(InputError):
        box_features(b, b, 0, 100)


def test_relative_part_matches_formula():
    f = box_features((30, 40, 10, 20), (10, 20, 40, 5), 100, 100)
    np.testing.assert_allclose(f[10:], [20 / 40, 20 / 5, np.log(10 / 40), np.log(20 / 5)], atol=1e-15)


@given(st.integers(0, 10_000))
def test_relative_part_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    bs = [int(v) for v in rng.integers(1, 50, size=4)]
    bt = [int(v) for v in rng.integers(1, 50, size=4)]
    dx, dy = (int(v) for v in rng.integers(-20, 20, size=2))
    shifted = box_features((bs[0] + dx, bs[1] + dy, bs[2], bs[3]), (bt[0] + dx, bt[1] + dy, bt[2], bt[3]),
                           100, 100)
    np.testing.assert_allclose(shifted[10:], box_features(bs, bt, 100, 100)[10:], rtol=0, atol=1e-12)


def test_score_examples():
    rng = np.random.default_rng(3)
    r, s = rng.standard_normal(3), rng.standard_normal(1)
    for fn in (score, flat_score):
        assert not fn(np.zeros((2, 4)), r, s).any()
        np.testing.assert_array_equal(fn(np.eye(4)[[1, 3]], r, s), [r[1], s[0]])
        W = np.array([[1.0, 2.0], [3.0, -1.0]])
        np.testing.assert_array_equal(fn(W, [2.0], [5.0]), [12.0, 1.0])
        with pytest.raises(ContractError):
            fn(np.zeros((2, 5)), r, s)


@given(st.integers(0, 10_000), st.floats(-100, 100))
def test_score_linear(seed, a):
    rng = np.random.default_rng(seed)
    W, r, s = rng.standard_normal((3, 5)), rng.standard_normal(3), rng.standard_normal(2)
    base = score(W, r, s)
    np.testing.assert_allclose(score(W, a * r, a * s), a * base, rtol=1e-9, atol=1e-9 * np.abs(base).max())


def test_frequency_bias(vocab, samples):
    bias = build_frequency_bias(samples, vocab, 1e-3)
    np.testing.assert_allclose(bias.row(WOMAN, HORSE), np.log([0.5, 0.5]), atol=1e-15)
    eps = 1e-3
    np.testing.assert_allclose(bias.row(MAN, HORSE), np.log([eps / (2 + 2 * eps), (2 + eps) / (2 + 2 * eps)]),
                               atol=1e-15)
    np.testing.assert_allclose(bias.row(MAN, ELEPHANT), np.log([eps / (1 + 2 * eps), (1 + eps) / (1 + 2 * eps)]),
                               atol=1e-15)
    sharp = build_frequency_bias(samples, vocab, 1e-9).row(WOMAN, ELEPHANT)
    assert sharp[1] > -1e-8 and sharp[0] < -15
    with pytest.raises(InputError):
        build_frequency_bias(samples, vocab, 0)


def test_fuse_bias():
    logits = np.array([1.0, 2.0, 0.5])
    np.testing.assert_array_equal(fuse_bias(logits, np.array([9.0, 0, 0]), enabled=False), logits)
    np.testing.assert_array_equal(fuse_bias(logits, np.zeros(3)), logits)
    assert np.argmax(logits) == 1
    assert np.argmax(fuse_bias(logits, np.log([0.9, 0.05, 0.05]))) == 0


def test_config_validation():
    with pytest.raises(InputError):
        SecConfig(4, 3, 2, d_cls=5)
    with pytest.raises(InputError):
        SecConfig(4, 3, 5)
    with pytest.raises(InputError):
        SecConfig(4, 3, 2, nonlinearity="sigmoid")
    c = SecConfig(4, 3, 2, d_e=6, d_cls=8, d_r=5, gcn_layers=3, gcn_hidden=7)
    assert c.gcn_dims() == [(6, 7), (7, 7), (7, 12)]


def small_head(num_classes=6, K=None, R=4, seed=0, **kw):
    rng = np.random.default_rng(seed + 1000)
    v = RelationVocab(num_classes, R)
    samples = [random_sample(rng, f"s{i}", v) for i in range(8)]
    d = ContextDictionary.identity(num_classes) if K is None else K
    P = conditional_probability(cooccurrence_counts(samples, v))
    cfg = dict(d_f=3, d_e=5, d_cls=6, d_r=4, seed=seed)
    cfg.update(kw)
    config = SecConfig(num_classes, R, d.K, **cfg)
    return SecHead(config, d, P, build_frequency_bias(samples, v))


@given(st.integers(0, 10_000))
def test_primitive_classifiers_equivariant(seed):
    rng = np.random.default_rng(seed)
    head = small_head(seed=seed % 7)
    labels = rng.integers(0, 6, size=int(rng.integers(2, 8)))
    perm = rng.permutation(len(labels))
    W = head.primitive_classifiers(labels)
    np.testing.assert_allclose(head.primitive_classifiers(labels[perm]), W[perm], rtol=1e-12, atol=1e-14)


@given(st.integers(0, 10_000), st.sampled_from(["literal", "normalized"]))
def test_same_class_rows_identical(seed, adjacency):
    rng = np.random.default_rng(seed)
    head = small_head(seed=seed % 5, adjacency=adjacency)
    labels = list(rng.integers(0, 3, size=int(rng.integers(2, 10))))
    W = head.primitive_classifiers(labels)
    for i in range(len(labels)):
        for j in range(len(labels)):
            if labels[i] == labels[j]:
                assert np.array_equal(W[i], W[j])


def test_single_context_degenerates():
    # one context: every node starts from the same embedding, so with a
    # positively homogeneous nonlinearity all primitive classifiers share one
    # direction and differ only by the co-occurrence mass of their row
    one = ContextDictionary.from_partition([range(6)])
    labels = [0, 1, 2, 2, 5]
    W1 = small_head(K=one).primitive_classifiers(labels)
    WN = small_head().primitive_classifiers(labels)
    assert np.linalg.matrix_rank(W1, tol=1e-10) == 1 < np.linalg.matrix_rank(WN, tol=1e-10)
    same = small_head(K=one).primitive_classifiers([3, 3, 3])
    assert np.array_equal(same[0], same[1]) and np.array_equal(same[0], same[2])


@given(st.integers(0, 10_000), st.sampled_from(["literal", "normalized"]))
def test_class_level_propagation_matches_instance_gcn(seed, adjacency):
    rng = np.random.default_rng(seed)
    head = small_head(seed=seed % 5, adjacency=adjacency)
    labels = rng.integers(0, 6, size=int(rng.integers(1, 9)))
    C = encode_contexts(head.dictionary, labels)
    E = embed_contexts(head.W_e, C)
    want = gcn_forward(E, head.adjacency(labels), head.gcn_weights)
    np.testing.assert_allclose(head.primitive_classifiers(labels), want, rtol=1e-12, atol=1e-13)


def test_head_rejects_mismatched_inputs():
    head = small_head()
    with pytest.raises(InputError):
        SecHead(head.config, ContextDictionary.identity(5), head.P)
    with pytest.raises(InputError):
        SecHead(head.config, head.dictionary, np.zeros((3, 3)))
