import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import forward_ref, gradcheck_case, numeric_grad, pair_counts_ref, rel_error, triplet_loss_ref
from simco.embed import (
    EmbeddingNet,
    ImageFeatures,
    TrainConfig,
    TripletBatch,
    batch_loss,
    forward,
    intra_inter_means,
    load_model,
    loss_curve_csv,
    loss_gradient,
    mine_pairs,
    nn_recall_at_1,
    save_model,
    train_on_features,
    triplet_loss,
    triplet_stats,
)


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _basis(i, d=64):
    e = np.zeros(d)
    e[i] = 1.0
    return e


def test_forward_unit_norm_and_deterministic(rng):
    net = EmbeddingNet.init(seed=3)
    X = rng.random((20, 769))
    Y = forward(net, X)
    assert Y.shape == (20, 64)
    assert np.allclose(np.linalg.norm(Y, axis=1), 1.0, atol=1e-6)
    assert np.array_equal(forward(net, X), Y)
    assert np.allclose(net(X[3]), Y[3], rtol=0, atol=1e-12)


def test_forward_matches_straight_line_reference(rng):
    for seed in range(3):
        net = EmbeddingNet.init(30, 17, 64, seed=seed)
        net.b1[:] = rng.normal(0, 0.1, 17)
        x = rng.random(30)
        assert np.allclose(forward(net, x), forward_ref(net.W1, net.b1, net.W2, net.b2, x), atol=1e-12)


def test_forward_zero_vector_guard():
    net = EmbeddingNet(np.zeros((4, 3)), np.zeros(4), np.zeros((8, 4)), np.zeros(8))
    y = forward(net, np.ones(3))
    assert np.all(np.isfinite(y))
    assert np.allclose(y, 1 / math.sqrt(8))


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(EmbeddingNet.init(seed=0), np.zeros(768))


def test_glorot_bounds():
    net = EmbeddingNet.init(seed=1)
    assert np.abs(net.W1).max() <= math.sqrt(6 / (769 + 128))
    assert np.abs(net.W2).max() <= math.sqrt(6 / (128 + 64))
    assert not net.b1.any() and not net.b2.any()
    assert np.array_equal(EmbeddingNet.init(seed=1).W1, net.W1)


def test_triplet_single_term_examples():
    a = _basis(0)
    # a = p, n antipodal
    assert triplet_loss([a, a, -a], [0, 0, 1], 0.2) == 0.0
    # a = p = n: two anchors, one negative each
    assert triplet_loss([a, a, a], [0, 0, 1], 0.2) == pytest.approx(2 * 0.2)


def test_triplet_four_vectors_frozen():
    e0, e1, e2 = _basis(0), _basis(1), _basis(2)
    Y = np.stack([e0, _unit(e0 + e1), e1, _unit(e1 + e2)])
    labels = [0, 0, 1, 1]
    ref = triplet_loss_ref(Y, labels, 0.2)
    # two active triplets, each exactly alpha: (1, 0 | 2) and (2, 3 | 1)
    assert ref == pytest.approx(0.4, abs=1e-12)
    assert triplet_loss(Y, labels, 0.2) == pytest.approx(ref, abs=1e-12)
    st_ = triplet_stats(Y, labels, 0.2)
    assert st_.n_valid == 8 and st_.n_active == 2


def test_triplet_matches_reference_on_random_batches(rng):
    for _ in range(30):
        n = int(rng.integers(2, 9))
        Y = np.array([_unit(v) for v in rng.normal(size=(n, 64))])
        labels = list(rng.integers(0, 3, size=n))
        alpha = float(rng.uniform(0.05, 1.0))
        assert triplet_loss(Y, labels, alpha) == pytest.approx(triplet_loss_ref(Y, labels, alpha), abs=1e-10)


def test_degenerate_batch_flag():
    Y = np.eye(3, 64)
    s = triplet_stats(Y, [0, 1, 2])
    assert s.degenerate and s.loss == 0.0
    s = triplet_stats(Y, [4, 4, 4])
    assert s.degenerate and s.loss == 0.0


def test_mine_pairs_examples():
    pos, neg = mine_pairs([7, 7, 7])
    assert pos.sum() == 6 and neg.sum() == 0
    pos, neg = mine_pairs([0, 0, 1, 1])
    assert pos.sum() == 4 and neg.sum() == 8


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=15))
def test_mine_pairs_cover_all_ordered_pairs(labels):
    pos, neg = mine_pairs(labels)
    n = len(labels)
    assert pos.sum() + neg.sum() == n * (n - 1)
    assert (pos.sum(), neg.sum()) == pair_counts_ref(labels)
    assert not (pos & neg).any()


def test_loss_rotation_invariant(rng):
    Y = np.array([_unit(v) for v in rng.normal(size=(9, 64))])
    labels = rng.integers(0, 3, size=9)
    Q, _ = np.linalg.qr(rng.normal(size=(64, 64)))
    assert triplet_loss(Y @ Q.T, labels) == pytest.approx(triplet_loss(Y, labels), abs=1e-9)


def test_loss_permutation_invariant(rng):
    Y = np.array([_unit(v) for v in rng.normal(size=(10, 64))])
    labels = rng.integers(0, 3, size=10)
    perm = rng.permutation(10)
    assert triplet_loss(Y[perm], labels[perm]) == pytest.approx(triplet_loss(Y, labels), abs=1e-9)


def test_loss_zero_iff_margin_satisfied(rng):
    for _ in range(50):
        Y = np.array([_unit(v) for v in rng.normal(size=(6, 64))])
        labels = rng.integers(0, 2, size=6)
        loss = triplet_loss(Y, labels, 0.2)
        assert loss >= 0
        D = np.linalg.norm(Y[:, None] - Y[None], axis=2)
        ok = all(D[a, p] + 0.2 <= D[a, q]
                 for a in range(6) for p in range(6) for q in range(6)
                 if a != p and labels[a] == labels[p] and labels[q] != labels[a])
        assert (loss == 0) == ok


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    assert gradcheck_case(seed) < 1e-4


def test_gradient_full_size_net_sampled_coordinates(rng):
    net = EmbeddingNet.init(seed=5)
    batch = TripletBatch(rng.random((8, 769)), np.array([0, 0, 0, 1, 1, 2, 2, 2]))
    g = loss_gradient(net, batch)
    h = 1e-5
    for name in ("W1", "b1", "W2", "b2"):
        p = net.params()[name]
        for _ in range(15):
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            old = p[idx]
            p[idx] = old + h
            fp = batch_loss(net, batch)
            p[idx] = old - h
            fm = batch_loss(net, batch)
            p[idx] = old
            num = (fp - fm) / (2 * h)
            assert abs(num - g[name][idx]) <= 1e-4 * max(abs(num), abs(g[name][idx]), 1e-3)


def test_all_inactive_gives_zero_gradient():
    # two tight, far-apart groups: every hinge strictly negative
    net = EmbeddingNet(np.eye(4), np.zeros(4), np.eye(4), np.zeros(4))
    X = np.array([[1, 0, 0, 0], [1, 0.01, 0, 0], [0, 0, 1, 0], [0, 0, 1, 0.01]])
    batch = TripletBatch(X, np.array([0, 0, 1, 1]))
    assert batch_loss(net, batch) == 0.0
    assert all(not v.any() for v in loss_gradient(net, batch).values())


def test_duplicate_detection_gradient_still_exact(rng):
    net = EmbeddingNet.init(10, 6, 8, seed=2)
    X = rng.random((5, 10))
    labels = np.array([0, 0, 1, 1, 2])
    dup = TripletBatch(np.vstack([X, X[:1]]), np.append(labels, 0))
    base = TripletBatch(X, labels)
    assert batch_loss(net, dup) != batch_loss(net, base)
    # the duplicate pair sits at distance zero; subgradient 0 there keeps FD agreement
    g = loss_gradient(net, dup)
    num = numeric_grad(lambda: batch_loss(net, dup), net.params())
    for k in g:
        assert rel_error(g[k], num[k]) < 1e-4


def _toy_images(rng, n_images=8, n_types=4):
    protos = rng.random((n_types, 20))
    images = []
    for i in range(n_images):
        labels = rng.choice(n_types, size=int(rng.integers(2, 6)), replace=True)
        labels[:2] = rng.choice(n_types, 2, replace=False)
        feats = protos[labels] + rng.normal(0, 0.03, (len(labels), 20))
        images.append(ImageFeatures(f"t{i}", feats, labels))
    return images


def test_lr_zero_keeps_weights(rng):
    net = EmbeddingNet.init(20, 16, 8, seed=0)
    init = net.copy()
    net, curve = train_on_features(net, _toy_images(rng), TrainConfig(lr=0.0, epochs=3, hidden=16))
    for k, v in init.params().items():
        assert np.array_equal(net.params()[k], v)
    assert len(curve) == 3


def test_training_deterministic_and_decreasing(rng):
    images = _toy_images(rng, 16)
    cfg = TrainConfig(epochs=15, lr=0.05, hidden=16, seed=3)
    a, ca = train_on_features(EmbeddingNet.init(20, 16, 8, seed=3), images, cfg)
    b, cb = train_on_features(EmbeddingNet.init(20, 16, 8, seed=3), images, cfg)
    assert ca == cb
    for k in a.params():
        assert np.array_equal(a.params()[k], b.params()[k])
    assert ca[-1] < ca[0]


def test_training_errors(rng):
    with pytest.raises(ValueError):
        train_on_features(EmbeddingNet.init(20, 16, 8), [], TrainConfig())
    with pytest.raises(ValueError):
        train_on_features(EmbeddingNet.init(20, 16, 8), _toy_images(rng, 2), TrainConfig(batch_images=4))


def test_model_roundtrip(tmp_path):
    net = EmbeddingNet.init(seed=9)
    save_model(tmp_path / "m.json", net, 0.2, {"epochs": 1})
    back, meta = load_model(tmp_path / "m.json")
    assert meta["dims"] == [769, 128, 64] and meta["alpha"] == 0.2
    for k in net.params():
        assert np.array_equal(back.params()[k], net.params()[k])


def test_loss_curve_csv():
    text = loss_curve_csv([1.5, 0.25])
    assert text == "epoch,mean_loss\n1,1.5\n2,0.25\n"


def test_recall_and_intra_inter():
    Y = np.array([[0, 0], [0, 0.1], [5, 5], [5, 5.1]])
    assert nn_recall_at_1(Y, [0, 0, 1, 1]) == 1.0
    assert nn_recall_at_1(Y, [0, 1, 0, 1]) == 0.0
    intra, inter = intra_inter_means(Y, [0, 0, 1, 1])
    assert intra == pytest.approx(0.1) and inter > 7


def test_small_training_curve(small):
    # 8 epochs on 240 training images: the loss must fall
    assert small.curve[-1] < small.curve[0]
