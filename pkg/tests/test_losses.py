import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from metric_forge.embedding import EmbeddingBatch, normalize_rows, pairwise_distances
from metric_forge.errors import ConfigInvalid, DegenerateDistance, NoNegatives, NoPositives
from metric_forge.gradcheck import balanced_labels, check_loss_grads
from metric_forge.losses import (LossConfig, lin_loss, loss_and_grad, m_loss, m_loss_grad, negative_loss,
                                 negative_weight, pairwise_loss, positive_loss, softmax_ls, _lin_terms)

CFG = LossConfig(r=0.7, T=1.0, w=0.4, epsilon_ls=0.0)
SQRT2 = math.sqrt(2)


def four_point():
    return EmbeddingBatch([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], [0, 0, 1, 1])


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        LossConfig(r=2.0)
    with pytest.raises(ConfigInvalid):
        LossConfig(max_dist=3.0)
    with pytest.raises(ConfigInvalid):
        LossConfig(epsilon_ls=1.0)
    assert LossConfig().epsilon_ls == 0.1 and LossConfig().detach_weights


@pytest.mark.parametrize("d, same, expected", [
    (0.0, True, 0.0),
    (SQRT2, True, SQRT2 - 0.7),
    (2.0, False, 0.0),
    (SQRT2, False, 2 - SQRT2),
])
def test_pairwise_loss(d, same, expected):
    assert pairwise_loss(d, same, CFG) == pytest.approx(expected, abs=1e-15)
    assert pairwise_loss(SQRT2, True, CFG) == pytest.approx(0.714214, abs=1e-6)
    assert pairwise_loss(SQRT2, False, CFG) == pytest.approx(0.585786, abs=1e-6)


def test_positive_loss_examples():
    b = EmbeddingBatch([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0]], [0, 0, 0, 1])
    dist = pairwise_distances(b)
    assert positive_loss(0, b, dist, CFG) == pytest.approx((0 + SQRT2 - 0.7) / 2, abs=1e-12)
    assert positive_loss(0, b, dist, CFG) == pytest.approx(0.357107, abs=1e-6)
    tight = EmbeddingBatch([[1.0, 0.0], [0.9, 0.1], [-1.0, 0.0]], [0, 0, 1])
    assert positive_loss(0, tight, pairwise_distances(tight), CFG) == 0.0
    with pytest.raises(NoPositives):
        positive_loss(3, b, dist, CFG)


def test_negative_weight_examples():
    assert negative_weight(2.0, CFG) == pytest.approx(math.exp(-2), rel=1e-14)
    assert negative_weight(2.0, CFG) == pytest.approx(0.135335, abs=1e-6)
    assert negative_weight(0.0, CFG) == pytest.approx(7.389056, abs=1e-6)
    cold = LossConfig(T=0.0)
    for d in (0.1, 0.9, 1.7):
        assert negative_weight(d, cold) == pytest.approx(math.exp(-d), rel=1e-14)


def test_negative_loss_examples():
    one = EmbeddingBatch([[1.0, 0.0], [0.0, 1.0]], [0, 1])
    assert negative_loss(0, one, pairwise_distances(one), CFG) == pytest.approx(2 - SQRT2, abs=1e-12)

    two = EmbeddingBatch([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], [0, 1, 2])
    w1, w2 = math.exp(2 - 2 * SQRT2), math.exp(-2)
    expected = w1 * (2 - SQRT2) / (w1 + w2)
    assert negative_loss(0, two, pairwise_distances(two), CFG) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.4472, abs=1e-4)

    far = EmbeddingBatch([[1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]], [0, 1, 1])
    assert negative_loss(0, far, pairwise_distances(far), CFG) == 0.0
    with pytest.raises(NoNegatives):
        negative_loss(0, EmbeddingBatch([[1.0, 0.0], [0.0, 1.0]], [3, 3]), np.zeros((2, 2)), CFG)


def test_lin_loss_examples():
    assert lin_loss(four_point(), CFG) == pytest.approx(2 - SQRT2, abs=1e-12)
    assert lin_loss(four_point(), CFG) == pytest.approx(0.585786, abs=1e-6)
    antipodal = EmbeddingBatch([[1.0, 0.0], [0.99, 0.01], [-1.0, 0.0], [-0.99, -0.01]], [0, 0, 1, 1])
    # intra distances ~0.014 < r, inter ~2 but not all >= 2; push the inter pairs exactly to 2
    exact = EmbeddingBatch([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]], [0, 0, 1, 1])
    assert lin_loss(exact, CFG) == 0.0
    assert lin_loss(antipodal, CFG) >= 0.0


def test_lin_loss_preconditions():
    with pytest.raises(NoPositives):
        lin_loss(EmbeddingBatch([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], [0, 1, 1]), CFG)
    with pytest.raises(NoNegatives):
        lin_loss(EmbeddingBatch([[1.0, 0.0], [0.0, 1.0]], [0, 0]), CFG)


def test_softmax_ls_examples():
    assert softmax_ls(np.zeros((3, 4)), [0, 1, 3], 0.1) == pytest.approx(math.log(4), abs=1e-12)
    assert softmax_ls(np.zeros((3, 4)), [0, 1, 3], 0.0) == pytest.approx(1.386294, abs=1e-6)
    v = softmax_ls(np.log([[0.9, 0.1]]), [0], 0.1)
    assert v == pytest.approx(-0.95 * math.log(0.9) - 0.05 * math.log(0.1), abs=1e-12)
    assert v == pytest.approx(0.215223, abs=2e-6)
    assert softmax_ls(np.array([[60.0, 0.0, 0.0]]), [0], 0.0) < 1e-20
    # stabilized for large logits
    assert np.isfinite(softmax_ls(np.array([[1e4, -1e4]]), [1], 0.1))


def test_m_loss_examples():
    b = four_point()
    out = m_loss(b, np.zeros((4, 2)), CFG)
    assert out.m_loss == pytest.approx(math.log(2) + 0.4 * (2 - SQRT2), abs=1e-12)
    assert out.m_loss == pytest.approx(0.927462, abs=1e-6)
    assert out.lin == pytest.approx(out.lp + out.ln, abs=1e-12)
    no_lin = m_loss(b, np.zeros((4, 2)), LossConfig(w=0.0, epsilon_ls=0.0))
    assert no_lin.m_loss == no_lin.softmax_ls
    best = LossConfig()
    assert (best.w, best.r, best.T) == (0.4, 0.7, 1.0)


def test_brute_force_lin(rng):
    for _ in range(20):
        labels = balanced_labels(rng, 8, 3)
        feats = normalize_rows(rng.normal(size=(8, 5)))
        T = float(rng.choice([0.0, 0.5, 1.0, 5.0]))
        cfg = LossConfig(r=0.6, T=T)
        assert lin_loss(EmbeddingBatch(feats, labels), cfg) == pytest.approx(
            oracles.lin_loss(feats.tolist(), labels.tolist(), 0.6, T), abs=1e-12)


# ------------------------------------------------------------------ gradients

def test_grad_zero_when_hinges_inactive():
    b = EmbeddingBatch([[1.0, 0.0], [0.99, np.sqrt(1 - 0.99 ** 2)], [-1.0, 0.0], [-0.99, -np.sqrt(1 - 0.99 ** 2)]],
                       [0, 0, 1, 1])
    # the negatives are slightly closer than 2, so shrink r to keep positives inactive and use far-apart negatives
    b = EmbeddingBatch([[1.0, 0.0], [1.0, 1e-3], [-3.0, 0.0], [-3.0, 1e-3]], [0, 0, 1, 1])
    g = m_loss_grad(b, np.zeros((4, 2)), CFG)
    assert np.array_equal(g.d_embeddings, np.zeros((4, 2)))


def test_grad_uniform_logits():
    b = four_point().with_features(normalize_rows(np.array([[1.0, 0.1], [0.9, 0.3], [0.0, 1.0], [0.2, 1.0]])))
    cfg = LossConfig(epsilon_ls=0.1)
    g = m_loss_grad(b, np.zeros((4, 3)), cfg)
    q = np.full((4, 3), 0.1 / 3)
    q[np.arange(4), b.class_ids] += 0.9
    np.testing.assert_allclose(g.d_logits, (1 / 3 - q) / 4, atol=1e-15)


def test_grad_random_batch_matches_finite_differences(rng):
    labels = balanced_labels(rng, 8, 2)
    feats = normalize_rows(rng.normal(size=(8, 4)))
    res = check_loss_grads(feats, labels, rng.normal(size=(8, 2)), LossConfig())
    assert res.max_rel_error < 1e-4 and res.n_checked > 0


@pytest.mark.parametrize("T", [0.5, 1.0, 5.0])
def test_grad_with_weight_gradient(rng, T):
    labels = balanced_labels(rng, 8, 3)
    feats = normalize_rows(rng.normal(size=(8, 6)))
    res = check_loss_grads(feats, labels, rng.normal(size=(8, 3)), LossConfig(T=T, detach_weights=False))
    assert res.max_rel_error < 1e-4


def test_detached_and_full_gradients_differ(rng):
    labels = balanced_labels(rng, 8, 2)
    feats = normalize_rows(rng.normal(size=(8, 4)))
    logits = np.zeros((8, 2))
    a = loss_and_grad(feats, labels, logits, LossConfig(T=5.0))[1].d_embeddings
    b = loss_and_grad(feats, labels, logits, LossConfig(T=5.0, detach_weights=False))[1].d_embeddings
    assert not np.allclose(a, b)


def test_degenerate_negative_pair_raises():
    b = EmbeddingBatch([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, -1.0]], [0, 0, 1, 1])
    with pytest.raises(DegenerateDistance):
        m_loss_grad(b, np.zeros((4, 2)), CFG)


def test_duplicate_positive_pair_has_zero_gradient_contribution():
    # a repeated sample (with-replacement sampling) sits inside the radius: locally constant term
    b = EmbeddingBatch(normalize_rows(np.array([[1.0, 0.2], [1.0, 0.2], [-0.3, 1.0], [0.1, -1.0]])), [0, 0, 1, 1])
    g = m_loss_grad(b, np.zeros((4, 2)), CFG)
    assert np.all(np.isfinite(g.d_embeddings))


def test_modes():
    b = four_point().with_features(normalize_rows(np.array([[1.0, 0.1], [0.5, 0.9], [0.0, 1.0], [-0.9, 0.3]])))
    logits = np.array([[1.0, 0.0], [0.2, 0.1], [0.0, 0.5], [0.3, 0.3]])
    _, full = loss_and_grad(b.features, b.class_ids, logits, CFG, "combined")
    _, lin = loss_and_grad(b.features, b.class_ids, logits, CFG, "lin_only")
    _, sm = loss_and_grad(b.features, b.class_ids, logits, CFG, "softmax_only")
    assert np.array_equal(sm.d_embeddings, np.zeros_like(sm.d_embeddings))
    assert np.array_equal(lin.d_logits, np.zeros_like(lin.d_logits))
    np.testing.assert_array_equal(full.d_embeddings, lin.d_embeddings)
    np.testing.assert_array_equal(full.d_logits, sm.d_logits)
    with pytest.raises(ConfigInvalid):
        loss_and_grad(b.features, b.class_ids, logits, CFG, "triplet")


# ------------------------------------------------------------------ properties

@st.composite
def loss_inputs(draw):
    n_classes = draw(st.integers(2, 4))
    per = draw(st.integers(2, 4))
    dim = draw(st.integers(2, 6))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(n_classes), per))
    feats = normalize_rows(rng.normal(size=(len(labels), dim)))
    cfg = LossConfig(r=draw(st.sampled_from([0.6, 0.7, 0.8])), T=draw(st.sampled_from([0.0, 0.5, 1.0, 5.0])),
                     w=draw(st.sampled_from([0.0, 0.2, 0.4, 0.6])))
    logits = rng.normal(size=(len(labels), n_classes)) * 3
    return feats, labels, logits, cfg, rng


@given(loss_inputs())
def test_components_nonnegative(inp):
    feats, labels, logits, cfg, _ = inp
    out = m_loss(EmbeddingBatch(feats, labels), logits, cfg)
    assert min(out.lp, out.ln, out.lin, out.softmax_ls, out.m_loss) >= 0
    assert out.lin == pytest.approx(out.lp + out.ln, abs=1e-12)
    assert out.m_loss == pytest.approx(out.softmax_ls + cfg.w * out.lin, abs=1e-12)


@given(loss_inputs())
def test_negative_weights_normalize(inp):
    feats, labels, _, cfg, _ = inp
    terms = _lin_terms(feats, labels, cfg)
    np.testing.assert_allclose(terms.weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(terms.weights[~terms.neg] == 0)


@given(loss_inputs())
def test_lin_zero_iff_constraints_met(inp):
    feats, labels, _, cfg, _ = inp
    b = EmbeddingBatch(feats, labels)
    d = pairwise_distances(b)
    same = labels[:, None] == labels[None, :]
    satisfied = np.all(d[same] <= cfg.r) and np.all(d[~same] >= 2.0)
    assert (lin_loss(b, cfg) <= 1e-12) == satisfied


def test_lin_zero_iff_constructive():
    # constructed satisfied batch: two antipodal tight clusters
    b = EmbeddingBatch([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]], [0, 0, 1, 1])
    assert lin_loss(b, CFG) == 0.0
    moved = EmbeddingBatch([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-0.9, 0.1]], [0, 0, 1, 1])
    assert lin_loss(moved, CFG) > 0.0


@given(loss_inputs())
def test_permutation_invariance(inp):
    feats, labels, logits, cfg, rng = inp
    perm = rng.permutation(len(labels))
    a = m_loss(EmbeddingBatch(feats, labels), logits, cfg)
    b = m_loss(EmbeddingBatch(feats[perm], labels[perm]), logits[perm], cfg)
    for k, v in a.as_dict().items():
        assert b.as_dict()[k] == pytest.approx(v, abs=1e-12)


@given(st.floats(0, 4), st.floats(0, 4), st.sampled_from([0.0, 0.5, 1.0, 5.0]))
def test_negative_weight_monotone(d1, d2, T):
    cfg = LossConfig(T=T)
    if d1 < d2:
        assert negative_weight(d1, cfg) > negative_weight(d2, cfg)
    assert negative_weight(d1, cfg) > 0


@given(loss_inputs(), st.floats(0, 1), st.floats(0, 1))
def test_m_loss_monotone_in_w(inp, w1, w2):
    feats, labels, logits, _, _ = inp
    lo, hi = sorted((w1, w2))
    b = EmbeddingBatch(feats, labels)
    assert m_loss(b, logits, LossConfig(w=lo)).m_loss <= m_loss(b, logits, LossConfig(w=hi)).m_loss
