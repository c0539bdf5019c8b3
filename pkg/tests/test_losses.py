import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from protoconf.core import Corpus, Modality, PrototypeSet, WeightVector
from protoconf.io import SyntheticSpec, generate_synthetic
from protoconf.losses import (
    Batch,
    LossConfig,
    NonFiniteLoss,
    batch_div_loss,
    conf_loss,
    cosine_annealing,
    div_loss,
    finite_difference_grad,
    grad_theta,
    loss_terms,
    sim_loss,
    total_loss,
    train,
)


def random_batch(rng, n, K, d):
    return Batch(rng.standard_normal((n, K, d)), rng.standard_normal((n, K, d)))


def test_sim_loss_single_pair_is_zero(rng):
    assert sim_loss(random_batch(rng, 1, 4, 3), WeightVector.uniform(4)) == 0.0


def test_sim_loss_indistinguishable_candidates():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = Batch(np.stack([z, z]), np.stack([z, z]))
    assert sim_loss(b, WeightVector.uniform(2)) == pytest.approx(math.log(2), abs=1e-15)


def test_sim_loss_decreases_as_diagonal_separates():
    e = np.eye(2)
    prev = math.inf
    for angle in np.linspace(0.0, np.pi / 2, 8):
        off = np.cos(angle) * e[0] + np.sin(angle) * e[1]
        imgs = np.stack([np.stack([e[0], e[0]]), np.stack([e[1], e[1]])])
        reps = np.stack([np.stack([e[0], e[0]]), np.stack([off, off])])
        value = sim_loss(Batch(imgs, reps), WeightVector.uniform(2), temperature=0.01)
        assert value <= prev
        prev = value
    assert prev < 1e-40


def test_conf_loss_examples():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    perfect = Batch(np.stack([z, z]), np.stack([z, z]))
    assert conf_loss(perfect, WeightVector.uniform(2), "raw") == 0.0
    # raw confidence 0.5: one prototype identical, one orthogonal
    half = Batch(z[None], np.array([[[1.0, 0.0], [1.0, 0.0]]]))
    assert conf_loss(half, WeightVector.uniform(2), "raw") == pytest.approx(0.25, abs=1e-15)
    # raw confidences 1 and 0
    mixed = Batch(np.stack([z, z]), np.stack([z, z[::-1]]))
    assert conf_loss(mixed, WeightVector.uniform(2), "raw") == pytest.approx(0.5, abs=1e-15)


def test_div_loss_examples():
    same = np.ones((4, 3))
    assert div_loss(same, "verbatim") == 0.0
    assert div_loss(np.eye(2), "verbatim") == 2.0
    assert div_loss(np.ones((2, 2)), "repulsive") == pytest.approx(2.0, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_losses_match_oracle(n, K, d, seed):
    rng = np.random.default_rng(seed)
    b = random_batch(rng, n, K, d)
    w = WeightVector(rng.normal(size=K))
    imgs, reps, wl = b.images.tolist(), b.reports.tolist(), list(w.w)
    assert sim_loss(b, w, 0.7) == pytest.approx(oracle.sim_loss(imgs, reps, wl, 0.7), abs=1e-12)
    assert conf_loss(b, w, "shifted") == pytest.approx(oracle.conf_loss(imgs, reps, wl, True), abs=1e-12)
    assert conf_loss(b, w, "raw") == pytest.approx(oracle.conf_loss(imgs, reps, wl, False), abs=1e-12)
    ref_div = np.mean([oracle.div_loss(z) for z in imgs + reps])
    assert batch_div_loss(b, "verbatim") == pytest.approx(ref_div, rel=1e-12, abs=1e-12)
    ref_rep = np.mean([oracle.div_loss(z, repulsive=True) for z in imgs + reps])
    assert batch_div_loss(b, "repulsive") == pytest.approx(ref_rep, rel=1e-12, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_total_is_additive_and_affine(n, K, d, seed):
    rng = np.random.default_rng(seed)
    b = random_batch(rng, n, K, d)
    w = WeightVector(rng.normal(size=K))
    lam, mu = rng.uniform(0, 3, size=2)
    parts = loss_terms(b, w, LossConfig(1.0, 1.0))
    assert total_loss(b, w, LossConfig(1.0, 1.0)) == pytest.approx(parts.sim + parts.conf + parts.div, abs=1e-12)
    assert total_loss(b, w, LossConfig(0.0, 0.0)) == parts.sim
    got = total_loss(b, w, LossConfig(lam, mu))
    assert got == pytest.approx(parts.sim + lam * parts.conf + mu * parts.div, abs=1e-12)


def test_perfect_single_pair_total_is_zero():
    z = np.ones((3, 4))
    b = Batch(z[None], z[None])
    assert total_loss(b, WeightVector.uniform(3), LossConfig(transform="raw")) == 0.0


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-7)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 8), st.integers(1, 6), st.integers(1, 16), st.integers(0, 2**32 - 1),
    st.sampled_from(["raw", "shifted"]), st.floats(0.2, 2.0),
)
def test_grad_matches_finite_differences(n, K, d, seed, transform, tau):
    rng = np.random.default_rng(seed)
    b = random_batch(rng, n, K, d)
    w = WeightVector(rng.normal(size=K) * 0.5)
    cfg = LossConfig(lam=rng.uniform(0, 2), mu=1.0, temperature=tau, transform=transform)
    assert np.all(_rel_err(grad_theta(b, w, cfg), finite_difference_grad(b, w, cfg, 1e-5)) <= 1e-4)


def test_grad_flat_when_prototypes_identical_across_k(rng):
    u = rng.standard_normal((5, 1, 4))
    v = rng.standard_normal((5, 1, 4))
    b = Batch(np.repeat(u, 3, axis=1), np.repeat(v, 3, axis=1))
    g = grad_theta(b, WeightVector([0.3, -0.2, 0.5]), LossConfig())
    assert np.all(np.abs(g) <= 1e-10)


def test_grad_symmetric_batch_has_equal_entries(rng):
    # prototype index k is interchangeable: every k holds a rotated copy of the same configuration
    base_i = rng.standard_normal((4, 3))
    base_r = rng.standard_normal((4, 3))
    perms = [np.roll(np.arange(3), s) for s in range(3)]
    imgs = np.stack([base_i[:, p] for p in perms], axis=1)
    reps = np.stack([base_r[:, p] for p in perms], axis=1)
    g = grad_theta(Batch(imgs, reps), WeightVector.uniform(3), LossConfig())
    np.testing.assert_allclose(g, np.full(3, g[0]), atol=1e-15)


def test_cosine_annealing_endpoints():
    sched = cosine_annealing(1e-4)
    assert sched(0, 100) == 1e-4
    assert sched(50, 100) == pytest.approx(5e-5)
    assert sched(100, 100) == pytest.approx(0.0, abs=1e-20)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_synthetic(SyntheticSpec(n_pairs=40, n_classes=4, dim=8, K=4, noise_sigma=0.5, seed=3))


def test_zero_lr_is_noop(small_corpus):
    res = train(small_corpus, epochs=3, batch_size=8, lr=0.0)
    assert np.array_equal(res.weights.theta, np.zeros(4))
    assert len({r.total for r in res.trace}) == 1


def test_training_is_deterministic(small_corpus):
    a = train(small_corpus, epochs=3, batch_size=8, lr=0.5, seed=11)
    b = train(small_corpus, epochs=3, batch_size=8, lr=0.5, seed=11)
    assert a.trace == b.trace and a.weights == b.weights
    c = train(small_corpus, epochs=3, batch_size=8, lr=0.5, seed=12)
    assert not np.array_equal(c.weights.theta, a.weights.theta)


def test_single_pair_conf_loss_non_increasing():
    rng = np.random.default_rng(5)
    z_i = rng.standard_normal((5, 6))
    z_r = z_i + rng.standard_normal((5, 6)) * np.array([0.1, 0.1, 2.0, 2.0, 0.1])[:, None]
    corpus = Corpus(
        {"i": PrototypeSet("i", Modality.IMAGE, z_i)},
        {"r": PrototypeSet("r", Modality.REPORT, z_r)},
        {"r": {"i"}},
    )
    res = train(corpus, LossConfig(transform="shifted"), epochs=10, batch_size=32, lr=0.5)
    conf = [r.conf_loss for r in res.trace]
    assert all(b <= a for a, b in zip(conf, conf[1:]))
    assert conf[-1] < conf[0]


def test_training_reduces_loss(small_corpus):
    res = train(small_corpus, epochs=10, batch_size=8, lr=0.2, seed=1)
    assert res.trace[-1].total < res.trace[0].total


def test_nonfinite_loss_aborts(small_corpus):
    def explode(step, total):
        return math.inf

    with pytest.raises(NonFiniteLoss, match="epoch"):
        train(small_corpus, epochs=2, batch_size=8, schedule=explode)


def test_train_rejects_bad_epochs(small_corpus):
    with pytest.raises(ValueError):
        train(small_corpus, epochs=0)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(temperature=0.0)
    with pytest.raises(ValueError):
        LossConfig(lam=-1.0)
    with pytest.raises(ValueError):
        LossConfig(mu=math.nan)
