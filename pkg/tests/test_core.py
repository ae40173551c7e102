import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from refocs import core

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


# --- KL ----------------------------------------------------------------------

def test_kl_prior_is_zero():
    assert float(core.kl_divergence(torch.zeros(6, dtype=D), torch.ones(6, dtype=D))) == 0.0


def test_kl_unit_mean():
    assert float(core.kl_divergence(t([1.0]), t([1.0]))) == pytest.approx(0.5, abs=1e-9)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.05, 5)), min_size=1, max_size=8))
def test_kl_nonnegative(pairs):
    mu, sigma = t([p[0] for p in pairs]), t([p[1] for p in pairs])
    assert float(core.kl_divergence(mu, sigma)) >= -1e-12


# --- reconstruction ----------------------------------------------------------

def test_bce_half_is_ln2_per_pixel():
    x = torch.full((3, 4, 5), 0.5, dtype=D)
    assert float(core.reconstruction_loss(x, x, "bce")) == pytest.approx(60 * math.log(2), abs=1e-9)


def test_l2_identity_zero():
    x = torch.rand(3, 4, 4, dtype=D)
    assert float(core.reconstruction_loss(x, x, "l2")) == 0.0


def test_reconstruction_vs_pixel_loop():
    g = torch.Generator().manual_seed(0)
    t_hat = torch.rand(3, 5, 6, generator=g, dtype=D) * 0.98 + 0.01
    tgt = torch.rand(3, 5, 6, generator=g, dtype=D)
    bce = l2 = 0.0
    for v_hat, v in zip(t_hat.flatten().tolist(), tgt.flatten().tolist()):
        bce -= v * math.log(v_hat) + (1 - v) * math.log(1 - v_hat)
        l2 += (v_hat - v) ** 2
    assert float(core.reconstruction_loss(t_hat, tgt, "bce")) == pytest.approx(bce, rel=1e-12)
    assert float(core.reconstruction_loss(t_hat, tgt, "l2")) == pytest.approx(l2, rel=1e-12)


def test_reconstruction_shape_mismatch():
    with pytest.raises(ValueError):
        core.reconstruction_loss(torch.rand(3, 4, 4), torch.rand(3, 4, 5))


# --- VAE loss ----------------------------------------------------------------

def test_vae_loss_single_and_linear():
    rec, kl = t([3.0]), t([0.25])
    assert float(core.vae_loss(rec, kl)) == 3.25
    rec = t([1.0, 2.0, 5.0])
    kl = t([0.5, 0.1, 0.2])
    base = float(core.vae_loss(rec, kl))
    assert float(core.vae_loss(2 * rec, 2 * kl)) == pytest.approx(2 * base, abs=1e-12)
    oracle = sum(r + k for r, k in zip(rec.tolist(), kl.tolist())) / 3
    assert base == pytest.approx(oracle, abs=1e-12)


def test_vae_loss_rejects_open_queries():
    with pytest.raises(ValueError):
        core.vae_loss(t([1.0, 2.0]), t([0.0, 0.0]), roles=["support", "out"])


# --- prototypes --------------------------------------------------------------

def test_single_shot_prototype():
    z = torch.randn(4, 1, 6, dtype=D)
    p = core.compute_prototypes(z, torch.randn(4, 6, dtype=D))
    assert torch.equal(p.weights, torch.ones(4, 1, dtype=D))
    assert torch.allclose(p.omega, z[:, 0], atol=1e-15)


def test_equal_cosines_give_equal_weights():
    ex = t([[1.0, 0.0]])
    z = t([[[1.0, 1.0], [1.0, -1.0]]])
    p = core.compute_prototypes(z, ex)
    assert p.weights.tolist() == [[0.5, 0.5]]


def test_weights_for_cosines_one_and_zero():
    ex = t([[1.0, 0.0]])
    z = t([[[2.0, 0.0], [0.0, 3.0]]])
    w = core.compute_prototypes(z, ex).weights
    assert float(w[0, 0]) == pytest.approx(math.e / (math.e + 1), abs=1e-9)
    assert float(w[0, 0]) == pytest.approx(0.7311, abs=1e-4)
    omega = w[0, 0] * z[0, 0] + w[0, 1] * z[0, 1]
    assert torch.allclose(core.compute_prototypes(z, ex).omega[0], omega)


def test_mean_prototype():
    z = torch.randn(3, 4, 5, dtype=D)
    assert torch.allclose(core.compute_prototypes(z, mode="mean").omega, z.mean(1))


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_prototype_weights_simplex(n, k, seed):
    g = torch.Generator().manual_seed(seed)
    w = core.compute_prototypes(torch.randn(n, k, 4, generator=g, dtype=D),
                                torch.randn(n, 4, generator=g, dtype=D)).weights
    assert torch.allclose(w.sum(1), torch.ones(n, dtype=D), atol=1e-6)
    assert bool((w > 0).all() and (w <= 1).all())


# --- classifier --------------------------------------------------------------

def test_classify_two_prototypes():
    p = core.classify(t([[1.0, 0.0]]), t([[3.0, 0.0], [0.0, 2.0]]), t(1.0))
    assert p[0].tolist() == pytest.approx([math.e / (math.e + 1), 1 / (math.e + 1)], abs=1e-9)
    assert p[0].tolist() == pytest.approx([0.7311, 0.2689], abs=1e-4)


def test_classify_uniform_and_sharp():
    omega = t([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    p = core.classify(t([[0.0, 0.0]]), omega, t(5.0))  # zero query: every cosine is 0
    assert torch.allclose(p, torch.full((1, 4), 0.25, dtype=D))
    sharp = core.classify(t([[1.0, 0.2]]), omega, t(100.0))
    assert float(sharp.max()) > 0.99


def test_classify_argmax_invariant_to_tau():
    g = torch.Generator().manual_seed(1)
    z, omega = torch.randn(20, 6, generator=g, dtype=D), torch.randn(5, 6, generator=g, dtype=D)
    a = core.classify(z, omega, t(1.0)).argmax(1)
    b = core.classify(z, omega, t(37.0)).argmax(1)
    assert torch.equal(a, b)
    assert torch.allclose(core.classify(z, omega, t(3.0)).sum(1), torch.ones(20, dtype=D))


def test_guarded_cosine_zero_vector():
    assert float(core.cosine_similarity(t([[0.0, 0.0]]), t([[1.0, 2.0]]))) == 0.0


# --- cross entropy -----------------------------------------------------------

def test_cross_entropy_closed_forms():
    uniform = torch.full((4, 5), 0.2, dtype=D)
    assert float(core.cross_entropy_loss(uniform, torch.tensor([0, 1, 2, 3]))) == pytest.approx(math.log(5), abs=1e-9)
    onehot = torch.eye(3, dtype=D)
    assert float(core.cross_entropy_loss(onehot, torch.tensor([0, 1, 2]))) == 0.0


def test_cross_entropy_loop_oracle_and_logits():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(12, 5, generator=g, dtype=D)
    probs = torch.softmax(logits, 1)
    y = torch.randint(0, 5, (12,), generator=g)
    oracle = -sum(math.log(probs[i, y[i]].item()) for i in range(12)) / 12
    assert float(core.cross_entropy_loss(probs, y)) == pytest.approx(oracle, abs=1e-12)
    assert float(core.cross_entropy_from_logits(logits, y)) == pytest.approx(oracle, abs=1e-12)


# --- modulation --------------------------------------------------------------

def test_modulate_hand_example():
    zh, kappa = core.modulate(t([[1.0, 1.0]]), t([[0.0, 0.0]]), "l1")
    assert float(kappa) == 2.0
    assert zh[0].tolist() == [0.5, 0.5]


def test_modulate_guard_at_zero_distance():
    z = t([[0.3, -0.2]])
    zh, kappa = core.modulate(z, t([[0.3, -0.2], [5.0, 5.0]]), "l1")
    assert float(kappa) == 0.0
    assert torch.allclose(zh, z / core.MOD_EPS)


def test_modulate_cosine_parallel():
    _, kappa = core.modulate(t([[2.0, 4.0]]), t([[1.0, 2.0], [-1.0, 0.0]]), "cosine")
    assert float(kappa) == pytest.approx(0.0, abs=1e-12)


def test_modulation_shrinks_far_queries_more():
    omega = t([[0.0, 0.0, 0.0]])
    near, far = t([[1.0, 0.0, 0.0]]), t([[0.0, 0.0, 1.0]]) * 1.0
    far = far + t([[0.0, 0.0, 0.0]])
    # equal norms, but move "far" away from the prototype along with an offset prototype
    omega2 = t([[0.9, 0.0, 0.0]])
    za, ka = core.modulate(near, omega2, "l1")
    zb, kb = core.modulate(far, omega2, "l1")
    assert float(ka) < float(kb)
    assert float(za.norm()) > float(zb.norm())


# --- reconstruction errors ---------------------------------------------------

def test_recon_error_identity_and_closed_form():
    g = torch.Generator().manual_seed(3)
    ex = torch.rand(4, 3, 5, 5, generator=g, dtype=D)
    D_ = core.recon_error_vector(ex[2:3], ex)
    assert float(D_[0, 2]) == 0.0
    zeros = torch.zeros(1, 3, 5, 5, dtype=D)
    ones = torch.ones(2, 3, 5, 5, dtype=D)
    assert core.recon_error_vector(zeros, ones).tolist() == [[75.0, 75.0]]


def test_recon_error_loop_oracle():
    g = torch.Generator().manual_seed(4)
    t_hat = torch.rand(3, 2, 3, 3, generator=g, dtype=D)
    ex = torch.rand(4, 2, 3, 3, generator=g, dtype=D)
    got = core.recon_error_vector(t_hat, ex)
    for q in range(3):
        for c in range(4):
            acc = 0.0
            for a, b in zip(t_hat[q].flatten().tolist(), ex[c].flatten().tolist()):
                acc += (a - b) ** 2
            assert float(got[q, c]) == pytest.approx(acc, abs=1e-12)


# --- detector input ----------------------------------------------------------

def test_detector_input_lengths():
    p, z, d = torch.rand(2, 5), torch.rand(2, 64), torch.rand(2, 5)
    full = core.assemble_detector_input(p, z, d)
    assert full.shape == (2, 74)
    assert torch.equal(full[:, :5], p) and torch.equal(full[:, 5:69], z) and torch.equal(full[:, 69:], d)
    assert core.assemble_detector_input(p, z, d, use_clf=False).shape == (2, 69)
    # ProtoC+ND-style: probabilities plus raw embedding, no reconstruction errors
    assert core.assemble_detector_input(p, z, None, use_recon_errors=False).shape == (2, 69)


# --- openness BCE and aggregate ---------------------------------------------

def test_bce_closed_forms():
    y = t([0.0, 1.0, 1.0, 0.0])
    assert float(core.bce_openness_loss(torch.full((4,), 0.5, dtype=D), y)) == pytest.approx(math.log(2), abs=1e-9)
    assert float(core.bce_openness_loss(y.clone(), y)) < 1e-11


def test_bce_loop_oracle_and_logits():
    g = torch.Generator().manual_seed(5)
    logits = torch.randn(30, generator=g, dtype=D)
    p = torch.sigmoid(logits)
    y = (torch.rand(30, generator=g, dtype=D) > 0.5).to(D)
    oracle = -sum(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)
                  for pi, yi in zip(p.tolist(), y.tolist())) / 30
    assert float(core.bce_openness_loss(p, y)) == pytest.approx(oracle, abs=1e-12)
    assert float(core.bce_openness_from_logits(logits, y)) == pytest.approx(oracle, abs=1e-12)


def test_aggregate_loss():
    assert core.aggregate_loss(100.0, 1.0, 1.0, 1e-4, 10, 10) == pytest.approx(20.01, abs=1e-9)
    assert core.aggregate_loss(5.0, 3.0, 2.0, 0, 0, 0) == 0
    a = core.aggregate_loss(1.0, 2.0, 3.0, 0.5, 0.25, 2.0)
    assert core.aggregate_loss(2.0, 2.0, 3.0, 0.5, 0.25, 2.0) - a == pytest.approx(0.5)


def test_bce_saturated_float32_stays_finite():
    t_hat = torch.ones(3, 2, 2)  # sigmoid saturated to exactly 1 in float32
    tgt = torch.ones(3, 2, 2)
    assert torch.isfinite(core.reconstruction_loss(t_hat, tgt, "bce"))
    tgt[0, 0, 0] = 0.0
    assert torch.isfinite(core.reconstruction_loss(t_hat, tgt, "bce"))
