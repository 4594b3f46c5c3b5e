import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nightflow import appearance as ap

from . import oracles


def _cv(rng, shape=(1, 9, 4, 5), scale=3.0):
    return torch.as_tensor(rng.normal(scale=scale, size=shape))


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_kl_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    p, q = _cv(rng), _cv(rng)
    got = ap.kl_cost_loss(p, q).item()
    assert abs(got - oracles.kl_per_pixel_mean(p[0].numpy(), q[0].numpy())) < 1e-6


@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 20))
@settings(max_examples=60, deadline=None)
def test_kl_nonnegative(seed, scale):
    rng = np.random.default_rng(seed)
    assert ap.kl_cost_loss(_cv(rng, scale=scale), _cv(rng, scale=scale)).item() >= 0


@given(seed=st.integers(0, 2**31 - 1), shift=st.floats(-50, 50))
@settings(max_examples=40, deadline=None)
def test_kl_zero_on_identical_and_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    p, q = _cv(rng), _cv(rng)
    assert ap.kl_cost_loss(p, p.clone()).item() <= 1e-7
    base = ap.kl_cost_loss(p, q).item()
    assert abs(ap.kl_cost_loss(p + shift, q).item() - base) < 1e-9
    assert abs(ap.kl_cost_loss(p, q - shift).item() - base) < 1e-9


def test_kl_temperature_sharpens():
    rng = np.random.default_rng(0)
    p, q = _cv(rng, scale=0.3), _cv(rng, scale=0.3)
    assert ap.kl_cost_loss(p, q, temperature=0.1) > ap.kl_cost_loss(p, q)


def test_kl_day_side_is_detached():
    rng = np.random.default_rng(1)
    p = _cv(rng).requires_grad_()
    q = _cv(rng).requires_grad_()
    ap.kl_cost_loss(p, q).backward()
    assert q.grad is None and p.grad.abs().sum() > 0


def test_kl_shape_mismatch():
    with pytest.raises(ValueError):
        ap.kl_cost_loss(torch.zeros(1, 9, 4, 4), torch.zeros(1, 9, 4, 5))


def test_intra_align_value_and_zero():
    rng = np.random.default_rng(2)
    a, b, c, d = (_cv(rng) for _ in range(4))
    expected = (a - b).abs().mean() + (c - d).abs().mean()
    assert torch.allclose(ap.intra_align_loss(a, b, c, d), expected)
    assert ap.intra_align_loss(a, a, c, c).item() == 0


def test_intra_align_detached_night_target():
    rng = np.random.default_rng(3)
    a, b, c = (_cv(rng) for _ in range(3))
    d = _cv(rng).requires_grad_()
    c.requires_grad_()
    ap.intra_align_loss(a, b, c, d, detach_night_reflectance=True).backward()
    assert d.grad is None and c.grad is not None


def test_inter_align_zero_for_matching_residuals():
    rng = np.random.default_rng(4)
    d, dr, n = _cv(rng), _cv(rng), _cv(rng)
    nr = n - (d - dr)
    assert ap.inter_align_loss(d, dr, n, nr).item() < 1e-10


def test_inter_align_matches_kl_of_residuals():
    rng = np.random.default_rng(5)
    d, dr, n, nr = (_cv(rng) for _ in range(4))
    expected = oracles.kl_per_pixel_mean((n - nr)[0].numpy(), (d - dr)[0].numpy())
    assert abs(ap.inter_align_loss(d, dr, n, nr).item() - expected) < 1e-6


def test_adversarial_terms_values():
    p_day = torch.tensor([0.8, 0.6], dtype=torch.float64)
    p_night = torch.tensor([0.3], dtype=torch.float64)
    d, g = ap.adversarial_terms(p_day, p_night)
    assert d.item() == pytest.approx(np.mean(np.log([0.8, 0.6])) + np.log(0.7))
    assert g.item() == pytest.approx(-np.log(0.3))


def test_adversarial_terms_floor_keeps_loss_finite():
    d, g = ap.adversarial_terms(torch.zeros(2), torch.ones(2))
    assert torch.isfinite(d) and torch.isfinite(g)
    assert g.item() == pytest.approx(0.0, abs=1e-6)


def test_adversarial_rejects_empty():
    with pytest.raises(ValueError):
        ap.adversarial_terms(torch.zeros(0), torch.ones(2))


def test_adversarial_losses_gradient_routing():
    torch.manual_seed(0)
    D = ap.Discriminator()
    R_d = torch.rand(2, 1, 16, 16)
    R_n = torch.rand(2, 1, 16, 16, requires_grad=True)
    loss_d, loss_g = ap.adversarial_losses(R_d, R_n, D)
    loss_d.backward()
    assert R_n.grad is None
    D.zero_grad()
    loss_g.backward()
    assert R_n.grad is not None and R_n.grad.abs().sum() > 0


def test_discriminator_outputs_probability_per_image():
    out = ap.Discriminator()(torch.rand(3, 1, 32, 32))
    assert out.shape == (3,) and ((out > 0) & (out < 1)).all()


# --- documented examples ---------------------------------------------------------


def test_uninformative_discriminator_values():
    half = torch.full((4,), 0.5, dtype=torch.float64)
    d, g = ap.adversarial_terms(half, half)
    assert d.item() == pytest.approx(2 * np.log(0.5))
    assert g.item() == pytest.approx(-np.log(0.5))


def test_perfect_discriminator_saturates_at_floor():
    d, g = ap.adversarial_terms(torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    assert -1e-9 < d.item() <= 0
    assert g.item() == pytest.approx(-np.log(ap.PROB_FLOOR))


def test_softmax_dist_examples():
    u = ap.softmax_dist(torch.zeros(1, 9, 2, 2))
    assert torch.allclose(u, torch.full_like(u, 1 / 9))
    cv = -torch.ones(1, 9, 1, 1)
    cv[:, 4] = 1.0
    p = ap.softmax_dist(cv)[0, :, 0, 0]
    assert all(p[4] > p[k] for k in range(9) if k != 4)


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_softmax_dist_matches_oracle(seed):
    cv = _cv(np.random.default_rng(seed), shape=(1, 5, 2, 3))
    got = ap.softmax_dist(cv)[0]
    for y in range(2):
        for x in range(3):
            ref = oracles.softmax(cv[0, :, y, x].tolist())
            assert np.abs(got[:, y, x].numpy() - ref).max() < 1e-7


def _two_channel(p):
    return torch.log(torch.tensor([p, 1 - p], dtype=torch.float64)).view(1, 2, 1, 1)


def test_kl_two_channel_hand_value():
    expected = 0.9 * np.log(1.8) + 0.1 * np.log(0.2)
    assert ap.kl_cost_loss(_two_channel(0.9), _two_channel(0.5)).item() == pytest.approx(expected, abs=1e-12)
    z = torch.zeros_like(_two_channel(0.5))
    assert ap.inter_align_loss(_two_channel(0.5), z, _two_channel(0.9), z).item() == pytest.approx(expected, abs=1e-12)


def test_intra_constant_offset():
    rng = np.random.default_rng(6)
    cv_dr, cv_n = _cv(rng), _cv(rng)
    assert ap.intra_align_loss(cv_dr + 0.5, cv_dr, cv_n, cv_n.clone()).item() == pytest.approx(0.5)


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_intra_symmetric_within_pairs(seed):
    rng = np.random.default_rng(seed)
    a, b, c, d = (_cv(rng) for _ in range(4))
    assert torch.allclose(ap.intra_align_loss(a, b, c, d), ap.intra_align_loss(b, a, d, c))


def test_inter_permuted_residuals_are_penalised():
    rng = np.random.default_rng(7)
    d, dr = _cv(rng), _cv(rng)
    res = d - dr
    perm = torch.roll(res, 1, dims=1)
    z = torch.zeros_like(d)
    assert ap.inter_align_loss(d, dr, perm, z).item() > 0
