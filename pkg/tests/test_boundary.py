import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from nightflow import boundary as bd
from nightflow import synthdata as sd
from nightflow.errors import DegenerateInputError

from . import oracles


def test_st_gradient_of_a_ramp():
    # log-linear image: d/dx log I = 0.1 everywhere, so -grad . U = -0.1 u
    xx = np.tile(np.arange(16.0), (16, 1))
    img = np.exp(0.1 * xx) - sd.LOG_EPS
    flow = np.zeros((16, 16, 2))
    flow[..., 0] = 2.0
    g = bd.image_st_gradient(img, flow)[0, 0].numpy()
    assert np.allclose(g, -0.2)


def test_st_gradient_shape_mismatch():
    with pytest.raises(ValueError):
        bd.image_st_gradient(np.ones((8, 8)), np.zeros((8, 9, 2)))


def _event_vs_gradient(seed):
    cfg = sd.SampleConfig(motion=sd.MotionSpec(max_disp=2.0), noise=sd.NoiseSpec(0.0))
    s = sd.make_sample(seed, cfg)
    L = s.gt_illumination
    dL = sd.accumulate_full(s.events)
    g = bd.image_st_gradient(s.frame_t * L, s.gt_flow)[0, 0].numpy()
    return np.abs(dL - g).mean(), s.events.C


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_events_agree_with_frame_gradient(seed):
    err, C = _event_vs_gradient(seed)
    assert err <= C + 0.05


def test_correlation_distance_patch_sum():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(6, 7)), rng.normal(size=(6, 7))
    got = bd.correlation_distance(a, b, patch=3)[0, 0].numpy()
    sq = np.pad((a - b) ** 2, 1)
    for y in range(6):
        for x in range(7):
            assert got[y, x] == pytest.approx(np.sqrt(sq[y : y + 3, x : x + 3].sum()))


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_correlation_map_range(seed):
    rng = np.random.default_rng(seed)
    c = bd.correlation_map(rng.normal(size=(8, 8)), rng.normal(size=(8, 8)))
    assert c.min() == 0 and c.max() == 1


def test_correlation_map_identical_inputs_is_zero():
    a = np.random.default_rng(0).normal(size=(8, 8))
    assert not bd.correlation_map(a, a).any()


@given(seed=st.integers(0, 2**31 - 1), bins=st.integers(2, 20))
@settings(max_examples=40, deadline=None)
def test_histogram_matches_oracle(seed, bins):
    values = np.random.default_rng(seed).random(200)
    edges, counts = bd.correlation_histogram(torch.as_tensor(values), bins)
    assert list(counts) == oracles.histogram(values, bins)
    assert len(edges) == bins + 1 and counts.sum() == 200


def test_histogram_bins_validated():
    with pytest.raises(ValueError):
        bd.correlation_histogram(torch.zeros(3), bins=1)


def test_class_labels_quantiles():
    corr = torch.arange(100, dtype=torch.float64).view(1, 1, 10, 10) / 99
    y = bd.class_labels(corr, K=10)
    assert y.shape == (1, 10, 10)
    assert torch.equal(torch.bincount(y.flatten()), torch.full((10,), 10))
    assert y[0, 0, 0] == 0 and y[0, -1, -1] == 9


def test_class_labels_constant_map():
    assert not bd.class_labels(torch.zeros(1, 1, 4, 4), K=5).any()


@given(seed=st.integers(0, 2**31 - 1), K=st.integers(2, 12))
@settings(max_examples=30, deadline=None)
def test_class_labels_monotone(seed, K):
    corr = torch.as_tensor(np.random.default_rng(seed).random((1, 1, 6, 6)))
    y = bd.class_labels(corr, K)
    flat_c, flat_y = corr.flatten(), y.flatten()
    order = flat_c.argsort()
    assert torch.all(flat_y[order].diff() >= 0)
    assert 0 <= y.min() and y.max() < K


def test_attention_is_a_distribution():
    A = bd.attention_net(bd.AttentionNet(K=7), torch.rand(2, 1, 5, 5))
    assert A.shape == (2, 7, 5, 5)
    assert torch.allclose(A.sum(1), torch.ones(2, 5, 5))


def test_cls_loss_value_and_validation():
    A = torch.full((1, 4, 2, 2), 0.25)
    y = torch.zeros(1, 2, 2, dtype=torch.long)
    assert bd.cls_loss(A, y).item() == pytest.approx(np.log(4))
    with pytest.raises(ValueError):
        bd.cls_loss(A, y + 4)
    with pytest.raises(ValueError):
        bd.cls_loss(A, torch.zeros(1, 3, 2, dtype=torch.long))


def _sample_inputs(seed=0, D=9, H=8, W=8):
    g = torch.Generator().manual_seed(seed)
    cv_n = torch.randn(1, D, H, W, generator=g, dtype=torch.float64)
    cv_ev = torch.randn(1, D, H, W, generator=g, dtype=torch.float64)
    A = torch.softmax(torch.randn(1, 4, H, W, generator=g, dtype=torch.float64), 1)
    labels = torch.randint(0, 4, (1, H, W), generator=g)
    return cv_n, cv_ev, A, labels


def test_sample_features_roles():
    cv_n, cv_ev, A, labels = _sample_inputs()
    s = bd.sample_features(cv_n, cv_ev, A, labels, 5, np.random.default_rng(0))
    flat = labels.flatten().numpy()
    assert np.all(flat[s.positive_index] == 0) and np.all(flat[s.negative_index] != 0)
    assert len(set(s.positive_index)) == 5
    for t in (s.positives_event, s.positives_night, s.negatives_night):
        assert t.shape == (5, 9) and torch.allclose(t.norm(dim=1), torch.ones(5, dtype=t.dtype))


def test_sample_features_not_enough_pixels():
    cv_n, cv_ev, A, labels = _sample_inputs()
    with pytest.raises(DegenerateInputError):
        bd.sample_features(cv_n, cv_ev, A, torch.ones_like(labels), 1, np.random.default_rng(0))


def _contrastive_oracle(pn, pe, nn_, tau):
    total = 0.0
    for j in range(len(pn)):
        neg = sum(np.exp(nn_[i] @ pn[j] / tau) for i in range(len(nn_)))
        for k in range(len(pe)):
            pos = np.exp(pn[j] @ pe[k] / tau)
            total += -np.log(pos / (pos + neg))
    return total / (len(pn) * len(pe))


@given(seed=st.integers(0, 2**31 - 1), tau=st.floats(0.05, 1.0))
@settings(max_examples=30, deadline=None)
def test_contrastive_matches_loop_oracle(seed, tau):
    rng = np.random.default_rng(seed)
    unit = lambda a: a / np.linalg.norm(a, axis=1, keepdims=True)  # noqa: E731
    pn, pe, nn_ = (unit(rng.normal(size=(4, 6))) for _ in range(3))
    s = bd.SampleSet(torch.as_tensor(pe), torch.as_tensor(pn), torch.as_tensor(nn_), tau)
    assert abs(bd.contrastive_loss(s).item() - _contrastive_oracle(pn, pe, nn_, tau)) < 1e-6


def test_contrastive_validation():
    z = torch.zeros(0, 3)
    with pytest.raises(ValueError):
        bd.contrastive_loss(bd.SampleSet(z, z, z))
    one = torch.ones(1, 3)
    with pytest.raises(ValueError):
        bd.contrastive_loss(bd.SampleSet(one, one, one, tau=0.0))


def test_valid_mask_threshold():
    A = torch.tensor([[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.34, 0.33, 0.33]]).T.reshape(1, 3, 1, 3)
    assert bd.valid_mask(A).tolist() == [[[True, False, True]]]
    assert bd.valid_mask(A, p0=0.4).tolist() == [[[True, False, False]]]
    with pytest.raises(ValueError):
        bd.valid_mask(A, p0=1.0)


def test_motion_consistency():
    F_n = torch.zeros(1, 2, 2, 2)
    F_ev = torch.ones(1, 2, 2, 2)
    V = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]])
    assert bd.motion_consistency_loss(F_n, F_ev, V).item() == pytest.approx(2.0)
    with pytest.raises(DegenerateInputError):
        bd.motion_consistency_loss(F_n, F_ev, torch.zeros_like(V))


def test_reverse_event_tensor_is_involution():
    x = torch.arange(2 * 6 * 2 * 2, dtype=torch.float32).view(2, 6, 2, 2)
    r = bd.reverse_event_tensor(x)
    assert torch.equal(bd.reverse_event_tensor(r), x)
    # first slice of the reversed stream is the last slice with polarities swapped
    assert torch.equal(r[:, 0], x[:, 5]) and torch.equal(r[:, 1], x[:, 4])


def test_event_flow_net_shapes():
    torch.manual_seed(0)
    net = bd.EventFlowNet(n_slices=3)
    slices = [np.zeros((2, 32, 32))] * 3
    assert bd.event_flow_forward(net, slices).shape == (1, 2, 32, 32)
    with pytest.raises(ValueError):
        bd.event_tensor(slices[:1])


def test_warped_accumulation_with_zero_flow_is_plain_sum():
    s = sd.make_sample(4, sd.SampleConfig(height=32, width=32))
    got = bd.accumulate_events_warped(s.events, np.zeros((32, 32, 2)))
    assert np.allclose(got, sd.accumulate_full(s.events))


# --- documented examples ---------------------------------------------------------


def test_st_gradient_zero_flow():
    img = np.random.default_rng(0).random((8, 8))
    assert not bd.image_st_gradient(img, np.zeros((8, 8, 2))).any()


def test_single_pixel_discrepancy_neighbourhood():
    a = np.zeros((9, 9))
    b = a.copy()
    b[4, 4] = 1.0
    c = bd.correlation_map(a, b)[0, 0].numpy()
    assert np.all(c[3:6, 3:6] == 1.0)
    c[3:6, 3:6] = 0
    assert not c.any()


def test_correlation_higher_in_dark_regions():
    # noise dominates log intensity where illumination is low
    diffs = []
    for seed in range(6):
        s = sd.make_sample(seed, sd.SampleConfig(height=64, width=64))
        dL = sd.accumulate_full(s.events)
        st_ = bd.image_st_gradient(s.night_t, s.gt_flow)
        corr = bd.correlation_map(dL, st_)[0, 0].numpy()
        L = s.gt_illumination
        lo, hi = L < np.quantile(L, 0.3), L > np.quantile(L, 0.7)
        diffs.append(corr[lo].mean() - corr[hi].mean())
    assert np.mean(diffs) > 0


def test_histogram_examples():
    _, counts = bd.correlation_histogram(torch.zeros(32, 32), bins=10)
    assert counts[0] == 1024 and counts.sum() == 1024
    values = np.random.default_rng(0).random(100_000)
    _, counts = bd.correlation_histogram(values, bins=10)
    assert np.all(np.abs(counts / 1e5 - 0.1) <= 0.01)


def test_cls_loss_uniform_and_one_hot():
    y = torch.randint(0, 10, (2, 4, 4), generator=torch.Generator().manual_seed(0))
    assert bd.cls_loss(torch.full((2, 10, 4, 4), 0.1), y).item() == pytest.approx(np.log(10))
    onehot = torch.nn.functional.one_hot(y, 10).permute(0, 3, 1, 2).float()
    assert bd.cls_loss(onehot, y).item() == pytest.approx(0.0, abs=1e-7)


def _crafted(N=4):
    labels = torch.zeros(1, 8, 8, dtype=torch.long)
    labels[:, 4:] = 2  # 32 normal, 32 abnormal
    cv = torch.randn(1, 9, 8, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    A = torch.full((1, 3, 8, 8), 1 / 3, dtype=torch.float64)
    return cv, labels, A


def test_sample_features_crafted_split_and_determinism():
    cv, labels, A = _crafted()
    a = bd.sample_features(cv, cv.flip(1), A, labels, 4, np.random.default_rng(9))
    b = bd.sample_features(cv, cv.flip(1), A, labels, 4, np.random.default_rng(9))
    assert a.positives_night.shape == a.positives_event.shape == a.negatives_night.shape == (4, 9)
    assert np.array_equal(a.positive_index, b.positive_index) and np.array_equal(a.negative_index, b.negative_index)


def test_sample_features_missing_class_named():
    cv, labels, A = _crafted()
    with pytest.raises(DegenerateInputError, match="!= 0"):
        bd.sample_features(cv, cv, A, torch.zeros_like(labels), 4, np.random.default_rng(0))
    with pytest.raises(DegenerateInputError, match="class 0"):
        bd.sample_features(cv, cv, A, torch.ones_like(labels), 4, np.random.default_rng(0))


def _unit(n, d, seed):
    x = torch.randn(n, d, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    return x / x.norm(dim=1, keepdim=True)


def test_contrastive_ties_give_log_one_plus_n():
    N = 5
    v = _unit(1, 6, 0).expand(N, 6)
    assert bd.contrastive_loss(bd.SampleSet(v, v, v, 0.07)).item() == pytest.approx(np.log(1 + N))


def test_contrastive_aligned_beats_baseline():
    N = 3
    pos = torch.eye(6, dtype=torch.float64)[:1].expand(N, 6)
    neg = torch.eye(6, dtype=torch.float64)[1 : 1 + N]
    assert bd.contrastive_loss(bd.SampleSet(pos, pos, neg, 0.07)).item() < np.log(1 + N)


@given(seed=st.integers(0, 2**31 - 1), j=st.integers(0, 3))
@settings(max_examples=30, deadline=None)
def test_contrastive_decreases_when_a_positive_moves_towards_anchors(seed, j):
    pe, pn = _unit(4, 6, seed), _unit(4, 6, seed + 1)
    # step the night positive j along the gradient of its summed cosine to the anchors
    direction = pe.sum(0) - (pe.sum(0) @ pn[j]) * pn[j]
    assume(direction.norm() > 1e-6)
    moved = pn.clone()
    moved[j] = pn[j] + 1e-3 * direction / direction.norm()
    moved[j] = moved[j] / moved[j].norm()
    assume(bool((moved[j] @ pe.T > pn[j] @ pe.T).all()))
    # zero negatives keep the negative similarities fixed while the positive moves
    neg = torch.zeros(4, 6, dtype=torch.float64)
    after = bd.contrastive_loss(bd.SampleSet(pe, moved, neg, 0.5)).item()
    assert after < bd.contrastive_loss(bd.SampleSet(pe, pn, neg, 0.5)).item()


def test_valid_mask_one_hot_examples():
    A = torch.zeros(1, 10, 4, 4)
    A[:, 0] = 1
    assert bd.valid_mask(A).all()
    A = torch.zeros(1, 10, 4, 4)
    A[:, 3] = 1
    assert not bd.valid_mask(A).any()


@given(seed=st.integers(0, 2**31 - 1), p0=st.floats(0.05, 0.6))
@settings(max_examples=30, deadline=None)
def test_valid_mask_matches_per_pixel_rule(seed, p0):
    A = torch.softmax(torch.randn(1, 4, 5, 5, generator=torch.Generator().manual_seed(seed)) * 2, 1)
    V = bd.valid_mask(A, p0)
    for y in range(5):
        for x in range(5):
            p = A[0, :, y, x].tolist()
            assert bool(V[0, y, x]) == (p.index(max(p)) == 0 and p[0] >= p0)


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_motion_consistency_matches_masked_mean(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 2, 5, 5))
    V = rng.random((5, 5)) < 0.5
    V[0, 0] = True
    got = bd.motion_consistency_loss(torch.as_tensor(a)[None], torch.as_tensor(b)[None], torch.as_tensor(V)[None]).item()
    per_pixel = np.abs(a - b).sum(0)
    assert abs(got - oracles.masked_l1(per_pixel, np.zeros_like(per_pixel), V)) < 1e-6
    assert bd.motion_consistency_loss(torch.as_tensor(a)[None], torch.as_tensor(a)[None], torch.as_tensor(V)[None]).item() == 0


def test_event_flow_net_deterministic_per_seed():
    x = torch.rand(1, 10, 32, 32)
    outs = []
    for _ in range(2):
        torch.manual_seed(3)
        outs.append(bd.EventFlowNet()(x)[0])
    assert torch.equal(*outs)
