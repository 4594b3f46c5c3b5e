"""Boundary adaptation between night frames and events.

Both modalities are mapped to a spatiotemporal-gradient map: ``-grad(log I) . U``
for frames and the accumulated signed event sum for the sensor.  Their patchwise
distance, min-max normalised, is the correlation map that drives motion-class
labels, the attention network, contrastive sampling and the valid mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateInputError
from .flowcore import FlowDecoder, Encoder, correlation_features, cost_volume, normalize_features
from .synthdata import LOG_EPS, EventStream

CLS_FLOOR = 1e-8


def _as_batch(x):
    """Accept (H, W), (B, H, W) or (B, C, H, W); return (B, 1, H, W) float tensor."""
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.double()
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[:, None]
    elif t.shape[1] > 1:
        t = t.mean(1, keepdim=True)
    return t


def _spatial_grad(x):
    """Central differences in the interior, one-sided at the borders; (B, 1, H, W)."""
    gx = torch.empty_like(x)
    gy = torch.empty_like(x)
    gx[..., 1:-1] = (x[..., 2:] - x[..., :-2]) / 2
    gx[..., 0] = x[..., 1] - x[..., 0]
    gx[..., -1] = x[..., -1] - x[..., -2]
    gy[..., 1:-1, :] = (x[..., 2:, :] - x[..., :-2, :]) / 2
    gy[..., 0, :] = x[..., 1, :] - x[..., 0, :]
    gy[..., -1, :] = x[..., -1, :] - x[..., -2, :]
    return gx, gy


def image_st_gradient(image, flow, eps=LOG_EPS):
    """``-(d/dx log(I + eps) * u + d/dy log(I + eps) * v)`` as a (B, 1, H, W) tensor.

    ``flow`` is (B, 2, H, W) or an (H, W, 2) array.
    """
    img = _as_batch(image)
    U = torch.as_tensor(flow)
    if U.dim() == 3 and U.shape[-1] == 2:
        U = U.permute(2, 0, 1)[None]
    U = U.to(img.dtype)
    if U.shape[0] != img.shape[0] or U.shape[-2:] != img.shape[-2:]:
        raise ValueError(f"flow {tuple(U.shape)} does not match image {tuple(img.shape)}")
    gx, gy = _spatial_grad(torch.log(img + eps))
    return -(gx * U[:, :1] + gy * U[:, 1:2])


def correlation_distance(dL_ev, st_grad, patch=3):
    """Euclidean distance between the two maps over ``patch x patch`` windows (zero outside)."""
    a, b = _as_batch(dL_ev), _as_batch(st_grad).to(_as_batch(dL_ev).dtype)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = (a - b) ** 2
    summed = F.avg_pool2d(sq, patch, 1, patch // 2, count_include_pad=True) * patch * patch
    return summed.clamp_min(0).sqrt()


def minmax_normalize(x):
    """Per-image min-max to [0, 1]; constant images become zeros."""
    flat = x.flatten(1)
    lo = flat.min(1).values.view(-1, 1, 1, 1)
    hi = flat.max(1).values.view(-1, 1, 1, 1)
    span = hi - lo
    out = (x - lo) / torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, out, torch.zeros_like(out))


def correlation_map(dL_ev, st_grad, patch=3):
    """Normalised discrepancy between event and frame gradient maps, (B, 1, H, W) in [0, 1]."""
    return minmax_normalize(correlation_distance(dL_ev, st_grad, patch))


def correlation_histogram(corr, bins=10):
    """``(edges, counts)`` of correlation values over uniform bins on [0, 1]."""
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    values = np.asarray(torch.as_tensor(corr).detach().cpu(), dtype=np.float64).ravel()
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return edges, counts


def class_labels(corr, K=10):
    """Quantile-bin each image's correlation into ``K`` motion classes.

    Class 0 holds the lowest-discrepancy values.  A pixel's label is the number
    of the image's ``k/K`` quantiles lying strictly below its value, so ties
    share a class and a constant map is all zeros.  Returns (B, H, W) int64.
    """
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    c = _as_batch(corr).double()
    qs = torch.arange(1, K, dtype=torch.float64) / K
    out = []
    for img in c[:, 0]:
        thresholds = torch.quantile(img.flatten(), qs)
        out.append(torch.searchsorted(thresholds, img.flatten().contiguous(), right=False).view(img.shape))
    return torch.stack(out)


class AttentionNet(nn.Module):
    """Per-pixel MLP (1x1 convolutions) from correlation to K class probabilities."""

    def __init__(self, K=10, hidden=32):
        super().__init__()
        self.K = K
        self.net = nn.Sequential(
            nn.Conv2d(1, hidden, 1), nn.LeakyReLU(0.1), nn.Conv2d(hidden, hidden, 1), nn.LeakyReLU(0.1), nn.Conv2d(hidden, K, 1)
        )

    def logits(self, corr):
        return self.net(corr)

    def forward(self, corr):
        return torch.softmax(self.logits(corr), dim=1)


def attention_net(net: AttentionNet, corr):
    return net(_as_batch(corr).to(next(net.parameters()).dtype))


def cls_loss(A, y):
    """Mean per-pixel cross-entropy ``-log A[y]`` with probabilities floored at 1e-8."""
    K = A.shape[1]
    y = torch.as_tensor(y, dtype=torch.long)
    if y.shape != (A.shape[0],) + tuple(A.shape[2:]):
        raise ValueError(f"labels {tuple(y.shape)} do not match attention map {tuple(A.shape)}")
    if y.min() < 0 or y.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    picked = A.gather(1, y[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(CLS_FLOOR)).mean()


@dataclass
class SampleSet:
    positives_event: torch.Tensor
    positives_night: torch.Tensor
    negatives_night: torch.Tensor
    tau: float = 0.07
    positive_index: np.ndarray | None = None
    negative_index: np.ndarray | None = None


def sample_features(cv_n, cv_ev, A, labels, N, rng: np.random.Generator, tau=0.07):
    """Draw ``N`` attention-weighted cost vectors per role, without replacement.

    Night and event positives come from the same class-0 pixels, weighted by
    ``A[:, 0]``; night negatives come from the other pixels, weighted by
    ``1 - A[:, 0]``.  All vectors are L2-normalised.
    """
    if cv_n.shape != cv_ev.shape:
        raise ValueError("night and event cost volumes differ in shape")
    labels = torch.as_tensor(labels)
    if labels.shape != (cv_n.shape[0],) + tuple(cv_n.shape[2:]) or A.shape[2:] != cv_n.shape[2:]:
        raise ValueError("labels/attention do not match the cost volume grid")
    D = cv_n.shape[1]
    a0 = A[:, :1]
    pos_n = (cv_n * a0).permute(0, 2, 3, 1).reshape(-1, D)
    pos_ev = (cv_ev * a0).permute(0, 2, 3, 1).reshape(-1, D)
    neg_n = (cv_n * (1 - a0)).permute(0, 2, 3, 1).reshape(-1, D)
    flat = labels.reshape(-1).numpy()
    normal = np.flatnonzero(flat == 0)
    abnormal = np.flatnonzero(flat != 0)
    if len(normal) < N:
        raise DegenerateInputError(f"class 0 has {len(normal)} pixels, need {N} positives")
    if len(abnormal) < N:
        raise DegenerateInputError(f"classes != 0 have {len(abnormal)} pixels, need {N} negatives")
    pi = np.sort(rng.choice(normal, N, replace=False))
    ni = np.sort(rng.choice(abnormal, N, replace=False))
    pi_t, ni_t = torch.as_tensor(pi), torch.as_tensor(ni)
    return SampleSet(
        positives_event=normalize_features(pos_ev[pi_t]),
        positives_night=normalize_features(pos_n[pi_t]),
        negatives_night=normalize_features(neg_n[ni_t]),
        tau=tau,
        positive_index=pi,
        negative_index=ni,
    )


def contrastive_loss(samples: SampleSet):
    """InfoNCE over all (night positive j, event positive k) pairs.

    ``-mean_jk log[e^{s_jk/t} / (e^{s_jk/t} + sum_i e^{n_ij/t})]`` with
    ``s_jk = P_j^n . P_k^ev`` and ``n_ij = N_i^n . P_j^n``.
    """
    tau = samples.tau
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    pn, pe, nn_ = samples.positives_night, samples.positives_event, samples.negatives_night
    if pn.shape[0] == 0 or pe.shape[0] == 0:
        raise ValueError("contrastive loss needs at least one positive pair")
    pos = pn @ pe.T / tau  # (j, k)
    if nn_.shape[0]:
        neg = torch.logsumexp(nn_ @ pn.T / tau, dim=0)  # (j,)
        denom = torch.logaddexp(pos, neg[:, None])
    else:
        denom = pos
    return (denom - pos).mean()


def valid_mask(A, p0=None):
    """True where class 0 wins the argmax and its probability reaches ``p0`` (default 1/K)."""
    K = A.shape[1]
    p0 = 1.0 / K if p0 is None else p0
    if not 0 < p0 < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {p0}")
    return (A.argmax(1) == 0) & (A[:, 0] >= p0)


def motion_consistency_loss(F_n, F_ev, V):
    """``sum(|F_n - F_ev|_1 * V) / sum(V)`` with the L1 norm over the two flow channels."""
    if F_n.shape != F_ev.shape:
        raise ValueError(f"flow shapes differ: {tuple(F_n.shape)} vs {tuple(F_ev.shape)}")
    V = torch.as_tensor(V).to(F_n.dtype)
    if V.dim() == 4:
        V = V[:, 0]
    if V.shape != (F_n.shape[0],) + tuple(F_n.shape[2:]):
        raise ValueError("valid mask does not match the flow grid")
    total = V.sum()
    if total <= 0:
        raise DegenerateInputError("motion consistency: valid mask is empty")
    return ((F_n - F_ev).abs().sum(1) * V).sum() / total


# ---------------------------------------------------------------------------
# event branch
# ---------------------------------------------------------------------------


def event_tensor(slices):
    """Stack a list of (2, H, W) polarity-count slices into (1, 2n, H, W)."""
    if len(slices) < 2:
        raise ValueError(f"need at least 2 event slices, got {len(slices)}")
    return torch.as_tensor(np.concatenate([np.asarray(s) for s in slices], 0), dtype=torch.float32)[None]


def reverse_event_tensor(x):
    """Time-reverse a (B, 2n, H, W) slice tensor: slice order flips and polarities swap."""
    B, C, H, W = x.shape
    s = x.view(B, C // 2, 2, H, W)
    return s.flip(1).flip(2).reshape(B, C, H, W)


class EventFlowNet(nn.Module):
    """Flow from a stacked event-slice tensor.

    One encoder reads the whole slice stack and emits two feature halves that
    play the role of the start and end frames for the cost volume.
    """

    def __init__(self, n_slices=5, radius=4, channels=(16, 32, 32), level=1):
        super().__init__()
        self.radius = radius
        self.level = level
        self.stride = 2**level
        c = list(channels)
        c[level] = 2 * channels[level]
        self.feat_channels = channels[level]
        self.encoder = Encoder(2 * n_slices, tuple(c))
        self.decoder = FlowDecoder(radius, channels[level], scale=self.stride)

    def pair_features(self, x):
        f = self.encoder(x)[self.level]
        k = self.feat_channels
        return correlation_features(f[:, :k]), correlation_features(f[:, k:])

    def cost(self, x):
        a, b = self.pair_features(x)
        return cost_volume(a, b, radius=self.radius)

    def forward(self, x):
        a, b = self.pair_features(x)
        cv = cost_volume(a, b, radius=self.radius)
        return self.decoder(cv, a), cv


def event_flow_forward(net: EventFlowNet, slices):
    """Event flow (1, 2, H, W) from a list of at least two polarity-count slices."""
    flow, _ = net(event_tensor(slices).to(next(net.parameters()).dtype))
    return flow


def accumulate_events_warped(events: EventStream, flow, t0=None, t1=None):
    """Accumulate ``C * p`` after moving each event back to ``t0`` along ``flow``.

    ``flow`` is the (H, W, 2) displacement over ``[t0, t1]``; events are
    bilinearly splatted at ``x - flow(x) * (t - t0) / (t1 - t0)``.
    """
    t0 = events.t_start if t0 is None else t0
    t1 = events.t_end if t1 is None else t1
    H, W = events.sensor_size
    out = np.zeros((H + 1, W + 1))
    sel = (events.t >= t0) & (events.t <= t1)
    x, y, t, p = events.x[sel], events.y[sel], events.t[sel], events.p[sel]
    flow = np.asarray(flow)
    frac = (t - t0) / (t1 - t0)
    wx = np.clip(x - flow[y, x, 0] * frac, 0, W - 1)
    wy = np.clip(y - flow[y, x, 1] * frac, 0, H - 1)
    x0, y0 = np.floor(wx).astype(int), np.floor(wy).astype(int)
    ax, ay = wx - x0, wy - y0
    for dx, dy, w in ((0, 0, (1 - ax) * (1 - ay)), (1, 0, ax * (1 - ay)), (0, 1, (1 - ax) * ay), (1, 1, ax * ay)):
        np.add.at(out, (y0 + dy, x0 + dx), p * w)
    return out[:H, :W] * events.C
