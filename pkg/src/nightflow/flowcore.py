"""Toy optical-flow estimator shared by the day, night and event branches.

Tensors are NCHW.  Flow fields carry ``(u, v)`` in channels 0 and 1, in pixels
of the tensor they are attached to.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateInputError

OCC_ALPHA1 = 0.01
OCC_ALPHA2 = 0.5
PSI_EPS = 0.01
PSI_POWER = 0.4


def image_tensor(img, dtype=torch.float32):
    """(H, W) or (H, W, C) array -> (1, C, H, W) tensor."""
    a = np.asarray(img)
    if a.ndim == 2:
        a = a[None]
    else:
        a = np.moveaxis(a, -1, 0)
    return torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)[None]


def flow_tensor(flow, dtype=torch.float32):
    """(H, W, 2) array -> (1, 2, H, W) tensor."""
    return torch.as_tensor(np.ascontiguousarray(np.moveaxis(np.asarray(flow), -1, 0)), dtype=dtype)[None]


def flow_array(flow):
    """(1, 2, H, W) or (2, H, W) tensor -> (H, W, 2) float64 array."""
    f = flow.detach()
    if f.dim() == 4:
        f = f[0]
    return f.permute(1, 2, 0).double().numpy()


def normalize_features(f, eps=1e-12):
    return f / f.norm(dim=1, keepdim=True).clamp_min(eps)


def correlation_features(f):
    """Remove each channel's spatial mean, then L2-normalise every pixel."""
    return normalize_features(f - f.mean(dim=(2, 3), keepdim=True))


def _check_flow(x, flow):
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"flow must be (B, 2, H, W), got {tuple(flow.shape)}")
    if x.shape[0] != flow.shape[0] or x.shape[-2:] != flow.shape[-2:]:
        raise ValueError(f"flow size {tuple(flow.shape)} does not match input {tuple(x.shape)}")


def warp(x, flow, return_valid=False):
    """Backward bilinear warp: ``out[y, x] = in[y + v, x + u]``.

    Sample positions outside the image are clamped to the border; the boolean
    validity map (B, 1, H, W) marks the ones that were in bounds.
    """
    _check_flow(x, flow)
    B, _, H, W = x.shape
    ys, xs = torch.meshgrid(
        torch.arange(H, dtype=flow.dtype), torch.arange(W, dtype=flow.dtype), indexing="ij"
    )
    sx = xs + flow[:, 0]
    sy = ys + flow[:, 1]
    gx = 2.0 * sx / max(W - 1, 1) - 1.0
    gy = 2.0 * sy / max(H - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    out = F.grid_sample(x, grid.to(x.dtype), mode="bilinear", padding_mode="border", align_corners=True)
    if not return_valid:
        return out
    valid = (sx >= 0) & (sx <= W - 1) & (sy >= 0) & (sy <= H - 1)
    return out, valid[:, None]


def displacements(radius):
    """(dy, dx) pairs in cost-volume channel order (dy outer, both ascending)."""
    r = range(-radius, radius + 1)
    return [(dy, dx) for dy in r for dx in r]


def cost_volume(f_t, f_t1, init_flow=None, radius=4):
    """Correlation ``<f_t[y, x], w(f_t1)[y + dy, x + dx]>`` for ``|dy|, |dx| <= radius``.

    Displacements landing outside the map get -1.  Output is
    (B, (2r+1)^2, H, W) in :func:`displacements` order.
    """
    if f_t.shape != f_t1.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_t.shape)} vs {tuple(f_t1.shape)}")
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if init_flow is not None:
        f_t1 = warp(f_t1, init_flow)
    B, _, H, W = f_t.shape
    d = radius
    padded = F.pad(f_t1, (d, d, d, d))
    inside = F.pad(torch.ones(1, 1, H, W, dtype=torch.bool), (d, d, d, d))
    out = []
    for dy, dx in displacements(d):
        win = padded[:, :, d + dy : d + dy + H, d + dx : d + dx + W]
        c = (f_t * win).sum(1)
        m = inside[:, 0, d + dy : d + dy + H, d + dx : d + dx + W]
        out.append(torch.where(m, c, torch.full_like(c, -1.0)))
    return torch.stack(out, 1)


def occlusion_mask(flow_fw, flow_bw, alpha1=OCC_ALPHA1, alpha2=OCC_ALPHA2):
    """Forward-backward consistency check; True where occluded."""
    if flow_fw.shape != flow_bw.shape:
        raise ValueError(f"flow shapes differ: {tuple(flow_fw.shape)} vs {tuple(flow_bw.shape)}")
    bw = warp(flow_bw, flow_fw)
    mismatch = ((flow_fw + bw) ** 2).sum(1, keepdim=True)
    bound = alpha1 * ((flow_fw**2).sum(1, keepdim=True) + (bw**2).sum(1, keepdim=True)) + alpha2
    return mismatch > bound


def psi(x, eps=PSI_EPS, q=PSI_POWER):
    return (x.abs() + eps) ** q


def photometric_loss(img_t, img_t1, flow, occ, eps=PSI_EPS, q=PSI_POWER):
    """Robust brightness-constancy loss averaged over non-occluded pixels."""
    keep = 1.0 - occ.to(img_t.dtype)
    denom = keep.sum()
    if denom <= 0:
        raise DegenerateInputError("photometric loss: every pixel is occluded")
    resid = psi(img_t - warp(img_t1, flow), eps, q).mean(1, keepdim=True)
    return (resid * keep).sum() / denom


def soft_argmax(cv, radius, temperature=0.1):
    """Expected displacement (B, 2, H, W) under softmax(cv / temperature)."""
    disp = torch.tensor(displacements(radius), dtype=cv.dtype)
    w = torch.softmax(cv / temperature, dim=1)
    dx = (w * disp[:, 1].view(1, -1, 1, 1)).sum(1)
    dy = (w * disp[:, 0].view(1, -1, 1, 1)).sum(1)
    return torch.stack([dx, dy], 1)


class Encoder(nn.Module):
    """3-level pyramid of stride-1/2/2 convolutions; the last level is left linear."""

    def __init__(self, in_channels=1, channels=(16, 32, 32)):
        super().__init__()
        c1, c2, c3 = channels
        self.conv1 = nn.Conv2d(in_channels, c1, 3, 1, 1)
        self.conv2 = nn.Conv2d(c1, c2, 3, 2, 1)
        self.conv3 = nn.Conv2d(c2, c3, 3, 2, 1)
        self.channels = tuple(channels)
        self.out_channels = c3

    def forward(self, x):
        f1 = F.leaky_relu(self.conv1(x), 0.1)
        f2 = F.leaky_relu(self.conv2(f1), 0.1)
        f3 = self.conv3(f2)
        return [f1, f2, f3]


class InputAdapter(nn.Module):
    """Zero-initialised residual conv block in front of an encoder.

    At initialisation it is the identity, so a copied encoder behaves exactly
    like its source until the adapter learns a domain-specific correction
    (e.g. denoising dark frames).
    """

    def __init__(self, channels=1, width=16):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, width, 3, 1, 1, padding_mode="replicate")
        self.conv2 = nn.Conv2d(width, width, 3, 1, 1, padding_mode="replicate")
        self.conv3 = nn.Conv2d(width, channels, 3, 1, 1, padding_mode="replicate")
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.1)
        return x + self.conv3(F.leaky_relu(self.conv2(h), 0.1))


class FlowDecoder(nn.Module):
    """Regresses coarse flow from the cost volume, a context map and its soft-argmax.

    Coarse flow is squashed to ``radius * tanh(. / radius)`` and upsampled
    bilinearly by ``scale``; the full-resolution magnitude is therefore below
    ``radius * scale`` per component.
    """

    def __init__(self, radius=4, context_channels=32, hidden=(64, 32), scale=4):
        super().__init__()
        self.radius = radius
        self.scale = scale
        self.context_channels = context_channels
        cin = (2 * radius + 1) ** 2 + context_channels + 2
        self.conv1 = nn.Conv2d(cin, hidden[0], 3, 1, 1)
        self.conv2 = nn.Conv2d(hidden[0], hidden[1], 3, 1, 1)
        self.conv3 = nn.Conv2d(hidden[1], 2, 3, 1, 1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def coarse(self, cv, context):
        if cv.shape[-2:] != context.shape[-2:]:
            raise ValueError("cost volume and context differ in spatial size")
        init = soft_argmax(cv, self.radius)
        parts = [cv, context, init] if self.context_channels else [cv, init]
        h = F.leaky_relu(self.conv1(torch.cat(parts, 1)), 0.1)
        h = F.leaky_relu(self.conv2(h), 0.1)
        return self.radius * torch.tanh((init + self.conv3(h)) / self.radius)

    def forward(self, cv, context):
        flow = self.coarse(cv, context)
        if self.scale == 1:
            return flow
        return self.scale * F.interpolate(flow, scale_factor=self.scale, mode="bilinear", align_corners=False)


def decode_flow(decoder, cv, context):
    return decoder(cv, context)


class FlowNet(nn.Module):
    """Siamese encoder + single-scale cost volume at pyramid ``level`` + decoder."""

    def __init__(self, in_channels=1, radius=4, channels=(16, 32, 32), level=1, context=True, adapter=False):
        super().__init__()
        self.radius = radius
        self.level = level
        self.stride = 2**level
        self.adapter = InputAdapter(in_channels) if adapter else None
        self.encoder = Encoder(in_channels, channels)
        self.decoder = FlowDecoder(radius, channels[level] if context else 0, scale=self.stride)

    def encode(self, x):
        """Unit-norm correlation features at the correlation level."""
        if self.adapter is not None:
            x = self.adapter(x)
        return correlation_features(self.encoder(x)[self.level])

    def encoder_parameters(self):
        """Parameters of the adapter (if any) and the encoder."""
        mods = [self.encoder] if self.adapter is None else [self.adapter, self.encoder]
        return [p for m in mods for p in m.parameters()]

    def with_adapter(self):
        """Copy of this model with a fresh identity adapter in front of the encoder."""
        net = FlowNet(
            self.encoder.conv1.in_channels, self.radius, self.encoder.channels, self.level,
            self.decoder.context_channels > 0, adapter=True,
        )
        net.encoder.load_state_dict(self.encoder.state_dict())
        net.decoder.load_state_dict(self.decoder.state_dict())
        return net

    def pair_features(self, x_t, x_t1):
        return self.encode(x_t), self.encode(x_t1)

    def forward(self, x_t, x_t1):
        """Returns ``(flow, cost_volume)``; flow is at input resolution."""
        if x_t.shape != x_t1.shape:
            raise ValueError("frames differ in shape")
        if x_t.shape[-1] % 4 or x_t.shape[-2] % 4:
            raise ValueError(f"frame size must be divisible by 4, got {tuple(x_t.shape[-2:])}")
        f_t, f_t1 = self.pair_features(x_t, x_t1)
        cv = cost_volume(f_t, f_t1, radius=self.radius)
        return self.decoder(cv, f_t), cv

    def cost(self, x_t, x_t1):
        f_t, f_t1 = self.pair_features(x_t, x_t1)
        return cost_volume(f_t, f_t1, radius=self.radius)


def encode(net: FlowNet, image):
    return net.encode(image)


def bidirectional_flow(net, x_t, x_t1):
    fw, cv = net(x_t, x_t1)
    bw, _ = net(x_t1, x_t)
    return fw, bw, cv


def masked_photometric(img_t, img_t1, fw, bw=None):
    """Photometric loss with the forward-backward occlusion mask (none when ``bw`` is None).

    Falls back to the unmasked loss if every pixel is flagged, which only
    happens for wildly inconsistent untrained flows.
    """
    if bw is not None:
        with torch.no_grad():
            occ = occlusion_mask(fw, bw)
        if not occ.all():
            return photometric_loss(img_t, img_t1, fw, occ)
    return photometric_loss(img_t, img_t1, fw, torch.zeros_like(fw[:, :1], dtype=torch.bool))
