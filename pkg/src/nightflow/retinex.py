"""Small learned retinex decomposer ``I ~ R * L``.

Trained on synthetic day/night pairs with three objectives: reconstruction,
illumination total variation, and agreement of the reflectances of the two
renderings of one scene.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_module, module_arrays, save_checkpoint

L_FLOOR = 1e-3


@dataclass
class RetinexConfig:
    w_recon: float = 1.0
    w_smooth: float = 1.0
    w_consistency: float = 0.5
    lr: float = 3e-3
    batch_size: int = 16
    width: int = 16
    recon_tolerance: float = 0.05


@dataclass
class Decomposition:
    reflectance: torch.Tensor
    illumination: torch.Tensor

    def reconstruct(self):
        return self.reflectance * self.illumination


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride, 1, padding_mode="replicate")


def _gaussian_kernel(sigma):
    radius = int(3 * sigma)
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


class Decomposer(nn.Module):
    """Conv encoder-decoder with reflectance (sigmoid) and illumination (softplus) heads.

    The network sees the image divided by its Gaussian-blurred luminance, so a
    global brightness scale cancels out; the illumination head predicts a
    correction to that blurred luminance.  Replicate padding keeps constant
    images mapping to constant outputs.
    """

    def __init__(self, in_channels=1, width=16, sigma=4.0):
        super().__init__()
        self.register_buffer("kernel", _gaussian_kernel(sigma).float())
        self.enc1 = _conv(in_channels, width)
        self.enc2 = _conv(width, 2 * width, stride=2)
        self.mid = _conv(2 * width, 2 * width)
        self.dec = _conv(3 * width, width)
        self.head_r = _conv(width, in_channels)
        self.head_l = _conv(width, 1)

    def luminance(self, x):
        k = self.kernel.to(x.dtype)
        r = len(k) // 2
        g = x.mean(1, keepdim=True)
        g = F.conv2d(F.pad(g, (r, r, 0, 0), mode="replicate"), k.view(1, 1, 1, -1))
        g = F.conv2d(F.pad(g, (0, 0, r, r), mode="replicate"), k.view(1, 1, -1, 1))
        return g

    def forward(self, image):
        s = self.luminance(image) + L_FLOOR
        x = image / s
        e1 = F.leaky_relu(self.enc1(x), 0.1)
        e2 = F.leaky_relu(self.enc2(e1), 0.1)
        m = F.leaky_relu(self.mid(e2), 0.1)
        up = F.interpolate(m, size=x.shape[-2:], mode="bilinear", align_corners=False)
        h = F.leaky_relu(self.dec(torch.cat([up, e1], 1)), 0.1)
        R = torch.sigmoid(self.head_r(h))
        L = F.softplus(self.head_l(h)) * s + L_FLOOR
        return R, L


def decompose(model: Decomposer, image):
    """Reflectance/illumination of a (B, C, H, W) tensor (or (H, W[, C]) array).

    An all-black image gives ``R = 0`` and ``L`` at the floor.
    """
    x = image
    if not torch.is_tensor(x):
        a = np.asarray(x, dtype=np.float64)
        a = a[None] if a.ndim == 2 else np.moveaxis(a, -1, 0)
        x = torch.as_tensor(a)[None]
    x = x.to(next(model.parameters()).dtype)
    if not torch.isfinite(x).all():
        raise ValueError("decompose: input contains non-finite values")
    R, L = model(x)
    black = (x.flatten(1).abs().amax(1) == 0).view(-1, 1, 1, 1)
    R = torch.where(black, torch.zeros_like(R), R)
    L = torch.where(black, torch.full_like(L, L_FLOOR), L)
    return Decomposition(R, L)


def reconstruction_loss(R, L, image):
    return (R * L - image).abs().mean()


def smoothness_loss(L):
    """Mean absolute forward difference of the illumination map."""
    return (L[..., 1:, :] - L[..., :-1, :]).abs().mean() + (L[..., :, 1:] - L[..., :, :-1]).abs().mean()


def consistency_loss(R_a, R_b):
    return (R_a - R_b).abs().mean()


def decomposer_objective(model, day, night, cfg: RetinexConfig):
    """Weighted objective on a batch of paired renderings; returns ``(total, parts)``."""
    R_d, L_d = model(day)
    R_n, L_n = model(night)
    recon = reconstruction_loss(R_d, L_d, day) + reconstruction_loss(R_n, L_n, night)
    smooth = smoothness_loss(L_d) + smoothness_loss(L_n)
    consist = consistency_loss(R_d, R_n)
    total = cfg.w_recon * recon + cfg.w_smooth * smooth + cfg.w_consistency * consist
    return total, {"recon": recon.item(), "smooth": smooth.item(), "consistency": consist.item()}


def _stack(images):
    a = np.stack([np.asarray(i, dtype=np.float64) for i in images])
    a = a[:, None] if a.ndim == 3 else np.moveaxis(a, -1, 1)
    return torch.as_tensor(a, dtype=torch.float32)


def train_decomposer(pairs, epochs, cfg: RetinexConfig | None = None, seed=0, model=None):
    """Fit a decomposer on ``(day, night)`` image pairs.

    Returns ``(model, history)`` where ``history`` holds per-epoch mean losses.
    """
    cfg = cfg or RetinexConfig()
    if len(pairs) == 0:
        raise ValueError("train_decomposer needs at least one training pair")
    day = _stack([p[0] for p in pairs])
    night = _stack([p[1] for p in pairs])
    torch.manual_seed(seed)
    if model is None:
        model = Decomposer(day.shape[1], cfg.width)
    opt = torch.optim.Adam(model.parameters(), cfg.lr)
    rng = np.random.default_rng(seed)
    history = []
    n = len(day)
    for _ in range(epochs):
        perm = rng.permutation(n)
        sums = {"recon": 0.0, "smooth": 0.0, "consistency": 0.0, "total": 0.0}
        batches = 0
        for b in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(perm[b : b + cfg.batch_size])
            total, parts = decomposer_objective(model, day[idx], night[idx], cfg)
            opt.zero_grad()
            total.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] += v
            sums["total"] += total.item()
            batches += 1
        history.append({k: v / batches for k, v in sums.items()})
    return model, history


def save_decomposer(path, model: Decomposer, cfg: RetinexConfig | None = None):
    meta = {"kind": "decomposer", "in_channels": model.enc1.in_channels, "config": asdict(cfg or RetinexConfig())}
    return save_checkpoint(path, module_arrays("decomposer", model), meta)


def load_decomposer(path):
    arrays, meta = load_checkpoint(path)
    cfg = RetinexConfig(**meta["config"])
    model = Decomposer(meta["in_channels"], cfg.width)
    return load_module(model, arrays, "decomposer"), cfg
