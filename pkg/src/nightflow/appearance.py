"""Appearance adaptation: reflectance-space adversarial alignment and cost-volume alignment.

The KL terms follow the night -> day direction ``KL(P_night || P_day)`` and treat
the daytime distribution as a fixed target, so knowledge only flows from day to
night.  All losses are mean-reduced over pixels and batch.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

PROB_FLOOR = 1e-6


class Discriminator(nn.Module):
    """4-layer strided CNN scoring reflectance maps; returns a probability per image."""

    def __init__(self, in_channels=1, width=16):
        super().__init__()
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(in_channels, width, 3, 2, 1),
                nn.Conv2d(width, 2 * width, 3, 2, 1),
                nn.Conv2d(2 * width, 2 * width, 3, 2, 1),
                nn.Conv2d(2 * width, 1, 3, 1, 1),
            ]
        )

    def logits(self, x):
        for conv in self.convs[:-1]:
            x = F.leaky_relu(conv(x), 0.2)
        return self.convs[-1](x).mean(dim=(1, 2, 3))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def _log_prob(p):
    return torch.log(p.clamp(PROB_FLOOR, 1.0))


def adversarial_terms(p_day, p_night):
    """Adversarial losses from discriminator outputs.

    ``loss_d = E[log D(R_d)] + E[log(1 - D(R_n))]`` is the value the
    discriminator maximises; ``loss_g = -E[log D(R_n)]`` is the non-saturating
    objective the night branch minimises.  Probabilities are floored at 1e-6.
    """
    if p_day.numel() == 0 or p_night.numel() == 0:
        raise ValueError("adversarial loss needs non-empty day and night batches")
    loss_d = _log_prob(p_day).mean() + _log_prob(1.0 - p_night).mean()
    loss_g = -_log_prob(p_night).mean()
    return loss_d, loss_g


def adversarial_losses(R_d, R_n, D: Discriminator):
    """``(loss_D, loss_G)`` for reflectance batches.

    ``loss_D`` sees detached reflectances so stepping it touches ``D`` only;
    ``loss_G`` backpropagates into whatever produced ``R_n``.  Callers step
    ``D`` on ``-loss_D`` and must zero ``D``'s gradients after ``loss_G``.
    """
    if R_d.shape[0] == 0 or R_n.shape[0] == 0:
        raise ValueError("adversarial loss needs non-empty day and night batches")
    loss_d, _ = adversarial_terms(D(R_d.detach()), D(R_n.detach()))
    _, loss_g = adversarial_terms(D(R_d.detach()), D(R_n))
    return loss_d, loss_g


def softmax_dist(cv):
    """Per-pixel softmax over cost-volume channels (temperature 1)."""
    return torch.softmax(cv, dim=1)


def _kl(logits_p, logits_q):
    log_p = torch.log_softmax(logits_p, dim=1)
    log_q = torch.log_softmax(logits_q, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(1).mean()


def _check(*cvs):
    shape = cvs[0].shape
    for c in cvs[1:]:
        if c.shape != shape:
            raise ValueError(f"cost volume shapes differ: {tuple(shape)} vs {tuple(c.shape)}")


def kl_cost_loss(cv_n_r, cv_d_r, detach_day=True, temperature=1.0):
    """``mean_pixels sum_c Phi(cv_n^r) log(Phi(cv_n^r) / Phi(cv_d^r))`` with ``Phi = softmax(. / T)``."""
    _check(cv_n_r, cv_d_r)
    target = cv_d_r.detach() if detach_day else cv_d_r
    return _kl(cv_n_r / temperature, target / temperature)


def intra_align_loss(cv_d, cv_d_r, cv_n, cv_n_r, detach_night_reflectance=False):
    """Mean absolute cost difference, visual vs reflectance, summed over domains.

    With ``detach_night_reflectance`` the night reflectance cost is a fixed
    target, so the noisy night visual cost cannot pull it.
    """
    _check(cv_d, cv_d_r, cv_n, cv_n_r)
    target = cv_n_r.detach() if detach_night_reflectance else cv_n_r
    return (cv_d - cv_d_r).abs().mean() + (cv_n - target).abs().mean()


def inter_align_loss(cv_d, cv_d_r, cv_n, cv_n_r, detach_day=True, temperature=1.0):
    """KL between softmaxed night and day residuals ``cv - cv^r``."""
    _check(cv_d, cv_d_r, cv_n, cv_n_r)
    day = cv_d - cv_d_r
    if detach_day:
        day = day.detach()
    return _kl((cv_n - cv_n_r) / temperature, day / temperature)
