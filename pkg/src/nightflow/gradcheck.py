"""Central finite-difference checks of every differentiable loss, in float64 on 8x8 inputs.

The relative error of a check is ``max|g_auto - g_fd| / max|g_fd|`` over all
input entries.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import torch

from . import appearance, boundary, flowcore, retinex

DEFAULT_TOL = 1e-4
STEP = 1e-6


@dataclass
class GradResult:
    name: str
    max_rel_err: float
    n_inputs: int
    seconds: float

    def passed(self, tol=DEFAULT_TOL):
        return self.max_rel_err <= tol


def fd_grad(fn, inputs, h=STEP):
    """Central differences of scalar ``fn(*inputs)`` with respect to every input entry."""
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = float(fn(*inputs))
                flat[i] = old - h
                down = float(fn(*inputs))
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def check(name, fn, inputs, h=STEP):
    t0 = time.perf_counter()
    xs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    auto = torch.autograd.grad(fn(*xs), xs)
    fd = fd_grad(fn, [x.detach().clone() for x in xs], h)
    num = max(float((a - f).abs().max()) for a, f in zip(auto, fd))
    den = max(float(f.abs().max()) for f in fd)
    rel = num / den if den > 0 else num
    return GradResult(name, rel, sum(x.numel() for x in xs), time.perf_counter() - t0)


def _suites(seed=0, size=8):
    g = torch.Generator().manual_seed(seed)

    def rand(*shape, lo=0.0, hi=1.0):
        return lo + (hi - lo) * torch.rand(*shape, generator=g, dtype=torch.float64)

    H = W = size
    K, D = 4, 9
    img_t, img_t1 = rand(1, 1, H, W), rand(1, 1, H, W)
    # flows stay well inside the frame and off integer sample positions
    flow = rand(1, 2, H, W, lo=-0.9, hi=0.9)
    occ = torch.zeros(1, 1, H, W, dtype=torch.bool)
    occ[..., :2, :2] = True
    torch.manual_seed(seed)
    disc = appearance.Discriminator().double()
    cv_weights = rand(1, 25, H, W)
    labels = torch.randint(0, K, (1, H, W), generator=g)
    mask = rand(1, H, W) > 0.3
    out = {
        "photometric/flow": (lambda f: flowcore.photometric_loss(img_t, img_t1, f, occ), [flow]),
        "photometric/images": (lambda a, b: flowcore.photometric_loss(a, b, flow, occ), [img_t, img_t1]),
        "cost_volume": (
            lambda a, b: (flowcore.cost_volume(a, b, radius=2) * cv_weights).sum(),
            [rand(1, 3, H, W, lo=-1), rand(1, 3, H, W, lo=-1)],
        ),
        "adversarial/terms": (
            lambda pd, pn: sum(appearance.adversarial_terms(pd, pn)),
            [rand(4, lo=0.1, hi=0.9), rand(4, lo=0.1, hi=0.9)],
        ),
        "adversarial/generator": (
            lambda rn: appearance.adversarial_losses(img_t, rn, disc)[1],
            [rand(1, 1, H, W)],
        ),
        "kl_cost": (lambda a, b: appearance.kl_cost_loss(a, b, detach_day=False), [rand(1, D, H, W, lo=-1), rand(1, D, H, W, lo=-1)]),
        "intra_align": (appearance.intra_align_loss, [rand(1, D, H, W, lo=-1) for _ in range(4)]),
        "inter_align": (
            lambda a, b, c, d: appearance.inter_align_loss(a, b, c, d, detach_day=False),
            [rand(1, D, H, W, lo=-1) for _ in range(4)],
        ),
        "cls": (
            lambda logits: boundary.cls_loss(torch.softmax(logits, 1), labels),
            [rand(1, K, H, W, lo=-2, hi=2)],
        ),
        "contrastive": (
            lambda pe, pn, nn_: boundary.contrastive_loss(
                boundary.SampleSet(
                    flowcore.normalize_features(pe), flowcore.normalize_features(pn), flowcore.normalize_features(nn_), 0.07
                )
            ),
            [rand(6, D, lo=-1), rand(6, D, lo=-1), rand(6, D, lo=-1)],
        ),
        "motion_consistency": (
            lambda fn: boundary.motion_consistency_loss(fn, torch.full((1, 2, H, W), 0.05, dtype=torch.float64), mask),
            [rand(1, 2, H, W, lo=-1)],
        ),
        "retinex/reconstruction": (lambda r, l: retinex.reconstruction_loss(r, l, img_t), [rand(1, 1, H, W), rand(1, 1, H, W)]),
        "retinex/smoothness": (retinex.smoothness_loss, [rand(1, 1, H, W)]),
        "retinex/consistency": (retinex.consistency_loss, [rand(1, 1, H, W), rand(1, 1, H, W)]),
    }
    return out


def run_all(seed=0, size=8):
    if size > 8:
        raise ValueError("finite-difference checks are limited to 8x8 inputs")
    return [check(name, fn, inputs) for name, (fn, inputs) in _suites(seed, size).items()]


def format_results(results, tol=DEFAULT_TOL):
    return "\n".join(
        f"{'PASS' if r.passed(tol) else 'FAIL'} {r.name:28s} max_rel_err={r.max_rel_err:.3e} ({r.n_inputs} entries, {r.seconds:.2f}s)"
        for r in results
    )


def worst(results):
    return max(results, key=lambda r: r.max_rel_err) if results else None


def results_table(results, tol=DEFAULT_TOL):
    return [
        {"name": r.name, "max_rel_err": r.max_rel_err, "n_inputs": r.n_inputs, "passed": r.passed(tol)} for r in results
    ]
