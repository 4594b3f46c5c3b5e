"""Three-stage schedule: day/event flow, appearance adaptation, boundary adaptation.

Stage 1 trains the decomposer, the day flow model and the event flow model.
Stage 2 trains the night and reflectance encoders so that their cost volumes
line up with the day ones.  Stage 3 fine-tunes the night model against the
frozen event model on the pixels where both modalities agree.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import appearance, boundary, flowcore
from .checkpoint import load_checkpoint, load_module, module_arrays, save_checkpoint
from .errors import CheckpointError, NumericError
from .evaluation import evaluate
from .retinex import Decomposer, RetinexConfig, train_decomposer
from .synthdata import accumulate_full, event_slices

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TERMS = ("pho", "adv", "kl", "intra", "inter", "cls", "contra", "self")
STAGE_TERMS = {
    2: ("pho", "adv", "kl", "intra", "inter"),
    3: ("pho", "cls", "contra", "self"),
}


@dataclass
class TrainConfig:
    # loss weights, in the order adv, kl, intra, inter, cls, contra, self
    lambda_adv: float = 0.1
    lambda_kl: float = 1.0
    lambda_intra: float = 1.0
    lambda_inter: float = 2.0
    lambda_cls: float = 0.1
    lambda_contra: float = 0.1
    lambda_self: float = 1.0
    tau: float = 0.07
    K: int = 10
    N: int = 1000
    C: float = 0.15
    radius: int = 4
    p0: float | None = None  # None means 1 / K
    lr: float = 1e-3
    epochs_retinex: int = 60
    epochs1: int = 40
    epochs2: int = 30
    epochs3: int = 20
    batch_size: int = 16
    seed: int = 0
    holdout: float = 0.2
    level: int = 1
    n_slices: int = 5
    patch: int = 3
    occlusion_warmup: float = 0.25
    finetune_decomposer: bool = False
    stage3_photometric: bool = False
    motion_compensated: bool = False
    retinex_smooth: float = 1.0
    night_adapter: bool = True
    detach_night_reflectance: bool = True
    kl_temperature: float = 0.05
    cosine_lr: bool = False  # anneal the adaptation stages' learning rate to zero

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            if f.name.startswith("lambda_") and not getattr(self, f.name) >= 0:
                raise ValueError(f"{f.name} must be >= 0")
        for name in ("epochs1", "epochs2", "epochs3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not (self.tau > 0 and self.C > 0 and self.lr > 0 and self.kl_temperature > 0):
            raise ValueError("tau, C, lr and kl_temperature must be positive")
        if self.p0 is not None and not 0 < self.p0 < 1:
            raise ValueError("p0 must lie in (0, 1)")
        if not 0 <= self.holdout < 1:
            raise ValueError("holdout must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def weights(self):
        return {
            "pho": 1.0,
            "adv": self.lambda_adv,
            "kl": self.lambda_kl,
            "intra": self.lambda_intra,
            "inter": self.lambda_inter,
            "cls": self.lambda_cls,
            "contra": self.lambda_contra,
            "self": self.lambda_self,
        }

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_toml(self):
        lines = []
        for k, v in asdict(self).items():
            if v is None:
                continue
            lines.append(f"{k} = {json.dumps(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_dict(tomllib.load(f))

    def override(self, assignments):
        """Copy with ``key=value`` strings applied; values are parsed as TOML scalars."""
        d = asdict(self)
        for a in assignments:
            key, sep, raw = a.partition("=")
            key = key.strip()
            if not sep or key not in d:
                raise ValueError(f"bad override {a!r}")
            d[key] = None if raw.strip().lower() == "none" else tomllib.loads(f"v = {raw.strip()}")["v"]
        return type(self).from_dict(d)


def total_loss(terms, cfg: TrainConfig, stage=None):
    """Weighted sum of loss terms; terms outside ``stage`` (2 or 3) are masked out.

    Missing terms count as zero.  Any non-finite active term raises
    :class:`NumericError` naming it.
    """
    active = TERMS if stage is None else STAGE_TERMS[stage]
    weights = cfg.weights
    if stage == 3 and not cfg.stage3_photometric:
        weights = {**weights, "pho": 0.0}
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    total = 0.0
    for name in active:
        if name not in terms:
            continue
        v = terms[name]
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise NumericError(f"loss term {name!r} is not finite")
        if weights[name] != 0:
            total = total + weights[name] * v
    return total


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def _images(arrs):
    return torch.cat([flowcore.image_tensor(a) for a in arrs])


@dataclass
class Batchset:
    day_t: torch.Tensor
    day_t1: torch.Tensor
    night_t: torch.Tensor
    night_t1: torch.Tensor
    gt: torch.Tensor
    events: torch.Tensor | None = None
    dL: torch.Tensor | None = None
    ids: list = field(default_factory=list)

    def __len__(self):
        return self.day_t.shape[0]

    def take(self, idx):
        idx = torch.as_tensor(np.asarray(idx, dtype=np.int64))
        pick = lambda t: None if t is None else t[idx]  # noqa: E731
        return Batchset(
            pick(self.day_t), pick(self.day_t1), pick(self.night_t), pick(self.night_t1), pick(self.gt),
            pick(self.events), pick(self.dL), [self.ids[i] for i in idx.tolist()],
        )

    @property
    def has_events(self):
        return self.events is not None


def make_batchset(samples, n_slices=5, ids=None):
    if not samples:
        raise ValueError("dataset is empty")
    has_ev = all(s.events is not None for s in samples)
    ev = dL = None
    if has_ev:
        ev = torch.as_tensor(
            np.stack([np.concatenate(event_slices(s.events, n_slices), 0) for s in samples]), dtype=torch.float32
        )
        dL = torch.as_tensor(np.stack([accumulate_full(s.events) for s in samples])[:, None], dtype=torch.float32)
    return Batchset(
        _images([s.frame_t for s in samples]),
        _images([s.frame_t1 for s in samples]),
        _images([s.night_t for s in samples]),
        _images([s.night_t1 for s in samples]),
        torch.cat([flowcore.flow_tensor(s.gt_flow) for s in samples]),
        ev,
        dL,
        list(range(len(samples))) if ids is None else list(ids),
    )


def split(n, holdout):
    """Leading samples train, trailing ``holdout`` fraction is held out."""
    n_test = int(round(n * holdout))
    if n - n_test < 1:
        raise ValueError("no training samples left after the hold-out split")
    return list(range(n - n_test)), list(range(n - n_test, n))


def batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[b : b + batch_size] for b in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# model bundle and checkpoints
# ---------------------------------------------------------------------------

MODEL_KEYS = ("decomposer", "day", "event", "night", "reflect", "disc", "attention")


@dataclass
class Models:
    decomposer: Decomposer
    day: flowcore.FlowNet
    event: boundary.EventFlowNet
    night: flowcore.FlowNet | None = None
    reflect: flowcore.FlowNet | None = None
    disc: appearance.Discriminator | None = None
    attention: boundary.AttentionNet | None = None

    def arrays(self):
        out = {}
        for k in MODEL_KEYS:
            m = getattr(self, k)
            if m is not None:
                out.update(module_arrays(k, m))
        return out


def init_models(cfg: TrainConfig, in_channels=1):
    torch.manual_seed(cfg.seed)
    return Models(
        decomposer=Decomposer(in_channels, RetinexConfig().width),
        day=flowcore.FlowNet(in_channels, cfg.radius, level=cfg.level),
        event=boundary.EventFlowNet(cfg.n_slices, cfg.radius, level=cfg.level),
    )


def _build(key, cfg: TrainConfig, in_channels):
    if key in ("night", "reflect"):
        return flowcore.FlowNet(in_channels, cfg.radius, level=cfg.level, adapter=cfg.night_adapter)
    if key == "disc":
        return appearance.Discriminator(in_channels)
    if key == "attention":
        return boundary.AttentionNet(cfg.K)
    raise KeyError(key)


def save_stage(path, models: Models, cfg: TrainConfig, stage, in_channels):
    meta = {"kind": "nightflow-train", "stage": stage, "in_channels": in_channels, "config": cfg.to_dict()}
    return save_checkpoint(path, models.arrays(), meta)


def load_stage(path, expected_stage=None, cfg: TrainConfig | None = None):
    """Return ``(models, config, stage)``; ``expected_stage`` enforces stage ordering."""
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "nightflow-train":
        raise CheckpointError(f"{path}: not a training checkpoint")
    stage = meta["stage"]
    if expected_stage is not None and stage != expected_stage:
        raise CheckpointError(f"{path}: expected a stage-{expected_stage} checkpoint, got stage {stage}")
    saved = TrainConfig.from_dict(meta["config"])
    cfg = cfg or saved
    for k in ("radius", "level", "n_slices", "K"):
        if getattr(cfg, k) != getattr(saved, k):
            raise CheckpointError(f"{path}: config {k}={getattr(cfg, k)} incompatible with saved {getattr(saved, k)}")
    ch = meta["in_channels"]
    models = init_models(saved, ch)
    for k in MODEL_KEYS:
        present = any(a.startswith(k + "/") for a in arrays)
        if not present:
            continue
        if getattr(models, k) is None:
            setattr(models, k, _build(k, saved, ch))
        load_module(getattr(models, k), arrays, k)
    return models, saved, stage


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict(net, x_t, x_t1, batch_size=64):
    net.eval()
    out = [net(x_t[b : b + batch_size], x_t1[b : b + batch_size])[0] for b in range(0, len(x_t), batch_size)]
    net.train()
    return torch.cat(out)


@torch.no_grad()
def predict_events(net, ev, batch_size=64):
    net.eval()
    out = [net(ev[b : b + batch_size])[0] for b in range(0, len(ev), batch_size)]
    net.train()
    return torch.cat(out)


def mean_epe(flow, gt):
    return float((flow - gt).double().norm(dim=1).mean())


def flow_report(flow, data: Batchset):
    return evaluate([flowcore.flow_array(f) for f in flow], [flowcore.flow_array(g) for g in data.gt], data.ids)


# ---------------------------------------------------------------------------
# logging
# ---------------------------------------------------------------------------


class EpochLog:
    def __init__(self, path=None):
        self.rows = []
        self.path = None if path is None else Path(path)

    def add(self, row):
        self.rows.append({k: (round(v, 10) if isinstance(v, float) else v) for k, v in row.items()})
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=list(self.rows[0]))
                w.writeheader()
                w.writerows(self.rows)


def _scheduler(opt, cfg: TrainConfig, epochs):
    if not cfg.cosine_lr or epochs == 0:
        return None
    return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)


def _seed_all(seed):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


def _num(v):
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def _mean_rows(rows):
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def photometric(net, a, b, use_occlusion):
    fw, bw, cv = flowcore.bidirectional_flow(net, a, b)
    return flowcore.masked_photometric(a, b, fw, bw if use_occlusion else None), fw, cv


def event_photometric(net: boundary.EventFlowNet, ev, a, b, use_occlusion):
    fw, cv = net(ev)
    bw = net(boundary.reverse_event_tensor(ev))[0] if use_occlusion else None
    return flowcore.masked_photometric(a, b, fw, bw), fw, cv


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage1(samples, cfg: TrainConfig, log_path=None, models: Models | None = None):
    """Train the decomposer, the day flow model and (if events exist) the event model.

    Returns ``(models, metrics)``.
    """
    data = make_batchset(samples, cfg.n_slices)
    tr, te = split(len(data), cfg.holdout)
    train, test = data.take(tr), data.take(te)
    ch = data.day_t.shape[1]
    models = models or init_models(cfg, ch)
    rng = _seed_all(cfg.seed)
    if cfg.epochs_retinex > 0:
        pairs = [(s.frame_t, s.night_t) for s in (samples[i] for i in tr)]
        models.decomposer, _ = train_decomposer(
            pairs, cfg.epochs_retinex, RetinexConfig(w_smooth=cfg.retinex_smooth), cfg.seed, models.decomposer
        )
    params = list(models.day.parameters()) + (list(models.event.parameters()) if data.has_events else [])
    opt = torch.optim.Adam(params, cfg.lr)
    log = EpochLog(log_path)
    warm = int(cfg.occlusion_warmup * cfg.epochs1)
    for epoch in range(cfg.epochs1):
        rows = []
        for idx in batches(len(train), cfg.batch_size, rng):
            b = train.take(idx)
            occ = epoch >= warm
            pho_day, _, _ = photometric(models.day, b.day_t, b.day_t1, occ)
            loss = pho_day
            pho_ev = torch.zeros(())
            if data.has_events:
                pho_ev, _, _ = event_photometric(models.event, b.events, b.day_t, b.day_t1, occ)
                loss = loss + pho_ev
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rows.append({"pho_day": pho_day.item(), "pho_event": pho_ev.item()})
        row = {"epoch": epoch, **_mean_rows(rows)}
        row["epe_day_train"] = mean_epe(predict(models.day, train.day_t, train.day_t1), train.gt)
        row["epe_day_test"] = mean_epe(predict(models.day, test.day_t, test.day_t1), test.gt) if len(test) else math.nan
        log.add(row)
    metrics = stage1_metrics(models, test if len(test) else train, data.has_events)
    return models, metrics


def stage1_metrics(models: Models, test: Batchset, has_events):
    m = {
        "epe_day": mean_epe(predict(models.day, test.day_t, test.day_t1), test.gt),
        "epe_day_on_night": mean_epe(predict(models.day, test.night_t, test.night_t1), test.gt),
    }
    if has_events:
        m["epe_event"] = mean_epe(predict_events(models.event, test.events), test.gt)
    return m


def _decompose(models: Models, x, train_it):
    if train_it:
        return models.decomposer(x)[0]
    with torch.no_grad():
        return models.decomposer(x)[0]


def stage2_terms(models: Models, b: Batchset, cfg: TrainConfig, use_occlusion):
    """Loss terms of appearance adaptation for one batch (adversarial generator side)."""
    w = cfg.weights
    terms = {}
    terms["pho"], _, _ = photometric(models.day, b.day_t, b.day_t1, use_occlusion)
    need_r = any(w[k] > 0 for k in ("adv", "kl", "intra", "inter"))
    if not need_r:
        return terms, None
    R = {k: _decompose(models, getattr(b, k), cfg.finetune_decomposer) for k in ("day_t", "day_t1", "night_t", "night_t1")}
    if w["adv"] > 0:
        R_d = torch.cat([R["day_t"], R["day_t1"]])
        R_n = torch.cat([R["night_t"], R["night_t1"]])
        _, terms["adv"] = appearance.adversarial_losses(R_d, R_n, models.disc)
    else:
        R_d = R_n = None
    cv_dr = models.reflect.cost(R["day_t"], R["day_t1"])
    cv_nr = models.reflect.cost(R["night_t"], R["night_t1"])
    if w["kl"] > 0:
        terms["kl"] = appearance.kl_cost_loss(cv_nr, cv_dr, temperature=cfg.kl_temperature)
    if w["intra"] > 0 or w["inter"] > 0:
        with torch.no_grad():
            cv_d = models.day.cost(b.day_t, b.day_t1)
        cv_n = models.night.cost(b.night_t, b.night_t1)
        if w["intra"] > 0:
            terms["intra"] = appearance.intra_align_loss(cv_d, cv_dr, cv_n, cv_nr, cfg.detach_night_reflectance)
        if w["inter"] > 0:
            terms["inter"] = appearance.inter_align_loss(cv_d, cv_dr, cv_n, cv_nr, temperature=cfg.kl_temperature)
    return terms, (R_d, R_n)


def stage2(samples, init: Models, cfg: TrainConfig, log_path=None):
    """Appearance adaptation from a stage-1 bundle.  Returns ``(models, metrics)``."""
    data = make_batchset(samples, cfg.n_slices)
    tr, te = split(len(data), cfg.holdout)
    train, test = data.take(tr), data.take(te)
    test = test if len(test) else train
    models = copy.deepcopy(init)
    ch = data.day_t.shape[1]
    rng = _seed_all(cfg.seed + 2)
    domain_copy = (lambda net: net.with_adapter()) if cfg.night_adapter else copy.deepcopy
    models.night = domain_copy(models.day)
    models.reflect = domain_copy(models.day)
    models.disc = appearance.Discriminator(ch)
    params = (
        list(models.day.parameters())
        + models.night.encoder_parameters()
        + models.reflect.encoder_parameters()
    )
    if cfg.finetune_decomposer:
        params += list(models.decomposer.parameters())
    opt = torch.optim.Adam(params, cfg.lr)
    opt_d = torch.optim.Adam(models.disc.parameters(), cfg.lr)
    sched = _scheduler(opt, cfg, cfg.epochs2)
    log = EpochLog(log_path)
    baseline = mean_epe(predict(models.day, test.night_t, test.night_t1), test.gt)
    for epoch in range(cfg.epochs2):
        rows = []
        for idx in batches(len(train), cfg.batch_size, rng):
            b = train.take(idx)
            terms, refl = stage2_terms(models, b, cfg, use_occlusion=True)
            loss = total_loss(terms, cfg, stage=2)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_d = torch.zeros(())
            if refl is not None and refl[0] is not None:
                loss_d, _ = appearance.adversarial_losses(refl[0], refl[1], models.disc)
                opt_d.zero_grad(set_to_none=True)
                (-loss_d).backward()
                opt_d.step()
            rows.append({**{k: _num(terms.get(k, 0.0)) for k in STAGE_TERMS[2]}, "total": _num(loss), "disc": loss_d.item()})
        if sched is not None:
            sched.step()
        row = {"epoch": epoch, **_mean_rows(rows)}
        row["epe_night_train"] = mean_epe(predict(models.night, train.night_t, train.night_t1), train.gt)
        row["epe_night_test"] = mean_epe(predict(models.night, test.night_t, test.night_t1), test.gt)
        log.add(row)
    metrics = {
        "epe_day_on_night": baseline,
        "epe_night": mean_epe(predict(models.night, test.night_t, test.night_t1), test.gt),
        "epe_day": mean_epe(predict(models.day, test.day_t, test.day_t1), test.gt),
    }
    return models, metrics


def correlation_inputs(b: Batchset, F_n, cfg: TrainConfig):
    """Event and frame spatiotemporal-gradient maps for a batch."""
    st = boundary.image_st_gradient(b.night_t.double(), F_n.detach().double())
    if cfg.motion_compensated:
        # shift the accumulated events back along the current night flow
        dL = flowcore.warp(b.dL.double(), F_n.detach().double() * 0.5)
    else:
        dL = b.dL.double()
    return dL, st


def stage3_terms(models: Models, b: Batchset, cfg: TrainConfig, rng):
    """Boundary-adaptation loss terms for one batch."""
    w = cfg.weights
    terms = {}
    need_flow = cfg.stage3_photometric or w["contra"] > 0 or w["self"] > 0
    if need_flow:
        fw, bw, cv_n = flowcore.bidirectional_flow(models.night, b.night_t, b.night_t1)
    else:
        with torch.no_grad():
            fw, cv_n = models.night(b.night_t, b.night_t1)
    if cfg.stage3_photometric:
        terms["pho"] = flowcore.masked_photometric(b.night_t, b.night_t1, fw, bw)
    with torch.no_grad():
        F_ev, cv_ev = models.event(b.events)
        dL, st = correlation_inputs(b, fw, cfg)
        corr = boundary.correlation_map(dL, st, cfg.patch)
        labels = boundary.class_labels(corr, cfg.K)
    A = models.attention(corr.float())
    terms["cls"] = boundary.cls_loss(A, labels)
    A0 = A.detach()
    if w["contra"] > 0:
        size = b.night_t.shape[-2:]
        up_n = F.interpolate(cv_n, size=size, mode="bilinear", align_corners=False)
        up_ev = F.interpolate(cv_ev, size=size, mode="bilinear", align_corners=False)
        flat = labels.reshape(-1)
        n = min(cfg.N, int((flat == 0).sum()), int((flat != 0).sum()))
        if n > 0:
            s = boundary.sample_features(up_n, up_ev, A0, labels, n, rng, cfg.tau)
            terms["contra"] = boundary.contrastive_loss(s)
    if w["self"] > 0:
        V = boundary.valid_mask(A0, cfg.p0)
        if V.any():
            terms["self"] = boundary.motion_consistency_loss(fw, F_ev, V)
    return terms


def stage3(samples, init: Models, cfg: TrainConfig, log_path=None):
    """Boundary adaptation from a stage-2 bundle.  Returns ``(models, metrics)``."""
    data = make_batchset(samples, cfg.n_slices)
    if not data.has_events:
        raise ValueError("stage 3 needs event data for every sample")
    tr, te = split(len(data), cfg.holdout)
    train, test = data.take(tr), data.take(te)
    test = test if len(test) else train
    models = copy.deepcopy(init)
    if models.night is None:
        raise CheckpointError("stage 3 needs a night model from stage 2")
    rng = _seed_all(cfg.seed + 3)
    models.attention = boundary.AttentionNet(cfg.K)
    for p in models.event.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(list(models.night.parameters()) + list(models.attention.parameters()), cfg.lr)
    sched = _scheduler(opt, cfg, cfg.epochs3)
    log = EpochLog(log_path)
    before = flow_report(predict(models.night, test.night_t, test.night_t1), test)
    for epoch in range(cfg.epochs3):
        rows = []
        for idx in batches(len(train), cfg.batch_size, rng):
            b = train.take(idx)
            terms = stage3_terms(models, b, cfg, rng)
            loss = total_loss(terms, cfg, stage=3)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rows.append({**{k: _num(terms.get(k, 0.0)) for k in STAGE_TERMS[3]}, "total": _num(loss)})
        if sched is not None:
            sched.step()
        row = {"epoch": epoch, **_mean_rows(rows)}
        row["epe_night_train"] = mean_epe(predict(models.night, train.night_t, train.night_t1), train.gt)
        row["epe_night_test"] = mean_epe(predict(models.night, test.night_t, test.night_t1), test.gt)
        log.add(row)
    for p in models.event.parameters():
        p.requires_grad_(True)
    after = flow_report(predict(models.night, test.night_t, test.night_t1), test)
    metrics = {
        "epe_night_before": before.epe,
        "boundary_epe_before": before.boundary_epe,
        "epe_night": after.epe,
        "boundary_epe": after.boundary_epe,
    }
    return models, metrics


def run_stage(stage, samples, cfg: TrainConfig, out_dir, init_path=None):
    """Run one stage, writing ``stage{n}.npz``, ``stage{n}_log.csv`` and ``stage{n}_report.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ch = flowcore.image_tensor(samples[0].frame_t).shape[1] if samples else 1
    log_path = out_dir / f"stage{stage}_log.csv"
    if stage == 1:
        models, metrics = stage1(samples, cfg, log_path)
    else:
        init_path = Path(init_path or out_dir / f"stage{stage - 1}.npz")
        init, _, _ = load_stage(init_path, expected_stage=stage - 1, cfg=cfg)
        fn = stage2 if stage == 2 else stage3
        models, metrics = fn(samples, init, cfg, log_path)
    ckpt = save_stage(out_dir / f"stage{stage}.npz", models, cfg, stage, ch)
    report = {"stage": stage, "seed": cfg.seed, "metrics": metrics}
    (out_dir / f"stage{stage}_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return ckpt, report
