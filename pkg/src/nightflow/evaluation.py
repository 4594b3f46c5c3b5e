"""Flow metrics, the motion-boundary band, colour rendering and the JSON report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb
from scipy import ndimage

from .errors import DegenerateInputError

REPORT_SCHEMA_VERSION = 1
FL_ABS_PX = 3.0
FL_REL = 0.05
BAND_EDGE_THRESHOLD = 1.0
BAND_DILATION = 2


def _check(flow, gt, valid):
    flow = np.asarray(flow, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if flow.shape != gt.shape or flow.shape[-1] != 2:
        raise ValueError(f"flow {flow.shape} and gt {gt.shape} must both be (H, W, 2)")
    valid = np.ones(flow.shape[:-1], bool) if valid is None else np.asarray(valid, bool)
    if valid.shape != flow.shape[:-1]:
        raise ValueError(f"valid mask {valid.shape} does not match flow {flow.shape[:-1]}")
    if not valid.any():
        raise DegenerateInputError("no valid pixels to evaluate")
    return flow, gt, valid


def endpoint_error(flow, gt):
    d = np.asarray(flow, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return np.sqrt((d**2).sum(-1))


def epe(flow, gt, valid=None):
    """Mean endpoint error over ``valid`` pixels (all pixels by default)."""
    flow, gt, valid = _check(flow, gt, valid)
    return float(endpoint_error(flow, gt)[valid].mean())


def fl_all(flow, gt, valid=None):
    """Percentage of valid pixels whose error exceeds both 3 px and 5% of ``|gt|``."""
    flow, gt, valid = _check(flow, gt, valid)
    err = endpoint_error(flow, gt)
    bad = (err > FL_ABS_PX) & (err > FL_REL * np.sqrt((gt**2).sum(-1)))
    return float(100.0 * bad[valid].sum() / valid.sum())


def flow_edge_strength(gt):
    """Per-pixel Frobenius norm of the Sobel flow Jacobian, in px per px."""
    gt = np.asarray(gt, dtype=np.float64)
    sq = np.zeros(gt.shape[:2])
    for c in range(2):
        for axis in (0, 1):
            sq += (ndimage.sobel(gt[..., c], axis=axis, mode="nearest") / 8.0) ** 2
    return np.sqrt(sq)


def boundary_band(gt, threshold=BAND_EDGE_THRESHOLD, dilation=BAND_DILATION):
    """Pixels within ``dilation`` px (chessboard) of a flow edge stronger than ``threshold``."""
    edges = flow_edge_strength(gt) > threshold
    if dilation <= 0 or not edges.any():
        return edges
    return ndimage.binary_dilation(edges, np.ones((3, 3), bool), iterations=dilation)


def flow_to_color(flow, max_norm=None):
    """RGB uint8 image: hue from direction, saturation from magnitude over its 99th percentile."""
    flow = np.asarray(flow, dtype=np.float64)
    if not np.isfinite(flow).all():
        raise ValueError("flow_to_color: non-finite flow")
    mag = np.sqrt((flow**2).sum(-1))
    scale = np.percentile(mag, 99) if max_norm is None else max_norm
    sat = np.clip(mag / scale, 0, 1) if scale > 0 else np.zeros_like(mag)
    hue = (np.arctan2(flow[..., 1], flow[..., 0]) / (2 * np.pi)) % 1.0
    rgb = hsv_to_rgb(np.stack([hue, sat, np.ones_like(mag)], -1))
    return np.round(rgb * 255).astype(np.uint8)


@dataclass
class SampleMetrics:
    id: int
    epe: float
    fl_all: float
    boundary_epe: float | None
    boundary_pixels: int


@dataclass
class EvalReport:
    count: int
    epe: float
    fl_all: float
    boundary_epe: float | None
    boundary_pixels: int
    samples: list = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        validate_report(d)
        d["samples"] = [SampleMetrics(**s) for s in d["samples"]]
        return cls(**d)


REPORT_FIELDS = {"schema_version", "count", "epe", "fl_all", "boundary_epe", "boundary_pixels", "samples"}
SAMPLE_FIELDS = {"id", "epe", "fl_all", "boundary_epe", "boundary_pixels"}


def validate_report(d):
    """Raise ``ValueError`` unless ``d`` has exactly the report field set and sane values."""
    if set(d) != REPORT_FIELDS:
        raise ValueError(f"report fields {sorted(d)} != {sorted(REPORT_FIELDS)}")
    if d["schema_version"] != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {d['schema_version']}")
    if d["count"] != len(d["samples"]) or d["count"] < 1:
        raise ValueError("sample count mismatch")
    if not (d["epe"] >= 0 and 0 <= d["fl_all"] <= 100):
        raise ValueError("metric out of range")
    for s in d["samples"]:
        if set(s) != SAMPLE_FIELDS:
            raise ValueError(f"sample fields {sorted(s)} != {sorted(SAMPLE_FIELDS)}")
        if not (s["epe"] >= 0 and 0 <= s["fl_all"] <= 100):
            raise ValueError(f"sample {s['id']}: metric out of range")


def evaluate(flows, gts, ids=None):
    """Build an :class:`EvalReport` from predicted and ground-truth (H, W, 2) fields.

    Means are pooled over pixels, so every pixel weighs the same whichever
    sample it belongs to.
    """
    if len(flows) != len(gts) or not len(flows):
        raise ValueError("need matching, non-empty lists of flows and ground truths")
    ids = list(range(len(flows))) if ids is None else list(ids)
    samples, err_sum, bad_sum, n_pix, band_sum, band_pix = [], 0.0, 0.0, 0, 0.0, 0
    for i, f, g in zip(ids, flows, gts):
        f, g, _ = _check(f, g, None)
        err = endpoint_error(f, g)
        band = boundary_band(g)
        nb = int(band.sum())
        e = float(err.mean())
        bad = int(((err > FL_ABS_PX) & (err > FL_REL * np.sqrt((g**2).sum(-1)))).sum())
        fl = 100.0 * bad / err.size
        samples.append(SampleMetrics(int(i), e, fl, float(err[band].mean()) if nb else None, nb))
        err_sum += float(err.sum())
        bad_sum += bad
        n_pix += err.size
        band_sum += float(err[band].sum())
        band_pix += nb
    return EvalReport(
        count=len(samples),
        epe=err_sum / n_pix,
        fl_all=100.0 * bad_sum / n_pix,
        boundary_epe=band_sum / band_pix if band_pix else None,
        boundary_pixels=band_pix,
        samples=[asdict(s) for s in samples],
    )
