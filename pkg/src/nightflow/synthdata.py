"""Synthetic day/night/event scenes with analytic ground truth.

A scene is a textured background plus a few sprites, each layer moving by an
affine map from time t to t+1.  The second frame is rendered analytically and
the first frame is obtained by bilinearly sampling it along the ground-truth
flow wherever the motion is visible, so backward warping is exact by
construction.  Night frames follow ``night = clip(frame * L + noise)`` with a
smooth, low illumination ``L``; events come from an integrate-and-fire model on
log intensity.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

FLO_MAGIC = 202021.25
LOG_EPS = 1e-3
DEFAULT_C = 0.15
DEFAULT_FRAME_INTERVAL = 0.05
INDEX_VERSION = 1


class DatasetError(OSError):
    """Missing or unreadable dataset file."""


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass
class EventStream:
    """Column-stored polarity events, sorted by timestamp.

    ``t_start``/``t_end`` delimit the window the stream was simulated over.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    sensor_size: tuple[int, int]
    C: float = DEFAULT_C
    t_start: float = 0.0
    t_end: float = DEFAULT_FRAME_INTERVAL

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.int8)
        self.sensor_size = (int(self.sensor_size[0]), int(self.sensor_size[1]))

    def __len__(self):
        return len(self.t)

    def validate(self):
        H, W = self.sensor_size
        if not self.C > 0:
            raise ValueError(f"contrast threshold must be positive, got {self.C}")
        if not (len(self.x) == len(self.y) == len(self.t) == len(self.p)):
            raise ValueError("event columns have different lengths")
        if len(self.t) == 0:
            return
        if np.any(np.diff(self.t) < 0):
            raise ValueError("event timestamps must be non-decreasing")
        if self.x.min() < 0 or self.x.max() >= W or self.y.min() < 0 or self.y.max() >= H:
            raise ValueError("event coordinates outside the sensor")
        if not np.all(np.abs(self.p) == 1):
            raise ValueError("event polarity must be +1 or -1")

    @classmethod
    def empty(cls, sensor_size, C=DEFAULT_C, t_start=0.0, t_end=DEFAULT_FRAME_INTERVAL):
        z = np.zeros(0)
        return cls(z, z, z, z, sensor_size, C, t_start, t_end)


@dataclass
class SceneSample:
    frame_t: np.ndarray
    frame_t1: np.ndarray
    gt_flow: np.ndarray
    gt_occlusion: np.ndarray
    night_t: np.ndarray | None = None
    night_t1: np.ndarray | None = None
    gt_illumination: np.ndarray | None = None
    events: EventStream | None = None
    seed: int = 0

    @property
    def shape(self):
        return self.frame_t.shape[:2]


@dataclass
class SpriteMotion:
    """One moving layer.  Geometry is given at time t in pixel coordinates.

    The map to time t+1 is ``y = center + translation + scale * R(rotation) (x - center)``.
    """

    center: tuple[float, float]
    half_size: tuple[float, float]
    translation: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0
    scale: float = 1.0
    shape: str = "rect"

    def matrix(self):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        A = self.scale * np.array([[c, -s], [s, c]])
        ctr = np.asarray(self.center, dtype=np.float64)
        b = ctr + np.asarray(self.translation, dtype=np.float64) - A @ ctr
        return A, b

    def max_displacement(self):
        A, _ = self.matrix()
        radius = math.hypot(*self.half_size)
        return math.hypot(*self.translation) + np.linalg.norm(A - np.eye(2), 2) * radius


@dataclass
class MotionSpec:
    """Motion parameters for :func:`gen_scene`.

    ``sprites``/``background_translation`` fix the motion explicitly; when left
    as ``None`` they are drawn from the seed within ``max_disp``.
    """

    max_disp: float = 4.0
    n_sprites: tuple[int, int] = (1, 4)
    affine: bool = True
    background_motion: bool = True
    sprites: list[SpriteMotion] | None = None
    background_translation: tuple[float, float] | None = None

    @classmethod
    def static(cls):
        return cls(max_disp=0.0, sprites=[], background_translation=(0.0, 0.0))

    @classmethod
    def translation(cls, shift, center=(32.0, 32.0), half_size=(8.0, 8.0)):
        return cls(
            max_disp=math.hypot(*shift),
            sprites=[SpriteMotion(center, half_size, translation=tuple(shift))],
            background_translation=(0.0, 0.0),
        )


@dataclass
class IllumSpec:
    """Smooth random illumination field scaled to ``[low, high]``.

    ``constant`` overrides the random field with a uniform level.
    """

    low: float = 0.05
    high: float = 0.3
    blur_sigma: float = 6.0
    constant: float | None = None


@dataclass
class NoiseSpec:
    sigma: float = 0.02


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


def _texture_params(rng, n_waves=5):
    base = rng.uniform(0.25, 0.75)
    periods = rng.uniform(7.0, 18.0, n_waves)
    angles = rng.uniform(0, 2 * np.pi, n_waves)
    freqs = np.stack([np.cos(angles), np.sin(angles)], 1) * (2 * np.pi / periods)[:, None]
    amps = rng.uniform(0.04, 0.1, n_waves)
    phases = rng.uniform(0, 2 * np.pi, n_waves)
    return base, freqs, amps, phases


def _eval_texture(params, px, py):
    base, freqs, amps, phases = params
    out = np.full(px.shape, base)
    for (fx, fy), a, ph in zip(freqs, amps, phases):
        out = out + a * np.sin(fx * px + fy * py + ph)
    return np.clip(out, 0.02, 0.98)


def _inside(shape, center, half_size, px, py):
    dx = (px - center[0]) / half_size[0]
    dy = (py - center[1]) / half_size[1]
    if shape == "ellipse":
        return dx * dx + dy * dy <= 1.0
    return (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)


def _random_motion(rng, height, width, spec: MotionSpec):
    lo, hi = spec.n_sprites
    n = int(rng.integers(lo, hi + 1))
    sprites = []
    for _ in range(n):
        half = (float(rng.uniform(width / 10, width / 5)), float(rng.uniform(height / 10, height / 5)))
        center = (float(rng.uniform(0.15 * width, 0.85 * width)), float(rng.uniform(0.15 * height, 0.85 * height)))
        rot, scale = 0.0, 1.0
        budget = spec.max_disp
        if spec.affine:
            radius = math.hypot(*half)
            # rotation/scale may use at most a quarter of the displacement budget
            rot = float(rng.uniform(-1, 1)) * 0.25 * budget / radius / 2
            scale = 1.0 + float(rng.uniform(-1, 1)) * 0.25 * budget / radius / 2
        probe = SpriteMotion(center, half, (0.0, 0.0), rot, scale)
        budget = max(budget - probe.max_displacement(), 0.0)
        mag = float(rng.uniform(0.3, 1.0)) * budget
        ang = float(rng.uniform(0, 2 * np.pi))
        shape = "ellipse" if rng.random() < 0.5 else "rect"
        sprites.append(SpriteMotion(center, half, (mag * math.cos(ang), mag * math.sin(ang)), rot, scale, shape))
    if spec.background_motion:
        mag = float(rng.uniform(0, 0.5)) * spec.max_disp
        ang = float(rng.uniform(0, 2 * np.pi))
        bg = (mag * math.cos(ang), mag * math.sin(ang))
    else:
        bg = (0.0, 0.0)
    return sprites, bg


def bilinear_sample(img, sx, sy):
    """Sample ``img`` (H, W[, C]) at float coordinates, clamping to the border."""
    H, W = img.shape[:2]
    sx = np.clip(sx, 0, W - 1)
    sy = np.clip(sy, 0, H - 1)
    if img.ndim == 2:
        return map_coordinates(img, [sy, sx], order=1, mode="nearest")
    return np.stack([map_coordinates(img[..., c], [sy, sx], order=1, mode="nearest") for c in range(img.shape[2])], -1)


def gen_scene(seed, height=64, width=64, motion_spec: MotionSpec | None = None, channels=1) -> SceneSample:
    """Render a day frame pair with exact flow and occlusion ground truth."""
    if height < 32 or width < 32:
        raise ValueError(f"scene must be at least 32x32, got {height}x{width}")
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    spec = motion_spec or MotionSpec()
    if spec.max_disp > width / 8:
        raise ValueError(f"max displacement {spec.max_disp} exceeds width/8 = {width / 8}")
    rng = np.random.default_rng(seed)

    if spec.sprites is None:
        sprites, bg_shift = _random_motion(rng, height, width, spec)
    else:
        sprites = list(spec.sprites)
        bg_shift = spec.background_translation or (0.0, 0.0)
    if spec.background_translation is not None:
        bg_shift = spec.background_translation
    for sp in sprites:
        if sp.max_displacement() > spec.max_disp + 1e-9:
            raise ValueError(f"sprite displacement {sp.max_displacement():.3f} exceeds bound {spec.max_disp}")
    if math.hypot(*bg_shift) > spec.max_disp + 1e-9:
        raise ValueError("background displacement exceeds bound")

    layers = [SpriteMotion((width / 2, height / 2), (np.inf, np.inf), tuple(bg_shift))] + sprites
    tints = [rng.uniform(0.8, 1.2, channels) if channels == 3 else np.ones(1) for _ in layers]
    textures = [_texture_params(rng) for _ in layers]

    py, px = np.mgrid[0:height, 0:width].astype(np.float64)

    # frame t+1, rendered analytically: topmost layer whose pre-image lies inside it
    top1 = np.zeros((height, width), dtype=np.int64)
    pre_x = [px - bg_shift[0]]
    pre_y = [py - bg_shift[1]]
    for k, sp in enumerate(sprites, start=1):
        A, b = sp.matrix()
        Ainv = np.linalg.inv(A)
        qx = Ainv[0, 0] * (px - b[0]) + Ainv[0, 1] * (py - b[1])
        qy = Ainv[1, 0] * (px - b[0]) + Ainv[1, 1] * (py - b[1])
        pre_x.append(qx)
        pre_y.append(qy)
        top1[_inside(sp.shape, sp.center, sp.half_size, qx, qy)] = k
    frame_t1 = np.zeros((height, width, channels))
    for k in range(len(layers)):
        sel = top1 == k
        val = _eval_texture(textures[k], pre_x[k][sel], pre_y[k][sel])
        frame_t1[sel] = np.clip(val[:, None] * tints[k][None, :], 0.0, 1.0)

    # frame t: visible layer and its forward displacement
    vis = np.zeros((height, width), dtype=np.int64)
    for k, sp in enumerate(sprites, start=1):
        vis[_inside(sp.shape, sp.center, sp.half_size, px, py)] = k
    flow = np.zeros((height, width, 2))
    flow[..., 0] = bg_shift[0]
    flow[..., 1] = bg_shift[1]
    for k, sp in enumerate(sprites, start=1):
        A, b = sp.matrix()
        sel = vis == k
        flow[sel, 0] = A[0, 0] * px[sel] + A[0, 1] * py[sel] + b[0] - px[sel]
        flow[sel, 1] = A[1, 0] * px[sel] + A[1, 1] * py[sel] + b[1] - py[sel]

    tx = px + flow[..., 0]
    ty = py + flow[..., 1]
    outside = (tx < 0) | (tx > width - 1) | (ty < 0) | (ty > height - 1)
    # forward-splat visibility: the target pixel must still show the same layer
    tgt = top1[np.clip(np.rint(ty), 0, height - 1).astype(int), np.clip(np.rint(tx), 0, width - 1).astype(int)]
    occ = outside | (tgt != vis)

    frame_t = bilinear_sample(frame_t1, tx, ty)
    for k in range(len(layers)):
        sel = occ & (vis == k)
        if sel.any():
            val = _eval_texture(textures[k], px[sel], py[sel])
            frame_t[sel] = np.clip(val[:, None] * tints[k][None, :], 0.0, 1.0)

    if channels == 1:
        frame_t, frame_t1 = frame_t[..., 0], frame_t1[..., 0]
    return SceneSample(frame_t=frame_t, frame_t1=frame_t1, gt_flow=flow, gt_occlusion=occ, seed=int(seed))


def illumination_field(shape, illum_spec: IllumSpec, rng):
    if illum_spec.constant is not None:
        c = illum_spec.constant
        if not 0 < c <= 1:
            raise ValueError(f"constant illumination must lie in (0, 1], got {c}")
        return np.full(shape, float(c))
    lo, hi = illum_spec.low, illum_spec.high
    if not (0 < lo <= hi <= 0.5):
        raise ValueError(f"illumination range must satisfy 0 < low <= high <= 0.5, got [{lo}, {hi}]")
    raw = gaussian_filter(rng.standard_normal(shape), illum_spec.blur_sigma, mode="reflect")
    span = raw.max() - raw.min()
    if span < 1e-12:
        return np.full(shape, (lo + hi) / 2)
    return lo + (hi - lo) * (raw - raw.min()) / span


def darken(image, illum_spec: IllumSpec | np.ndarray | None = None, noise_spec: NoiseSpec | None = None, seed=0):
    """Night rendering ``clip(image * L + n, 0, 1)`` with Gaussian ``n`` truncated at 3 sigma.

    ``illum_spec`` may also be a precomputed illumination map, which is how a
    frame pair shares the same ``L``.  Returns ``(night, L)``.
    """
    image = np.asarray(image, dtype=np.float64)
    noise_spec = noise_spec or NoiseSpec()
    if not 0 <= noise_spec.sigma <= 0.1:
        raise ValueError(f"noise sigma must lie in [0, 0.1], got {noise_spec.sigma}")
    rng = np.random.default_rng(seed)
    if isinstance(illum_spec, np.ndarray):
        L = np.asarray(illum_spec, dtype=np.float64)
        if L.shape != image.shape[:2]:
            raise ValueError(f"illumination shape {L.shape} does not match image {image.shape[:2]}")
        if not (np.all(L > 0) and np.all(L <= 1)):
            raise ValueError("illumination values must lie in (0, 1]")
    else:
        L = illumination_field(image.shape[:2], illum_spec or IllumSpec(), rng)
    Lb = L if image.ndim == 2 else L[..., None]
    night = image * Lb
    if noise_spec.sigma > 0:
        night = night + noise_spec.sigma * np.clip(rng.standard_normal(image.shape), -3.0, 3.0)
    return np.clip(night, 0.0, 1.0), L


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------


def _gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img.mean(-1) if img.ndim == 3 else img


def simulate_events(frames, timestamps, C=DEFAULT_C, substeps=10, eps=LOG_EPS) -> EventStream:
    """Integrate-and-fire events on linearly interpolated ``log(I + eps)``.

    Every pixel keeps a reference level initialised at the first frame.  An
    event fires each time the interpolated log intensity moves a full ``C``
    away from the reference; the reference then steps by ``C``.  Crossing
    times are exact for the piecewise-linear signal and rounded to whole
    nanoseconds.
    """
    if len(frames) < 2 or len(frames) != len(timestamps):
        raise ValueError("need at least two frames and one timestamp per frame")
    if not C > 0:
        raise ValueError(f"contrast threshold must be positive, got {C}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    logs = []
    for f in frames:
        g = _gray(f)
        if logs and g.shape != logs[0].shape:
            raise ValueError(f"frame size {g.shape} differs from {logs[0].shape}")
        logs.append(np.log(g + eps))
    ts = np.asarray(timestamps, dtype=np.float64)
    if np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    H, W = logs[0].shape

    ref = logs[0].copy()
    xs, ys, tt, ps = [], [], [], []
    for i in range(len(logs) - 1):
        for s in range(substeps):
            a0, a1 = s / substeps, (s + 1) / substeps
            La = logs[i] + a0 * (logs[i + 1] - logs[i])
            Lb = logs[i] + a1 * (logs[i + 1] - logs[i])
            ta = ts[i] + a0 * (ts[i + 1] - ts[i])
            tb = ts[i] + a1 * (ts[i + 1] - ts[i])
            slope = Lb - La
            for sign in (1, -1):
                n = np.floor(sign * (Lb - ref) / C).astype(np.int64)
                n = np.maximum(n, 0)
                if not n.any():
                    continue
                iy, ix = np.nonzero(n)
                counts = n[iy, ix]
                rep_y = np.repeat(iy, counts)
                rep_x = np.repeat(ix, counts)
                # k-th crossing level for each repeated pixel
                k = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + 1
                level = ref[rep_y, rep_x] + sign * k * C
                frac = (level - La[rep_y, rep_x]) / slope[rep_y, rep_x]
                xs.append(rep_x)
                ys.append(rep_y)
                tt.append(ta + np.clip(frac, 0.0, 1.0) * (tb - ta))
                ps.append(np.full(len(rep_x), sign))
                ref = ref + sign * n * C

    if tt:
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        t = np.round(np.concatenate(tt) * 1e9) / 1e9
        p = np.concatenate(ps)
        order = np.argsort(t, kind="stable")
        x, y, t, p = x[order], y[order], t[order], p[order]
    else:
        x = y = t = p = np.zeros(0)
    return EventStream(x, y, t, p, (H, W), C, float(ts[0]), float(ts[-1]))


def accumulate_events(events: EventStream, t0, t1):
    """Signed per-pixel sum ``C * sum(p)`` over events with ``t0 <= t < t1``."""
    if not t0 < t1:
        raise ValueError(f"window must satisfy t0 < t1, got [{t0}, {t1})")
    H, W = events.sensor_size
    out = np.zeros((H, W))
    sel = (events.t >= t0) & (events.t < t1)
    np.add.at(out, (events.y[sel], events.x[sel]), events.p[sel].astype(np.float64))
    return out * events.C


def accumulate_full(events: EventStream):
    """:func:`accumulate_events` over the whole simulated window, end inclusive."""
    return accumulate_events(events, events.t_start, np.nextafter(events.t_end, np.inf))


def event_slices(events: EventStream, n_bins=5, t0=None, t1=None):
    """Split the window into ``n_bins`` equal sub-windows of (positive, negative) counts.

    Returns a list of ``(2, H, W)`` float arrays.
    """
    t0 = events.t_start if t0 is None else t0
    t1 = events.t_end if t1 is None else t1
    if not t0 < t1:
        raise ValueError("empty event window")
    H, W = events.sensor_size
    out = np.zeros((n_bins, 2, H, W))
    sel = (events.t >= t0) & (events.t <= t1)
    b = np.minimum(((events.t[sel] - t0) / (t1 - t0) * n_bins).astype(np.int64), n_bins - 1)
    ch = (events.p[sel] < 0).astype(np.int64)
    np.add.at(out, (b, ch, events.y[sel], events.x[sel]), 1.0)
    return list(out)


# ---------------------------------------------------------------------------
# full samples
# ---------------------------------------------------------------------------


@dataclass
class SampleConfig:
    height: int = 32
    width: int = 32
    channels: int = 1
    motion: MotionSpec = field(default_factory=MotionSpec)
    illum: IllumSpec = field(default_factory=IllumSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    C: float = DEFAULT_C
    substeps: int = 10
    frame_interval: float = DEFAULT_FRAME_INTERVAL


def make_sample(seed, cfg: SampleConfig | None = None) -> SceneSample:
    """Day pair, night pair sharing one illumination map, and night events.

    Events are simulated from the noise-free night frames: the event sensor's
    own noise is out of scope.
    """
    cfg = cfg or SampleConfig()
    if cfg.motion.max_disp > cfg.width / 8:
        cfg = replace(cfg, motion=replace(cfg.motion, max_disp=cfg.width / 8))
    s = gen_scene(seed, cfg.height, cfg.width, cfg.motion, cfg.channels)
    rng = np.random.default_rng([seed, 1])
    L = illumination_field(s.shape, cfg.illum, rng)
    s.night_t, _ = darken(s.frame_t, L, cfg.noise, seed=int(rng.integers(2**31)))
    s.night_t1, _ = darken(s.frame_t1, L, cfg.noise, seed=int(rng.integers(2**31)))
    s.gt_illumination = L
    Lb = L if s.frame_t.ndim == 2 else L[..., None]
    s.events = simulate_events([s.frame_t * Lb, s.frame_t1 * Lb], [0.0, cfg.frame_interval], cfg.C, cfg.substeps)
    return s


def generate_dataset(n, seed=0, cfg: SampleConfig | None = None):
    """``n`` canonical samples with seeds ``seed, seed + 1, ...``."""
    return [quantize_sample(make_sample(seed + i, cfg)) for i in range(n)]


def quantize_sample(s: SceneSample) -> SceneSample:
    """Round every field to its on-disk precision so dataset IO is lossless."""

    def q16(a):
        return None if a is None else np.round(np.clip(a, 0, 1) * 65535.0) / 65535.0

    def f32(a):
        return None if a is None else np.asarray(a, dtype=np.float32).astype(np.float64)

    ev = s.events
    if ev is not None:
        ev = replace(ev, t=np.round(ev.t * 1e9) / 1e9)
    return SceneSample(
        frame_t=q16(s.frame_t),
        frame_t1=q16(s.frame_t1),
        gt_flow=f32(s.gt_flow),
        gt_occlusion=np.asarray(s.gt_occlusion, dtype=bool),
        night_t=q16(s.night_t),
        night_t1=q16(s.night_t1),
        gt_illumination=f32(s.gt_illumination),
        events=ev,
        seed=s.seed,
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_flo(path, flow):
    flow = np.asarray(flow, dtype=np.float32)
    H, W = flow.shape[:2]
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([W, H], dtype="<i4").tofile(f)
        flow.astype("<f4").tofile(f)


def read_flo(path):
    path = Path(path)
    try:
        with open(path, "rb") as f:
            magic = np.fromfile(f, "<f4", 1)
            if magic.size != 1 or magic[0] != FLO_MAGIC:
                raise DatasetError(f"{path}: bad .flo magic number")
            dims = np.fromfile(f, "<i4", 2)
            if dims.size != 2:
                raise DatasetError(f"{path}: truncated .flo header")
            W, H = int(dims[0]), int(dims[1])
            data = np.fromfile(f, "<f4", 2 * W * H)
    except FileNotFoundError as e:
        raise DatasetError(f"{path}: missing file") from e
    if data.size != 2 * W * H:
        raise DatasetError(f"{path}: truncated .flo payload")
    return data.reshape(H, W, 2).astype(np.float64)


def write_png16(path, img):
    arr = np.round(np.clip(img, 0, 1) * 65535.0).astype(np.uint16)
    if arr.ndim == 3:
        arr = arr[..., ::-1]
    if not cv2.imwrite(str(path), arr):
        raise DatasetError(f"{path}: could not write PNG")


def read_png(path):
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise DatasetError(f"{path}: missing or unreadable PNG")
    if arr.ndim == 3:
        arr = arr[..., ::-1]
    return arr


def read_png16(path):
    arr = read_png(path)
    if arr.dtype != np.uint16:
        raise DatasetError(f"{path}: expected 16-bit PNG, got {arr.dtype}")
    return arr.astype(np.float64) / 65535.0


def write_float_map(path, arr):
    arr = np.asarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        np.array(arr.shape, dtype="<i4").tofile(f)
        arr.tofile(f)


def read_float_map(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise DatasetError(f"{path}: missing file") from e
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated header")
    H, W = np.frombuffer(raw[:8], "<i4")
    body = np.frombuffer(raw[8:], "<f4")
    if body.size != H * W:
        raise DatasetError(f"{path}: expected {H}x{W} floats, found {body.size}")
    return body.reshape(H, W).astype(np.float64)


def write_events_csv(path, ev: EventStream):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "x", "y", "p"])
        for t, x, y, p in zip(ev.t, ev.x, ev.y, ev.p):
            w.writerow([f"{t:.9f}", int(x), int(y), int(p)])


def read_events_csv(path, sensor_size, C, t_start, t_end):
    path = Path(path)
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError as e:
        raise DatasetError(f"{path}: missing file") from e
    if not rows or rows[0] != ["t", "x", "y", "p"]:
        raise DatasetError(f"{path}: missing t,x,y,p header")
    try:
        body = rows[1:]
        t = np.array([float(r[0]) for r in body])
        x = np.array([int(r[1]) for r in body])
        y = np.array([int(r[2]) for r in body])
        p = np.array([int(r[3]) for r in body])
    except (ValueError, IndexError) as e:
        raise DatasetError(f"{path}: malformed row ({e})") from e
    ev = EventStream(x, y, t, p, sensor_size, C, t_start, t_end)
    try:
        ev.validate()
    except ValueError as e:
        raise DatasetError(f"{path}: {e}") from e
    return ev


def write_dataset(samples, directory):
    """Write samples in the on-disk layout; arrays are stored at file precision."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    C = None
    for i, s in enumerate(samples):
        sid = f"{i:06d}"
        d = directory / sid
        d.mkdir(exist_ok=True)
        write_png16(d / "frame_t.png", s.frame_t)
        write_png16(d / "frame_t1.png", s.frame_t1)
        if s.night_t is not None:
            write_png16(d / "night_t.png", s.night_t)
            write_png16(d / "night_t1.png", s.night_t1)
        write_flo(d / "flow.flo", s.gt_flow)
        cv2.imwrite(str(d / "occ.png"), np.where(s.gt_occlusion, 255, 0).astype(np.uint8))
        if s.gt_illumination is not None:
            write_float_map(d / "illum.bin", s.gt_illumination)
        entry = {
            "id": sid,
            "seed": int(s.seed),
            "height": int(s.shape[0]),
            "width": int(s.shape[1]),
            "channels": 1 if s.frame_t.ndim == 2 else int(s.frame_t.shape[2]),
        }
        if s.events is not None:
            write_events_csv(d / "events.csv", s.events)
            entry.update(C=s.events.C, t_start=s.events.t_start, t_end=s.events.t_end)
            C = s.events.C
        entries.append(entry)
    index = {"version": INDEX_VERSION, "C": C, "count": len(entries), "samples": entries}
    (directory / "index.json").write_text(json.dumps(index, indent=2))
    return directory


def read_index(directory):
    path = Path(directory) / "index.json"
    try:
        index = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise DatasetError(f"{path}: missing file") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: corrupt index ({e})") from e
    if index.get("version") != INDEX_VERSION or "samples" not in index:
        raise DatasetError(f"{path}: unsupported index version {index.get('version')}")
    return index


def read_sample(directory, entry):
    d = Path(directory) / entry["id"]
    H, W = entry["height"], entry["width"]
    s = SceneSample(
        frame_t=read_png16(d / "frame_t.png"),
        frame_t1=read_png16(d / "frame_t1.png"),
        gt_flow=read_flo(d / "flow.flo"),
        gt_occlusion=read_png(d / "occ.png") > 127,
        seed=entry["seed"],
    )
    if (d / "night_t.png").exists():
        s.night_t = read_png16(d / "night_t.png")
        s.night_t1 = read_png16(d / "night_t1.png")
    if (d / "illum.bin").exists():
        s.gt_illumination = read_float_map(d / "illum.bin")
    if "C" in entry:
        s.events = read_events_csv(d / "events.csv", (H, W), entry["C"], entry["t_start"], entry["t_end"])
    if s.frame_t.shape[:2] != (H, W):
        raise DatasetError(f"{d}: frame size {s.frame_t.shape[:2]} does not match index {(H, W)}")
    return s


def read_dataset(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory}: dataset directory does not exist")
    index = read_index(directory)
    return [read_sample(directory, e) for e in index["samples"]]
