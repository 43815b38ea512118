"""Deterministic synthetic furnace-process data and the FMFB container format.

A scene is a furnace shell (smooth textured background with flame flicker).
An anomaly is a drifting Gaussian hotspot whose amplitude ramps up from the
onset frame to the apex frame and back down to the offset frame. The three
phase currents sag and get noisier over the same interval. Water-mist haze
blends a bright low-frequency field over the video and never touches the
current.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

NOMINAL_RATE = 25  # samples per second
FMFB_MAGIC = b"FMFB"
FMFB_VERSION = 1
SPLIT_CODES = {"train": 0, "test": 1, "val": 2}
HALF_MAX_FACTOR = math.sqrt(2.0 * math.log(2.0))  # half-max radius / sigma


@dataclass
class Scenario:
    seed: int
    frames: int = 8
    height: int = 64
    width: int = 64
    current_len: int = 64
    current_rate: float | None = None  # current samples per video frame
    anomaly: bool = False
    onset: int = 0
    apex: int = 0
    offset: int = 0
    center: tuple[float, float] = (32.0, 32.0)
    drift: tuple[float, float] = (0.0, 0.0)  # pixels per frame (row, col)
    peak: float = 0.5
    radius: float = 4.0
    current_amplitude: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise: float = 0.02
    current_noise: float = 0.1
    current_period: float = 8.0
    current_drift: float = 0.45
    current_extra_noise: float = 1.0
    haze: bool = False
    haze_strength: float = 0.95
    flicker: float = 0.08

    def __post_init__(self):
        if self.anomaly and not (self.onset < self.apex < self.offset):
            raise ValueError(f"need onset < apex < offset, got {self.onset}, {self.apex}, {self.offset}")
        if min(self.frames, self.height, self.width, self.current_len) <= 0:
            raise ValueError("extents must be positive")

    @property
    def rate(self) -> float:
        return self.current_rate or self.current_len / self.frames


@dataclass
class SampleTriple:
    video: np.ndarray  # T×H×W×3 float32
    current: np.ndarray  # T_c×3 float32
    mask: np.ndarray | None  # H×W uint8 for the final frame
    label: int = 0
    hazed: bool = False


def ramp(t, s: Scenario):
    """Anomaly amplitude factor in (0, 1] on [onset, offset], 0 elsewhere."""
    t = np.asarray(t, dtype=np.float64)
    if not s.anomaly:
        return np.zeros_like(t)
    up = (t - s.onset + 1.0) / (s.apex - s.onset + 1.0)
    down = (s.offset - t + 1.0) / (s.offset - s.apex + 1.0)
    r = np.where(t <= s.apex, up, down)
    return np.where((t >= s.onset) & (t <= s.offset), r, 0.0)


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int = 4) -> np.ndarray:
    from .tensor import interp_matrix

    coarse = rng.random((cells, cells))
    rh = interp_matrix(cells, h, np.float64)
    rw = interp_matrix(cells, w, np.float64)
    return rh @ coarse @ rw.T


def blob_profile(s: Scenario, t: int) -> np.ndarray:
    """Unit-peak Gaussian hotspot at frame ``t`` (H×W)."""
    rows = np.arange(s.height)[:, None]
    cols = np.arange(s.width)[None, :]
    cy = s.center[0] + s.drift[0] * t
    cx = s.center[1] + s.drift[1] * t
    d2 = (rows - cy) ** 2 + (cols - cx) ** 2
    return np.exp(-d2 / (2.0 * s.radius ** 2))


def anomaly_mask(s: Scenario, t: int) -> np.ndarray:
    """Pixels where the hotspot is at least half its peak; empty outside the episode."""
    if float(ramp(t, s)) <= 0.0:
        return np.zeros((s.height, s.width), dtype=np.uint8)
    return (blob_profile(s, t) >= 0.5).astype(np.uint8)


def generate(s: Scenario) -> SampleTriple:
    """Render one (video, current, mask) triple; a pure function of the scenario."""
    rng = np.random.default_rng(s.seed)
    h, w, frames = s.height, s.width, s.frames
    base_color = np.array([0.55, 0.35, 0.22]) + rng.normal(0, 0.03, 3)
    texture = 0.6 + 0.4 * _smooth_field(rng, h, w)
    background = texture[..., None] * base_color
    phase = rng.uniform(0, 2 * np.pi)
    hot = np.array([1.0, 0.85, 0.6])

    video = np.empty((frames, h, w, 3))
    for t in range(frames):
        flick = 1.0 + s.flicker * np.sin(0.9 * t + phase) + rng.normal(0, s.flicker / 4)
        frame = background * flick
        amp = float(ramp(t, s))
        if amp > 0:
            frame = frame + (s.peak * amp) * blob_profile(s, t)[..., None] * hot
        video[t] = frame + rng.normal(0, s.noise, (h, w, 3))
    if s.haze:
        # own stream, so hazing a scenario leaves its current and mask untouched
        hrng = np.random.default_rng([s.seed, 1])
        mist = 0.85 + 0.1 * _smooth_field(hrng, h, w, cells=6)
        for t in range(frames):
            drift_mist = mist + 0.05 * _smooth_field(hrng, h, w, cells=8)
            video[t] = (1.0 - s.haze_strength) * video[t] + s.haze_strength * drift_mist[..., None]
            video[t] += hrng.normal(0, s.noise, (h, w, 3))
    video = np.clip(video, 0.0, 1.0)

    j = np.arange(s.current_len)
    tau = (frames - 1) - (s.current_len - 1 - j) / s.rate
    r = ramp(tau, s)
    shifts = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    wave = np.sin(2 * np.pi * j[:, None] / s.current_period + phase + shifts[None, :])
    amp = np.asarray(s.current_amplitude)[None, :] * (1.0 - s.current_drift * r)[:, None]
    sigma = s.current_noise * (1.0 + s.current_extra_noise * r)[:, None]
    current = amp * wave + sigma * rng.normal(0, 1, (s.current_len, 3))

    mask = anomaly_mask(s, frames - 1)
    return SampleTriple(video.astype(np.float32), current.astype(np.float32), mask,
                        aggregate_class(mask), s.haze)


def aggregate_class(mask: np.ndarray, tau: float = 0.5) -> int:
    return int(np.count_nonzero(mask) > tau)


# ---------------------------------------------------------------------------
# scenario sampling and datasets
# ---------------------------------------------------------------------------

@dataclass
class Corruption:
    """Haze applied with probability ``prob`` to samples of ``target`` ('abnormal' or 'all')."""

    prob: float = 0.0
    target: str = "abnormal"
    strength: float = 0.95

    def __post_init__(self):
        if self.target not in ("abnormal", "all"):
            raise ValueError("corruption target must be 'abnormal' or 'all'")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("corruption probability must lie in [0, 1]")


@dataclass
class DataConfig:
    frames: int = 8
    height: int = 64
    width: int = 64
    current_len: int = 64
    current_rate: float | None = None


def sample_scenario(seed: int, anomaly: bool, hazed: bool, cfg: DataConfig, haze_strength: float = 0.95) -> Scenario:
    rng = np.random.default_rng(seed)
    h, w, frames = cfg.height, cfg.width, cfg.frames
    side = min(h, w)
    kwargs = dict(
        seed=int(rng.integers(2 ** 63)), frames=frames, height=h, width=w,
        current_len=cfg.current_len, current_rate=cfg.current_rate,
        current_amplitude=tuple(float(a) for a in rng.uniform(0.9, 1.1, 3)),
        current_period=float(rng.uniform(6.0, 10.0)),
        haze=hazed, haze_strength=haze_strength,
    )
    if anomaly:
        last = frames - 1
        while True:
            apex = last + int(rng.integers(-frames, frames + 1))
            onset = apex - int(rng.integers(2, 3 * frames + 1))
            offset = apex + int(rng.integers(2, 3 * frames + 1))
            s = Scenario(anomaly=True, onset=onset, apex=apex, offset=offset, **kwargs)
            if ramp(last, s) >= 0.5:
                break
        radius = float(rng.uniform(0.09, 0.15) * side)
        margin = radius * 2.0
        end = np.array([rng.uniform(margin, h - margin), rng.uniform(margin, w - margin)])
        drift = rng.normal(0, 0.15 * side / frames, 2)
        start = end - drift * last
        return dataclasses.replace(s, center=(float(start[0]), float(start[1])),
                                   drift=(float(drift[0]), float(drift[1])),
                                   peak=float(rng.uniform(0.35, 0.6)), radius=radius)
    return Scenario(**kwargs)


def sample_seed(seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, SPLIT_CODES.get(split, 99), index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class Dataset:
    videos: np.ndarray  # N×T×H×W×3
    currents: np.ndarray  # N×T_c×3
    masks: np.ndarray  # N×H×W uint8
    labels: np.ndarray  # N
    hazed: np.ndarray = None  # N bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.hazed is None:
            self.hazed = np.zeros(len(self.labels), dtype=bool)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.videos[idx], self.currents[idx], self.masks[idx], self.labels[idx], self.hazed[idx],
                       dict(self.meta))

    def stats(self) -> dict[str, int]:
        lab = self.labels.astype(bool)
        return {
            "total": int(len(lab)),
            "normal": int(np.sum(~lab)),
            "abnormal": int(np.sum(lab)),
            "hazed_normal": int(np.sum(self.hazed & ~lab)),
            "hazed_abnormal": int(np.sum(self.hazed & lab)),
        }

    @classmethod
    def from_samples(cls, samples: list[SampleTriple], meta: dict | None = None) -> "Dataset":
        return cls(np.stack([s.video for s in samples]), np.stack([s.current for s in samples]),
                   np.stack([s.mask for s in samples]).astype(np.uint8),
                   np.array([s.label for s in samples], dtype=np.int64),
                   np.array([s.hazed for s in samples], dtype=bool), meta or {})


def _render(args) -> SampleTriple:
    seed, anomaly, hazed, cfg, strength = args
    return generate(sample_scenario(seed, anomaly, hazed, cfg, strength))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FMF_THREADS", "1")))
    except ValueError:
        return 1


def make_dataset(n: int, balance: float = 0.5, corruption: Corruption | None = None, seed: int = 0,
                 split: str = "train", data: DataConfig | None = None) -> Dataset:
    """Balanced synthetic set; per-sample seeds derive from (seed, split, index)."""
    if n < 2:
        raise ValueError("need at least 2 samples")
    corruption = corruption or Corruption()
    data = data or DataConfig()
    rng = np.random.default_rng(sample_seed(seed, split, 2 ** 32 - 1))
    n_abn = int(round(n * balance))
    labels = np.array([1] * n_abn + [0] * (n - n_abn))
    rng.shuffle(labels)
    jobs = []
    for i, lab in enumerate(labels):
        eligible = corruption.target == "all" or lab == 1
        hazed = bool(eligible and rng.random() < corruption.prob)
        jobs.append((sample_seed(seed, split, i), bool(lab), hazed, data, corruption.strength))
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            samples = list(pool.map(_render, jobs, chunksize=8))
    else:
        samples = [_render(j) for j in jobs]
    meta = {"seed": seed, "split": split, "n": n, "balance": balance,
            "corruption": dataclasses.asdict(corruption), "data": dataclasses.asdict(data),
            "nominal_rate": NOMINAL_RATE}
    return Dataset.from_samples(samples, meta)


# ---------------------------------------------------------------------------
# FMFB container
# ---------------------------------------------------------------------------

def write_fmfb(path: str | Path, ds: Dataset) -> None:
    """Write the container plus a JSON sidecar holding config and statistics."""
    path = Path(path)
    chunks = [FMFB_MAGIC, struct.pack("<II", FMFB_VERSION, len(ds))]
    for i in range(len(ds)):
        v = ds.videos[i]
        t, h, w, _ = v.shape
        chunks.append(struct.pack("<III", t, h, w))
        chunks.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
        c = ds.currents[i]
        chunks.append(struct.pack("<I", c.shape[0]))
        chunks.append(np.ascontiguousarray(c, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(ds.masks[i], dtype=np.uint8).tobytes())
        chunks.append(struct.pack("<B", int(ds.labels[i])))
    path.write_bytes(b"".join(chunks))
    side = {"config": ds.meta, "stats": ds.stats(), "hazed": [bool(x) for x in ds.hazed]}
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True))


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def read_fmfb(path: str | Path) -> Dataset:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != FMFB_MAGIC:
        raise ValueError(f"{path}: not an FMFB container")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FMFB_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    videos, currents, masks, labels = [], [], [], []
    for _ in range(count):
        t, h, w = struct.unpack_from("<III", buf, off)
        off += 12
        n = t * h * w * 3
        videos.append(np.frombuffer(buf, "<f4", n, off).reshape(t, h, w, 3))
        off += 4 * n
        (tc,) = struct.unpack_from("<I", buf, off)
        off += 4
        currents.append(np.frombuffer(buf, "<f4", tc * 3, off).reshape(tc, 3))
        off += 12 * tc
        masks.append(np.frombuffer(buf, np.uint8, h * w, off).reshape(h, w))
        off += h * w
        labels.append(buf[off])
        off += 1
    meta, hazed = {}, None
    side = sidecar_path(path)
    if side.exists():
        info = json.loads(side.read_text())
        meta = info.get("config", {})
        hazed = np.array(info.get("hazed", [False] * count), dtype=bool)
    return Dataset(np.stack(videos).astype(np.float32), np.stack(currents).astype(np.float32),
                   np.stack(masks).copy(), np.array(labels, dtype=np.int64), hazed, meta)


# ---------------------------------------------------------------------------
# raw tensor ingestion
# ---------------------------------------------------------------------------

def ingest_raw(video_path: str | Path, video_extents: tuple[int, int, int], current_path: str | Path,
               crop: tuple[int, int, int, int] | None = None,
               video_stats: tuple[np.ndarray, np.ndarray] | None = None,
               current_stats: tuple[np.ndarray, np.ndarray] | None = None,
               window: tuple[int, int] | None = None, stride: int | None = None,
               pixel_max: float = 255.0, mask_path: str | Path | None = None) -> Iterator[SampleTriple]:
    """Stream (video, current, mask) windows from raw little-endian float32 tensors.

    ``video_path`` holds T×H×W×3 values, ``current_path`` T_c×3 values. ``crop``
    is (top, left, bottom, right), bottom/right exclusive. Pixels are scaled to
    [0, 1] then standardised per channel; currents are z-scored per phase with
    the supplied (training-set) statistics. ``window`` = (frames, current
    samples) cuts aligned windows whose final frame and final current sample
    coincide; by default the whole recording is one sample. An optional
    ``mask_path`` holds T×H×W uint8 labels.
    """
    t_all, h, w = video_extents
    raw_v = np.fromfile(video_path, dtype="<f4")
    if raw_v.size != t_all * h * w * 3:
        raise ValueError(f"video file has {raw_v.size} values, extents {video_extents} need {t_all * h * w * 3}")
    video = raw_v.reshape(t_all, h, w, 3)
    raw_c = np.fromfile(current_path, dtype="<f4")
    if raw_c.size % 3:
        raise ValueError("current file size is not a multiple of 3 phases")
    current = raw_c.reshape(-1, 3).astype(np.float64)
    masks = None
    if mask_path is not None:
        masks = np.fromfile(mask_path, dtype=np.uint8)
        if masks.size != t_all * h * w:
            raise ValueError("mask file does not match video extents")
        masks = masks.reshape(t_all, h, w)

    top, left, bottom, right = crop or (0, 0, h, w)
    if not (0 <= top < bottom <= h and 0 <= left < right <= w):
        raise ValueError(f"crop {crop} outside a {h}x{w} frame")
    video = video[:, top:bottom, left:right].astype(np.float64) / pixel_max
    if video_stats is not None:
        mu, sd = (np.asarray(a, dtype=np.float64) for a in video_stats)
        video = (video - mu) / sd
    if current_stats is not None:
        mu, sd = (np.asarray(a, dtype=np.float64) for a in current_stats)
        current = (current - mu) / sd
    if masks is not None:
        masks = masks[:, top:bottom, left:right]

    frames, clen = window or (t_all, current.shape[0])
    rate = current.shape[0] / t_all
    step = stride or frames
    for end in range(frames - 1, t_all, step):
        c_end = int(round((end + 1) * rate))
        if c_end - clen < 0 or end - frames + 1 < 0:
            continue
        m = None if masks is None else (masks[end] > 0).astype(np.uint8)
        yield SampleTriple(video[end - frames + 1:end + 1].astype(np.float32),
                           current[c_end - clen:c_end].astype(np.float32), m,
                           0 if m is None else aggregate_class(m))
