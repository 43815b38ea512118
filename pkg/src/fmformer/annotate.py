"""Labeling helpers: keyframe box propagation, box rasterization, guided weighted-median refinement, PGM I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

ROLES = ("onset", "apex", "offset")

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Keyframe:
    """Annotated frame; the box is (x0, y0, x1, y1) with inclusive pixel coordinates."""

    frame: int
    role: str
    box: Box

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown keyframe role {self.role!r}")
        x0, y0, x1, y1 = self.box
        if x0 > x1 or y0 > y1:
            raise ValueError(f"degenerate box {self.box} at frame {self.frame}")
        if min(self.box) < 0 or self.frame < 0:
            raise ValueError(f"negative coordinate in keyframe at frame {self.frame}")

    def check_bounds(self, height: int, width: int) -> None:
        x0, y0, x1, y1 = self.box
        if x1 >= width or y1 >= height:
            raise ValueError(f"box {self.box} at frame {self.frame} leaves the {height}x{width} frame")


def parse_keyframes(text: str) -> list[Keyframe]:
    """Parse lines ``frame_idx role x0 y0 x1 y1``; blank lines and ``#`` comments are skipped."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"line {lineno}: expected 'frame_idx role x0 y0 x1 y1', got {line!r}")
        try:
            frame = int(parts[0])
            coords = tuple(float(v) for v in parts[2:])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        try:
            out.append(Keyframe(frame, parts[1], coords))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def read_keyframes(path: str | Path) -> list[Keyframe]:
    return parse_keyframes(Path(path).read_text())


def propagate(keyframes: list[Keyframe], num_frames: int) -> list[Box | None]:
    """Per-frame boxes, each coordinate linear between consecutive keyframes.

    Frames before the first or after the last keyframe get ``None``.
    """
    if len(keyframes) < 2:
        raise ValueError("need at least two keyframes")
    idx = [k.frame for k in keyframes]
    if len(set(idx)) != len(idx):
        raise ValueError(f"duplicate keyframe indices in {idx}")
    if idx != sorted(idx):
        raise ValueError(f"keyframes must be ordered by frame index, got {idx}")
    boxes: list[Box | None] = [None] * num_frames
    for a, b in zip(keyframes, keyframes[1:]):
        pa, pb = np.asarray(a.box, dtype=np.float64), np.asarray(b.box, dtype=np.float64)
        span = b.frame - a.frame
        for t in range(max(a.frame, 0), min(b.frame, num_frames - 1) + 1):
            if t == a.frame:
                boxes[t] = a.box
            elif t == b.frame:
                boxes[t] = b.box
            else:
                f = (t - a.frame) / span
                boxes[t] = tuple(float(v) for v in pa + f * (pb - pa))
    return boxes


def rasterize(box: Box | None, height: int, width: int) -> np.ndarray:
    """Filled rectangle (coordinates rounded to the nearest pixel, inclusive) as a uint8 0/1 mask."""
    mask = np.zeros((height, width), dtype=np.uint8)
    if box is None:
        return mask
    x0, y0, x1, y1 = (int(np.rint(v)) for v in box)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, width - 1), min(y1, height - 1)
    if x0 <= x1 and y0 <= y1:
        mask[y0:y1 + 1, x0:x1 + 1] = 1
    return mask


def refine(mask: np.ndarray, guidance: np.ndarray, radius: int = 7, sigma: float = 0.1) -> np.ndarray:
    """Weighted median of binary labels with Gaussian color-affinity weights.

    A pixel becomes anomalous iff the summed weight of anomalous neighbours in
    its (2r+1)² window exceeds that of normal ones; weights are
    exp(-|g(q) - g(p)|² / 2σ²) against the centre pixel p of the guidance
    image. Windows are clipped at the border. Radius 0 returns the mask.
    """
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary (0/1)")
    g = np.asarray(guidance, dtype=np.float64)
    if g.ndim == 2:
        g = g[..., None]
    if g.shape[:2] != mask.shape:
        raise ValueError(f"guidance extents {g.shape[:2]} differ from mask {mask.shape}")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if radius == 0:
        return mask.astype(np.uint8).copy()
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = mask.shape
    r = radius
    m = np.pad(mask.astype(np.float64), r)
    gp = np.pad(g, ((r, r), (r, r), (0, 0)))
    valid = np.pad(np.ones((h, w)), r)
    pos = np.zeros((h, w))
    neg = np.zeros((h, w))
    inv = 1.0 / (2.0 * sigma * sigma)
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            gq = gp[dy:dy + h, dx:dx + w]
            wgt = np.exp(-np.sum((gq - g) ** 2, axis=-1) * inv) * valid[dy:dy + h, dx:dx + w]
            mq = m[dy:dy + h, dx:dx + w]
            pos += wgt * mq
            neg += wgt * (1.0 - mq)
    return (pos > neg).astype(np.uint8)


def annotate_frames(keyframes: list[Keyframe], frames: np.ndarray, radius: int = 7,
                    sigma: float = 0.1) -> np.ndarray:
    """Keyframes + frames (T×H×W or T×H×W×C, values in [0, 1]) -> refined T×H×W masks."""
    t, h, w = frames.shape[:3]
    for k in keyframes:
        k.check_bounds(h, w)
    boxes = propagate(keyframes, t)
    out = np.zeros((t, h, w), dtype=np.uint8)
    for i, box in enumerate(boxes):
        if box is not None:
            out[i] = refine(rasterize(box, h, w), frames[i], radius, sigma)
    return out


# ---------------------------------------------------------------------------
# PGM (binary P5)
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, image: np.ndarray, maxval: int = 255) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + np.clip(img, 0, maxval).astype(np.uint8).tobytes())


def write_mask_pgm(path: str | Path, mask: np.ndarray) -> None:
    """Binary mask -> P5 with anomaly = 255."""
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = (int(v) for v in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos).reshape(height, width).copy()


def overlay(frame: np.ndarray, mask: np.ndarray, maxval: int = 255) -> np.ndarray:
    """Grayscale rendering of a [0, 1] frame with mask pixels set to ``maxval``."""
    f = np.asarray(frame, dtype=np.float64)
    gray = f.mean(axis=-1) if f.ndim == 3 else f
    out = np.clip(gray * (maxval - 1), 0, maxval - 1).astype(np.uint8)
    out[np.asarray(mask) > 0] = maxval
    return out
