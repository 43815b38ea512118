"""Video and current tokenization with dilated multiscale patches.

Video tokens are laid out as::

    row 0                      class token
    rows 1 .. n_dil            dilated patches, (t, h, w) row-major
    rows n_dil+1 .. N_v-1      standard patches, (t, h, w) row-major

Dilated and standard patches go through the same linear map. Current tokens
are the class token followed by one token per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Module, Parameter, normal
from .tensor import Tensor


class InputTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGeometry:
    t_v: int = 2
    h_v: int = 8
    w_v: int = 8
    dilation: int = 2

    @property
    def footprint_h(self) -> int:
        return (self.h_v - 1) * self.dilation + 1

    @property
    def footprint_w(self) -> int:
        return (self.w_v - 1) * self.dilation + 1

    @property
    def patch_dim(self) -> int:
        return self.t_v * self.h_v * self.w_v * 3


@dataclass(frozen=True)
class Grid:
    """Token counts of one video geometry."""

    n_t: int
    n_h: int
    n_w: int
    n_hd: int
    n_wd: int
    dilated: bool = True

    @property
    def n_dilated(self) -> int:
        return self.n_t * self.n_hd * self.n_wd if self.dilated else 0

    @property
    def n_standard(self) -> int:
        return self.n_t * self.n_h * self.n_w

    @property
    def n_tokens(self) -> int:
        return self.n_dilated + self.n_standard + 1

    @property
    def dilated_rows(self) -> slice:
        return slice(1, 1 + self.n_dilated)

    @property
    def standard_rows(self) -> slice:
        return slice(1 + self.n_dilated, self.n_tokens)


def compute_grid(frames: int, height: int, width: int, geometry: PatchGeometry, dilated: bool = True) -> Grid:
    if min(frames, height, width) <= 0:
        raise ValueError(f"video extents must be positive, got {(frames, height, width)}")
    g = geometry
    n_t = frames // g.t_v
    n_h = height // g.h_v
    n_w = width // g.w_v
    n_hd = height // g.footprint_h
    n_wd = width // g.footprint_w
    counts = [n_t, n_h, n_w] + ([n_hd, n_wd] if dilated else [])
    if min(counts) < 1:
        raise InputTooSmallError(
            f"input {frames}x{height}x{width} too small for patch {g.t_v}x{g.h_v}x{g.w_v} dilation {g.dilation}")
    return Grid(n_t, n_h, n_w, n_hd if dilated else 0, n_wd if dilated else 0, dilated)


def extract_patch(x_v: np.ndarray, t0: int, h0: int, w0: int, geometry: PatchGeometry, dilation: int = 1) -> np.ndarray:
    """One flattened patch with its origin at (t0, h0, w0); spatial stride ``dilation``.

    Elements are flattened in (t, h, w, channel) order.
    """
    g = geometry
    foot_h = (g.h_v - 1) * dilation + 1
    foot_w = (g.w_v - 1) * dilation + 1
    frames, height, width, _ = x_v.shape
    if t0 < 0 or h0 < 0 or w0 < 0 or t0 + g.t_v > frames or h0 + foot_h > height or w0 + foot_w > width:
        raise ValueError(f"patch footprint at ({t0},{h0},{w0}) overflows a {frames}x{height}x{width} clip")
    block = x_v[t0:t0 + g.t_v, h0:h0 + foot_h:dilation, w0:w0 + foot_w:dilation, :]
    return block.reshape(-1)


def extract_dilated_patch(x_v: np.ndarray, t0: int, h0: int, w0: int, geometry: PatchGeometry) -> np.ndarray:
    return extract_patch(x_v, t0, h0, w0, geometry, geometry.dilation)


def patchify(x_v: np.ndarray, geometry: PatchGeometry, grid: Grid) -> np.ndarray:
    """Flattened patches of a batch of clips, B×T×H×W×3 -> B×N_patch×patch_dim.

    Dilated patches (if enabled) come first, then standard ones; each segment
    in (t, h, w) row-major order. Leftover border pixels are dropped.
    """
    g = geometry
    bsz = x_v.shape[0]
    nt = grid.n_t
    clip = x_v[:, :nt * g.t_v]
    segments = []
    if grid.dilated:
        rows = (np.arange(grid.n_hd)[:, None] * g.footprint_h + np.arange(g.h_v)[None, :] * g.dilation).reshape(-1)
        cols = (np.arange(grid.n_wd)[:, None] * g.footprint_w + np.arange(g.w_v)[None, :] * g.dilation).reshape(-1)
        sub = clip[:, :, rows][:, :, :, cols]
        segments.append(_blocks(sub, bsz, nt, grid.n_hd, grid.n_wd, g))
    std = clip[:, :, :grid.n_h * g.h_v, :grid.n_w * g.w_v]
    segments.append(_blocks(std, bsz, nt, grid.n_h, grid.n_w, g))
    return np.concatenate(segments, axis=1)


def _blocks(arr: np.ndarray, bsz: int, nt: int, nh: int, nw: int, g: PatchGeometry) -> np.ndarray:
    arr = arr.reshape(bsz, nt, g.t_v, nh, g.h_v, nw, g.w_v, arr.shape[-1])
    arr = arr.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return arr.reshape(bsz, nt * nh * nw, -1)


class VideoTokenizer(Module):
    def __init__(self, rng: np.random.Generator, geometry: PatchGeometry, grid: Grid, dim: int):
        self.geometry = geometry
        self.grid = grid
        self.weight = Parameter(normal(rng, (geometry.patch_dim, dim)), decay=True)
        self.cls = Parameter(normal(rng, (1, dim)))
        self.pos = Parameter(normal(rng, (grid.n_tokens, dim)))

    def positional(self, grid: Grid) -> Tensor:
        if grid == self.grid:
            return self.pos
        return interpolate_video_positional(self.pos, self.grid, grid)

    def __call__(self, x_v: np.ndarray) -> tuple[Tensor, Grid]:
        """B×T×H×W×3 clips -> (B×N_v×D tokens, grid)."""
        x_v = np.asarray(x_v)
        if x_v.ndim != 5 or x_v.shape[-1] != 3:
            raise ValueError(f"expected B×T×H×W×3 video, got {x_v.shape}")
        grid = compute_grid(x_v.shape[1], x_v.shape[2], x_v.shape[3], self.geometry, self.grid.dilated)
        patches = Tensor(patchify(x_v, self.geometry, grid))
        tokens = T.matmul(patches, self.weight)
        bsz = x_v.shape[0]
        cls = T.broadcast_to(T.reshape(self.cls, (1, 1, -1)), (bsz, 1, self.cls.shape[-1]))
        z = T.concat([cls, tokens], axis=1)
        return z + self.positional(grid), grid


class CurrentTokenizer(Module):
    def __init__(self, rng: np.random.Generator, length: int, dim: int, channels: int = 3):
        self.length = length
        self.weight = Parameter(normal(rng, (channels, dim)), decay=True)
        self.cls = Parameter(normal(rng, (1, dim)))
        self.pos = Parameter(normal(rng, (length + 1, dim)))

    def positional(self, length: int) -> Tensor:
        if length == self.length:
            return self.pos
        return interpolate_current_positional(self.pos, length)

    def __call__(self, x_c: np.ndarray) -> Tensor:
        """B×T_c×3 current -> B×(T_c+1)×D tokens."""
        x_c = np.asarray(x_c)
        if x_c.ndim != 3 or x_c.shape[1] == 0:
            raise ValueError(f"expected a non-empty B×T_c×3 current, got {x_c.shape}")
        tokens = T.matmul(Tensor(x_c), self.weight)
        bsz = x_c.shape[0]
        cls = T.broadcast_to(T.reshape(self.cls, (1, 1, -1)), (bsz, 1, self.cls.shape[-1]))
        return T.concat([cls, tokens], axis=1) + self.positional(x_c.shape[1])


# ---------------------------------------------------------------------------
# positional embedding interpolation
# ---------------------------------------------------------------------------

def _resize_segment(seg: Tensor, src: tuple[int, int, int], dst: tuple[int, int, int]) -> Tensor:
    nt, nh, nw = src
    dim = seg.shape[-1]
    x = T.reshape(seg, (nt, nh, nw, dim))
    x = T.resize_bilinear(x, dst[1], dst[2])
    x = T.resize_axis(x, 0, dst[0])
    return T.reshape(x, (dst[0] * dst[1] * dst[2], dim))


def interpolate_video_positional(pos: Tensor, src: Grid, dst: Grid) -> Tensor:
    """Resize a video positional embedding to another grid.

    Each scale's n_h×n_w grid is bilinearly resized per temporal slice, the
    temporal axis is linearly resampled when n_t changes, and the class row is
    copied unchanged.
    """
    if min(dst.n_t, dst.n_h, dst.n_w) <= 0 or (dst.dilated and min(dst.n_hd, dst.n_wd) <= 0):
        raise ValueError(f"target grid has a zero extent: {dst}")
    if src.dilated != dst.dilated:
        raise ValueError("source and target grids disagree on dilated tokenization")
    parts = [pos[0:1]]
    if src.dilated:
        parts.append(_resize_segment(pos[src.dilated_rows], (src.n_t, src.n_hd, src.n_wd), (dst.n_t, dst.n_hd, dst.n_wd)))
    parts.append(_resize_segment(pos[src.standard_rows], (src.n_t, src.n_h, src.n_w), (dst.n_t, dst.n_h, dst.n_w)))
    return T.concat(parts, axis=0)


def interpolate_current_positional(pos: Tensor, length: int) -> Tensor:
    """Linear resampling of the per-sample rows; class row unchanged."""
    if length <= 0:
        raise ValueError("target length must be positive")
    return T.concat([pos[0:1], T.resize_axis(pos[1:], 0, length)], axis=0)
