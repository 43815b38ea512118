"""Multi-head decoder: dense prediction from reassembled tokens, classification from class tokens."""

from __future__ import annotations

import logging
import math

import numpy as np

from . import tensor as T
from .layers import MLP, Conv2d, ConvBNReLU, Deconv2x2, Module
from .tensor import Tensor
from .tokenization import Grid

log = logging.getLogger(__name__)

BASE_CHANNELS = 128


def stage_channels(upsample: int) -> list[int]:
    """Deconv channel schedule [128, 64, 32, ...] for a power-of-two upsampling factor."""
    n = int(round(math.log2(upsample)))
    if n < 0 or 2 ** n != upsample:
        raise ValueError(f"upsampling factor {upsample} is not a power of two")
    return [max(BASE_CHANNELS >> i, 8) for i in range(n)]


def segment_to_image(tokens: Tensor, n_t: int, n_h: int, n_w: int) -> Tensor:
    """B×(n_t·n_h·n_w)×D tokens in (t, h, w) order -> B×n_h×n_w×(n_t·D), channel = t·D + c."""
    b, _, d = tokens.shape
    x = T.reshape(tokens, (b, n_t, n_h, n_w, d))
    x = T.transpose(x, (0, 2, 3, 1, 4))
    return T.reshape(x, (b, n_h, n_w, n_t * d))


def _match_time(tokens: Tensor, n_t_in: int, n_t_out: int, n_h: int, n_w: int) -> Tensor:
    if n_t_in == n_t_out:
        return tokens
    b, _, d = tokens.shape
    x = T.reshape(tokens, (b, n_t_in, n_h * n_w, d))
    x = T.resize_axis(x, 1, n_t_out)
    return T.reshape(x, (b, n_t_out * n_h * n_w, d))


class DenseHead(Module):
    def __init__(self, rng: np.random.Generator, dim: int, n_t: int, upsample: int, num_classes: int = 2,
                 dilated: bool = True):
        self.n_t = n_t
        self.dilated = dilated
        self.squeeze = Conv2d(rng, n_t * dim, dim, kernel=1)
        if dilated:
            self.squeeze_d = Conv2d(rng, n_t * dim, dim, kernel=1)
            self.blend_up = Deconv2x2(rng, dim, dim)
            self.blend_conv = ConvBNReLU(rng, dim, dim)
        self.ups = []
        self.convs = []
        c_prev = dim
        for c in stage_channels(upsample):
            self.ups.append(Deconv2x2(rng, c_prev, c))
            self.convs.append(ConvBNReLU(rng, c, c))
            c_prev = c
        self.classifier = Conv2d(rng, c_prev, num_classes, kernel=1)

    def reassemble(self, z_cv: Tensor, grid: Grid) -> tuple[Tensor | None, Tensor]:
        """Regular c->v tokens -> (dilated feature, standard feature); the class row is ignored."""
        if z_cv.shape[1] != grid.n_tokens:
            raise ValueError(f"token count {z_cv.shape[1]} does not match layout ({grid.n_tokens})")
        std = _match_time(z_cv[:, grid.standard_rows], grid.n_t, self.n_t, grid.n_h, grid.n_w)
        i_v = self.squeeze(segment_to_image(std, self.n_t, grid.n_h, grid.n_w))
        i_d = None
        if self.dilated:
            if not grid.dilated:
                raise ValueError("layout has no dilated segment")
            dil = _match_time(z_cv[:, grid.dilated_rows], grid.n_t, self.n_t, grid.n_hd, grid.n_wd)
            i_d = self.squeeze_d(segment_to_image(dil, self.n_t, grid.n_hd, grid.n_wd))
        return i_d, i_v

    def blend(self, i_d: Tensor, i_v: Tensor) -> Tensor:
        """I_v + conv(deconv(I_v^d)), resized to I_v's grid when the doubling does not land on it."""
        up = self.blend_up(i_d)
        n_h, n_w = i_v.shape[1], i_v.shape[2]
        if up.shape[1:3] != (n_h, n_w):
            up = T.resize_bilinear(up, n_h, n_w)
        return i_v + self.blend_conv(up)

    def predict(self, feat: Tensor, out_hw: tuple[int, int]) -> Tensor:
        x = feat
        for up, conv in zip(self.ups, self.convs):
            x = conv(up(x))
        logits = self.classifier(x)
        if logits.shape[1:3] != tuple(out_hw):
            log.info("dense output %s resized to %s", logits.shape[1:3], tuple(out_hw))
            logits = T.resize_bilinear(logits, out_hw[0], out_hw[1])
        return logits

    def __call__(self, z_cv: Tensor, grid: Grid, out_hw: tuple[int, int]) -> Tensor:
        i_d, i_v = self.reassemble(z_cv, grid)
        feat = self.blend(i_d, i_v) if i_d is not None else i_v
        return self.predict(feat, out_hw)


class ClassHead(Module):
    """One small MLP per class token; logits are summed and softmaxed (linear fusion)."""

    def __init__(self, rng: np.random.Generator, dim: int, num_classes: int = 2, branches: int = 2):
        self.mlps = [MLP(rng, dim, dim, num_classes) for _ in range(branches)]

    def logits(self, class_tokens: list[Tensor]) -> list[Tensor]:
        return [mlp(tok) for mlp, tok in zip(self.mlps, class_tokens)]

    def __call__(self, class_tokens: list[Tensor]) -> Tensor:
        return classify_fuse(self.logits(class_tokens))


def classify_fuse(logits: list[Tensor]) -> Tensor:
    total = logits[0]
    for extra in logits[1:]:
        total = total + extra
    return T.softmax(total, axis=-1)
