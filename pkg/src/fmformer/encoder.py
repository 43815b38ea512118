"""Cross-modal encoder: per-modality self-attention followed by cross-attention."""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .layers import MLP, LayerNorm, Linear, Module
from .tensor import Tensor

_probes: list[list[tuple[str, np.ndarray]]] = []


@contextlib.contextmanager
def capture_attention() -> Iterator[list[tuple[str, np.ndarray]]]:
    """Collect every attention-weight tensor (B×heads×N_q×N_k) computed inside the block."""
    store: list[tuple[str, np.ndarray]] = []
    _probes.append(store)
    try:
        yield store
    finally:
        _probes.remove(store)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, tag: str = "") -> Tensor:
    """softmax(Q_l K_lᵀ / sqrt(D/L)) V_l for each head l, concatenated."""
    dim = q.shape[-1]
    scale = 1.0 / np.sqrt(dim / heads)
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    weights = T.softmax(T.matmul(qh, T.swap_last(kh)) * scale, axis=-1)
    for store in _probes:
        store.append((tag, weights.data.copy()))
    return _merge_heads(T.matmul(weights, vh))


class Attention(Module):
    """Multi-head attention of ``query`` tokens over ``context`` tokens plus both residual stages.

    Queries, keys and values are linear maps of layer-normalised inputs; the
    head concatenation is projected and added to the query stream, then an
    MLP with its own residual follows. With ``context is query`` this is
    self-attention.
    """

    def __init__(self, rng: np.random.Generator, dim: int, mlp_dim: int, heads: int, cross: bool = False):
        if dim % heads:
            raise ValueError(f"token dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.cross = cross
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim) if cross else None
        self.wq = Linear(rng, dim, dim, bias=False)
        self.wk = Linear(rng, dim, dim, bias=False)
        self.wv = Linear(rng, dim, dim, bias=False)
        self.proj = Linear(rng, dim, dim, bias=False)
        self.mlp = MLP(rng, dim, mlp_dim, dim)

    def __call__(self, query: Tensor, context: Tensor | None = None, tag: str = "") -> Tensor:
        if context is not None and context.shape[-1] != query.shape[-1]:
            raise ValueError(f"token dims differ: {query.shape[-1]} vs {context.shape[-1]}")
        qn = self.norm_q(query)
        if self.cross:
            if context is None:
                raise ValueError("cross-attention needs a context stream")
            cn = self.norm_kv(context)
        else:
            cn = qn if context is None else self.norm_q(context)
        heads = scaled_dot_attention(self.wq(qn), self.wk(cn), self.wv(cn), self.heads, tag)
        a = self.proj(heads) + query
        return self.mlp(a) + a


class EncoderLayer(Module):
    """[self-attn(video) ‖ self-attn(current)] -> interaction block.

    ``interaction`` is one of ``"bi"`` (two cross-attention directions),
    ``"uni"`` (current-to-visual only), or ``"self"`` (a second
    self-attention per stream in place of cross-attention).
    """

    def __init__(self, rng: np.random.Generator, dim: int, mlp_dim: int, heads: int,
                 streams: tuple[str, ...] = ("v", "c"), interaction: str = "bi"):
        if interaction not in ("bi", "uni", "self"):
            raise ValueError(f"unknown interaction {interaction!r}")
        if interaction in ("bi", "uni") and set(streams) != {"v", "c"}:
            raise ValueError("cross-attention needs both modalities")
        self.streams = streams
        self.interaction = interaction
        self.sa_v = Attention(rng, dim, mlp_dim, heads) if "v" in streams else None
        self.sa_c = Attention(rng, dim, mlp_dim, heads) if "c" in streams else None
        self.ca_cv = self.ca_vc = self.sa2_v = self.sa2_c = None
        if interaction in ("bi", "uni"):
            self.ca_cv = Attention(rng, dim, mlp_dim, heads, cross=True)
            if interaction == "bi":
                self.ca_vc = Attention(rng, dim, mlp_dim, heads, cross=True)
        else:
            self.sa2_v = Attention(rng, dim, mlp_dim, heads) if "v" in streams else None
            self.sa2_c = Attention(rng, dim, mlp_dim, heads) if "c" in streams else None

    def self_attend(self, z_v: Tensor | None, z_c: Tensor | None) -> tuple[Tensor | None, Tensor | None]:
        if self.sa_v is not None:
            z_v = self.sa_v(z_v, tag="mhsa_v")
        if self.sa_c is not None:
            z_c = self.sa_c(z_c, tag="mhsa_c")
        return z_v, z_c

    def interact(self, z_v: Tensor | None, z_c: Tensor | None) -> tuple[Tensor | None, Tensor | None]:
        if self.interaction == "self":
            if self.sa2_v is not None:
                z_v = self.sa2_v(z_v, tag="mhsa_v")
            if self.sa2_c is not None:
                z_c = self.sa2_c(z_c, tag="mhsa_c")
            return z_v, z_c
        return mhca_bidirectional(z_v, z_c, self.ca_cv, self.ca_vc)

    def __call__(self, z_v, z_c):
        return self.interact(*self.self_attend(z_v, z_c))


def mhsa(z: Tensor, block: Attention, tag: str = "mhsa") -> Tensor:
    return block(z, tag=tag)


def mhca_bidirectional(z_v: Tensor, z_c: Tensor, ca_cv: Attention, ca_vc: Attention | None) -> tuple[Tensor, Tensor]:
    """Visual queries attend over current tokens (c->v) and vice versa (v->c).

    Both directions read the same inputs. With ``ca_vc=None`` only the
    current-to-visual direction runs and the current stream passes through.
    """
    if z_v.shape[-1] != z_c.shape[-1]:
        raise ValueError(f"token dims differ: {z_v.shape[-1]} vs {z_c.shape[-1]}")
    z_cv = ca_cv(z_v, z_c, tag="mhca_cv")
    z_vc = ca_vc(z_c, z_v, tag="mhca_vc") if ca_vc is not None else z_c
    return z_cv, z_vc


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, dim: int, mlp_dim: int, heads: int, layers: int,
                 streams: tuple[str, ...] = ("v", "c"), interaction: str = "bi"):
        self.layers = [EncoderLayer(rng, dim, mlp_dim, heads, streams, interaction) for _ in range(layers)]

    def __call__(self, z_v: Tensor | None, z_c: Tensor | None) -> tuple[Tensor | None, Tensor | None]:
        for layer in self.layers:
            z_v, z_c = layer(z_v, z_c)
        return z_v, z_c
