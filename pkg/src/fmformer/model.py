"""FmFormer assembly: configuration presets, forward pass, checkpoints."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .decoder import ClassHead, DenseHead
from .encoder import Encoder
from .layers import Module
from .tensor import Tensor
from .tokenization import CurrentTokenizer, PatchGeometry, VideoTokenizer, compute_grid

MODALITIES = ("visual", "current", "cross")
MHCA_MODES = ("bi", "uni", "off")
OUTPUTS = ("cls", "dense", "both")

PRESETS: dict[str, dict[str, int]] = {
    "tiny": dict(dim=36, mlp_dim=144, num_heads=3, layers=6),
    "small": dict(dim=48, mlp_dim=192, num_heads=3, layers=6),
    "base": dict(dim=96, mlp_dim=384, num_heads=3, layers=6),
    "large": dict(dim=96, mlp_dim=384, num_heads=3, layers=12),
}

# parameter counts reported for the presets
REPORTED_PARAMS = {"tiny": 0.28e6, "small": 0.48e6, "base": 1.86e6, "large": 3.64e6}


@dataclass
class ModelConfig:
    name: str = "tiny"
    dim: int = 36
    mlp_dim: int = 144
    num_heads: int = 3
    layers: int = 6
    t_v: int = 2
    h_v: int = 8
    w_v: int = 8
    dilation: int = 2
    num_classes: int = 2
    frames: int = 8
    height: int = 64
    width: int = 64
    current_len: int = 64
    modality: str = "cross"
    dilated: bool = True
    mhca: str = "bi"
    lf: bool = True
    outputs: str = "both"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if self.mhca not in MHCA_MODES:
            raise ValueError(f"mhca must be one of {MHCA_MODES}")
        if self.outputs not in OUTPUTS:
            raise ValueError(f"outputs must be one of {OUTPUTS}")
        if self.dim % self.num_heads:
            raise ValueError(f"token dim {self.dim} not divisible by {self.num_heads} heads")
        if self.h_v != self.w_v:
            raise ValueError("square spatial patches expected")
        if self.modality == "current" and self.outputs != "cls":
            raise ValueError("the current-only model has no dense head; use outputs='cls'")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        key = name.lower()
        if key not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        fields = dict(PRESETS[key], name=key)
        fields.update(overrides)
        if fields.get("modality") == "current":
            fields.setdefault("outputs", "cls")
        return cls(**fields)

    @property
    def geometry(self) -> PatchGeometry:
        return PatchGeometry(self.t_v, self.h_v, self.w_v, self.dilation)

    @property
    def uses_video(self) -> bool:
        return self.modality in ("visual", "cross")

    @property
    def uses_current(self) -> bool:
        return self.modality in ("current", "cross")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ModelConfig":
        kwargs: dict[str, Any] = {}
        for f in dataclasses.fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("bool", bool):
                kwargs[f.name] = raw in ("True", "true", "1", True)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


class FmFormer(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        cfg = config
        self.config = cfg
        self.step = 0
        rng = np.random.default_rng(seed)
        streams: tuple[str, ...] = ()
        self.video_tok = self.current_tok = None
        if cfg.uses_video:
            grid = compute_grid(cfg.frames, cfg.height, cfg.width, cfg.geometry, cfg.dilated)
            self.video_tok = VideoTokenizer(rng, cfg.geometry, grid, cfg.dim)
            streams += ("v",)
        if cfg.uses_current:
            if cfg.current_len <= 0:
                raise ValueError("current length must be positive")
            self.current_tok = CurrentTokenizer(rng, cfg.current_len, cfg.dim)
            streams += ("c",)
        interaction = {"bi": "bi", "uni": "uni", "off": "self"}[cfg.mhca] if cfg.modality == "cross" else "self"
        self.interaction = interaction
        self.encoder = Encoder(rng, cfg.dim, cfg.mlp_dim, cfg.num_heads, cfg.layers, streams, interaction)
        self.dense_head = None
        self.class_head = None
        if cfg.outputs in ("dense", "both"):
            n_t = cfg.frames // cfg.t_v
            self.dense_head = DenseHead(rng, cfg.dim, n_t, cfg.h_v, cfg.num_classes, cfg.dilated)
        if cfg.outputs in ("cls", "both"):
            self.class_head = ClassHead(rng, cfg.dim, cfg.num_classes, self.class_branches)

    @property
    def class_branches(self) -> int:
        cfg = self.config
        if cfg.modality != "cross":
            return 1
        if not cfg.lf or cfg.mhca == "uni":
            return 1
        return 2

    def __call__(self, x_v: np.ndarray | None, x_c: np.ndarray | None) -> tuple[Tensor | None, Tensor | None]:
        return self.forward(x_v, x_c)

    def forward(self, x_v: np.ndarray | None, x_c: np.ndarray | None) -> tuple[Tensor | None, Tensor | None]:
        """Batched clips B×T×H×W×3 and currents B×T_c×3 -> (B×H×W×K logits, B×K probabilities).

        Inputs whose token grid or length differ from the configured geometry
        use interpolated positional embeddings. Unused modalities may be None.
        """
        z_v, z_c, grid = self.encode(x_v, x_c)
        pix = cls = None
        if self.dense_head is not None:
            h, w = np.asarray(x_v).shape[2:4]
            pix = self.dense_head(z_v, grid, (h, w))
        if self.class_head is not None:
            cls = self.class_head(self.class_tokens(z_v, z_c))
        return pix, cls

    def encode(self, x_v, x_c):
        """Tokenize and run the encoder; returns (video tokens, current tokens, video grid)."""
        cfg = self.config
        z_v = z_c = grid = None
        if cfg.uses_video:
            if x_v is None:
                raise ValueError(f"{cfg.modality} model needs a video input")
            z_v, grid = self.video_tok(x_v)
        if cfg.uses_current:
            if x_c is None:
                raise ValueError(f"{cfg.modality} model needs a current input")
            z_c = self.current_tok(x_c)
        z_v, z_c = self.encoder(z_v, z_c)
        return z_v, z_c, grid

    def class_tokens(self, z_v, z_c) -> list[Tensor]:
        modality = self.config.modality
        if modality == "visual":
            return [z_v[:, 0]]
        if modality == "current":
            return [z_c[:, 0]]
        return [z_v[:, 0], z_c[:, 0]][: self.class_branches]

    forward_variable_length = forward

    def predict(self, x_v, x_c) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Eval-mode forward without graph recording; returns numpy arrays."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                pix, cls = self.forward(x_v, x_c)
        finally:
            self.train(was_training)
        return (None if pix is None else pix.data, None if cls is None else cls.data)

    # -- state ------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": p.data for k, p in self.named_parameters()}
        state.update({f"buffer/{k}": b for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = {f"param/{k}" for k in params} | {f"buffer/{k}" for k in buffers}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = state[f"param/{k}"]
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for k, b in buffers.items():
            b[...] = state[f"buffer/{k}"]


def build(config: ModelConfig, seed: int = 0) -> FmFormer:
    return FmFormer(config, seed)


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"FMCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)


def write_checkpoint(path: str | Path, config: ModelConfig, arrays: dict[str, np.ndarray],
                     meta: dict[str, str] | None = None) -> None:
    """Layout: magic, u32 version, u32 text length + key=value text, u32 record count,
    then per record u32 name length, name, u32 rank, u32 extents, float32 LE values."""
    text = config.to_text() + "".join(f"meta.{k}={v}\n" for k, v in (meta or {}).items())
    blob = text.encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an FMCK checkpoint")
    version, text_len = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    text = buf[off:off + text_len].decode("utf-8")
    off += text_len
    values: dict[str, str] = {}
    for line in text.splitlines():
        key, _, val = line.partition("=")
        values[key] = val
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    meta = {k[5:]: v for k, v in values.items() if k.startswith("meta.")}
    config = ModelConfig.from_mapping({k: v for k, v in values.items() if not k.startswith("meta.")})
    return Checkpoint(config, arrays, meta)


def save_model(path: str | Path, model: FmFormer, extra: dict[str, np.ndarray] | None = None,
               meta: dict[str, str] | None = None) -> None:
    arrays = dict(model.state_dict())
    arrays.update(extra or {})
    info = {"step": str(model.step)}
    info.update(meta or {})
    write_checkpoint(path, model.config, arrays, info)


def load_model(path: str | Path) -> tuple[FmFormer, Checkpoint]:
    ckpt = read_checkpoint(path)
    model = FmFormer(ckpt.config)
    model.load_state_dict(ckpt.arrays)
    model.step = int(ckpt.meta.get("step", 0))
    return model, ckpt
