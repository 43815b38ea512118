"""Joint dense + classification objective, AdamW, step schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .metrics import summarize
from .model import FmFormer, ModelConfig, read_checkpoint, save_model
from .synth import Dataset
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_EPS = 1e-12
CSV_FIELDS = ["epoch", "lr", "loss_pix", "loss_cls", "loss_total", "acc", "f1", "fdr", "mdr", "miou"]


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, epoch: int):
        super().__init__(msg)
        self.epoch = epoch


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64)
    return np.eye(num_classes, dtype=T.get_default_dtype())[labels]


def _as_one_hot(y: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape[-1:] == (num_classes,) and y.dtype.kind == "f":
        if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
            raise ValueError("pixel labels are not one-hot")
        return y.astype(T.get_default_dtype())
    if y.min(initial=0) < 0 or y.max(initial=0) >= num_classes:
        raise ValueError(f"pixel labels outside [0, {num_classes})")
    return one_hot(y, num_classes)


def loss_pixel(logits: Tensor, y: np.ndarray) -> Tensor:
    """Pixel cross-entropy -(1/HW) Σ_hw Σ_k y log softmax(logits), averaged over the batch.

    ``y`` holds integer class masks (B×H×W) or one-hot labels (B×H×W×K).
    """
    k = logits.shape[-1]
    target = _as_one_hot(y, k)
    if target.shape != logits.shape:
        raise ValueError(f"label shape {target.shape} does not match logits {logits.shape}")
    b, h, w = logits.shape[:3]
    logp = T.log_softmax(logits, axis=-1)
    return -(T.tsum(logp * target) * (1.0 / (b * h * w)))


def aggregate_label(y: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Pixel mask(s) -> class one-hot: abnormal iff the anomaly-pixel count exceeds tau."""
    y = np.asarray(y)
    count = np.count_nonzero(y.reshape(y.shape[0], -1) if y.ndim == 3 else y.reshape(1, -1), axis=-1)
    labels = (count > tau).astype(np.int64)
    out = one_hot(labels, 2)
    return out if y.ndim == 3 else out[0]


def loss_class(probs: Tensor, y: np.ndarray, tau: float = 0.5, from_masks: bool = True) -> Tensor:
    """-Σ_k G(y; tau)_k log p_k, averaged over the batch; log clamped at 1e-12."""
    target = aggregate_label(y, tau) if from_masks else np.asarray(y, dtype=T.get_default_dtype())
    target = target.reshape(probs.shape).astype(probs.dtype)
    if np.any(probs.data[target > 0] <= LOG_EPS):
        log.warning("class probability underflow on the true class; log clamped at %g", LOG_EPS)
    b = probs.shape[0] if probs.ndim > 1 else 1
    return -(T.tsum(T.log(probs, floor=LOG_EPS) * target) * (1.0 / b))


@dataclass
class LossBreakdown:
    pix: Tensor | None
    cls: Tensor | None
    alpha: float

    @property
    def total(self) -> Tensor:
        terms = []
        if self.pix is not None:
            terms.append(self.pix)
        if self.cls is not None:
            terms.append(self.cls * self.alpha)
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total

    def values(self) -> tuple[float, float, float]:
        pix = self.pix.item() if self.pix is not None else 0.0
        cls = self.cls.item() if self.cls is not None else 0.0
        return pix, cls, pix + self.alpha * cls


def joint_loss(pix: Tensor | None, cls: Tensor | None, masks: np.ndarray, alpha: float = 1.0,
               tau: float = 0.5) -> LossBreakdown:
    return LossBreakdown(None if pix is None else loss_pixel(pix, masks),
                         None if cls is None else loss_class(cls, masks, tau), alpha)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def lr_schedule(epoch: int, base: float = 5e-4, decayed: float = 5e-5, milestone: int = 20) -> float:
    """Step decay; epochs are 1-based: ``base`` for 1..milestone, ``decayed`` afterwards."""
    return base if epoch <= milestone else decayed


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Decay is applied only to parameters flagged ``decay`` (weight matrices and
    kernels), multiplicatively and before the adaptive update.
    """

    def __init__(self, params: list, lr: float = 5e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01, names: list[str] | None = None):
        self.params = list(params)
        self.names = names or [str(i) for i in range(len(self.params))]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for name, p in zip(self.names, self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in {name}; step aborted")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        dtype = self.params[0].dtype.type if self.params else np.float32
        for p, m, v in zip(self.params, self.m, self.v):
            if getattr(p, "decay", False) and self.weight_decay:
                p.data *= dtype(1.0 - self.lr * self.weight_decay)
            if p.grad is None:
                continue
            g = p.grad
            m *= dtype(b1)
            m += dtype(1.0 - b1) * g
            v *= dtype(b2)
            v += dtype(1.0 - b2) * g * g
            p.data -= dtype(self.lr) * (m / dtype(c1)) / (np.sqrt(v / dtype(c2)) + dtype(self.eps))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(self.names, self.m, self.v):
            out[f"adam.m/{name}"] = m
            out[f"adam.v/{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for i, name in enumerate(self.names):
            self.m[i] = arrays[f"adam.m/{name}"].astype(self.params[i].dtype).copy()
            self.v[i] = arrays[f"adam.v/{name}"].astype(self.params[i].dtype).copy()
        self.t = t


def clip_grad_norm(params: list, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if math.isfinite(norm) and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def make_optimizer(model: FmFormer, lr: float = 5e-4, weight_decay: float = 0.01) -> AdamW:
    named = list(model.named_parameters())
    return AdamW([p for _, p in named], lr=lr, weight_decay=weight_decay, names=[n for n, _ in named])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch: int = 16
    lr: float = 5e-4
    lr_decayed: float = 5e-5
    lr_milestone: int = 20
    alpha: float = 1.0
    tau: float = 0.5
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    seed: int = 0


@dataclass
class TrainResult:
    model: FmFormer
    optimizer: AdamW
    history: list[dict[str, float]] = field(default_factory=list)
    epochs_run: int = 0


def batch_inputs(model: FmFormer, ds: Dataset, idx: np.ndarray):
    cfg = model.config
    x_v = ds.videos[idx] if cfg.uses_video else None
    x_c = ds.currents[idx] if cfg.uses_current else None
    return x_v, x_c


def _snapshot(model: FmFormer, opt: AdamW) -> dict:
    return {"params": [p.data.copy() for p in opt.params],
            "buffers": {k: b.copy() for k, b in model.named_buffers()},
            "m": [m.copy() for m in opt.m], "v": [v.copy() for v in opt.v], "t": opt.t, "step": model.step}


def _restore(model: FmFormer, opt: AdamW, snap: dict) -> None:
    for p, d in zip(opt.params, snap["params"]):
        p.data = d.copy()
    for k, b in model.named_buffers():
        b[...] = snap["buffers"][k]
    opt.m = [m.copy() for m in snap["m"]]
    opt.v = [v.copy() for v in snap["v"]]
    opt.t = snap["t"]
    model.step = snap["step"]


def save_training_checkpoint(path: str | Path, model: FmFormer, opt: AdamW, epoch: int,
                             train_cfg: TrainConfig | None = None) -> None:
    meta = {"epoch": str(epoch), "adam_t": str(opt.t)}
    if train_cfg is not None:
        meta.update({f"train.{k}": str(v) for k, v in vars(train_cfg).items()})
    save_model(path, model, opt.state_arrays(), meta)


def load_training_checkpoint(path: str | Path, lr: float = 5e-4, weight_decay: float = 0.01
                             ) -> tuple[FmFormer, AdamW, int]:
    ckpt = read_checkpoint(path)
    model = FmFormer(ckpt.config)
    model.load_state_dict(ckpt.arrays)
    model.step = int(ckpt.meta.get("step", 0))
    opt = make_optimizer(model, lr, weight_decay)
    if any(k.startswith("adam.") for k in ckpt.arrays):
        opt.load_state_arrays(ckpt.arrays, int(ckpt.meta.get("adam_t", 0)))
    return model, opt, int(ckpt.meta.get("epoch", 0))


def train(model: FmFormer, dataset: Dataset, cfg: TrainConfig, optimizer: AdamW | None = None,
          start_epoch: int = 0, log_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
          stop_when: Callable[[int, dict], bool] | None = None) -> TrainResult:
    """Train epochs ``start_epoch+1 .. cfg.epochs``.

    Batch order depends only on (seed, epoch), so a run resumed from an
    epoch-boundary checkpoint matches an uninterrupted one bit for bit. One CSV
    row per epoch is appended to ``log_path``; metrics in that row come from
    the training-mode predictions made during the epoch.
    """
    opt = optimizer or make_optimizer(model, cfg.lr, cfg.weight_decay)
    result = TrainResult(model, opt)
    n = len(dataset)
    if log_path is not None:
        log_path = Path(log_path)
        if start_epoch == 0 or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(CSV_FIELDS)
    model.train()
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        opt.lr = lr_schedule(epoch, cfg.lr, cfg.lr_decayed, cfg.lr_milestone)
        snap = _snapshot(model, opt)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(3)
        cls_pred, pix_pred = [], []
        for start in range(0, n, cfg.batch):
            idx = np.sort(order[start:start + cfg.batch])
            x_v, x_c = batch_inputs(model, dataset, idx)
            pix, cls = model(x_v, x_c)
            losses = joint_loss(pix, cls, dataset.masks[idx], cfg.alpha, cfg.tau)
            vals = losses.values()
            if not all(math.isfinite(v) for v in vals):
                _restore(model, opt, snap)
                if checkpoint_path is not None:
                    save_training_checkpoint(checkpoint_path, model, opt, epoch - 1, cfg)
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}", epoch)
            opt.zero_grad()
            losses.total.backward()
            if cfg.clip_norm:
                clip_grad_norm(opt.params, cfg.clip_norm)
            opt.step()
            model.step += 1
            sums += np.array(vals) * len(idx)
            cls_pred.append(None if cls is None else cls.data.argmax(-1))
            pix_pred.append(None if pix is None else pix.data.argmax(-1))
        row = {"epoch": epoch, "lr": opt.lr, "loss_pix": sums[0] / n, "loss_cls": sums[1] / n,
               "loss_total": sums[2] / n}
        labels = (dataset.masks.reshape(n, -1).sum(1) > cfg.tau).astype(int)
        order_sorted = np.concatenate([np.sort(order[s:s + cfg.batch]) for s in range(0, n, cfg.batch)])
        rec = summarize(
            None if cls_pred[0] is None else np.concatenate(cls_pred), labels[order_sorted],
            None if pix_pred[0] is None else np.concatenate(pix_pred), dataset.masks[order_sorted])
        row.update(rec.as_dict())
        result.history.append(row)
        result.epochs_run += 1
        log.info("epoch %d lr %.1e loss %.4f acc %.4f miou %.4f", epoch, opt.lr, row["loss_total"],
                 row["acc"], row["miou"])
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] for k in CSV_FIELDS])
        if checkpoint_path is not None:
            save_training_checkpoint(checkpoint_path, model, opt, epoch, cfg)
        if stop_when is not None and stop_when(epoch, row):
            break
    return result


def model_from_preset(preset: str, seed: int = 0, **overrides) -> FmFormer:
    return FmFormer(ModelConfig.preset(preset, **overrides), seed)
