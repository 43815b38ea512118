"""Evaluation harness: metric records, length sweeps, ablation runs and late-fusion ensembles."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .metrics import ConfusionCounts, IoUAccumulator, MetricsRecord, classify_metrics
from .model import FmFormer, ModelConfig
from .synth import Corruption, DataConfig, Dataset, make_dataset
from .training import TrainConfig, batch_inputs, train

log = logging.getLogger(__name__)

METRIC_KEYS = ("acc", "f1", "fdr", "mdr", "miou")


def _predict_batches(model: FmFormer, ds: Dataset, batch: int):
    for start in range(0, len(ds), batch):
        idx = np.arange(start, min(start + batch, len(ds)))
        x_v, x_c = batch_inputs(model, ds, idx)
        pix, cls = model.predict(x_v, x_c)
        yield idx, pix, cls


def evaluate(model: FmFormer, ds: Dataset, batch: int = 32, tau: float = 0.5) -> MetricsRecord:
    """Class metrics from the argmax of the class output, mIoU from the per-pixel argmax.

    Counts are accumulated per batch and merged, so sharding the set gives the
    same record. Heads the model lacks leave their metrics as NaN.
    """
    labels = (ds.masks.reshape(len(ds), -1).sum(1) > tau).astype(int)
    counts = ConfusionCounts()
    iou = IoUAccumulator(model.config.num_classes)
    have_cls = have_pix = False
    for idx, pix, cls in _predict_batches(model, ds, batch):
        if cls is not None:
            have_cls = True
            counts = counts + ConfusionCounts.from_predictions(cls.argmax(-1), labels[idx])
        if pix is not None:
            have_pix = True
            iou.update(pix.argmax(-1), ds.masks[idx])
    rec = MetricsRecord()
    if have_cls:
        rec.acc, rec.f1, rec.fdr, rec.mdr = classify_metrics(counts)
        rec.counts = counts
    if have_pix:
        rec.miou = iou.value()
    return rec


def class_logits(model: FmFormer, x_v, x_c) -> np.ndarray:
    """Summed pre-softmax class logits of a model (eval mode)."""
    if model.class_head is None:
        raise ValueError("model has no classification head")
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            z_v, z_c, _ = model.encode(x_v, x_c)
            parts = model.class_head.logits(model.class_tokens(z_v, z_c))
    finally:
        model.train(was_training)
    return sum(p.data for p in parts)


def evaluate_fusion(models: list[FmFormer], ds: Dataset, batch: int = 32, tau: float = 0.5) -> MetricsRecord:
    """Late fusion of separately trained models: softmax of summed class logits.

    Dense output, when present, comes from the first model with a dense head.
    """
    labels = (ds.masks.reshape(len(ds), -1).sum(1) > tau).astype(int)
    counts = ConfusionCounts()
    dense = next((m for m in models if m.dense_head is not None), None)
    iou = IoUAccumulator(models[0].config.num_classes)
    for start in range(0, len(ds), batch):
        idx = np.arange(start, min(start + batch, len(ds)))
        total = 0.0
        for m in models:
            x_v, x_c = batch_inputs(m, ds, idx)
            total = total + class_logits(m, x_v, x_c)
        counts = counts + ConfusionCounts.from_predictions(np.argmax(total, -1), labels[idx])
        if dense is not None:
            x_v, x_c = batch_inputs(dense, ds, idx)
            pix, _ = dense.predict(x_v, x_c)
            iou.update(pix.argmax(-1), ds.masks[idx])
    rec = MetricsRecord()
    rec.acc, rec.f1, rec.fdr, rec.mdr = classify_metrics(counts)
    rec.counts = counts
    if dense is not None:
        rec.miou = iou.value()
    return rec


# ---------------------------------------------------------------------------
# sequence-length sweep
# ---------------------------------------------------------------------------

def sweep_lengths(model: FmFormer, frames: list[int] | None = None, current_lens: list[int] | None = None,
                  n: int = 64, seed: int = 0, corruption: Corruption | None = None,
                  batch: int = 32) -> list[dict]:
    """Evaluate one trained model on test sets of different clip and current lengths.

    The final frame and the last current sample stay aligned; the current
    sampling rate per frame is held at the trained value. Positional
    embeddings are interpolated, no retraining happens.
    """
    cfg = model.config
    frames = frames or [cfg.frames]
    current_lens = current_lens or [cfg.current_len]
    rate = cfg.current_len / cfg.frames
    rows = []
    for f in frames:
        for c in current_lens:
            data = DataConfig(f, cfg.height, cfg.width, c, rate)
            ds = make_dataset(n, corruption=corruption, seed=seed, split="test", data=data)
            rec = evaluate(model, ds, batch)
            rows.append({"frames": f, "current_len": c, **rec.as_dict()})
            log.info("sweep frames=%d current=%d acc %.4f miou %.4f", f, c, rec.acc, rec.miou)
    return rows


# ---------------------------------------------------------------------------
# ablation runs
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    seed: int
    record: MetricsRecord

    def as_dict(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, **self.record.as_dict()}


def run_ablation(base: ModelConfig, variants: dict[str, dict], train_set: Dataset, test_set: Dataset,
                 seeds: list[int], train_cfg: TrainConfig) -> list[AblationRow]:
    """Train and evaluate every variant (config overrides on ``base``) for every seed.

    Variants trained on the same seed see the same initialisation stream and
    the same batch order, giving paired rows.
    """
    rows = []
    for seed in seeds:
        for name, overrides in variants.items():
            cfg = dataclasses.replace(base, **overrides)
            model = FmFormer(cfg, seed)
            train(model, train_set, dataclasses.replace(train_cfg, seed=seed))
            rec = evaluate(model, test_set)
            rows.append(AblationRow(name, seed, rec))
            log.info("ablation %s seed %d: %s", name, seed, rec.as_dict())
    return rows


def mean_by_variant(rows: list[AblationRow]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for name in dict.fromkeys(r.variant for r in rows):
        recs = [r.record.as_dict() for r in rows if r.variant == name]
        out[name] = {k: float(np.mean([d[k] for d in recs])) for k in METRIC_KEYS}
    return out


def write_rows_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
