"""Command-line entry point: generate, train, eval, predict, annotate, ablate, ingest."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import annotate as ann
from .evaluation import (evaluate, evaluate_fusion, mean_by_variant, run_ablation, sweep_lengths,
                         write_rows_csv)
from .metrics import MetricsRecord, format_table
from .model import PRESETS, FmFormer, ModelConfig, load_model, read_checkpoint
from .synth import Corruption, DataConfig, Dataset, ingest_raw, make_dataset, read_fmfb, write_fmfb
from .training import (CSV_FIELDS, TrainConfig, TrainingDiverged, load_training_checkpoint,
                       save_training_checkpoint, train)

log = logging.getLogger("fmformer")

# tunables shared by several subcommands; precedence is flags > --config file > these
DEFAULTS = {
    "seed": 0,
    "preset": "tiny",
    "modality": "cross",
    "dilated": "on",
    "mhca": "bi",
    "lf": "on",
    "heads": "both",
    "epochs": 30,
    "batch": 16,
    "lr": 5e-4,
    "lr_decayed": 5e-5,
    "lr_milestone": 20,
    "alpha": 1.0,
    "clip": 1.0,
    "weight_decay": 0.01,
    "occlusion": 0.0,
    "occlusion_target": "abnormal",
    "haze_strength": 1.0,
    "n": 256,
    "balance": 0.5,
    "split": "train",
    "frames": 8,
    "height": 64,
    "width": 64,
    "current_len": 64,
    "radius": 7,
    "sigma": 0.1,
}

CHOICES = {
    "preset": sorted(PRESETS),
    "modality": ["visual", "current", "cross"],
    "dilated": ["on", "off"],
    "mhca": ["uni", "bi", "off"],
    "lf": ["on", "off"],
    "heads": ["cls", "dense", "both"],
    "occlusion_target": ["abnormal", "all"],
    "split": ["train", "test", "val"],
}


class UsageError(ValueError):
    pass


def _add(p: argparse.ArgumentParser, *names: str) -> None:
    for name in names:
        flag = "--" + name.replace("_", "-")
        kind = type(DEFAULTS[name])
        p.add_argument(flag, dest=name, default=None, choices=CHOICES.get(name),
                       type=kind if kind is not str else None,
                       help=f"default {DEFAULTS[name]}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON file of defaults (flags take precedence)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        _add(p, "seed")

    model_flags = ("preset", "modality", "dilated", "mhca", "lf", "heads")
    train_flags = ("epochs", "batch", "lr", "lr_decayed", "lr_milestone", "alpha", "clip", "weight_decay")
    data_flags = ("n", "balance", "split", "occlusion", "occlusion_target", "haze_strength",
                  "frames", "height", "width", "current_len")

    p = sub.add_parser("generate", help="write a synthetic FMFB container")
    common(p)
    _add(p, *data_flags)

    p = sub.add_parser("train", help="train a model on a container")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="training checkpoint to continue from")
    _add(p, *model_flags, *train_flags)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a container")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--fuse", type=Path, nargs="*", default=[],
                   help="further checkpoints whose class logits are summed with the first (late fusion)")
    p.add_argument("--sweep-length", action="store_true", help="sweep clip and current lengths")
    p.add_argument("--sweep-frames", type=int, nargs="+")
    p.add_argument("--sweep-current", type=int, nargs="+")
    _add(p, "n", "occlusion", "occlusion_target", "haze_strength")

    p = sub.add_parser("predict", help="export predicted masks as PGM")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("annotate", help="propagate keyframe boxes and refine them into masks")
    common(p)
    p.add_argument("--keyframes", type=Path, required=True)
    p.add_argument("--frames", dest="frames_path", type=Path, required=True,
                   help=".npy array T×H×W[×C] in [0,1], or an FMFB container (see --sample)")
    p.add_argument("--sample", type=int, default=0)
    _add(p, "radius", "sigma")

    p = sub.add_parser("ablate", help="train/evaluate ablation variants over seeds")
    common(p)
    p.add_argument("--study", choices=["modality", "dilation", "mhca", "lf"], required=True)
    p.add_argument("--train-data", type=Path, required=True)
    p.add_argument("--test-data", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    _add(p, *model_flags, *train_flags)

    p = sub.add_parser("ingest", help="convert raw float32 tensors into an FMFB container")
    common(p)
    p.add_argument("--video", type=Path, required=True)
    p.add_argument("--extents", type=int, nargs=3, metavar=("T", "H", "W"), required=True)
    p.add_argument("--current", type=Path, required=True)
    p.add_argument("--masks", type=Path)
    p.add_argument("--crop", type=int, nargs=4, metavar=("TOP", "LEFT", "BOTTOM", "RIGHT"))
    p.add_argument("--window", type=int, nargs=2, metavar=("FRAMES", "CURRENT"))
    p.add_argument("--stride", type=int)
    p.add_argument("--stats", type=Path, help="JSON with video_mean/video_std/current_mean/current_std")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags and validate every value before work starts."""
    cfg = {k: v for k, v in DEFAULTS.items() if hasattr(args, k)}
    if getattr(args, "config", None):
        try:
            from_file = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        for k, v in from_file.items():
            if k in cfg:
                cfg[k] = v
    for k in list(cfg):
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    for k, allowed in CHOICES.items():
        if k in cfg and cfg[k] not in allowed:
            raise UsageError(f"{k}={cfg[k]!r} not in {allowed}")
    if "epochs" in cfg and cfg["epochs"] < 0:
        raise UsageError("epochs must be non-negative")
    for k in ("batch", "n", "frames", "height", "width", "current_len"):
        if k in cfg and cfg[k] <= 0:
            raise UsageError(f"{k} must be positive")
    for k in ("occlusion", "balance", "haze_strength"):
        if k in cfg and not 0.0 <= cfg[k] <= 1.0:
            raise UsageError(f"{k} must lie in [0, 1]")
    if "radius" in cfg and cfg["radius"] < 0:
        raise UsageError("radius must be non-negative")
    if "n" in cfg and cfg["n"] < 2:
        raise UsageError("n must be at least 2")
    extra = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
             if k not in cfg and k not in ("config", "verbose")}
    cfg.update(extra)
    return cfg


def _persist(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str))


def _model_config(cfg: dict, ds: Dataset) -> ModelConfig:
    _, frames, height, width, _ = ds.videos.shape
    outputs = cfg["heads"]
    if cfg["modality"] == "current" and outputs != "cls":
        log.info("current-only model has no dense head; using heads=cls")
        outputs = "cls"
    return ModelConfig.preset(cfg["preset"], frames=frames, height=height, width=width,
                              current_len=ds.currents.shape[1], modality=cfg["modality"],
                              dilated=cfg["dilated"] == "on", mhca=cfg["mhca"], lf=cfg["lf"] == "on",
                              outputs=outputs)


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch=cfg["batch"], lr=cfg["lr"], lr_decayed=cfg["lr_decayed"],
                       lr_milestone=cfg["lr_milestone"], alpha=cfg["alpha"], clip_norm=cfg["clip"] or None,
                       weight_decay=cfg["weight_decay"], seed=cfg["seed"])


def _load_data(path: Path) -> Dataset:
    if not Path(path).exists():
        raise UsageError(f"dataset {path} does not exist")
    return read_fmfb(path)


def _check(paths: list[Path]) -> None:
    missing = [str(p) for p in paths if not Path(p).exists() or Path(p).stat().st_size == 0]
    if missing:
        raise RuntimeError(f"outputs missing or empty: {missing}")


def _print_stats(ds: Dataset) -> None:
    s = ds.stats()
    print(f"{'':<10}{'normal':>10}{'abnormal':>10}{'total':>10}")
    print(f"{'samples':<10}{s['normal']:>10}{s['abnormal']:>10}{s['total']:>10}")
    print(f"{'hazed':<10}{s['hazed_normal']:>10}{s['hazed_abnormal']:>10}"
          f"{s['hazed_normal'] + s['hazed_abnormal']:>10}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: dict, out: Path) -> list[Path]:
    data = DataConfig(cfg["frames"], cfg["height"], cfg["width"], cfg["current_len"])
    corruption = Corruption(cfg["occlusion"], cfg["occlusion_target"], cfg["haze_strength"])
    ds = make_dataset(cfg["n"], cfg["balance"], corruption, cfg["seed"], cfg["split"], data)
    path = out / f"{cfg['split']}.fmfb"
    write_fmfb(path, ds)
    check = read_fmfb(path)
    if check.stats() != ds.stats():
        raise RuntimeError("container recount does not match generated statistics")
    _print_stats(ds)
    return [path, path.with_suffix(".json")]


def cmd_train(cfg: dict, out: Path) -> list[Path]:
    from .plotting import plot_training_log

    ds = _load_data(Path(cfg["data"]))
    tcfg = _train_config(cfg)
    ckpt, log_csv = out / "model.fmck", out / "metrics.csv"
    if cfg.get("resume"):
        model, opt, start = load_training_checkpoint(cfg["resume"], tcfg.lr, tcfg.weight_decay)
        if Path(cfg["resume"]).resolve() != ckpt.resolve() and (Path(cfg["resume"]).parent / "metrics.csv").exists():
            log_csv.write_text((Path(cfg["resume"]).parent / "metrics.csv").read_text())
        _trim_log(log_csv, start)
    else:
        model, opt, start = FmFormer(_model_config(cfg, ds), cfg["seed"]), None, 0
    print(f"model {model.config.name} {model.config.modality}: {model.num_parameters():,} parameters")
    try:
        result = train(model, ds, tcfg, opt, start, log_csv, ckpt)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good state saved to {ckpt}", file=sys.stderr)
        raise
    if result.history:
        last = result.history[-1]
        print(" ".join(f"{k}={last[k]:.6g}" for k in CSV_FIELDS))
    elif not ckpt.exists():
        save_training_checkpoint(ckpt, model, result.optimizer, start, tcfg)
    paths = [ckpt]
    if log_csv.exists() and result.history:
        paths += [log_csv, plot_training_log(log_csv)]
    read_checkpoint(ckpt)
    return paths


def _trim_log(log_csv: Path, epoch: int) -> None:
    """Drop rows after ``epoch`` so a resumed run appends cleanly."""
    if not log_csv.exists():
        return
    lines = log_csv.read_text().splitlines()
    keep = [lines[0]] + [ln for ln in lines[1:] if int(float(ln.split(",")[0])) <= epoch]
    log_csv.write_text("\n".join(keep) + "\n")


def cmd_eval(cfg: dict, out: Path) -> list[Path]:
    model, _ = load_model(cfg["checkpoint"])
    paths = []
    if cfg.get("sweep_length"):
        from .plotting import plot_sweep

        corruption = Corruption(cfg["occlusion"], cfg["occlusion_target"], cfg["haze_strength"])
        c = model.config
        frames = cfg.get("sweep_frames") or sorted({max(c.t_v, c.frames // 2), c.frames, 2 * c.frames})
        currents = cfg.get("sweep_current") or sorted({c.current_len // 2, c.current_len, 2 * c.current_len})
        if any(f % c.t_v for f in frames):
            raise UsageError(f"sweep frame counts must be multiples of the temporal patch size {c.t_v}")
        rows = sweep_lengths(model, frames, currents, cfg["n"], cfg["seed"], corruption)
        csv_path = out / "sweep.csv"
        write_rows_csv(csv_path, rows)
        paths += [csv_path, plot_sweep(rows, out / "sweep.png")]
        for r in rows:
            print(f"frames={r['frames']:<4} current={r['current_len']:<5}"
                  + " ".join(f"{k}={r[k]:.4f}" for k in ("acc", "f1", "fdr", "mdr", "miou")))
    if cfg.get("data"):
        ds = _load_data(Path(cfg["data"]))
        if cfg.get("fuse"):
            models = [model] + [load_model(p)[0] for p in cfg["fuse"]]
            rec = evaluate_fusion(models, ds)
        else:
            rec = evaluate(model, ds)
        csv_path = out / "metrics.csv"
        write_rows_csv(csv_path, [{"checkpoint": cfg["checkpoint"], **rec.as_dict()}])
        print(format_table([(Path(cfg["checkpoint"]).stem, rec)]))
        paths.append(csv_path)
    if not paths:
        raise UsageError("eval needs --data and/or --sweep-length")
    return paths


def cmd_predict(cfg: dict, out: Path) -> list[Path]:
    model, _ = load_model(cfg["checkpoint"])
    if model.dense_head is None:
        raise UsageError("checkpoint has no dense head; nothing to export")
    ds = _load_data(Path(cfg["data"]))
    c = model.config
    if ds.videos.shape[2:4] != (c.height, c.width):
        log.info("input %s differs from trained %s; positional embeddings interpolated",
                 ds.videos.shape[2:4], (c.height, c.width))
    mask_dir = out / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    paths, tiles = [], []
    for start in range(0, len(ds), 32):
        idx = np.arange(start, min(start + 32, len(ds)))
        x_v = ds.videos[idx]
        x_c = ds.currents[idx] if c.uses_current else None
        pix, _ = model.predict(x_v, x_c)
        for j, i in enumerate(idx):
            pred = pix[j].argmax(-1)
            path = mask_dir / f"mask_{i:05d}.pgm"
            ann.write_mask_pgm(path, pred)
            paths.append(path)
            tiles.append(ann.overlay(ds.videos[i, -1], pred))
    cols = int(np.ceil(np.sqrt(len(tiles))))
    rows = int(np.ceil(len(tiles) / cols))
    h, w = tiles[0].shape
    sheet = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for k, tile in enumerate(tiles):
        r, q = divmod(k, cols)
        sheet[r * h:(r + 1) * h, q * w:(q + 1) * w] = tile
    composite = out / "overlay.pgm"
    ann.write_pgm(composite, sheet)
    print(f"wrote {len(paths)} masks to {mask_dir} and {composite}")
    return paths + [composite]


def cmd_annotate(cfg: dict, out: Path) -> list[Path]:
    keyframes = ann.read_keyframes(cfg["keyframes"])
    src = Path(cfg["frames_path"])
    if src.suffix == ".npy":
        frames = np.load(src)
    else:
        frames = _load_data(src).videos[cfg["sample"]]
    masks = ann.annotate_frames(keyframes, frames, cfg["radius"], cfg["sigma"])
    boxes = ann.propagate(keyframes, frames.shape[0])
    paths = []
    for t, box in enumerate(boxes):
        if box is None:
            continue
        path = out / f"mask_{t:05d}.pgm"
        ann.write_mask_pgm(path, masks[t])
        paths.append(path)
        print(f"frame {t}: box ({', '.join(f'{v:.1f}' for v in box)}) area {int(masks[t].sum())}")
    return paths


STUDIES = {
    "modality": {"cross": {}, "visual": {"modality": "visual"}, "current": {"modality": "current", "outputs": "cls"}},
    "dilation": {"dilated": {"dilated": True}, "standard": {"dilated": False}},
    "mhca": {"bi": {"mhca": "bi"}, "uni": {"mhca": "uni"}, "off": {"mhca": "off"}},
    "lf": {"lf": {"lf": True}, "no-lf": {"lf": False}},
}


def cmd_ablate(cfg: dict, out: Path) -> list[Path]:
    from .plotting import plot_ablation

    tr = _load_data(Path(cfg["train_data"]))
    te = _load_data(Path(cfg["test_data"]))
    base = _model_config(cfg, tr)
    tcfg = _train_config(cfg)
    variants = STUDIES[cfg["study"]]
    rows = run_ablation(base, variants, tr, te, cfg["seeds"], tcfg)
    table = [r.as_dict() for r in rows]
    means = mean_by_variant(rows)
    if cfg["study"] == "modality":
        # late fusion of the separately trained unimodal models
        for seed in cfg["seeds"]:
            vis = FmFormer(dataclasses.replace(base, modality="visual"), seed)
            cur = FmFormer(dataclasses.replace(base, modality="current", outputs="cls"), seed)
            for m in (vis, cur):
                train(m, tr, dataclasses.replace(tcfg, seed=seed))
            table.append({"variant": "visual+current", "seed": seed, **evaluate_fusion([vis, cur], te).as_dict()})
        fused = [r for r in table if r["variant"] == "visual+current"]
        means["visual+current"] = {k: float(np.mean([r[k] for r in fused])) for k in
                                   ("acc", "f1", "fdr", "mdr", "miou")}
    csv_path = out / "ablation.csv"
    write_rows_csv(csv_path, table)
    mean_path = out / "ablation_mean.csv"
    write_rows_csv(mean_path, [{"variant": k, **v} for k, v in means.items()])
    print(format_table([(k, MetricsRecord(**v)) for k, v in means.items()]))
    return [csv_path, mean_path, plot_ablation(means, out / "ablation.png")]


def cmd_ingest(cfg: dict, out: Path) -> list[Path]:
    stats = json.loads(Path(cfg["stats"]).read_text()) if cfg.get("stats") else {}
    v_stats = (stats["video_mean"], stats["video_std"]) if "video_mean" in stats else None
    c_stats = (stats["current_mean"], stats["current_std"]) if "current_mean" in stats else None
    samples = list(ingest_raw(cfg["video"], tuple(cfg["extents"]), cfg["current"], cfg.get("crop"),
                              v_stats, c_stats, cfg.get("window"), cfg.get("stride"),
                              mask_path=cfg.get("masks")))
    if not samples:
        raise UsageError("the window does not fit the recording; no samples produced")
    for s in samples:
        if s.mask is None:
            s.mask = np.zeros(s.video.shape[1:3], dtype=np.uint8)
    ds = Dataset.from_samples(samples, {"source": str(cfg["video"]), "crop": cfg.get("crop")})
    path = out / "ingested.fmfb"
    write_fmfb(path, ds)
    _print_stats(ds)
    return [path]


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "annotate": cmd_annotate, "ablate": cmd_ablate, "ingest": cmd_ingest}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = Path(args.out)
        _persist(out, cfg)
        written = COMMANDS[args.command](cfg, out)
        _check(written)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged:
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
