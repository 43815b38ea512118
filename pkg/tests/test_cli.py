import csv
import hashlib
import json

import numpy as np
import pytest

from fmformer.cli import main
from fmformer.model import read_checkpoint
from fmformer.synth import read_fmfb

GEOM = ["--frames", "4", "--height", "32", "--width", "32", "--current-len", "16"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(root / "d"), "--n", "8", "--seed", "7", *GEOM]) == 0
    return root / "d" / "train.fmfb"


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out", str(out), "--data", str(data), "--epochs", "2", "--batch", "4"]) == 0
    return out


class TestGenerate:
    def test_hash_determinism(self, tmp_path, data):
        assert main(["generate", "--out", str(tmp_path), "--n", "8", "--seed", "7", *GEOM]) == 0
        assert sha(tmp_path / "train.fmfb") == sha(data)

    def test_balance_and_stats(self, data, capsys):
        ds = read_fmfb(data)
        assert len(ds) == 8 and ds.labels.sum() == 4

    def test_occlusion_recount(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path), "--n", "200", "--split", "test", "--occlusion", "0.5",
                     "--frames", "2", "--height", "16", "--width", "16", "--current-len", "8"]) == 0
        ds = read_fmfb(tmp_path / "test.fmfb")
        abnormal = ds.labels == 1
        assert abs(ds.hazed[abnormal].mean() - 0.5) < 0.15
        assert not ds.hazed[~abnormal].any()

    def test_usage_errors(self, tmp_path, capsys):
        assert main(["generate", "--out", str(tmp_path), "--occlusion", "1.5"]) == 2
        assert main(["generate", "--out", str(tmp_path), "--n", "1"]) == 2
        assert "error" in capsys.readouterr().err
        with pytest.raises(SystemExit):
            main(["generate", "--out", str(tmp_path), "--preset", "huge"])

    def test_config_file_precedence(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"n": 6, "seed": 3}))
        assert main(["generate", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "c.json"), "--seed", "4",
                     *GEOM]) == 0
        cfg = json.loads((tmp_path / "o" / "config.json").read_text())
        assert cfg["n"] == 6 and cfg["seed"] == 4


class TestTrainEval:
    def test_outputs(self, trained):
        for name in ("model.fmck", "metrics.csv", "metrics.png", "config.json"):
            assert (trained / name).stat().st_size > 0
        rows = list(csv.DictReader(open(trained / "metrics.csv")))
        assert [r["epoch"] for r in rows] == ["1", "2"]

    def test_resume_identical(self, data, trained, tmp_path):
        half = tmp_path / "half"
        assert main(["train", "--out", str(half), "--data", str(data), "--epochs", "1", "--batch", "4"]) == 0
        assert main(["train", "--out", str(half), "--data", str(data), "--epochs", "2", "--batch", "4",
                     "--resume", str(half / "model.fmck")]) == 0
        a = read_checkpoint(half / "model.fmck").arrays
        b = read_checkpoint(trained / "model.fmck").arrays
        assert a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert (half / "metrics.csv").read_text() == (trained / "metrics.csv").read_text()

    def test_visual_modality(self, data, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--data", str(data), "--epochs", "1", "--batch", "8",
                     "--modality", "visual"]) == 0
        assert read_checkpoint(tmp_path / "model.fmck").config.modality == "visual"

    def test_eval(self, data, trained, tmp_path, capsys):
        assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(trained / "model.fmck"),
                     "--data", str(data)]) == 0
        assert "mIoU" in capsys.readouterr().out
        (row,) = csv.DictReader(open(tmp_path / "metrics.csv"))
        assert 0.0 <= float(row["acc"]) <= 1.0

    def test_eval_fuse(self, data, trained, tmp_path):
        assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(trained / "model.fmck"),
                     "--data", str(data), "--fuse", str(trained / "model.fmck")]) == 0

    def test_sweep(self, trained, tmp_path):
        assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(trained / "model.fmck"),
                     "--sweep-length", "--n", "4", "--sweep-frames", "4", "6", "--sweep-current", "8", "16"]) == 0
        rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
        assert len(rows) == 4 and (tmp_path / "sweep.png").stat().st_size > 0

    def test_eval_needs_something(self, trained, tmp_path):
        assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(trained / "model.fmck")]) == 2

    def test_predict_one_pgm_per_sample(self, data, trained, tmp_path):
        assert main(["predict", "--out", str(tmp_path), "--checkpoint", str(trained / "model.fmck"),
                     "--data", str(data)]) == 0
        assert len(list((tmp_path / "masks").glob("*.pgm"))) == 8
        assert (tmp_path / "overlay.pgm").exists()

    def test_missing_data(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--data", str(tmp_path / "nope.fmfb")]) == 2


class TestOtherCommands:
    def test_annotate(self, tmp_path):
        frames = np.full((6, 20, 20), 0.5)
        np.save(tmp_path / "f.npy", frames)
        (tmp_path / "k.txt").write_text("1 onset 2 2 8 8\n4 apex 4 4 12 12\n")
        assert main(["annotate", "--out", str(tmp_path / "o"), "--keyframes", str(tmp_path / "k.txt"),
                     "--frames", str(tmp_path / "f.npy"), "--radius", "0"]) == 0
        assert sorted(p.name for p in (tmp_path / "o").glob("*.pgm")) == [f"mask_{t:05d}.pgm" for t in range(1, 5)]

    def test_annotate_bad_keyframes(self, tmp_path):
        np.save(tmp_path / "f.npy", np.zeros((3, 8, 8)))
        (tmp_path / "k.txt").write_text("0 onset 1 1 2\n")
        assert main(["annotate", "--out", str(tmp_path / "o"), "--keyframes", str(tmp_path / "k.txt"),
                     "--frames", str(tmp_path / "f.npy")]) == 1

    def test_ingest(self, tmp_path):
        rng = np.random.default_rng(0)
        rng.uniform(0, 255, (8, 24, 24, 3)).astype("<f4").tofile(tmp_path / "v.raw")
        rng.normal(size=(32, 3)).astype("<f4").tofile(tmp_path / "c.raw")
        assert main(["ingest", "--out", str(tmp_path / "o"), "--video", str(tmp_path / "v.raw"),
                     "--extents", "8", "24", "24", "--current", str(tmp_path / "c.raw"),
                     "--crop", "4", "4", "20", "20", "--window", "4", "16"]) == 0
        ds = read_fmfb(tmp_path / "o" / "ingested.fmfb")
        assert ds.videos.shape == (2, 4, 16, 16, 3) and ds.currents.shape == (2, 16, 3)

    def test_ablate(self, data, tmp_path):
        assert main(["ablate", "--out", str(tmp_path), "--study", "dilation", "--train-data", str(data),
                     "--test-data", str(data), "--seeds", "0", "--epochs", "1", "--batch", "8"]) == 0
        rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
        assert [r["variant"] for r in rows] == ["dilated", "standard"]
        assert (tmp_path / "ablation.png").stat().st_size > 0
