import dataclasses
import hashlib
import math

import numpy as np
import pytest

from fmformer.synth import (HALF_MAX_FACTOR, Corruption, DataConfig, Scenario, aggregate_class, anomaly_mask,
                            generate, ingest_raw, make_dataset, read_fmfb, sample_scenario, sidecar_path,
                            write_fmfb)

SMALL = DataConfig(4, 32, 32, 16)


def digest(sample):
    return hashlib.sha256(sample.video.tobytes() + sample.current.tobytes() + sample.mask.tobytes()).hexdigest()


class TestGenerate:
    def test_normal_sample(self):
        s = generate(Scenario(seed=1, frames=4, height=32, width=32, current_len=16))
        assert not s.mask.any() and s.label == 0

    def test_deterministic(self):
        sc = sample_scenario(5, True, True, SMALL)
        assert digest(generate(sc)) == digest(generate(sc))

    def test_frame_order_validated(self):
        with pytest.raises(ValueError, match="onset"):
            Scenario(seed=0, anomaly=True, onset=3, apex=2, offset=5)

    def test_value_range_and_dtype(self):
        s = generate(sample_scenario(2, True, False, SMALL))
        assert s.video.dtype == np.float32 and s.video.min() >= 0 and s.video.max() <= 1
        assert s.video.shape == (4, 32, 32, 3) and s.current.shape == (16, 3)

    @pytest.mark.parametrize("radius", [3.0, 5.5, 9.0])
    def test_half_max_disc_area(self, radius):
        sc = Scenario(seed=0, height=64, width=64, anomaly=True, onset=0, apex=3, offset=6,
                      center=(31.7, 32.2), radius=radius)
        area = int(anomaly_mask(sc, sc.apex).sum())
        analytic = math.pi * (radius * HALF_MAX_FACTOR) ** 2
        assert abs(area - analytic) <= 0.3 * analytic

    def test_mask_only_inside_episode(self):
        sc = Scenario(seed=0, frames=8, anomaly=True, onset=2, apex=4, offset=5, center=(32, 32), radius=5)
        for t in range(8):
            assert anomaly_mask(sc, t).any() == (2 <= t <= 5)

    def test_label_matches_mask(self):
        for i in range(20):
            s = generate(sample_scenario(100 + i, bool(i % 2), False, SMALL))
            assert s.label == aggregate_class(s.mask) == (i % 2)

    def test_haze_leaves_current(self):
        sc = sample_scenario(7, True, False, SMALL)
        clean = generate(sc)
        hazed = generate(dataclasses.replace(sc, haze=True))
        np.testing.assert_array_equal(clean.current, hazed.current)
        np.testing.assert_array_equal(clean.mask, hazed.mask)
        assert not np.array_equal(clean.video, hazed.video)


class TestDataset:
    def test_balance(self):
        ds = make_dataset(100, seed=1, data=DataConfig(2, 16, 16, 8))
        assert abs(int(ds.labels.sum()) - 50) <= 1

    def test_no_haze_at_zero(self):
        ds = make_dataset(40, corruption=Corruption(0.0), data=DataConfig(2, 16, 16, 8))
        assert not ds.hazed.any()

    def test_abnormal_target(self):
        ds = make_dataset(60, corruption=Corruption(1.0, "abnormal"), data=DataConfig(2, 16, 16, 8))
        np.testing.assert_array_equal(ds.hazed, ds.labels.astype(bool))

    def test_splits_differ(self):
        a = make_dataset(4, seed=1, data=SMALL)
        b = make_dataset(4, seed=1, split="test", data=SMALL)
        assert not np.array_equal(a.videos, b.videos)

    def test_container_round_trip(self, tmp_path):
        ds = make_dataset(10, corruption=Corruption(0.5), seed=4, data=SMALL)
        write_fmfb(tmp_path / "d.fmfb", ds)
        back = read_fmfb(tmp_path / "d.fmfb")
        for f in ("videos", "currents", "masks", "labels"):
            np.testing.assert_array_equal(getattr(back, f), getattr(ds, f))
        assert (tmp_path / "d.fmfb").read_bytes()[:4] == b"FMFB"
        assert sidecar_path(tmp_path / "d.fmfb").exists()

    def test_stats_recount(self, tmp_path):
        ds = make_dataset(30, corruption=Corruption(0.5, "all"), seed=2, data=DataConfig(2, 16, 16, 8))
        st = ds.stats()
        assert st["abnormal"] == int(sum(aggregate_class(m) for m in ds.masks))
        assert st["hazed_normal"] + st["hazed_abnormal"] == int(ds.hazed.sum())
        assert st["normal"] + st["abnormal"] == st["total"] == 30


class TestIngest:
    def write(self, tmp_path, t=4, h=32, w=32, t_c=20, seed=0):
        r = np.random.default_rng(seed)
        video = r.uniform(0, 255, (t, h, w, 3)).astype("<f4")
        current = r.normal(3.0, 2.0, (t_c, 3)).astype("<f4")
        video.tofile(tmp_path / "v.raw")
        current.tofile(tmp_path / "c.raw")
        return video, current

    def test_identity(self, tmp_path):
        video, current = self.write(tmp_path)
        (s,) = ingest_raw(tmp_path / "v.raw", (4, 32, 32), tmp_path / "c.raw")
        np.testing.assert_allclose(s.video, video / 255.0, rtol=1e-6)
        np.testing.assert_array_equal(s.current, current)

    def test_crop(self, tmp_path):
        self.write(tmp_path)
        (s,) = ingest_raw(tmp_path / "v.raw", (4, 32, 32), tmp_path / "c.raw", crop=(8, 8, 24, 24))
        assert s.video.shape == (4, 16, 16, 3)

    def test_zscore(self, tmp_path):
        _, current = self.write(tmp_path, t_c=2000)
        stats = (current.mean(0), current.std(0))
        (s,) = ingest_raw(tmp_path / "v.raw", (4, 32, 32), tmp_path / "c.raw", current_stats=stats)
        np.testing.assert_allclose(s.current.mean(0), 0.0, atol=1e-5)
        np.testing.assert_allclose(s.current.var(0), 1.0, atol=1e-4)

    def test_bad_extents(self, tmp_path):
        self.write(tmp_path)
        with pytest.raises(ValueError, match="extents"):
            list(ingest_raw(tmp_path / "v.raw", (5, 32, 32), tmp_path / "c.raw"))
