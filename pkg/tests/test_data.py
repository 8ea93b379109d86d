"""Data pipeline tests: filtering, resizing, augmentation, SMOTE, disk IO."""

import numpy as np
import pytest

import oracles
from qana import data, synth
from qana.data import (
    AugmentConfig,
    Dataset,
    ImageSample,
    SmoteConfig,
    augment,
    bilinear_resize,
    check_sample,
    ingest,
    knn,
    load_image,
    load_labels,
    load_processed,
    load_splits,
    preprocess,
    quality_filter,
    save_png,
    save_processed,
    save_splits,
    smote_generate,
    smote_oversample,
)
from qana.errors import ConfigError, DataError


@pytest.fixture
def rng():
    return np.random.default_rng(101)


def make_sample(rng, label=0, sid="s0"):
    return ImageSample(rng.random((64, 64, 3)).astype(np.float32), label, sid)


class _FixedRng:
    """Deterministic stand-in: uniform() returns the upper bound, random() 1.0."""

    def uniform(self, lo, hi=None):
        return hi if hi is not None else lo

    def random(self, shape=None):
        return 1.0 if shape is None else np.ones(shape)


class TestQualityFilter:
    def test_uniform_gray_rejected_for_variance(self):
        img = np.full((64, 64, 3), 128.0)
        res = quality_filter(img)
        assert not res.keep and res.reason == "low_variance"

    def test_small_image_rejected_for_resolution(self, rng):
        img = rng.random((16, 16, 3)) * 255
        res = quality_filter(img)
        assert not res.keep and res.reason == "low_resolution"

    def test_resolution_checked_before_variance(self):
        res = quality_filter(np.full((16, 16, 3), 128.0))
        assert res.reason == "low_resolution"

    def test_saturated_rejected(self, rng):
        img = rng.random((64, 64, 3)) * 200
        img[:20, :, :] = 255.0  # > 5% of values at max
        res = quality_filter(img)
        assert not res.keep and res.reason == "saturated"

    def test_clean_synthetic_kept(self):
        for c in range(7):
            img = synth.render_sample(c, 80, np.random.default_rng(c))
            assert quality_filter(img).keep

    def test_bad_rank_raises(self):
        with pytest.raises(DataError):
            quality_filter(np.zeros((64, 64)))


class TestResize:
    def test_center_sample_frozen(self):
        img = np.array([[0.0, 1.0], [1.0, 0.0]])[:, :, None]
        out = bilinear_resize(img, 1, 1)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == pytest.approx(0.5)

    def test_identity_size_is_copy(self, rng):
        img = rng.random((64, 64, 3))
        out = bilinear_resize(img, 64, 64)
        assert np.array_equal(out, img) and out is not img

    def test_matches_pointwise_oracle(self, rng):
        for _ in range(6):
            h, w = rng.integers(3, 40, size=2)
            oh, ow = rng.integers(1, 30, size=2)
            img = rng.random((int(h), int(w), 3))
            out = bilinear_resize(img, int(oh), int(ow))
            for r in (0, int(oh) - 1, int(oh) // 2):
                for c in (0, int(ow) - 1, int(ow) // 2):
                    sy = (r + 0.5) * (int(h) / int(oh)) - 0.5
                    sx = (c + 0.5) * (int(w) / int(ow)) - 0.5
                    want = oracles.bilinear_point(img, sy, sx)
                    assert np.allclose(out[r, c], want, atol=1e-12)

    def test_constant_image_stays_constant(self):
        out = bilinear_resize(np.full((128, 128, 3), 7.0), 64, 64)
        assert np.allclose(out, 7.0)


class TestPreprocess:
    def test_constant_255_becomes_ones(self):
        s = preprocess(np.full((128, 128, 3), 255.0), 3, "a")
        assert s.pixels.shape == (64, 64, 3)
        assert np.all(s.pixels == 1.0)
        assert s.label == 3 and s.source_id == "a"

    def test_native_size_only_rescales(self, rng):
        raw = (rng.random((64, 64, 3)) * 255).round()
        s = preprocess(raw, 0, "b")
        assert np.allclose(s.pixels, raw / 255.0, atol=1e-7)

    def test_output_validated(self):
        with pytest.raises(DataError):
            preprocess(np.full((64, 64, 3), 128.0), 9, "c")  # label out of range


class TestSampleChecks:
    def test_range_violation(self, rng):
        s = make_sample(rng)
        s.pixels[0, 0, 0] = 1.5
        with pytest.raises(DataError):
            check_sample(s)

    def test_shape_violation(self):
        s = ImageSample(np.zeros((32, 32, 3), np.float32), 0, "x")
        with pytest.raises(DataError):
            check_sample(s)


class TestAugment:
    def identity_cfg(self, **kw):
        base = dict(brightness=(1.0, 1.0), contrast=(1.0, 1.0), flip_prob=0.0,
                    hue_shift=0.0, saturation=(1.0, 1.0))
        base.update(kw)
        return AugmentConfig(**base)

    def test_identity_config_is_bitwise_noop(self, rng):
        s = make_sample(rng)
        out = augment(s, self.identity_cfg(), np.random.default_rng(0))
        assert np.array_equal(out.pixels, s.pixels)
        assert out.label == s.label

    def test_double_flip_restores(self, rng):
        s = make_sample(rng)
        cfg = self.identity_cfg(flip_prob=1.0)
        once = augment(s, cfg, np.random.default_rng(1))
        assert not np.array_equal(once.pixels, s.pixels)
        twice = augment(once, cfg, np.random.default_rng(2))
        assert np.allclose(twice.pixels, s.pixels, atol=1e-7)

    def test_brightness_clamps(self, rng):
        s = make_sample(rng)
        s.pixels[:] = 0.9
        cfg = self.identity_cfg(brightness=(1.3, 1.3))
        out = augment(s, cfg, np.random.default_rng(3))
        assert np.all(out.pixels == 1.0)  # 0.9 * 1.3 = 1.17 -> clamp

    def test_contrast_preserves_mean(self, rng):
        s = make_sample(rng)
        s.pixels[:] = np.clip(s.pixels * 0.4 + 0.3, 0, 1)  # keep off the clamp
        cfg = self.identity_cfg(contrast=(1.2, 1.2))
        out = augment(s, cfg, np.random.default_rng(4))
        assert out.pixels.mean() == pytest.approx(s.pixels.mean(), abs=1e-5)

    def test_hue_third_turn_maps_red_to_green(self):
        s = ImageSample(np.zeros((64, 64, 3), np.float32), 0, "h")
        s.pixels[:, :, 0] = 1.0  # pure red
        cfg = self.identity_cfg(hue_shift=1.0 / 3.0)
        out = augment(s, cfg, _FixedRng())  # hue draw hits +1/3 exactly
        want = np.zeros_like(s.pixels)
        want[:, :, 1] = 1.0
        assert np.allclose(out.pixels, want, atol=1e-6)

    def test_zero_saturation_grays_out(self, rng):
        s = make_sample(rng)
        cfg = self.identity_cfg(saturation=(0.0, 0.0))
        out = augment(s, cfg, np.random.default_rng(5))
        assert np.allclose(out.pixels[:, :, 0], out.pixels[:, :, 1], atol=1e-6)
        assert np.allclose(out.pixels[:, :, 1], out.pixels[:, :, 2], atol=1e-6)

    def test_fixed_seed_reproduces(self, rng):
        s = make_sample(rng)
        cfg = AugmentConfig()
        a = augment(s, cfg, np.random.default_rng(42))
        b = augment(s, cfg, np.random.default_rng(42))
        c = augment(s, cfg, np.random.default_rng(43))
        assert np.array_equal(a.pixels, b.pixels)
        assert not np.array_equal(a.pixels, c.pixels)

    def test_output_stays_in_range(self, rng):
        s = make_sample(rng)
        for seed in range(8):
            out = augment(s, AugmentConfig(), np.random.default_rng(seed))
            assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_bad_ranges_rejected(self):
        with pytest.raises(ConfigError):
            AugmentConfig(brightness=(1.3, 0.7))
        with pytest.raises(ConfigError):
            AugmentConfig(flip_prob=1.5)


class TestKnn:
    def test_colinear_example(self):
        pts = np.array([[0.0], [1.0], [2.0], [5.0]])
        assert knn(pts, 0, 2) == [1, 2]

    def test_duplicate_distance_breaks_by_index(self):
        pts = np.array([[0.0], [1.0], [1.0], [-1.0]])
        # distances from 0: 1, 1, 1 -> indices win in order 1, 2, 3
        assert knn(pts, 0, 2) == [1, 2]

    def test_matches_exhaustive_oracle(self, rng):
        pts = rng.standard_normal((50, 8))
        for q in (0, 17, 49):
            got = knn(pts, q, 5)
            d = np.sqrt(((pts - pts[q]) ** 2).sum(axis=1))
            want = [i for _, i in sorted((d[i], i) for i in range(50) if i != q)][:5]
            assert got == want

    def test_k_bounds(self):
        pts = np.zeros((3, 2))
        with pytest.raises(DataError):
            knn(pts, 0, 3)
        with pytest.raises(DataError):
            knn(pts, 0, 0)


class TestSmoteGenerate:
    class _LamRng:
        def __init__(self, v):
            self.v = v

        def random(self, shape=None):
            return self.v if shape is None else np.full(shape, self.v)

    def test_lambda_zero_returns_base(self, rng):
        a, b = rng.random(10), rng.random(10)
        assert np.array_equal(smote_generate(a, b, self._LamRng(0.0)), a)

    def test_lambda_one_returns_neighbor(self, rng):
        a, b = rng.random(10), rng.random(10)
        assert np.allclose(smote_generate(a, b, self._LamRng(1.0)), b, atol=1e-15)

    def test_envelope_property(self, rng):
        a, b = rng.standard_normal(64), rng.standard_normal(64)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        for _ in range(100):
            v = smote_generate(a, b, rng)
            assert np.all(v >= lo - 1e-12) and np.all(v <= hi + 1e-12)

    def test_per_dimension_lambda_varies(self, rng):
        a = np.zeros(128)
        b = np.ones(128)
        v = smote_generate(a, b, rng)
        assert len(np.unique(v.round(8))) > 100  # one lambda per coordinate

    def test_single_lambda_is_colinear(self, rng):
        a, b = rng.random(32), rng.random(32) + 2.0
        v = smote_generate(a, b, rng, single_lambda=True)
        lam = (v - a) / (b - a)
        assert np.allclose(lam, lam[0], atol=1e-12)


class TestSmoteOversample:
    def build(self, rng, counts):
        out = []
        for c, n in enumerate(counts):
            for i in range(n):
                out.append(make_sample(rng, label=c, sid=f"c{c}-{i}"))
        return out

    def test_balanced_input_is_identity(self, rng):
        samples = self.build(rng, [4, 4])
        out = smote_oversample(samples, SmoteConfig(k=2), num_classes=2)
        assert out == samples

    def test_counts_reach_target(self, rng):
        samples = self.build(rng, [12, 5])
        out = smote_oversample(samples, SmoteConfig(k=2, seed=9), num_classes=2)
        labels = [s.label for s in out]
        assert labels.count(0) == 12 and labels.count(1) == 12
        flagged = [s for s in out if s.synthetic]
        assert len(flagged) == 7 and all(s.label == 1 for s in flagged)

    def test_originals_untouched(self, rng):
        samples = self.build(rng, [8, 4])
        out = smote_oversample(samples, SmoteConfig(k=2), num_classes=2)
        for orig, got in zip(samples, out[: len(samples)]):
            assert got is orig

    def test_small_class_rejected(self, rng):
        samples = self.build(rng, [8, 3])
        with pytest.raises(DataError, match="class 1"):
            smote_oversample(samples, SmoteConfig(k=3), num_classes=2)

    def test_synthetics_inside_parent_envelope(self, rng):
        samples = self.build(rng, [9, 4])
        out = smote_oversample(samples, SmoteConfig(k=2, seed=1), num_classes=2)
        by_id = {s.source_id: s for s in samples}
        checked = 0
        for s in out:
            if not s.synthetic:
                continue
            pair = s.source_id.split("#")[0]
            base, neighbor = (by_id[p] for p in pair.split("+"))
            lo = np.minimum(base.pixels, neighbor.pixels)
            hi = np.maximum(base.pixels, neighbor.pixels)
            assert np.all(s.pixels >= lo - 1e-6) and np.all(s.pixels <= hi + 1e-6)
            checked += 1
        assert checked == 5

    def test_deterministic_under_seed(self, rng):
        samples = self.build(rng, [9, 4])
        a = smote_oversample(samples, SmoteConfig(k=2, seed=3), num_classes=2)
        b = smote_oversample(samples, SmoteConfig(k=2, seed=3), num_classes=2)
        for x, y in zip(a, b):
            assert np.array_equal(x.pixels, y.pixels) and x.source_id == y.source_id


class TestDiskIO:
    def test_png_round_trip(self, tmp_path, rng):
        raw = (rng.random((48, 40, 3)) * 255).round()
        p = tmp_path / "img.png"
        save_png(p, raw)
        back = load_image(p)
        assert back.shape == (48, 40, 3)
        assert np.array_equal(back, raw)

    def test_raw_tile_round_trip(self, tmp_path, rng):
        arr = (rng.random((64, 64, 3)) * 255).astype("<f4")
        p = tmp_path / "img.raw"
        p.write_bytes(arr.tobytes())
        back = load_image(p)
        assert np.allclose(back, arr, atol=1e-5)

    def test_raw_wrong_size_raises(self, tmp_path):
        p = tmp_path / "bad.raw"
        p.write_bytes(b"\x00" * 100)
        with pytest.raises(DataError, match="bytes"):
            load_image(p)

    def test_undecodable_png_raises(self, tmp_path):
        p = tmp_path / "junk.png"
        p.write_bytes(b"not a png at all")
        with pytest.raises(DataError, match="decode"):
            load_image(p)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(DataError, match="missing"):
            load_image(tmp_path / "nope.png")

    def test_labels_happy_path(self, tmp_path):
        p = tmp_path / "labels.csv"
        p.write_text("source_id,filename,label\na,a.png,0\nb,b.png,6\n")
        assert load_labels(p) == [("a", "a.png", 0), ("b", "b.png", 6)]

    def test_labels_bad_header(self, tmp_path):
        p = tmp_path / "labels.csv"
        p.write_text("id,file,cls\na,a.png,0\n")
        with pytest.raises(DataError, match="header"):
            load_labels(p)

    def test_labels_bad_value(self, tmp_path):
        p = tmp_path / "labels.csv"
        p.write_text("source_id,filename,label\na,a.png,seven\n")
        with pytest.raises(DataError, match="integer"):
            load_labels(p)
        p.write_text("source_id,filename,label\na,a.png,9\n")
        with pytest.raises(DataError, match="outside"):
            load_labels(p)

    def test_splits_round_trip(self, tmp_path):
        splits = {"a": "train", "b": "val", "c": "test"}
        save_splits(tmp_path / "splits.txt", splits)
        assert load_splits(tmp_path / "splits.txt") == splits

    def test_splits_bad_line(self, tmp_path):
        p = tmp_path / "splits.txt"
        p.write_text("a,train\nb;test\n")
        with pytest.raises(DataError):
            load_splits(p)

    def test_processed_round_trip(self, tmp_path, rng):
        samples = [make_sample(rng, label=i % 3, sid=f"s{i}") for i in range(5)]
        samples[2].synthetic = True
        ds = Dataset(samples, {f"s{i}": "train" if i < 3 else "test" for i in range(5)})
        save_processed(tmp_path / "ds.npz", ds)
        back = load_processed(tmp_path / "ds.npz")
        assert back.splits == ds.splits
        for a, b in zip(ds.samples, back.samples):
            assert np.array_equal(a.pixels, b.pixels)
            assert (a.label, a.source_id, a.synthetic) == (b.label, b.source_id, b.synthetic)

    def test_processed_missing_raises(self, tmp_path):
        with pytest.raises(DataError):
            load_processed(tmp_path / "none.npz")


class TestSynthDataset:
    def test_class_count_profile(self):
        assert synth.class_counts(120, 5.0) == [120, 92, 70, 54, 41, 31, 24]

    def test_count_validation(self):
        with pytest.raises(ConfigError):
            synth.class_counts(0, 5.0)
        with pytest.raises(ConfigError):
            synth.class_counts(10, 0.5)

    def test_generate_and_ingest(self, tmp_path):
        summary = synth.generate_dataset(tmp_path, n_majority=8, imbalance=2.0,
                                         seed=11, size_range=(64, 80))
        assert summary["class_counts"][0] == 8
        assert summary["total"] == sum(summary["class_counts"])
        ds, rejects = ingest(tmp_path)
        assert rejects == []
        assert len(ds.samples) == summary["total"]
        assert all(s.pixels.shape == (64, 64, 3) for s in ds.samples)
        for name in ("train", "val", "test"):
            assert summary[name] > 0
            assert len(ds.split(name)) == summary[name]

    def test_generation_deterministic(self, tmp_path):
        synth.generate_dataset(tmp_path / "a", n_majority=4, imbalance=2.0, seed=5)
        synth.generate_dataset(tmp_path / "b", n_majority=4, imbalance=2.0, seed=5)
        img_a = (tmp_path / "a" / "images" / "synth-0000.png").read_bytes()
        img_b = (tmp_path / "b" / "images" / "synth-0000.png").read_bytes()
        assert img_a == img_b
        assert ((tmp_path / "a" / "splits.txt").read_text()
                == (tmp_path / "b" / "splits.txt").read_text())

    def test_ingest_rejects_flat_image(self, tmp_path):
        synth.generate_dataset(tmp_path, n_majority=4, imbalance=2.0, seed=2)
        save_png(tmp_path / "images" / "flat.png", np.full((64, 64, 3), 99.0))
        with open(tmp_path / "labels.csv", "a") as fh:
            fh.write("flat,flat.png,0\n")
        with open(tmp_path / "splits.txt", "a") as fh:
            fh.write("flat,train\n")
        ds, rejects = ingest(tmp_path)
        assert ("flat", "low_variance") in rejects
        assert "flat" not in ds.splits

    def test_ingest_propagates_decode_error(self, tmp_path):
        synth.generate_dataset(tmp_path, n_majority=4, imbalance=2.0, seed=2)
        (tmp_path / "images" / "broken.png").write_bytes(b"garbage")
        with open(tmp_path / "labels.csv", "a") as fh:
            fh.write("broken,broken.png,0\n")
        with open(tmp_path / "splits.txt", "a") as fh:
            fh.write("broken,train\n")
        with pytest.raises(DataError, match="decode"):
            ingest(tmp_path)
