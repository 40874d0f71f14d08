import json
import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from synthplankton.dataset import (
    ImageRecord,
    ImageSet,
    batch_indices,
    center_crop,
    hflip_augment,
    holdout_split,
    iterate_batches,
    load_image_dir,
    load_prepared,
    make_toy_images,
    prepare_dataset,
    random_crop_expand,
    save_image_set,
)


def _write(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _pixel_set(n, h, w, seed=0):
    rng = np.random.default_rng(seed)
    recs = tuple(ImageRecord(f"s{i}.png", rng.random((h, w, 3), dtype=np.float32)) for i in range(n))
    return ImageSet(recs, (h, w), 0)


class TestLoad:
    def test_loads_sorted_normalised(self, tmp_path):
        rng = np.random.default_rng(0)
        for name in ("b.png", "a.png", "c.jpg"):
            _write(tmp_path / name, rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))
        s = load_image_dir(tmp_path)
        assert len(s) == 3
        assert [r.source_path for r in s] == ["a.png", "b.png", "c.jpg"]
        px = s.pixels()
        assert px.min() >= 0.0 and px.max() <= 1.0
        assert all(r.crop_origin == (0, 0) and not r.flipped for r in s)

    def test_tiff_and_subdirectory_disambiguation(self, tmp_path):
        arr = np.zeros((8, 8, 3), dtype=np.uint8)
        _write(tmp_path / "x" / "img.png", arr)
        _write(tmp_path / "y" / "img.png", arr)
        _write(tmp_path / "z.tif", arr)
        s = load_image_dir(tmp_path)
        assert [r.source_path for r in s] == ["x/img.png", "y/img.png", "z.tif"]
        assert len({r.key for r in s}) == 3

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ValueError, match="no images found"):
            load_image_dir(tmp_path)

    def test_undecodable_names_file(self, tmp_path):
        (tmp_path / "broken.png").write_bytes(b"not an image")
        with pytest.raises(ValueError, match="broken.png"):
            load_image_dir(tmp_path)

    def test_mixed_resolutions(self, tmp_path):
        _write(tmp_path / "a.png", np.zeros((8, 8, 3), dtype=np.uint8))
        _write(tmp_path / "b.png", np.zeros((8, 9, 3), dtype=np.uint8))
        with pytest.raises(ValueError, match="inconsistent resolutions"):
            load_image_dir(tmp_path)

    def test_resize_policy_area_average(self, tmp_path):
        arr = np.zeros((4, 4, 3), dtype=np.uint8)
        arr[:2, :2] = 255
        _write(tmp_path / "a.png", arr)
        _write(tmp_path / "b.png", np.zeros((6, 6, 3), dtype=np.uint8))
        s = load_image_dir(tmp_path, ("resize", (2, 2)))
        assert s.resolution == (2, 2)
        np.testing.assert_allclose(s[0].pixels[:, :, 0], [[1, 0], [0, 0]])

    def test_parallel_load_matches_serial(self, toy_dir):
        a = load_image_dir(toy_dir)
        b = load_image_dir(toy_dir, workers=4)
        assert np.array_equal(a.pixels(), b.pixels())


class TestCrops:
    def test_identity_center_crop(self):
        s = _pixel_set(1, 4, 4)
        out = center_crop(s, (4, 4))
        assert np.array_equal(out[0].pixels, s[0].pixels)

    def test_center_window_bright_pixel(self):
        px = np.zeros((5, 5, 3), dtype=np.float32)
        px[2, 2] = 1.0
        out = center_crop(ImageSet((ImageRecord("p", px),), (5, 5)), (3, 3))
        # window rows/cols 1..3 -> source (2,2) lands at (1,1)
        assert out[0].pixels[1, 1, 0] == 1.0
        assert out[0].pixels.sum() == 3.0
        assert out[0].crop_origin == (1, 1)

    def test_odd_remainder_goes_bottom_right(self):
        s = _pixel_set(1, 6, 7)
        out = center_crop(s, (3, 4))
        # margins: rows 3 -> top 1 / bottom 2; cols 3 -> left 1 / right 2
        assert out[0].crop_origin == (1, 1)
        assert np.array_equal(out[0].pixels, s[0].pixels[1:4, 1:5])

    def test_crop_too_large(self):
        with pytest.raises(ValueError, match="crop exceeds image"):
            center_crop(_pixel_set(1, 4, 4), (5, 4))
        with pytest.raises(ValueError, match="crop exceeds image"):
            random_crop_expand(_pixel_set(1, 4, 4), (4, 5), 1, 0)

    def test_random_crop_counts_and_windows(self):
        s = _pixel_set(5, 12, 10)
        out = random_crop_expand(s, (8, 8), count=10, seed=7)
        assert len(out) == 50
        for i, rec in enumerate(out):
            src = s[i // 10]
            r, c = rec.crop_origin
            assert 0 <= r <= 4 and 0 <= c <= 2
            assert np.array_equal(rec.pixels, src.pixels[r:r + 8, c:c + 8])
        assert len({r.key for r in out}) == 50

    def test_forced_offset(self):
        s = _pixel_set(3, 6, 6)
        out = random_crop_expand(s, (6, 6), count=1, seed=1)
        assert np.array_equal(out.pixels(), s.pixels())
        assert [r.crop_origin for r in out] == [(0, 0)] * 3

    def test_random_crop_deterministic(self):
        s = _pixel_set(4, 16, 16)
        a = random_crop_expand(s, (8, 8), 3, seed=11)
        b = random_crop_expand(s, (8, 8), 3, seed=11)
        c = random_crop_expand(s, (8, 8), 3, seed=12)
        assert a.pixels().tobytes() == b.pixels().tobytes()
        assert a.manifest() == b.manifest()
        assert a.manifest() != c.manifest()

    def test_count_exceeding_offsets(self):
        with pytest.raises(ValueError):
            random_crop_expand(_pixel_set(1, 5, 5), (4, 4), count=5, seed=0)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(1, 6), k=st.integers(1, 5), seed=st.integers(0, 2**31))
    def test_random_crop_yields_k_times_n(self, n, k, seed):
        out = random_crop_expand(_pixel_set(n, 7, 6), (4, 4), k, seed)
        assert len(out) == k * n


class TestFlip:
    def test_doubles_and_interleaves(self):
        s = _pixel_set(3, 4, 5)
        out = hflip_augment(s)
        assert len(out) == 6
        for i in range(3):
            assert out[2 * i] is s[i]
            assert out[2 * i + 1].flipped
            assert np.array_equal(out[2 * i + 1].pixels, s[i].pixels[:, ::-1])

    def test_involution(self):
        s = _pixel_set(2, 4, 5)
        twice = hflip_augment(hflip_augment(s))
        assert np.array_equal(twice[3].pixels, s[0].pixels)
        assert not twice[3].flipped


class TestBatches:
    def test_partition_sizes(self):
        s = _pixel_set(10, 2, 2)
        assert [len(b) for b in iterate_batches(s, 4, seed=0)] == [4, 4, 2]

    def test_single_batch_is_seeded_permutation(self):
        (idx,) = batch_indices(8, 8, seed=5)
        assert np.array_equal(idx, np.random.default_rng(5).permutation(8))

    def test_oversized_batch_warns(self):
        with pytest.warns(UserWarning):
            batches = batch_indices(5, 9, seed=0)
        assert len(batches) == 1 and sorted(batches[0]) == list(range(5))

    def test_epochs_differ_but_conserve(self):
        a = np.concatenate(batch_indices(20, 6, seed=3))
        b = np.concatenate(batch_indices(20, 6, seed=4))
        assert not np.array_equal(a, b)
        assert Counter(a) == Counter(b) == Counter(range(20))

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 40), bs=st.integers(1, 40), seed=st.integers(0, 10**6))
    def test_epoch_conservation(self, n, bs, seed):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            batches = batch_indices(n, bs, seed)
        assert sorted(np.concatenate(batches).tolist()) == list(range(n))

    def test_batch_pixels_match_records(self):
        s = _pixel_set(6, 3, 3)
        seen = np.concatenate(list(iterate_batches(s, 4, seed=2)))
        assert sorted(map(bytes, (x.tobytes() for x in seen))) == sorted(r.pixels.tobytes() for r in s)

    def test_holdout_split_disjoint(self):
        tr, ho = holdout_split(512, 0.1, seed=0)
        assert len(ho) == 51 and len(tr) == 461
        assert not set(tr) & set(ho)


class TestPreparedIO:
    def test_manifest_round_trip(self, tmp_path):
        s = hflip_augment(random_crop_expand(make_toy_images(3, 16, 0), (12, 12), 2, seed=9))
        save_image_set(s, tmp_path / "prep")
        doc = json.loads((tmp_path / "prep" / "manifest.json").read_text())
        assert len(doc["records"]) == 12
        assert set(doc["records"][0]) >= {"source_path", "crop_origin", "flipped", "seed"}
        back = load_prepared(tmp_path / "prep")
        assert [r.key for r in back] == [r.key for r in s]
        assert np.abs(back.pixels() - s.pixels()).max() <= 0.5 / 255 + 1e-6

    def test_pipeline_byte_reproducible(self, toy_dir):
        a = prepare_dataset(toy_dir, "random", (24, 24), count=2, flip=True, seed=4)
        b = prepare_dataset(toy_dir, "random", (24, 24), count=2, flip=True, seed=4)
        assert a.pixels().tobytes() == b.pixels().tobytes()
        assert a.manifest() == b.manifest()
        assert len(a) == 24 * 2 * 2

    def test_center_then_downscale(self, toy_dir):
        out = prepare_dataset(toy_dir, "center", (32, 32), resize=(16, 16))
        assert out.resolution == (16, 16)

    def test_toy_images_deterministic_and_in_range(self):
        a, b = make_toy_images(5, 32, 1), make_toy_images(5, 32, 1)
        assert a.pixels().tobytes() == b.pixels().tobytes()
        assert a.pixels().min() >= 0 and a.pixels().max() <= 1

    def test_record_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ImageRecord("bad", np.full((2, 2, 3), 1.5, dtype=np.float32))
