import numpy as np
import pytest
from PIL import Image

from protodist.datasets import (
    assign_splits,
    carve_validation,
    load_dataset_spec,
    load_idx,
    load_manifest,
    make_batches,
    read_manifest_file,
    save_manifest,
)
from protodist.errors import ConsistencyError, FormatError, IngestionError
from protodist.synthetic import glyph_dataset

from util import write_glyph_png_tree, write_idx_pair


class TestLoadIdx:
    def test_hand_built_pair_scales_bytes(self, tmp_path):
        # oracle: direct byte arithmetic on the bytes we wrote
        raw = np.zeros((2, 4, 3), dtype=np.uint8)
        raw[0, 0, 0], raw[0, 1, 1], raw[1, 2, 2] = 0, 128, 255
        img, lbl = write_idx_pair(tmp_path, raw, np.array([1, 0]))
        loaded = load_idx(img, lbl)
        assert loaded.images.shape == (2, 1, 4, 3)
        expected = raw.astype(np.float32)[:, None, :, :] / 255.0
        np.testing.assert_array_equal(loaded.images, expected)
        half = float(np.float32(128) / np.float32(255))
        assert {float(v) for v in np.unique(loaded.images)} == {0.0, half, 1.0}
        assert [e.label for e in loaded.manifest.entries] == [1, 0]

    def test_endpoint_scaling(self, tmp_path):
        raw = np.array([[[255, 0]]], dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, raw, np.array([0]))
        loaded = load_idx(img, lbl)
        assert loaded.images.max() == 1.0
        assert loaded.images.min() == 0.0

    def test_bad_image_magic(self, tmp_path):
        raw = np.zeros((1, 2, 2), dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, raw, np.array([0]), image_magic=0xDEAD)
        with pytest.raises(FormatError, match="magic"):
            load_idx(img, lbl)

    def test_bad_label_magic(self, tmp_path):
        raw = np.zeros((1, 2, 2), dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, raw, np.array([0]), label_magic=0x1234)
        with pytest.raises(FormatError, match="magic"):
            load_idx(img, lbl)

    def test_count_mismatch(self, tmp_path):
        raw = np.zeros((3, 2, 2), dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, raw, np.zeros(3), label_count=5)
        with pytest.raises(ConsistencyError, match="count"):
            load_idx(img, lbl)

    def test_truncated_payload(self, tmp_path):
        raw = np.zeros((3, 2, 2), dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, raw, np.zeros(3), truncate_images=5)
        with pytest.raises(FormatError, match="payload"):
            load_idx(img, lbl)

    def test_split_tag_applies_to_all_entries(self, tmp_path):
        raw = np.zeros((4, 2, 2), dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, raw, np.arange(4) % 2)
        loaded = load_idx(img, lbl, split="test")
        assert {e.split for e in loaded.manifest.entries} == {"test"}


class TestManifests:
    def test_ten_pngs_labeled(self, tmp_path):
        manifest = write_glyph_png_tree(tmp_path, chars="0123456789", per_class=1)
        loaded = load_manifest(manifest, image_shape=(1, 28, 28))
        assert len(loaded.manifest.entries) == 10
        assert sorted(e.label for e in loaded.manifest.entries) == list(range(10))
        assert loaded.images.shape == (10, 1, 28, 28)

    def test_rgb_to_gray_resize_contract(self, tmp_path):
        arr = np.zeros((32, 32, 3), dtype=np.uint8)
        arr[:16] = (255, 0, 0)
        Image.fromarray(arr).save(tmp_path / "a.png")
        (tmp_path / "m.csv").write_text("path,label,split\na.png,0,test\n")
        loaded = load_manifest(tmp_path / "m.csv", image_shape=(1, 28, 28))
        assert loaded.images.shape == (1, 1, 28, 28)

    def test_constant_image_survives_bilinear_resize(self, tmp_path):
        arr = np.full((40, 40), 77, dtype=np.uint8)
        Image.fromarray(arr, mode="L").save(tmp_path / "c.png")
        (tmp_path / "m.csv").write_text("path,label,split\nc.png,0,train\n")
        loaded = load_manifest(tmp_path / "m.csv", image_shape=(1, 28, 28))
        np.testing.assert_allclose(loaded.images, 77 / 255.0, atol=1e-6)

    def test_gray_to_rgb_replication(self, tmp_path):
        arr = np.full((28, 28), 100, dtype=np.uint8)
        Image.fromarray(arr, mode="L").save(tmp_path / "g.png")
        (tmp_path / "m.csv").write_text("path,label,split\ng.png,0,train\n")
        loaded = load_manifest(tmp_path / "m.csv", image_shape=(3, 28, 28))
        assert loaded.images.shape == (1, 3, 28, 28)
        np.testing.assert_array_equal(loaded.images[0, 0], loaded.images[0, 2])

    def test_missing_file_names_entry(self, tmp_path):
        (tmp_path / "m.csv").write_text("path,label,split\nnope.png,0,train\n")
        with pytest.raises(IngestionError, match="nope.png"):
            load_manifest(tmp_path / "m.csv")

    def test_undecodable_image(self, tmp_path):
        (tmp_path / "junk.png").write_bytes(b"this is not a png")
        (tmp_path / "m.csv").write_text("path,label,split\njunk.png,0,train\n")
        with pytest.raises(IngestionError):
            load_manifest(tmp_path / "m.csv")

    @pytest.mark.parametrize("fmt", ["csv", "json"])
    def test_manifest_round_trip(self, tmp_path, fmt):
        manifest_path = write_glyph_png_tree(tmp_path, chars="01", per_class=6, fmt=fmt)
        loaded = load_manifest(manifest_path)
        out = tmp_path / ("rt." + fmt)
        save_manifest(loaded.manifest, out)
        assert read_manifest_file(out) == loaded.manifest.entries

    def test_dataset_spec_idx(self, tmp_path):
        raw = (np.arange(2 * 4 * 4, dtype=np.uint8)).reshape(2, 4, 4)
        write_idx_pair(tmp_path, raw, np.array([0, 1]))
        spec = tmp_path / "spec.json"
        spec.write_text(
            '{"format": "idx", "images": "images-idx3-ubyte", '
            '"labels": "labels-idx1-ubyte", "split": "test"}'
        )
        loaded = load_dataset_spec(spec)
        assert len(loaded.manifest.entries) == 2
        assert {e.split for e in loaded.manifest.entries} == {"test"}


class TestBatching:
    def test_partition_sizes(self):
        data = glyph_dataset(chars="01", n_per_class=5, seed=0, splits=(1.0, 0.0, 0.0))
        sizes = [b.data.shape[0] for b in make_batches(data, "train", 4)]
        assert sizes == [4, 4, 2]

    def test_same_seed_same_order(self, glyph_data):
        a = [b.indices for b in make_batches(glyph_data, "train", 16, shuffle_seed=9)]
        b = [b.indices for b in make_batches(glyph_data, "train", 16, shuffle_seed=9)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_no_seed_preserves_manifest_order(self, glyph_data):
        got = np.concatenate(
            [b.indices for b in make_batches(glyph_data, "test", 7)]
        )
        np.testing.assert_array_equal(got, glyph_data.manifest.split_indices("test"))

    def test_epoch_coverage(self, glyph_data):
        got = np.concatenate(
            [b.indices for b in make_batches(glyph_data, "train", 13, shuffle_seed=3)]
        )
        expected = glyph_data.manifest.split_indices("train")
        np.testing.assert_array_equal(np.sort(got), np.sort(expected))
        assert len(np.unique(got)) == len(got)

    def test_empty_split_yields_nothing(self):
        data = glyph_dataset(chars="01", n_per_class=4, seed=0, splits=(1.0, 0.0, 0.0))
        assert list(make_batches(data, "val", 4)) == []

    def test_pixel_range(self, glyph_data):
        for batch in make_batches(glyph_data, "train", 64):
            assert batch.data.min() >= 0.0
            assert batch.data.max() <= 1.0

    def test_labels_match_entries(self, glyph_data):
        batch = next(make_batches(glyph_data, "val", 32))
        expected = [glyph_data.manifest.entries[i].label for i in batch.indices]
        np.testing.assert_array_equal(batch.labels, expected)


class TestSplits:
    def test_assign_splits_ratios(self, glyph_data):
        manifest = assign_splits(glyph_data.manifest, ratios=(0.6, 0.1, 0.3), seed=1)
        n = len(manifest.entries)
        assert len(manifest.split_indices("train")) == round(0.6 * n)
        assert len(manifest.split_indices("val")) == round(0.1 * n)
        assert len(manifest.split_indices("test")) == n - round(0.6 * n) - round(0.1 * n)

    def test_assign_splits_seeded(self, glyph_data):
        a = assign_splits(glyph_data.manifest, seed=5)
        b = assign_splits(glyph_data.manifest, seed=5)
        assert [e.split for e in a.entries] == [e.split for e in b.entries]

    def test_carve_validation_moves_only_train(self):
        data = glyph_dataset(chars="012", n_per_class=20, seed=0, splits=(1.0, 0.0, 0.0))
        carved = carve_validation(data.manifest, fraction=0.1, seed=2)
        assert len(carved.split_indices("val")) == 6
        assert len(carved.split_indices("train")) == 54
        assert len(carved.entries) == len(data.manifest.entries)

    def test_fingerprint_tracks_content(self, glyph_data):
        fp1 = glyph_data.manifest.fingerprint()
        assert fp1 == glyph_data.manifest.fingerprint()
        changed = assign_splits(glyph_data.manifest, seed=11)
        assert changed.fingerprint() != fp1
