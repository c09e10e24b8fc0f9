"""
Tests for the procedural street-scene dataset: rendering, PNG persistence
and the loader's rejection of malformed folders.
"""

import json

import numpy as np
import pytest
from PIL import Image
from pydantic import ValidationError

from _TensorCoreMS.tensor_core import DataError
from _ToyDatasetMS.toy_dataset import (
    CAR, MANIFEST_NAME, PALETTE, SKY, ToyDatasetMS, ToyDatasetSpec, colorize,
)


class TestRendering:
    """In-memory scene generation."""

    def test_default_resolution(self):
        image, mask = ToyDatasetMS().render_scene(np.random.default_rng(0))
        assert image.shape == (64, 128, 3) and image.dtype == np.uint8
        assert mask.shape == (64, 128)

    def test_masks_use_valid_ids(self, tiny_spec):
        for sample in ToyDatasetMS(tiny_spec).render_split("train"):
            assert sample.mask.min() >= 0 and sample.mask.max() < 8

    def test_scenes_have_sky_and_cars(self):
        spec = ToyDatasetSpec(train_count=5, val_count=0, seed=1)
        for sample in ToyDatasetMS(spec).render_split("train"):
            assert (sample.mask == SKY).any()
            assert (sample.mask == CAR).any()

    def test_deterministic_per_seed(self, tiny_spec):
        a = ToyDatasetMS(tiny_spec).render_split("val")
        b = ToyDatasetMS(tiny_spec).render_split("val")
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image, y.image)
            np.testing.assert_array_equal(x.mask, y.mask)

    def test_splits_are_disjoint(self, tiny_spec):
        svc = ToyDatasetMS(tiny_spec)
        train = {s.image.tobytes() for s in svc.render_split("train")}
        assert not any(s.image.tobytes() in train for s in svc.render_split("val"))

    def test_unknown_split(self):
        with pytest.raises(ValueError):
            ToyDatasetMS().render_split("test")

    def test_bad_object_range(self):
        with pytest.raises(ValidationError):
            ToyDatasetSpec(cars=(3, 1))

    def test_colorize_uses_palette(self):
        np.testing.assert_array_equal(colorize(np.array([[CAR]]))[0, 0], PALETTE[CAR])

    def test_contrast_pulls_colours_to_mid_grey(self):
        low = ToyDatasetMS(ToyDatasetSpec(train_count=3, val_count=0, seed=2)).render_split("train")
        full = ToyDatasetMS(ToyDatasetSpec(train_count=3, val_count=0, contrast=1.0, seed=2)).render_split("train")
        for a, b in zip(low, full):
            np.testing.assert_array_equal(a.mask, b.mask)
            assert a.image.min() >= 96 and a.image.max() <= 160
            assert int(b.image.max()) - int(b.image.min()) > 150

    def test_contrast_range(self):
        with pytest.raises(ValidationError):
            ToyDatasetSpec(contrast=0.0)
        with pytest.raises(ValidationError):
            ToyDatasetSpec(contrast=1.5)


class TestPersistence:
    """PNG pairs on disk and the loader."""

    def test_pair_count(self, tmp_path):
        spec = ToyDatasetSpec(train_count=10, val_count=2, height=16, width=32, seed=3)
        root = ToyDatasetMS(spec).generate(tmp_path)
        assert len(list((root / "train").glob("*_img.png"))) == 10
        assert len(list((root / "train").glob("*_lbl.png"))) == 10
        manifest = json.loads((root / MANIFEST_NAME).read_text())
        assert manifest["spec"]["train_count"] == 10 and len(manifest["classes"]) == 8

    def test_same_seed_byte_identical_files(self, tmp_path, tiny_spec):
        a = ToyDatasetMS(tiny_spec).generate(tmp_path / "a")
        b = ToyDatasetMS(tiny_spec).generate(tmp_path / "b")
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_round_trip(self, tiny_dataset, tiny_spec):
        loaded = ToyDatasetMS.load_dataset(tiny_dataset)
        for split in ("train", "val"):
            rendered = ToyDatasetMS(tiny_spec).render_split(split)
            assert [s.image_id for s in loaded[split]] == [s.image_id for s in rendered]
            for x, y in zip(loaded[split], rendered):
                np.testing.assert_array_equal(x.image, y.image)
                np.testing.assert_array_equal(x.mask, y.mask)

    def test_missing_mask_names_the_stem(self, tiny_dataset):
        (tiny_dataset / "val" / "00001_lbl.png").unlink()
        with pytest.raises(DataError, match="00001"):
            ToyDatasetMS.load_dataset(tiny_dataset)

    def test_orphan_mask(self, tiny_dataset):
        (tiny_dataset / "train" / "00002_img.png").unlink()
        with pytest.raises(DataError, match="missing image"):
            ToyDatasetMS.load_split(tiny_dataset / "train")

    def test_sixteen_bit_png_rejected(self, tiny_dataset):
        deep = (np.arange(16 * 32, dtype=np.uint16) * 100).reshape(16, 32)
        Image.fromarray(deep).save(tiny_dataset / "val" / "00000_img.png")
        with pytest.raises(DataError, match="unsupported PNG format"):
            ToyDatasetMS.load_split(tiny_dataset / "val")

    def test_out_of_range_class_ids(self, tiny_dataset):
        Image.fromarray(np.full((16, 32), 9, dtype=np.uint8)).save(tiny_dataset / "val" / "00000_lbl.png")
        with pytest.raises(DataError, match="class ids"):
            ToyDatasetMS.load_split(tiny_dataset / "val")

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ToyDatasetMS.load_dataset(tmp_path / "nowhere")

    def test_root_without_splits(self, tmp_path):
        with pytest.raises(DataError):
            ToyDatasetMS.load_dataset(tmp_path)

    def test_unwritable_target(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("not a directory")
        with pytest.raises(DataError):
            ToyDatasetMS(ToyDatasetSpec(train_count=1, val_count=0, height=16, width=32)).generate(blocker)
