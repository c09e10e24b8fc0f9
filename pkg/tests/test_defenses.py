"""
Tests for the input-transformation defenses: noise estimation, non-local
means, the patch database, image quilting and ordered pipelines.
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import ndimage

from _DefensesMS.defenses import DefensesMS, NlmConfig, PatchDatabase, gaussian_kernel
from _TensorCoreMS.tensor_core import DataError, ShapeError
from _ToyDatasetMS.toy_dataset import ToyDatasetMS, ToyDatasetSpec


@pytest.fixture
def defender():
    return DefensesMS()


@pytest.fixture
def noisy_image():
    rng = np.random.default_rng(0)
    clean = np.full((24, 24, 3), 120.0)
    clean[:, 12:] = 60.0
    return np.clip(np.floor(clean + rng.normal(0, 8, clean.shape) + 0.5), 0, 255).astype(np.uint8)


def brute_force_quilt(image: np.ndarray, patches: np.ndarray) -> np.ndarray:
    """Per tile, scan every patch and keep the first with the smallest distance."""
    ph, pw = patches.shape[1:3]
    out = image.copy()
    H, W = image.shape[:2]
    for r in range(0, H, ph):
        for c in range(0, W, pw):
            tile = image[r:r + ph, c:c + pw].astype(np.int64)
            th, tw = tile.shape[:2]
            best, best_d = 0, None
            for k in range(len(patches)):
                d = int(np.sum((patches[k, :th, :tw].astype(np.int64) - tile) ** 2))
                if best_d is None or d < best_d:
                    best, best_d = k, d
            out[r:r + th, c:c + tw] = patches[best, :th, :tw]
    return out


# =============================================================================
# Noise estimation
# =============================================================================

class TestEstimateSigma:
    """MAD-of-Laplacian noise estimate."""

    def test_constant_image(self):
        assert DefensesMS.estimate_sigma(np.full((16, 16, 3), 77.0)) == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_recovers_gaussian_noise(self, seed):
        rng = np.random.default_rng(seed)
        noisy = 128.0 + rng.normal(0.0, 10.0, size=(64, 64, 3))
        assert 8.0 <= DefensesMS.estimate_sigma(noisy) <= 12.0

    def test_too_small(self):
        with pytest.raises(ShapeError):
            DefensesMS.estimate_sigma(np.zeros((2, 5, 3)))

    def test_auto_h(self, defender, noisy_image):
        assert defender.resolve_h(noisy_image) == pytest.approx(2.15 * DefensesMS.estimate_sigma(noisy_image))
        assert defender.resolve_h(noisy_image, NlmConfig(filtering_h=12.0)) == 12.0


# =============================================================================
# Non-local means
# =============================================================================

class TestNlmConfig:
    """Window geometry and filtering strength validation."""

    def test_defaults(self):
        cfg = NlmConfig()
        assert (cfg.patch_size, cfg.window_size, cfg.gaussian_a, cfg.filtering_h) == (7, 9, 1.0, "auto_2_15_sigma")

    def test_patch_must_fit_window(self):
        with pytest.raises(ValidationError):
            NlmConfig(patch_size=9, window_size=9)

    def test_even_sizes_rejected(self):
        with pytest.raises(ValidationError):
            NlmConfig(patch_size=4)

    def test_explicit_h_positive(self):
        with pytest.raises(ValidationError):
            NlmConfig(filtering_h=0.0)

    def test_gaussian_kernel_normalised(self):
        k = gaussian_kernel(7, 1.0)
        assert np.outer(k, k).sum() == pytest.approx(1.0, abs=1e-15)
        assert k[3] == k.max()


class TestNlmDenoise:
    """Weighted window averages with mirrored borders."""

    def test_constant_image_is_identity(self, defender):
        img = np.full((20, 20, 3), 93, dtype=np.uint8)
        np.testing.assert_array_equal(defender.nlm_denoise(img), img)

    def test_weights_sum_to_one(self, defender, noisy_image):
        out, sums = defender.nlm_denoise(noisy_image, return_weight_sums=True)
        assert out.dtype == np.uint8 and out.shape == noisy_image.shape
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_output_within_window_range(self, defender, noisy_image):
        out = defender.nlm_denoise(noisy_image).astype(np.int64)
        lo = ndimage.minimum_filter(noisy_image, size=(9, 9, 1), mode="mirror").astype(np.int64)
        hi = ndimage.maximum_filter(noisy_image, size=(9, 9, 1), mode="mirror").astype(np.int64)
        assert np.all(out >= lo) and np.all(out <= hi)

    def test_reduces_noise(self, defender):
        rng = np.random.default_rng(2)
        clean = np.full((32, 32, 3), 120.0)
        clean[:, 16:] = 60.0
        noisy = np.clip(clean + rng.normal(0, 10, clean.shape), 0, 255).astype(np.uint8)
        assert defender.psnr(clean, defender.nlm_denoise(noisy)) > defender.psnr(clean, noisy)

    def test_psnr_gain_on_toy_scenes(self, defender):
        rng = np.random.default_rng(5)
        scenes = ToyDatasetMS(ToyDatasetSpec(train_count=10, val_count=0, seed=8)).render_split("train")
        gains = []
        for s in scenes:
            clean = s.image.astype(np.float64)
            noisy = np.floor(np.clip(clean + rng.normal(0.0, 10.0, clean.shape), 0, 255) + 0.5).astype(np.uint8)
            gains.append(defender.psnr(clean, defender.nlm_denoise(noisy)) - defender.psnr(clean, noisy))
        assert np.mean(gains) >= 2.0

    def test_deterministic(self, defender, noisy_image):
        np.testing.assert_array_equal(defender.nlm_denoise(noisy_image), defender.nlm_denoise(noisy_image))

    def test_explicit_h(self, noisy_image):
        out = DefensesMS(NlmConfig(filtering_h=5.0, patch_size=3, window_size=5)).nlm_denoise(noisy_image)
        assert out.shape == noisy_image.shape

    def test_image_must_exceed_window(self, defender):
        with pytest.raises(ShapeError):
            defender.nlm_denoise(np.zeros((9, 30, 3), dtype=np.uint8))


# =============================================================================
# Patch database & quilting
# =============================================================================

class TestPatchDatabase:
    """Uniform patch sampling and the database file format."""

    def test_exact_count_and_shape(self, noisy_image):
        db = DefensesMS.build_patch_db([noisy_image], target_count=10, seed=0)
        assert db.patches.shape == (10, 5, 5, 3)
        assert db.count == 10 and db.patch_size == (5, 5) and db.channels == 3

    def test_same_seed_same_bytes(self, noisy_image):
        a = DefensesMS.build_patch_db([noisy_image, noisy_image[::-1]], target_count=50, seed=3)
        b = DefensesMS.build_patch_db([noisy_image, noisy_image[::-1]], target_count=50, seed=3)
        assert a.to_bytes() == b.to_bytes()

    def test_patches_come_from_the_images(self):
        img = np.arange(8 * 8 * 3, dtype=np.uint8).reshape(8, 8, 3)
        db = DefensesMS.build_patch_db([img], patch_size=(3, 3), target_count=20, seed=1)
        windows = {img[r:r + 3, c:c + 3].tobytes() for r in range(6) for c in range(6)}
        assert all(p.tobytes() in windows for p in db.patches)

    def test_empty_image_list(self):
        with pytest.raises(ValueError):
            DefensesMS.build_patch_db([], target_count=10)

    def test_read_only(self, noisy_image):
        db = DefensesMS.build_patch_db([noisy_image], target_count=4)
        with pytest.raises(ValueError):
            db.patches[0, 0, 0, 0] = 1

    def test_file_round_trip(self, noisy_image, tmp_path):
        db = DefensesMS.build_patch_db([noisy_image], target_count=25, seed=2)
        again = PatchDatabase.load(db.save(tmp_path / "quilt.db"))
        assert again.to_bytes() == db.to_bytes()

    def test_bad_payload(self, noisy_image):
        blob = DefensesMS.build_patch_db([noisy_image], target_count=5).to_bytes()
        with pytest.raises(DataError):
            PatchDatabase.from_bytes(blob[:-3])
        with pytest.raises(DataError):
            PatchDatabase.from_bytes(b"BADMAGIC" + blob[8:])

    def test_patch_histogram_follows_the_sources(self):
        spec = ToyDatasetSpec(train_count=10, val_count=0, contrast=1.0, seed=9)
        images = [s.image for s in ToyDatasetMS(spec).render_split("train")]
        db = DefensesMS.build_patch_db(images, target_count=20000, seed=4)
        source = np.bincount(np.concatenate([im.reshape(-1) for im in images]), minlength=256).astype(np.float64)
        sampled = np.bincount(db.patches.reshape(-1), minlength=256).astype(np.float64)
        p, q = source / source.sum(), sampled / sampled.sum()
        used = (p + q) > 0
        chi2 = 0.5 * np.sum((p[used] - q[used]) ** 2 / (p[used] + q[used]))
        assert chi2 < 0.05


class TestQuilt:
    """Nearest-patch tile replacement."""

    def test_own_tiles_reproduce_the_image(self, defender):
        img = np.random.default_rng(4).integers(0, 256, size=(15, 15, 3)).astype(np.uint8)
        own = np.stack([img[r:r + 5, c:c + 5] for r in range(0, 15, 5) for c in range(0, 15, 5)])
        np.testing.assert_array_equal(defender.quilt(img, PatchDatabase(own)), img)

    def test_single_gray_patch(self, defender, noisy_image):
        db = PatchDatabase(np.full((1, 5, 5, 3), 128, dtype=np.uint8))
        np.testing.assert_array_equal(defender.quilt(noisy_image, db), np.full(noisy_image.shape, 128))

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_brute_force(self, defender, seed):
        rng = np.random.default_rng(seed)
        img = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
        patches = rng.integers(0, 256, size=(100, 5, 5, 3)).astype(np.uint8)
        np.testing.assert_array_equal(defender.quilt(img, PatchDatabase(patches)), brute_force_quilt(img, patches))

    def test_ties_take_lowest_index(self, defender):
        img = np.full((5, 5, 3), 100, dtype=np.uint8)
        patches = np.stack([np.full((5, 5, 3), 90), np.full((5, 5, 3), 110)]).astype(np.uint8)
        np.testing.assert_array_equal(defender.quilt(img, PatchDatabase(patches)), np.full((5, 5, 3), 90))

    def test_needs_a_database(self, defender, noisy_image):
        with pytest.raises(ValueError):
            defender.quilt(noisy_image)

    def test_channel_mismatch(self, defender):
        db = PatchDatabase(np.zeros((1, 5, 5, 1), dtype=np.uint8))
        with pytest.raises(ShapeError):
            defender.quilt(np.zeros((10, 10, 3), dtype=np.uint8), db)

    def test_every_tile_is_a_database_patch(self, defender):
        rng = np.random.default_rng(6)
        img = rng.integers(0, 256, size=(17, 23, 3)).astype(np.uint8)
        db = DefensesMS.build_patch_db([rng.integers(0, 256, size=(20, 20, 3)).astype(np.uint8)],
                                       target_count=300, seed=5)
        out = defender.quilt(img, db)
        for r in range(0, 17, 5):
            for c in range(0, 23, 5):
                tile = out[r:r + 5, c:c + 5]
                th, tw = tile.shape[:2]
                assert any(np.array_equal(tile, p[:th, :tw]) for p in db.patches)


# =============================================================================
# Pipelines
# =============================================================================

class TestDefend:
    """Ordered stage composition."""

    @pytest.fixture
    def full_defender(self, noisy_image):
        return DefensesMS(patch_db=DefensesMS.build_patch_db([noisy_image], target_count=200, seed=0))

    def test_nlm_stage_equals_direct_call(self, full_defender, noisy_image):
        np.testing.assert_array_equal(full_defender.defend(noisy_image, ["nlm"]),
                                      full_defender.nlm_denoise(noisy_image))

    def test_composition_order(self, full_defender, noisy_image):
        np.testing.assert_array_equal(full_defender.defend(noisy_image, ["nlm", "quilt"]),
                                      full_defender.quilt(full_defender.nlm_denoise(noisy_image)))

    def test_unknown_stage(self, full_defender, noisy_image):
        with pytest.raises(ValueError, match="Unknown"):
            full_defender.defend(noisy_image, ["nlm", "median"])

    def test_empty_pipeline(self, full_defender, noisy_image):
        with pytest.raises(ValueError):
            full_defender.defend(noisy_image, [])

    def test_psnr(self):
        a = np.zeros((4, 4, 3))
        assert DefensesMS.psnr(a, a) == math.inf
        assert DefensesMS.psnr(a, a + 255.0) == pytest.approx(0.0)
