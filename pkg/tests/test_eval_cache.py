"""
Tests for the sqlite cache of clean per-image confusion matrices.
"""

import pytest

from _EvalCacheMS.eval_cache import DB_NAME, EvalCacheMS
from _MetricsMS.metrics import ConfusionMatrix


@pytest.fixture
def cache(tmp_path):
    return EvalCacheMS(tmp_path / "cache" / DB_NAME)


@pytest.fixture
def matrices():
    return {"00000": ConfusionMatrix(2, [[3, 1], [0, 4]]), "00001": ConfusionMatrix(2, [[0, 0], [2, 6]])}


class TestEvalCache:
    """Keyed by (model digest, split, dataset fingerprint)."""

    def test_miss(self, cache):
        assert cache.get("abc", "val", "f1") is None

    def test_hit_returns_equal_matrices(self, cache, matrices):
        cache.put("abc", "val", "f1", matrices)
        hit = cache.get("abc", "val", "f1")
        assert set(hit) == set(matrices)
        for key, cm in matrices.items():
            assert hit[key] == cm

    def test_other_model_or_split_misses(self, cache, matrices):
        cache.put("abc", "val", "f1", matrices)
        assert cache.get("xyz", "val", "f1") is None
        assert cache.get("abc", "train", "f1") is None

    def test_changed_dataset_drops_stale_entries(self, cache, matrices):
        cache.put("abc", "val", "f1", matrices)
        assert cache.get("abc", "val", "f2") is None
        assert cache.entries() == []

    def test_entries_and_clear(self, cache, matrices):
        cache.put("abc", "val", "f1", matrices)
        entries = cache.entries()
        assert [e.image_id for e in entries] == ["00000", "00001"]
        assert entries[0].counts == [[3, 1], [0, 4]]
        cache.clear()
        assert cache.entries() == []

    def test_persists_across_instances(self, tmp_path, matrices):
        EvalCacheMS(tmp_path / DB_NAME).put("abc", "val", "f1", matrices)
        assert EvalCacheMS(tmp_path / DB_NAME).get("abc", "val", "f1")["00001"] == matrices["00001"]
