import datetime
import json
import logging
import sqlite3
from pathlib import Path
from typing import Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict

from _MetricsMS.metrics import ConfusionMatrix

# ==============================================================================
# CONFIGURATION
# ==============================================================================
DB_NAME = "clean_eval_cache.db"
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(message)s')
log = logging.getLogger("EvalCache")
# ==============================================================================


class CleanEvalEntry(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_digest: str
    split: str
    fingerprint: str
    image_id: str
    counts: List[List[int]]
    created_at: str


class EvalCacheMS:
    """
    The Archivist: remembers the clean per-image confusion matrices of a
    (model, split, dataset fingerprint) so the clean pass runs once.
    """

    def __init__(self, db_path: Union[str, Path] = DB_NAME):
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self._init_db()

    def _get_conn(self):
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn

    def _init_db(self):
        with self._get_conn() as conn:
            conn.execute("""
                CREATE TABLE IF NOT EXISTS clean_evals (
                    model_digest TEXT NOT NULL,
                    split TEXT NOT NULL,
                    fingerprint TEXT NOT NULL,
                    image_id TEXT NOT NULL,
                    counts_json TEXT NOT NULL,
                    created_at TEXT,
                    PRIMARY KEY (model_digest, split, fingerprint, image_id)
                )
            """)

    def get(self, model_digest: str, split: str, fingerprint: str) -> Optional[Dict[str, ConfusionMatrix]]:
        """Cached matrices keyed by image id, or None on a miss."""
        with self._get_conn() as conn:
            rows = conn.execute(
                "SELECT * FROM clean_evals WHERE model_digest = ? AND split = ? AND fingerprint = ? ORDER BY image_id",
                (model_digest, split, fingerprint),
            ).fetchall()
            if not rows:
                stale = conn.execute(
                    "SELECT COUNT(*) FROM clean_evals WHERE model_digest = ? AND split = ? AND fingerprint != ?",
                    (model_digest, split, fingerprint),
                ).fetchone()[0]
                if stale:
                    log.warning(f"Dropping {stale} stale clean evaluations of split '{split}' (dataset changed)")
                    conn.execute("DELETE FROM clean_evals WHERE model_digest = ? AND split = ?", (model_digest, split))
                return None

        out = {}
        for row in rows:
            counts = json.loads(row["counts_json"])
            out[row["image_id"]] = ConfusionMatrix(len(counts), counts)
        log.info(f"Clean-eval cache hit: {len(out)} images of '{split}' for model {model_digest[:8]}")
        return out

    def put(self, model_digest: str, split: str, fingerprint: str, matrices: Dict[str, ConfusionMatrix]):
        now = datetime.datetime.now(datetime.timezone.utc).isoformat()
        with self._get_conn() as conn:
            conn.executemany(
                "INSERT OR REPLACE INTO clean_evals (model_digest, split, fingerprint, image_id, counts_json, created_at) "
                "VALUES (?, ?, ?, ?, ?, ?)",
                [(model_digest, split, fingerprint, image_id, json.dumps(cm.to_list()), now)
                 for image_id, cm in matrices.items()],
            )
        log.info(f"Cached clean evaluations of {len(matrices)} images of '{split}'")

    def entries(self) -> List[CleanEvalEntry]:
        with self._get_conn() as conn:
            rows = conn.execute("SELECT * FROM clean_evals ORDER BY model_digest, split, image_id").fetchall()
        return [CleanEvalEntry(model_digest=r["model_digest"], split=r["split"], fingerprint=r["fingerprint"],
                               image_id=r["image_id"], counts=json.loads(r["counts_json"]),
                               created_at=r["created_at"] or "")
                for r in rows]

    def clear(self):
        with self._get_conn() as conn:
            conn.execute("DELETE FROM clean_evals")
        log.info("Cleared the clean-eval cache")


# --- Independent Test Block ---
if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        cache = EvalCacheMS(Path(tmp) / DB_NAME)
        print(f"miss -> {cache.get('abc', 'val', 'f1')}")
        cache.put("abc", "val", "f1", {"00000": ConfusionMatrix(2, [[3, 1], [0, 4]])})
        hit = cache.get("abc", "val", "f1")
        print(f"hit -> {hit['00000'].to_list()}")
        print(f"after dataset change -> {cache.get('abc', 'val', 'f2')}, entries left: {len(cache.entries())}")
