import fnmatch
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from _TensorCoreMS.tensor_core import DataError

# ==============================================================================
# CONFIGURATION
# ==============================================================================
# Only the dataset payload counts; editor and OS droppings do not
DATASET_PATTERNS = ("*.png", "dataset.json")
DEFAULT_IGNORE_FILES = {".DS_Store", "Thumbs.db", "*.tmp"}

logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(message)s')
log = logging.getLogger("Fingerprint")
# ==============================================================================


class DatasetFingerprintMS:
    """
    The Detective: hashes a dataset directory into a deterministic
    fingerprint (SHA-256 Merkle root over its files) so an experiment can
    prove it left the data untouched.
    """

    def scan(self, root_path: Union[str, Path]) -> Dict[str, Any]:
        """
        output = {
            "root": str,
            "fingerprint": str (the global hash),
            "file_hashes": {rel_path: sha256},
            "file_count": int
        }
        """
        root = Path(root_path).resolve()
        if not root.exists():
            raise FileNotFoundError(f"Path not found: {root}")

        file_map = {}
        # sorted() so walk order never changes the root hash
        for path in sorted(root.rglob("*")):
            if not path.is_file() or not self._is_payload(path):
                continue
            rel_path = str(path.relative_to(root)).replace("\\", "/")
            file_hash = self._hash_file(path)
            if file_hash:
                file_map[rel_path] = file_hash

        # Path and content both enter the root, so a rename is a change too
        combined = "".join(f"{p}:{file_map[p]}" for p in sorted(file_map)).encode("utf-8")
        fingerprint = hashlib.sha256(combined).hexdigest()
        log.info(f"Scanned {len(file_map)} files. Fingerprint: {fingerprint[:8]}...")
        return {
            "root": str(root),
            "fingerprint": fingerprint,
            "file_hashes": file_map,
            "file_count": len(file_map),
        }

    def fingerprint(self, root_path: Union[str, Path]) -> str:
        return self.scan(root_path)["fingerprint"]

    def verify_unchanged(self, before: Dict[str, Any], root_path: Union[str, Path]) -> Dict[str, Any]:
        """Rescans and raises DataError naming the files that differ from `before`."""
        after = self.scan(root_path)
        if after["fingerprint"] == before["fingerprint"]:
            return after
        old, new = before["file_hashes"], after["file_hashes"]
        changed = sorted(p for p in set(old) | set(new) if old.get(p) != new.get(p))
        shown = ", ".join(changed[:5]) + (" ..." if len(changed) > 5 else "")
        raise DataError(f"dataset at {after['root']} changed during the experiment: {shown}")

    def _is_payload(self, path: Path) -> bool:
        name = path.name
        if name in DEFAULT_IGNORE_FILES or any(fnmatch.fnmatch(name, pat) for pat in DEFAULT_IGNORE_FILES):
            return False
        return any(fnmatch.fnmatch(name, pat) for pat in DATASET_PATTERNS)

    def _hash_file(self, path: Path) -> Optional[str]:
        try:
            return hashlib.sha256(path.read_bytes()).hexdigest()
        except OSError:
            log.warning(f"Could not read/hash: {path}")
            return None


# --- Independent Test Block ---
if __name__ == "__main__":
    import shutil
    import tempfile

    test_dir = Path(tempfile.mkdtemp())
    (test_dir / "train").mkdir()
    (test_dir / "train" / "00000_img.png").write_bytes(b"\x89PNG fake")
    scanner = DatasetFingerprintMS()

    state_1 = scanner.scan(test_dir)
    print(f"Fingerprint 1: {state_1['fingerprint']}")
    (test_dir / "train" / "00000_img.png").write_bytes(b"\x89PNG edited")
    try:
        scanner.verify_unchanged(state_1, test_dir)
        print("❌ FAILURE: change went unnoticed.")
    except DataError as e:
        print(f"✅ SUCCESS: {e}")
    shutil.rmtree(test_dir)
