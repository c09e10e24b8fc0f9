import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy import ndimage

from _AttacksMS.attacks import clip_quantize
from _TensorCoreMS.tensor_core import DataError, ShapeError

# ==============================================================================
# CONFIGURATION
# ==============================================================================
PATCH_DB_MAGIC = b"SEGADVPD"
NLM_PATCH_SIZE = 7
NLM_WINDOW_SIZE = 9
NLM_H_FACTOR = 2.15          # h = 2.15 * sigma_hat
MAD_TO_SIGMA = 1.4826
LAPLACE_GAIN = math.sqrt(20.0)   # std of the 4-neighbour Laplacian of unit white noise
QUILT_PATCH_SIZE = (5, 5)
QUILT_DB_SIZE = 50_000       # desk-scale; a full-scale database holds about 1,000,000
QUILT_TILE_CHUNK = 64
STAGES = ("nlm", "quilt")
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(message)s')
log = logging.getLogger("Defenses")
# ==============================================================================


class NlmConfig(BaseModel):
    patch_size: int = NLM_PATCH_SIZE
    window_size: int = NLM_WINDOW_SIZE
    gaussian_a: float = Field(default=1.0, gt=0)
    filtering_h: Union[float, Literal["auto_2_15_sigma"]] = "auto_2_15_sigma"

    @field_validator("patch_size", "window_size")
    @classmethod
    def _odd(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError(f"sizes must be positive odd integers, got {v}")
        return v

    @field_validator("filtering_h")
    @classmethod
    def _positive_h(cls, v):
        if isinstance(v, (int, float)) and v <= 0:
            raise ValueError(f"an explicit filtering_h must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def _patch_inside_window(self):
        if self.patch_size >= self.window_size:
            raise ValueError(f"patch_size ({self.patch_size}) must be smaller than window_size ({self.window_size})")
        return self


@dataclass
class PatchDatabase:
    """Clean uint8 patches, count × h × w × C. Immutable after build."""
    patches: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.patches = np.ascontiguousarray(self.patches, dtype=np.uint8)
        if self.patches.ndim != 4:
            raise ShapeError(f"patches must be count×h×w×C, got {self.patches.shape}")
        if self.count == 0:
            raise ValueError("a patch database needs at least one patch")
        self.patches.setflags(write=False)

    @property
    def count(self) -> int:
        return int(self.patches.shape[0])

    @property
    def patch_size(self) -> Tuple[int, int]:
        return int(self.patches.shape[1]), int(self.patches.shape[2])

    @property
    def channels(self) -> int:
        return int(self.patches.shape[3])

    def to_bytes(self) -> bytes:
        h, w = self.patch_size
        return PATCH_DB_MAGIC + struct.pack("<4I", h, w, self.channels, self.count) + self.patches.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "") -> "PatchDatabase":
        if blob[:8] != PATCH_DB_MAGIC:
            raise DataError("not a patch database (bad magic)")
        if len(blob) < 24:
            raise DataError("truncated patch database header")
        h, w, c, count = struct.unpack_from("<4I", blob, 8)
        expected = count * h * w * c
        if len(blob) - 24 != expected:
            raise DataError(f"patch database payload has {len(blob) - 24} bytes, expected {expected}")
        patches = np.frombuffer(blob, dtype=np.uint8, offset=24).reshape(count, h, w, c)
        return cls(patches, source)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        log.info(f"Saved {self.count} patches of {self.patch_size} to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PatchDatabase":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Patch database not found: {path}")
        return cls.from_bytes(path.read_bytes(), source=str(path))


def gaussian_kernel(size: int, std: float) -> np.ndarray:
    """1-D Gaussian taps; the separable 2-D kernel (outer product) sums to 1."""
    offsets = np.arange(size) - size // 2
    k = np.exp(-(offsets ** 2) / (2.0 * std ** 2))
    return k / k.sum()


class DefensesMS:
    """
    The Restorer: model-agnostic input pre-processing. Non-local means
    denoising, image quilting against a clean patch database, and ordered
    pipelines of both. Never looks at the model.
    """

    def __init__(self, nlm_config: Optional[NlmConfig] = None, patch_db: Optional[PatchDatabase] = None):
        self.nlm_config = nlm_config or NlmConfig()
        self.patch_db = patch_db

    # --- Noise level ---

    @staticmethod
    def estimate_sigma(image: np.ndarray) -> float:
        """1.4826 * MAD of the 3×3 Laplacian response / sqrt(20), per channel, averaged."""
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 2:
            x = x[..., None]
        if x.shape[0] < 3 or x.shape[1] < 3:
            raise ShapeError(f"noise estimation needs at least 3×3 pixels, got {x.shape[:2]}")
        sigmas = []
        for c in range(x.shape[2]):
            lap = ndimage.laplace(x[..., c], mode="reflect")[1:-1, 1:-1]
            mad = np.median(np.abs(lap - np.median(lap)))
            sigmas.append(MAD_TO_SIGMA * mad / LAPLACE_GAIN)
        return float(np.mean(sigmas))

    def resolve_h(self, image: np.ndarray, cfg: Optional[NlmConfig] = None) -> float:
        cfg = cfg or self.nlm_config
        if cfg.filtering_h == "auto_2_15_sigma":
            return NLM_H_FACTOR * self.estimate_sigma(image)
        return float(cfg.filtering_h)

    # --- Non-local means ---

    def nlm_denoise(self, image: np.ndarray, cfg: Optional[NlmConfig] = None,
                    return_weight_sums: bool = False):
        """
        Replaces every pixel by the weight-normalised average over its search
        window. Weights are exp(-d / h^2) with d the Gaussian-weighted mean
        squared patch difference. Borders are mirror padded.
        """
        cfg = cfg or self.nlm_config
        x = np.asarray(image, dtype=np.float64)
        if x.ndim != 3:
            raise ShapeError(f"expected an H×W×C image, got {x.shape}")
        height, width = x.shape[:2]
        if height <= cfg.window_size or width <= cfg.window_size:
            raise ShapeError(f"image {height}×{width} must be larger than the {cfg.window_size}×{cfg.window_size} window")

        h = self.resolve_h(x, cfg)
        if h == 0.0:
            log.warning("NLM: noise estimate is 0; returning the image unchanged")
            out = clip_quantize(x)
            return (out, np.ones((height, width))) if return_weight_sums else out

        half_w, half_p = cfg.window_size // 2, cfg.patch_size // 2
        pad = half_w + half_p
        padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        kernel = gaussian_kernel(cfg.patch_size, cfg.gaussian_a)
        span_h, span_w = height + 2 * half_p, width + 2 * half_p
        center = padded[half_w:half_w + span_h, half_w:half_w + span_w]

        weights: List[np.ndarray] = []
        neighbours: List[np.ndarray] = []
        for dy in range(-half_w, half_w + 1):
            for dx in range(-half_w, half_w + 1):
                shifted = padded[half_w + dy:half_w + dy + span_h, half_w + dx:half_w + dx + span_w]
                diff2 = ((center - shifted) ** 2).mean(axis=2)
                dist = ndimage.correlate1d(diff2, kernel, axis=0, mode="reflect")
                dist = ndimage.correlate1d(dist, kernel, axis=1, mode="reflect")
                weights.append(np.exp(-dist[half_p:half_p + height, half_p:half_p + width] / h ** 2))
                neighbours.append(shifted[half_p:half_p + height, half_p:half_p + width])

        alpha = np.sum(weights, axis=0)
        out = np.zeros_like(x)
        sums = np.zeros((height, width))
        for w, nb in zip(weights, neighbours):
            w = w / alpha
            out += w[..., None] * nb
            sums += w
        log.debug(f"NLM: h = {h:.4f}, window {cfg.window_size}, patch {cfg.patch_size}")
        out = clip_quantize(out)
        return (out, sums) if return_weight_sums else out

    # --- Image quilting ---

    @staticmethod
    def build_patch_db(clean_images: Sequence[np.ndarray], patch_size: Tuple[int, int] = QUILT_PATCH_SIZE,
                       target_count: int = QUILT_DB_SIZE, seed: int = 0, source: str = "") -> PatchDatabase:
        """Samples patches at uniform random (image, row, column) locations."""
        if len(clean_images) == 0:
            raise ValueError("cannot build a patch database from an empty image list")
        if target_count < 1:
            raise ValueError(f"target_count must be at least 1, got {target_count}")
        stack = np.stack([np.asarray(img, dtype=np.uint8) for img in clean_images])
        ph, pw = patch_size
        n, height, width, _ = stack.shape
        if height < ph or width < pw:
            raise ShapeError(f"images {height}×{width} are smaller than the {ph}×{pw} patch")
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, n, size=target_count)
        rows = rng.integers(0, height - ph + 1, size=target_count)
        cols = rng.integers(0, width - pw + 1, size=target_count)
        dy, dx = np.arange(ph), np.arange(pw)
        patches = stack[idx[:, None, None], rows[:, None, None] + dy[None, :, None], cols[:, None, None] + dx[None, None, :]]
        log.info(f"Built patch database: {target_count} patches of {ph}×{pw} from {n} images")
        return PatchDatabase(patches, source)

    def quilt(self, image: np.ndarray, db: Optional[PatchDatabase] = None) -> np.ndarray:
        """
        Tiles the image into non-overlapping patch-sized blocks and replaces
        each by its nearest database patch (summed squared RGB distance, lowest
        index on ties). Right and bottom remainder tiles use the top-left
        region of every patch.
        """
        db = db or self.patch_db
        if db is None:
            raise ValueError("quilting needs a patch database")
        x = np.asarray(image, dtype=np.uint8)
        if x.ndim != 3 or x.shape[2] != db.channels:
            raise ShapeError(f"image {x.shape} does not match {db.channels}-channel patches")
        ph, pw = db.patch_size
        height, width = x.shape[:2]

        tiles: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}
        for r in range(0, height, ph):
            for c in range(0, width, pw):
                tiles.setdefault((min(ph, height - r), min(pw, width - c)), []).append((r, c))

        out = x.copy()
        for (th, tw), origins in tiles.items():
            # integer-valued float64 keeps every distance exact, so argmin ties are exact too
            region = db.patches[:, :th, :tw, :].reshape(db.count, -1).astype(np.float64)
            region_sq = np.sum(region ** 2, axis=1)
            for start in range(0, len(origins), QUILT_TILE_CHUNK):
                chunk = origins[start:start + QUILT_TILE_CHUNK]
                block = np.stack([x[r:r + th, c:c + tw].reshape(-1) for r, c in chunk]).astype(np.float64)
                dist = np.sum(block ** 2, axis=1)[:, None] - 2.0 * block @ region.T + region_sq[None, :]
                best = np.argmin(dist, axis=1)
                for (r, c), k in zip(chunk, best):
                    out[r:r + th, c:c + tw] = db.patches[k, :th, :tw, :]
        return out

    # --- Pipelines ---

    def defend(self, image: np.ndarray, pipeline: Sequence[str]) -> np.ndarray:
        """Applies the stages in order; every stage returns a quantized image."""
        if not pipeline:
            raise ValueError("defense pipeline is empty")
        unknown = [s for s in pipeline if s not in STAGES]
        if unknown:
            raise ValueError(f"Unknown defense stage(s): {unknown}; choose from {list(STAGES)}")
        out = np.asarray(image, dtype=np.uint8)
        for stage in pipeline:
            out = self.nlm_denoise(out) if stage == "nlm" else self.quilt(out)
        return out

    @staticmethod
    def psnr(reference: np.ndarray, test: np.ndarray, peak: float = 255.0) -> float:
        ref, tst = np.asarray(reference, dtype=np.float64), np.asarray(test, dtype=np.float64)
        if ref.shape != tst.shape:
            raise ShapeError(f"PSNR shapes differ: {ref.shape} vs {tst.shape}")
        mse = float(np.mean((ref - tst) ** 2))
        return math.inf if mse == 0.0 else 10.0 * math.log10(peak ** 2 / mse)


# --- Independent Test Block ---
if __name__ == "__main__":
    rng = np.random.default_rng(0)
    clean = np.full((32, 32, 3), 120.0)
    clean[:, 16:] = 60.0
    noisy = np.clip(clean + rng.normal(0, 10, clean.shape), 0, 255)

    svc = DefensesMS()
    print(f"sigma_hat = {svc.estimate_sigma(noisy):.2f} (true 10)")
    den = svc.nlm_denoise(noisy)
    print(f"PSNR noisy {svc.psnr(clean, noisy):.2f} dB -> NLM {svc.psnr(clean, den):.2f} dB")

    db = DefensesMS.build_patch_db([clean.astype(np.uint8)], target_count=100, seed=1)
    quilted = svc.quilt(noisy.astype(np.uint8), db)
    print(f"✅ quilted values: {sorted(np.unique(quilted).tolist())}")
