import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, Field, model_validator

from _SegNetMS.segnet import CLASS_NAMES, TOY_HEIGHT, TOY_WIDTH
from _TensorCoreMS.tensor_core import DataError

# ==============================================================================
# CONFIGURATION
# ==============================================================================
SPLITS = ("train", "val")
IMAGE_SUFFIX = "_img.png"
LABEL_SUFFIX = "_lbl.png"
MANIFEST_NAME = "dataset.json"
SCENE_CONTRAST = 0.125  # painted colours are pulled toward mid-grey: 128 + (c - 128) * contrast
MID_GREY = 128.0
ROAD, SIDEWALK, BUILDING, SKY, CAR, PEDESTRIAN, POLE, VEGETATION = range(8)
PALETTE = np.array([
    (128, 64, 128),   # road
    (244, 35, 232),   # sidewalk
    (70, 70, 70),     # building
    (70, 130, 180),   # sky
    (0, 0, 142),      # car
    (220, 20, 60),    # pedestrian
    (153, 153, 153),  # pole
    (107, 142, 35),   # vegetation
], dtype=np.uint8)
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(message)s')
log = logging.getLogger("ToyDataset")
# ==============================================================================


class ToyDatasetSpec(BaseModel):
    train_count: int = Field(default=96, ge=0)
    val_count: int = Field(default=64, ge=0)
    height: int = Field(default=TOY_HEIGHT, ge=16)
    width: int = Field(default=TOY_WIDTH, ge=16)
    buildings: Tuple[int, int] = (2, 5)
    vegetation: Tuple[int, int] = (0, 3)
    poles: Tuple[int, int] = (0, 2)
    cars: Tuple[int, int] = (1, 3)
    pedestrians: Tuple[int, int] = (0, 3)
    color_jitter: int = Field(default=12, ge=0)
    contrast: float = Field(default=SCENE_CONTRAST, gt=0.0, le=1.0)
    noise_std: float = Field(default=0.5, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _ranges(self):
        for name in ("buildings", "vegetation", "poles", "cars", "pedestrians"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} range must satisfy 0 <= lo <= hi, got ({lo}, {hi})")
        return self

    def count(self, split: str) -> int:
        return self.train_count if split == "train" else self.val_count


@dataclass
class Sample:
    image_id: str
    image: np.ndarray   # H×W×3 uint8
    mask: np.ndarray    # H×W int64 class ids


def colorize(mask: np.ndarray) -> np.ndarray:
    """Class-id mask to palette RGB."""
    return PALETTE[np.asarray(mask, dtype=np.int64)]


class _SceneCanvas:
    """Paints every shape twice: jittered colour into the image, class id into the label."""

    def __init__(self, width: int, height: int, rng: np.random.Generator, jitter: int):
        self.image = Image.new("RGB", (width, height), tuple(int(v) for v in PALETTE[SKY]))
        self.label = Image.new("L", (width, height), SKY)
        self._img_draw = ImageDraw.Draw(self.image)
        self._lbl_draw = ImageDraw.Draw(self.label)
        self.rng = rng
        self.jitter = jitter

    def _color(self, cls: int):
        shift = self.rng.integers(-self.jitter, self.jitter + 1, size=3) if self.jitter else np.zeros(3, int)
        return tuple(int(v) for v in np.clip(PALETTE[cls].astype(int) + shift, 0, 255))

    def rectangle(self, box, cls: int):
        self._img_draw.rectangle(box, fill=self._color(cls))
        self._lbl_draw.rectangle(box, fill=cls)

    def polygon(self, points, cls: int):
        self._img_draw.polygon(points, fill=self._color(cls))
        self._lbl_draw.polygon(points, fill=cls)

    def ellipse(self, box, cls: int):
        self._img_draw.ellipse(box, fill=self._color(cls))
        self._lbl_draw.ellipse(box, fill=cls)


class ToyDatasetMS:
    """
    The Set Designer: renders layered street scenes (sky, buildings, road,
    sidewalks, vegetation, poles, cars, pedestrians) with pixel-exact labels,
    writes them as PNG pairs and reads them back.
    """

    def __init__(self, spec: Optional[ToyDatasetSpec] = None):
        self.spec = spec or ToyDatasetSpec()

    # --- Rendering ---

    def render_scene(self, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        s = self.spec
        W, H = s.width, s.height
        canvas = _SceneCanvas(W, H, rng, s.color_jitter)
        horizon = int(rng.integers(int(0.35 * H), int(0.5 * H) + 1))

        for _ in range(int(rng.integers(s.buildings[0], s.buildings[1] + 1))):
            x0 = int(rng.integers(0, W - 8))
            min_w = min(12, W // 4)
            x1 = min(W - 1, x0 + int(rng.integers(min_w, max(min_w + 1, W // 3))))
            top = int(rng.integers(2, max(3, horizon - 4)))
            canvas.rectangle((x0, top, x1, horizon), BUILDING)
        for _ in range(int(rng.integers(s.vegetation[0], s.vegetation[1] + 1))):
            cx, r = int(rng.integers(0, W)), int(rng.integers(4, 10))
            canvas.ellipse((cx - r, horizon - 2 * r, cx + r, horizon + 2), VEGETATION)

        # ground: sidewalk everywhere, then the road trapezoid toward a vanishing point
        canvas.rectangle((0, horizon, W - 1, H - 1), SIDEWALK)
        vx = int(rng.integers(W // 3, 2 * W // 3))
        top_half = int(rng.integers(3, 8))
        spread = int(rng.integers(W // 8, W // 4))
        canvas.polygon([(vx - top_half, horizon), (vx + top_half, horizon),
                        (W - 1 + spread, H - 1), (-spread, H - 1)], ROAD)

        ground = H - horizon
        for _ in range(int(rng.integers(s.poles[0], s.poles[1] + 1))):
            px = int(rng.choice([rng.integers(0, max(1, W // 6)), rng.integers(5 * W // 6, W)]))
            base = int(rng.integers(horizon + ground // 2, H))
            canvas.rectangle((px, max(0, base - int(rng.integers(20, 36))), px + 1, base), POLE)
        for _ in range(int(rng.integers(s.cars[0], s.cars[1] + 1))):
            base = int(rng.integers(horizon + 4, H))
            depth = (base - horizon) / max(1, ground)
            cw, ch = max(6, int(30 * depth)), max(4, int(14 * depth))
            cx = int(rng.integers(vx - cw, vx + cw + 1))
            canvas.rectangle((cx - cw // 2, base - ch, cx + cw // 2, base), CAR)
        for _ in range(int(rng.integers(s.pedestrians[0], s.pedestrians[1] + 1))):
            base = int(rng.integers(horizon + 6, H))
            depth = (base - horizon) / max(1, ground)
            ph, pw = max(6, int(22 * depth)), max(2, int(6 * depth))
            px = int(rng.choice([rng.integers(0, W // 4), rng.integers(3 * W // 4, W)]))
            canvas.rectangle((px, base - ph, px + pw, base), PEDESTRIAN)

        image = MID_GREY + (np.asarray(canvas.image, dtype=np.float64) - MID_GREY) * s.contrast
        if s.noise_std > 0:
            image = image + rng.normal(0.0, s.noise_std, size=image.shape)
        image = np.floor(np.clip(image, 0, 255) + 0.5).astype(np.uint8)
        return image, np.asarray(canvas.label, dtype=np.int64)

    def render_split(self, split: str) -> List[Sample]:
        if split not in SPLITS:
            raise ValueError(f"Unknown split '{split}', expected one of {SPLITS}")
        # one stream per split keeps the splits disjoint and independent of each other's size
        rng = np.random.default_rng([self.spec.seed, SPLITS.index(split)])
        samples = []
        for i in range(self.spec.count(split)):
            image, mask = self.render_scene(rng)
            samples.append(Sample(f"{i:05d}", image, mask))
        return samples

    # --- Persistence ---

    def generate(self, out_dir: Union[str, Path]) -> Path:
        root = Path(out_dir)
        try:
            for split in SPLITS:
                split_dir = root / split
                split_dir.mkdir(parents=True, exist_ok=True)
                for sample in self.render_split(split):
                    Image.fromarray(sample.image).save(split_dir / f"{sample.image_id}{IMAGE_SUFFIX}")
                    Image.fromarray(sample.mask.astype(np.uint8)).save(split_dir / f"{sample.image_id}{LABEL_SUFFIX}")
            manifest = {"spec": self.spec.model_dump(mode="json"), "classes": CLASS_NAMES,
                        "palette": PALETTE.tolist()}
            (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        except OSError as e:
            raise DataError(f"cannot write dataset to {root}: {e}") from e
        log.info(f"✅ Toy dataset written to {root} ({self.spec.train_count} train / {self.spec.val_count} val)")
        return root

    @staticmethod
    def load_split(split_dir: Union[str, Path]) -> List[Sample]:
        split_dir = Path(split_dir)
        if not split_dir.is_dir():
            raise FileNotFoundError(f"Split directory not found: {split_dir}")
        images = {p.name[:-len(IMAGE_SUFFIX)]: p for p in split_dir.glob(f"*{IMAGE_SUFFIX}")}
        labels = {p.name[:-len(LABEL_SUFFIX)]: p for p in split_dir.glob(f"*{LABEL_SUFFIX}")}
        for stem in sorted(set(images) ^ set(labels)):
            missing = "mask" if stem in images else "image"
            raise DataError(f"orphan '{stem}' in {split_dir}: missing {missing}")

        samples = []
        for stem in sorted(images):
            with Image.open(images[stem]) as img:
                if img.mode != "RGB":
                    raise DataError(f"{images[stem].name}: unsupported PNG format '{img.mode}', expected 8-bit RGB")
                image = np.asarray(img, dtype=np.uint8).copy()
            with Image.open(labels[stem]) as lbl:
                if lbl.mode != "L":
                    raise DataError(f"{labels[stem].name}: unsupported PNG format '{lbl.mode}', expected 8-bit grayscale")
                mask = np.asarray(lbl, dtype=np.int64).copy()
            if mask.shape != image.shape[:2]:
                raise DataError(f"'{stem}': mask {mask.shape} does not match image {image.shape[:2]}")
            if mask.max(initial=0) >= len(CLASS_NAMES):
                raise DataError(f"'{stem}': mask holds class ids >= {len(CLASS_NAMES)}")
            samples.append(Sample(stem, image, mask))
        return samples

    @classmethod
    def load_dataset(cls, path: Union[str, Path]) -> Dict[str, List[Sample]]:
        root = Path(path)
        if not root.is_dir():
            raise FileNotFoundError(f"Dataset not found: {root}")
        splits = {split: cls.load_split(root / split) for split in SPLITS if (root / split).is_dir()}
        if not splits:
            raise DataError(f"{root} holds neither a train/ nor a val/ split")
        log.info(f"Loaded {', '.join(f'{k}: {len(v)}' for k, v in splits.items())} from {root}")
        return splits


# --- Independent Test Block ---
if __name__ == "__main__":
    import tempfile

    svc = ToyDatasetMS(ToyDatasetSpec(train_count=3, val_count=2, seed=11))
    with tempfile.TemporaryDirectory() as tmp:
        svc.generate(tmp)
        data = ToyDatasetMS.load_dataset(tmp)
        again = svc.render_split("train")
        same = all(np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
                   for a, b in zip(data["train"], again))
        print(f"round-trip exact: {same}")
        counts = np.bincount(np.concatenate([s.mask.ravel() for s in data["train"]]), minlength=8)
        for name, n in zip(CLASS_NAMES, counts):
            print(f"  {name:<11} {n}")
