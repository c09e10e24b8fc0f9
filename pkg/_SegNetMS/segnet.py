import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from _TensorCoreMS.tensor_core import (
    DataError, NumericalError, ShapeError, Tensor, add, affine, backward, bilinear_resize,
    conv2d, l2_norm, relu, scale, shift, softmax, softmax_cross_entropy, tensor_log,
    spatial_mean, weighted_sum,
)

# ==============================================================================
# CONFIGURATION
# ==============================================================================
CHECKPOINT_MAGIC = b"SEGADV01"
TOY_HEIGHT = 64
TOY_WIDTH = 128
CLASS_NAMES = ["road", "sidewalk", "building", "sky", "car", "pedestrian", "pole", "vegetation"]
INPUT_CENTER = 128.0   # x_hat = (x - 128) / 8, matched to the toy scenes' contrast
INPUT_SCALE = 8.0
MAX_PARAMETERS = 100_000
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(message)s')
log = logging.getLogger("SegNet")
# ==============================================================================

LabelMask = np.ndarray          # integer H×W grid of class ids
Dataset = Sequence[Tuple[np.ndarray, np.ndarray]]


# --- Architecture Descriptor ---

class ConvSpec(BaseModel):
    kernel: int = 3
    cin: int
    cout: int
    stride: int = 1
    padding: int = 1

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("kernel size must be a positive odd integer")
        return v


class BranchSpec(BaseModel):
    downscale: int = Field(ge=1)
    convs: List[ConvSpec]


def _default_branches() -> List[BranchSpec]:
    # full / half / quarter resolution, all ending in 16 channels at 1/2 resolution
    return [
        BranchSpec(downscale=1, convs=[ConvSpec(cin=3, cout=8, stride=2), ConvSpec(cin=8, cout=16)]),
        BranchSpec(downscale=2, convs=[ConvSpec(cin=3, cout=12), ConvSpec(cin=12, cout=16)]),
        BranchSpec(downscale=4, convs=[ConvSpec(cin=3, cout=16), ConvSpec(cin=16, cout=16), ConvSpec(cin=16, cout=16)]),
    ]


class ArchitectureSpec(BaseModel):
    """Three scale branches fused by upsample-and-add, 1×1 classifier, bilinear upsample."""
    height: int = TOY_HEIGHT
    width: int = TOY_WIDTH
    channels: int = 3
    num_classes: int = len(CLASS_NAMES)
    branches: List[BranchSpec] = Field(default_factory=_default_branches)
    fusion_downscale: int = 2
    classifier_cin: int = 16

    @model_validator(mode="after")
    def _check_wiring(self):
        if self.channels != 3:
            raise ValueError("the network takes RGB input (C = 3)")
        if not self.branches:
            raise ValueError("at least one branch is required")
        for b_idx, branch in enumerate(self.branches):
            if not branch.convs:
                raise ValueError(f"branch {b_idx} has no conv layers")
            if self.height % branch.downscale or self.width % branch.downscale:
                raise ValueError(f"branch {b_idx}: {self.height}×{self.width} not divisible by {branch.downscale}")
            cin = self.channels
            for conv in branch.convs:
                if conv.cin != cin:
                    raise ValueError(f"branch {b_idx}: conv expects {conv.cin} channels, receives {cin}")
                cin = conv.cout
            if cin != self.classifier_cin:
                raise ValueError(f"branch {b_idx} ends with {cin} channels, classifier takes {self.classifier_cin}")
        if self.height % self.fusion_downscale or self.width % self.fusion_downscale:
            raise ValueError("fusion resolution must divide the input resolution")
        return self

    def parameter_shapes(self) -> List[Tuple[int, ...]]:
        shapes = []
        for branch in self.branches:
            for conv in branch.convs:
                shapes.append((conv.kernel, conv.kernel, conv.cin, conv.cout))
                shapes.append((conv.cout,))
        shapes.append((1, 1, self.classifier_cin, self.num_classes))
        shapes.append((self.num_classes,))
        return shapes

    def header(self) -> List[int]:
        words = [self.height, self.width, self.channels, self.num_classes, len(self.branches)]
        for branch in self.branches:
            words += [branch.downscale, len(branch.convs)]
            for conv in branch.convs:
                words += [conv.kernel, conv.cin, conv.cout, conv.stride, conv.padding]
        words += [self.fusion_downscale, self.classifier_cin]
        return words


def adversarial_count(mix_ratio: float, batch_size: int) -> int:
    """Adversarial examples per batch, rounded half-up."""
    return int(math.floor(mix_ratio * batch_size + 0.5))


# --- Data Models ---

@dataclass(frozen=True)
class ScoreVolume:
    """Per-pixel logits and softmax probabilities, both H×W×N."""
    logits: np.ndarray
    probs: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.logits.shape[-1])


@dataclass
class LossSpec:
    """What input_gradient differentiates: CE toward a mask or an image-level class."""
    target: Union[np.ndarray, int]
    mode: Literal["segmentation", "classification"] = "segmentation"
    weights: Optional[np.ndarray] = None
    scale: float = 1.0


class TrainConfig(BaseModel):
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=4, ge=1)
    learning_rate: float = Field(default=0.05, ge=0.0)
    seed: int = 7


@dataclass
class TrainResult:
    model: "SegModel"
    loss_trace: List[float] = field(default_factory=list)


# --- The Model ---

class SegModel:
    """Architecture descriptor plus parameter arrays in declaration order."""

    def __init__(self, arch: Optional[ArchitectureSpec] = None, params: Optional[List[np.ndarray]] = None):
        self.arch = arch or ArchitectureSpec()
        shapes = self.arch.parameter_shapes()
        if params is None:
            params = [np.zeros(s) for s in shapes]
        if len(params) != len(shapes) or any(p.shape != s for p, s in zip(params, shapes)):
            raise ShapeError("parameter list does not match the architecture descriptor")
        self.params = [np.array(p, dtype=np.float64, copy=True) for p in params]
        if self.param_count > MAX_PARAMETERS:
            raise ValueError(f"{self.param_count} parameters exceeds the desk-scale limit of {MAX_PARAMETERS}")

    @classmethod
    def initialize(cls, arch: Optional[ArchitectureSpec] = None, seed: int = 0,
                   mode: Literal["he", "zeros"] = "he") -> "SegModel":
        model = cls(arch)
        if mode == "zeros":
            return model
        rng = np.random.default_rng(seed)
        for i, shape in enumerate(model.arch.parameter_shapes()):
            if len(shape) == 4:
                fan_in = shape[0] * shape[1] * shape[2]
                model.params[i] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return model

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params))

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def copy(self) -> "SegModel":
        return SegModel(self.arch.model_copy(deep=True), self.params)

    def check_image(self, image: np.ndarray) -> None:
        expected = (self.arch.height, self.arch.width, self.arch.channels)
        if tuple(np.shape(image)) != expected:
            raise ShapeError(f"image shape {np.shape(image)} does not match model input {expected}")

    def graph(self, x: Tensor, params: Sequence[Tensor]) -> Tuple[Tensor, List[Tensor]]:
        """Builds one fresh tape: returns H×W×N logits and the post-ReLU taps."""
        arch = self.arch
        xn = affine(x, 1.0 / INPUT_SCALE, -INPUT_CENTER / INPUT_SCALE)
        fuse_h, fuse_w = arch.height // arch.fusion_downscale, arch.width // arch.fusion_downscale
        taps: List[Tensor] = []
        fused: Optional[Tensor] = None
        p = 0
        for branch in arch.branches:
            h = xn
            if branch.downscale > 1:
                h = bilinear_resize(xn, arch.height // branch.downscale, arch.width // branch.downscale)
            for conv in branch.convs:
                h = relu(conv2d(h, params[p], params[p + 1], conv.stride, conv.padding))
                taps.append(h)
                p += 2
            if h.shape[:2] != (fuse_h, fuse_w):
                h = bilinear_resize(h, fuse_h, fuse_w)
            fused = h if fused is None else add(fused, h)
        low = conv2d(fused, params[p], params[p + 1], 1, 0)
        logits = bilinear_resize(low, arch.height, arch.width)
        return logits, taps

    # --- Persistence ---

    def to_bytes(self) -> bytes:
        header = self.arch.header()
        payload = b"".join(p.astype("<f8").tobytes() for p in self.params)
        return CHECKPOINT_MAGIC + struct.pack(f"<{len(header)}I", *header) + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SegModel":
        if blob[:8] != CHECKPOINT_MAGIC:
            raise DataError("not a model checkpoint (bad magic)")
        offset = 8

        def _u32(count=1):
            nonlocal offset
            if offset + 4 * count > len(blob):
                raise DataError("truncated checkpoint header")
            values = struct.unpack_from(f"<{count}I", blob, offset)
            offset += 4 * count
            return values

        height, width, channels, num_classes, n_branches = _u32(5)
        branches = []
        for _ in range(n_branches):
            downscale, n_convs = _u32(2)
            convs = []
            for _ in range(n_convs):
                k, cin, cout, stride, padding = _u32(5)
                convs.append(ConvSpec(kernel=k, cin=cin, cout=cout, stride=stride, padding=padding))
            branches.append(BranchSpec(downscale=downscale, convs=convs))
        fusion_downscale, classifier_cin = _u32(2)
        arch = ArchitectureSpec(height=height, width=width, channels=channels, num_classes=num_classes,
                                branches=branches, fusion_downscale=fusion_downscale,
                                classifier_cin=classifier_cin)
        params = []
        for shape in arch.parameter_shapes():
            n = int(np.prod(shape))
            if offset + 8 * n > len(blob):
                raise DataError("truncated checkpoint parameters")
            params.append(np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64))
            offset += 8 * n
        if offset != len(blob):
            raise DataError(f"checkpoint has {len(blob) - offset} trailing bytes")
        return cls(arch, params)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        log.info(f"Saved checkpoint ({self.param_count} params) to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SegModel":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# --- The Service ---

class SegNetMS:
    """
    The Segmenter: a desk-scale multi-scale segmentation net serving class
    scores, masks, an image-level classifier head, input gradients and
    (adversarial) training.
    """

    def __init__(self, model: Optional[SegModel] = None):
        self.model = model or SegModel.initialize()

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    def _param_tensors(self, track: bool) -> List[Tensor]:
        return [Tensor(p, requires_grad=track) for p in self.model.params]

    # --- Inference ---

    def forward_scores(self, image: np.ndarray) -> Tuple[ScoreVolume, List[np.ndarray]]:
        self.model.check_image(image)
        logits, taps = self.model.graph(Tensor(image), self._param_tensors(False))
        return ScoreVolume(logits.numpy(), softmax(logits.data)), [t.numpy() for t in taps]

    @staticmethod
    def predict_mask(scores: ScoreVolume) -> LabelMask:
        """Per-pixel argmax; np.argmax keeps the first (smallest) index on ties."""
        return np.argmax(scores.probs, axis=-1).astype(np.int64)

    def segment(self, image: np.ndarray) -> LabelMask:
        return self.predict_mask(self.forward_scores(image)[0])

    def classify(self, image: np.ndarray) -> Tuple[int, np.ndarray]:
        """Image-level logits are the spatial mean of the segmentation logits."""
        scores, _ = self.forward_scores(image)
        logits = scores.logits.reshape(-1, self.num_classes).mean(axis=0)
        return int(np.argmax(logits)), logits

    def logit_jacobian(self, image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Image-level logits (N) and their gradients w.r.t. the image (N×H×W×C)."""
        self.model.check_image(image)
        x = Tensor(image, requires_grad=True)
        logits, _ = self.model.graph(x, self._param_tensors(False))
        pooled = spatial_mean(logits)
        jac = np.zeros((self.num_classes,) + x.shape)
        for k in range(self.num_classes):
            backward(weighted_sum(pooled, np.eye(self.num_classes)[k]), [x])
            jac[k] = x.grad
        return pooled.numpy(), jac

    # --- Gradients ---

    def loss_and_gradient(self, image: np.ndarray, spec: LossSpec) -> Tuple[float, np.ndarray]:
        self.model.check_image(image)
        x = Tensor(image, requires_grad=True)
        logits, _ = self.model.graph(x, self._param_tensors(False))
        loss = self._loss(logits, spec)
        (grad,) = backward(loss, [x])
        return loss.item(), grad

    def loss_value(self, image: np.ndarray, spec: LossSpec) -> float:
        self.model.check_image(image)
        logits, _ = self.model.graph(Tensor(image), self._param_tensors(False))
        return self._loss(logits, spec).item()

    def _loss(self, logits: Tensor, spec: LossSpec) -> Tensor:
        if spec.mode == "segmentation":
            target = np.asarray(spec.target)
            if target.shape != logits.shape[:2]:
                raise ShapeError(f"target mask {target.shape} does not match logits {logits.shape[:2]}")
            weights = None if spec.weights is None else np.asarray(spec.weights, dtype=np.float64) * spec.scale
            if weights is None and spec.scale != 1.0:
                weights = np.full(target.shape, float(spec.scale))
            return softmax_cross_entropy(logits, target, weights)
        if spec.mode == "classification":
            target = np.asarray(spec.target)
            if target.ndim != 0:
                raise ValueError("classification mode expects a single class id")
            weights = None if spec.scale == 1.0 else np.array([float(spec.scale)])
            return softmax_cross_entropy(spatial_mean(logits), target, weights)
        raise ValueError(f"Unknown loss mode: {spec.mode}")

    def input_gradient(self, image: np.ndarray, spec: LossSpec) -> np.ndarray:
        return self.loss_and_gradient(image, spec)[1]

    def feature_norm_objective(self, image: np.ndarray, floor: float = 1e-12) -> Tuple[float, np.ndarray]:
        """J = -sum_l log(||f_l(image)||_2 + floor) and dJ/d(image)."""
        self.model.check_image(image)
        x = Tensor(image, requires_grad=True)
        _, taps = self.model.graph(x, self._param_tensors(False))
        if all(float(np.abs(t.data).sum()) == 0.0 for t in taps):
            raise NumericalError("every feature tap is zero for this image (dead network)")
        objective = None
        for tap in taps:
            term = tensor_log(shift(l2_norm(tap), floor))
            objective = term if objective is None else add(objective, term)
        objective = scale(objective, -1.0)
        (grad,) = backward(objective, [x])
        return objective.item(), grad

    # --- Training ---

    def _param_step(self, model: SegModel, image: np.ndarray, mask: np.ndarray) -> Tuple[float, List[np.ndarray]]:
        params = [Tensor(p, requires_grad=True) for p in model.params]
        logits, _ = model.graph(Tensor(image), params)
        loss = softmax_cross_entropy(logits, mask)
        return loss.item(), backward(loss, params)

    def _fit(self, dataset: Dataset, config: TrainConfig, epsilon: float, mix_ratio: float) -> TrainResult:
        if len(dataset) == 0:
            raise ValueError("cannot train on an empty dataset")
        if not 0.0 <= mix_ratio <= 1.0:
            raise ValueError(f"mix_ratio must lie in [0, 1], got {mix_ratio}")
        if epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {epsilon}")
        model = self.model.copy()
        for image, mask in dataset:
            model.check_image(image)
            mask = np.asarray(mask)
            if mask.min() < 0 or mask.max() >= model.num_classes:
                raise ValueError("training labels contain invalid class ids")

        attacker = None
        if mix_ratio > 0 and epsilon > 0:
            from _AttacksMS.attacks import AttackConfig, AttacksMS
            attacker = AttacksMS(SegNetMS(model))
            fgsm_cfg = AttackConfig(lambda_=epsilon, epsilon=epsilon, direction="ascend", seed=config.seed)

        rng = np.random.default_rng(config.seed)
        trace: List[float] = []
        n = len(dataset)
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, config.batch_size):
                batch = order[start:start + config.batch_size]
                n_adv = adversarial_count(mix_ratio, len(batch)) if attacker else 0
                accum = [np.zeros_like(p) for p in model.params]
                for j, idx in enumerate(batch):
                    image, mask = dataset[int(idx)]
                    x = np.asarray(image, dtype=np.float64)
                    if j < n_adv:
                        adv, _ = attacker.fgsm(x, fgsm_cfg, labels=np.asarray(mask))
                        x = adv.astype(np.float64)
                    loss, grads = self._param_step(model, x, np.asarray(mask))
                    losses.append(loss)
                    for a, g in zip(accum, grads):
                        a += g
                for p, a in zip(model.params, accum):
                    p -= config.learning_rate * (a / len(batch))
            trace.append(float(np.mean(losses)))
            log.info(f"Epoch {epoch + 1}/{config.epochs}: mean loss {trace[-1]:.4f}")
        self.model = model
        return TrainResult(model=model, loss_trace=trace)

    def train(self, dataset: Dataset, config: Optional[TrainConfig] = None) -> TrainResult:
        """Plain seeded SGD on the full-resolution cross-entropy."""
        return self._fit(dataset, config or TrainConfig(), epsilon=0.0, mix_ratio=0.0)

    def adversarial_train(self, dataset: Dataset, config: Optional[TrainConfig] = None,
                          epsilon: float = 4.0, mix_ratio: float = 0.5) -> TrainResult:
        """
        Same loop as train, but the first round(mix_ratio * batch) images of every
        batch are replaced by FGSM examples (lambda = epsilon, ground-truth labels)
        crafted against the current parameters.
        """
        return self._fit(dataset, config or TrainConfig(), epsilon=epsilon, mix_ratio=mix_ratio)

    # --- Persistence ---

    def save(self, path: Union[str, Path]) -> Path:
        return self.model.save(path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SegNetMS":
        return cls(SegModel.load(path))


# --- Independent Test Block ---
if __name__ == "__main__":
    net = SegNetMS(SegModel.initialize(seed=3))
    print(f"--- SegNet: {net.model.param_count} parameters ---")
    img = np.random.default_rng(0).integers(0, 256, size=(TOY_HEIGHT, TOY_WIDTH, 3)).astype(np.float64)

    scores, taps = net.forward_scores(img)
    print(f"logits {scores.logits.shape}, {len(taps)} taps, prob sums ~ {scores.probs.sum(-1).mean():.12f}")
    label, logits = net.classify(img)
    print(f"image-level class: {CLASS_NAMES[label]}")

    mask = net.predict_mask(scores)
    grad = net.input_gradient(img, LossSpec(target=mask))
    print(f"|grad| max = {np.abs(grad).max():.3e}")

    blob = net.model.to_bytes()
    again = SegModel.from_bytes(blob)
    print(f"✅ checkpoint round-trip exact: {again.to_bytes() == blob}")
