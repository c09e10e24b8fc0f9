import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from _SegNetMS.segnet import LossSpec, SegNetMS
from _TensorCoreMS.tensor_core import DataError, ShapeError

# ==============================================================================
# CONFIGURATION
# ==============================================================================
PERTURBATION_MAGIC = b"SEGADVR1"
MAX_STEP = 255.0             # a sign step larger than the gray range is degenerate
ITER_OFFSET = 4.0            # iterations = floor(min(eps + 4, 1.25 * eps))
ITER_FACTOR = 1.25
DEEPFOOL_OVERSHOOT = 0.02
DEEPFOOL_MIN_STEP = 1e-6
DNNM_CHUNK = 256             # objective pixels per brute-force distance block
FFF_STEP_SIZE = 500.0        # feature-norm gradients w.r.t. gray values are tiny
BUDGET_TOL = 1e-9
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(message)s')
log = logging.getLogger("Attacks")
# ==============================================================================

TargetSpec = Union[np.ndarray, Literal["own", "least_likely"]]


class Classifier(Protocol):
    """Anything with an image-level label and a logit Jacobian (SegNetMS, or a linear toy head)."""

    def classify(self, image: np.ndarray) -> Tuple[int, np.ndarray]: ...

    def logit_jacobian(self, image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]: ...


# --- Data Models ---

class AttackConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    lambda_: float = Field(default=1.0, alias="lambda", gt=0)
    epsilon: float = Field(default=8.0, gt=0)
    norm_p: float = math.inf
    iterations: Optional[int] = Field(default=None, ge=1)
    direction: Literal["ascend", "descend"] = "ascend"
    seed: int = 0

    @field_validator("norm_p")
    @classmethod
    def _known_norm(cls, v):
        if v not in (math.inf, 2.0):
            raise ValueError(f"norm_p must be inf or 2, got {v}")
        return v

    @model_validator(mode="after")
    def _budget_covers_step(self):
        if self.norm_p == math.inf and self.epsilon < self.lambda_:
            raise ValueError(f"epsilon ({self.epsilon}) must be >= lambda ({self.lambda_}) for the inf-norm")
        return self


@dataclass
class Perturbation:
    """Additive H×W×C field with its declared norm and budget."""
    values: np.ndarray
    norm_p: float = math.inf
    epsilon: float = math.inf

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.norm_p not in (math.inf, 2.0):
            raise ValueError(f"norm_p must be inf or 2, got {self.norm_p}")
        if self.norm() > self.epsilon + BUDGET_TOL:
            raise ValueError(f"perturbation norm {self.norm():.6f} exceeds its budget {self.epsilon}")

    def norm(self) -> float:
        if self.values.size == 0:
            return 0.0
        if self.norm_p == math.inf:
            return float(np.abs(self.values).max())
        return float(np.sqrt(np.sum(self.values ** 2)))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def to_bytes(self) -> bytes:
        dims = self.values.shape
        header = struct.pack(f"<I{len(dims)}I", len(dims), *dims) + struct.pack("<dd", self.norm_p, self.epsilon)
        return PERTURBATION_MAGIC + header + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Perturbation":
        if blob[:8] != PERTURBATION_MAGIC:
            raise DataError("not a perturbation file (bad magic)")
        try:
            (ndim,) = struct.unpack_from("<I", blob, 8)
            dims = struct.unpack_from(f"<{ndim}I", blob, 12)
            norm_p, epsilon = struct.unpack_from("<dd", blob, 12 + 4 * ndim)
        except struct.error as e:
            raise DataError(f"truncated perturbation header: {e}") from e
        offset = 12 + 4 * ndim + 16
        count = int(np.prod(dims)) if dims else 1
        if len(blob) != offset + 8 * count:
            raise DataError(f"perturbation payload has {len(blob) - offset} bytes, expected {8 * count}")
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)
        return cls(values, norm_p, epsilon)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        log.info(f"Saved perturbation {self.shape} (p={self.norm_p}, eps={self.epsilon}) to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Perturbation":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Perturbation not found: {path}")
        return cls.from_bytes(path.read_bytes())


@dataclass
class MinimalPerturbationResult:
    """Outcome of DeepFool / C&W: the (overshot) perturbation plus a success flag."""
    perturbation: Perturbation
    unscaled: np.ndarray
    success: bool
    iterations: int
    clean_label: int
    adversarial_label: int

    @property
    def magnitude(self) -> float:
        return float(np.sqrt(np.sum(self.unscaled ** 2)))


@dataclass
class UapResult:
    perturbation: Perturbation
    fooled_fraction_train: float
    fooled_fraction_holdout: float


@dataclass
class FeatureFoolResult:
    perturbation: Perturbation
    objective_trace: List[float] = field(default_factory=list)


# --- Pure helpers ---

def clip_quantize(image_real: np.ndarray) -> np.ndarray:
    """Clamp to [0, 255], round half away from zero, cast to uint8."""
    x = np.clip(np.asarray(image_real, dtype=np.float64), 0.0, 255.0)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.uint8)


def iteration_budget(epsilon: float) -> int:
    return max(1, int(math.floor(min(epsilon + ITER_OFFSET, ITER_FACTOR * epsilon))))


def project(r: np.ndarray, epsilon: float, norm_p: float) -> np.ndarray:
    """Box clamp for the inf-norm, radial rescale for the 2-norm."""
    if norm_p == math.inf:
        return np.clip(r, -epsilon, epsilon)
    n = float(np.sqrt(np.sum(r ** 2)))
    return r if n <= epsilon else r * (epsilon / n)


def finalize(x_real: np.ndarray, x_clean: np.ndarray, epsilon: float, norm_p: float = math.inf) -> np.ndarray:
    """Quantizes a real-valued adversarial image so the budget holds on integers."""
    x_clean = np.asarray(x_clean, dtype=np.float64)
    if norm_p == math.inf:
        q = clip_quantize(x_real).astype(np.int64)
        if math.isfinite(epsilon):
            bound = int(math.floor(epsilon + BUDGET_TOL))
            q = np.clip(q, x_clean - bound, x_clean + bound)
        return q.astype(np.uint8)
    # truncation toward zero never grows |r|, so the 2-norm budget survives
    r = np.clip(np.asarray(x_real, dtype=np.float64), 0.0, 255.0) - x_clean
    return (x_clean + np.trunc(r)).astype(np.uint8)


class AttacksMS:
    """
    The Saboteur: crafts adversarial examples (FGSM, LLCM, iterative variants,
    SSMM, DNNM) and perturbations (DeepFool, C&W, universal, Fast Feature Fool)
    against a SegNetMS model.
    """

    def __init__(self, segnet: Optional[SegNetMS] = None):
        self.segnet = segnet or SegNetMS()

    # --- Plumbing ---

    @staticmethod
    def apply_perturbation(image: np.ndarray, values: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        values = np.asarray(getattr(values, "values", values), dtype=np.float64)
        if image.shape != values.shape:
            raise ShapeError(f"perturbation {values.shape} does not match image {image.shape}")
        return clip_quantize(image + values)

    @staticmethod
    def random_perturbation(shape: Sequence[int], epsilon: float, seed: int = 0) -> Perturbation:
        """Seeded uniform noise in [-eps, eps], the baseline for universal perturbations."""
        if epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        rng = np.random.default_rng(seed)
        return Perturbation(rng.uniform(-epsilon, epsilon, size=tuple(shape)), math.inf, epsilon)

    @staticmethod
    def least_likely_targets(scores) -> np.ndarray:
        """Per-pixel argmin of the class probabilities (first index on ties)."""
        return np.argmin(scores.probs, axis=-1).astype(np.int64)

    @staticmethod
    def build_dnnm_target(mask: np.ndarray, objective_class: int) -> np.ndarray:
        """
        Replaces every pixel of the objective class with the class of its
        Euclidean-nearest non-objective pixel. Equidistant donors resolve to
        the smallest row-major index.
        """
        mask = np.asarray(mask)
        if mask.ndim != 2:
            raise ShapeError(f"mask must be H×W, got {mask.shape}")
        is_obj = mask == objective_class
        if not is_obj.any():
            return mask.copy()
        if is_obj.all():
            raise ValueError(f"mask consists only of class {objective_class}; no donor class exists")

        width = mask.shape[1]
        flat = mask.reshape(-1)
        donors = np.flatnonzero(~is_obj.reshape(-1))
        d_row, d_col = np.divmod(donors, width)
        targets = np.flatnonzero(is_obj.reshape(-1))
        out = flat.copy()
        for start in range(0, targets.size, DNNM_CHUNK):
            chunk = targets[start:start + DNNM_CHUNK]
            t_row, t_col = np.divmod(chunk, width)
            dist = (t_row[:, None] - d_row[None, :]) ** 2 + (t_col[:, None] - d_col[None, :]) ** 2
            out[chunk] = flat[donors[np.argmin(dist, axis=1)]]
        return out.reshape(mask.shape)

    # --- Signed-gradient attacks ---

    def _check_step(self, image: np.ndarray, cfg: AttackConfig) -> np.ndarray:
        if cfg.lambda_ > MAX_STEP:
            raise ValueError(f"lambda = {cfg.lambda_} exceeds the gray range; the step is degenerate")
        x = np.asarray(image, dtype=np.float64)
        self.segnet.model.check_image(x)
        return x

    def _signed_step(self, x: np.ndarray, cfg: AttackConfig, target: np.ndarray,
                     sign: float) -> Tuple[np.ndarray, Perturbation]:
        grad = self.segnet.input_gradient(x, LossSpec(target=target))
        x_adv = finalize(x + sign * cfg.lambda_ * np.sign(grad), x, cfg.lambda_)
        r = x_adv.astype(np.float64) - x
        return x_adv, Perturbation(r, math.inf, float(math.floor(cfg.lambda_ + BUDGET_TOL)))

    def fgsm(self, image: np.ndarray, cfg: AttackConfig,
             labels: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Perturbation]:
        """One ascent step x + lambda * sign(grad J); labels default to the model's own prediction."""
        if cfg.direction != "ascend":
            raise ValueError("fgsm is an untargeted ascent attack (direction='ascend')")
        x = self._check_step(image, cfg)
        target = self.segnet.segment(x) if labels is None else np.asarray(labels)
        return self._signed_step(x, cfg, target, +1.0)

    def llcm(self, image: np.ndarray, cfg: AttackConfig) -> Tuple[np.ndarray, Perturbation]:
        """One descent step toward the least-likely class of the clean image."""
        x = self._check_step(image, cfg)
        scores, _ = self.segnet.forward_scores(x)
        return self._signed_step(x, cfg, self.least_likely_targets(scores), -1.0)

    def iterative_attack(self, image: np.ndarray, cfg: AttackConfig,
                         target: TargetSpec = "own") -> Tuple[np.ndarray, List[float]]:
        """
        Iterated signed-gradient steps on a real-valued working image, projected
        to the eps-ball and the gray range after every step and quantized once at
        the end. The target mask is fixed from the clean image. The trace holds
        the loss at every iterate, the starting image included.
        """
        x0 = self._check_step(image, cfg)
        if isinstance(target, str):
            if target == "own":
                if cfg.direction == "descend":
                    raise ValueError("descend needs an explicit or least-likely target")
                mask = self.segnet.segment(x0)
            elif target == "least_likely":
                if cfg.direction == "ascend":
                    raise ValueError("the least-likely target is used with direction='descend'")
                mask = self.least_likely_targets(self.segnet.forward_scores(x0)[0])
            else:
                raise ValueError(f"Unknown target: {target}")
        else:
            mask = np.asarray(target)
            if mask.shape != x0.shape[:2]:
                raise ShapeError(f"target mask {mask.shape} does not match image {x0.shape[:2]}")

        n_iter = cfg.iterations or iteration_budget(cfg.epsilon)
        sign = 1.0 if cfg.direction == "ascend" else -1.0
        spec = LossSpec(target=mask)
        x = x0.copy()
        trace: List[float] = []
        for tau in range(n_iter):
            loss, grad = self.segnet.loss_and_gradient(x, spec)
            trace.append(loss)
            x = x + sign * cfg.lambda_ * np.sign(grad)
            x = np.clip(x0 + project(x - x0, cfg.epsilon, cfg.norm_p), 0.0, 255.0)
            log.debug(f"iteration {tau + 1}/{n_iter}: loss {loss:.6f}")
        trace.append(self.segnet.loss_value(x, spec))
        x_adv = finalize(x, x0, cfg.epsilon, cfg.norm_p)
        log.info(f"{cfg.direction} attack: {n_iter} iterations, loss {trace[0]:.4f} -> {trace[-1]:.4f}")
        return x_adv, trace

    def ssmm_attack(self, image: np.ndarray, fake_mask: np.ndarray, cfg: AttackConfig) -> np.ndarray:
        """Targeted descent toward a fake mask taken from another scene."""
        if cfg.direction != "descend":
            raise ValueError("ssmm is a targeted attack (direction='descend')")
        fake_mask = np.asarray(fake_mask)
        x_adv, _ = self.iterative_attack(image, cfg, target=fake_mask)
        return x_adv

    def dnnm_attack(self, image: np.ndarray, objective_class: int,
                    cfg: AttackConfig) -> Tuple[np.ndarray, np.ndarray]:
        """Hides one class by steering each of its pixels to the nearest other class."""
        x = self._check_step(image, cfg)
        clean = self.segnet.segment(x)
        if not np.any(clean == objective_class):
            log.info(f"class {objective_class} absent from the clean prediction; nothing to remove")
            return clip_quantize(x), clean
        target = self.build_dnnm_target(clean, objective_class)
        return self.ssmm_attack(x, target, cfg), target

    # --- Minimal perturbations (image-level classification) ---

    @staticmethod
    def deepfool(classifier: Classifier, image: np.ndarray, max_iters: int = 50,
                 overshoot: float = DEEPFOOL_OVERSHOOT) -> MinimalPerturbationResult:
        x0 = np.asarray(image, dtype=np.float64)
        label, _ = classifier.classify(x0)
        r_tot = np.zeros_like(x0)
        adv_label, success, it = label, False, 0
        for it in range(1, max_iters + 1):
            logits, jac = classifier.logit_jacobian(x0 + r_tot)
            best, direction = math.inf, None
            for k in range(len(logits)):
                if k == label:
                    continue
                w_k = jac[k] - jac[label]
                norm = float(np.sqrt(np.sum(w_k ** 2)))
                if norm == 0.0:
                    continue
                dist = abs(float(logits[k] - logits[label])) / norm
                if dist < best:
                    best, direction = dist, w_k / norm
            if direction is None:
                log.warning("DeepFool: every boundary is flat; no direction to move in")
                break
            r_tot = r_tot + max(best, DEEPFOOL_MIN_STEP) * direction
            adv_label, _ = classifier.classify(x0 + (1.0 + overshoot) * r_tot)
            if adv_label != label:
                success = True
                break
        if not success:
            log.warning(f"DeepFool did not change label {label} within {max_iters} iterations")
        values = (1.0 + overshoot) * r_tot
        norm = float(np.sqrt(np.sum(values ** 2)))
        return MinimalPerturbationResult(Perturbation(values, 2.0, norm), r_tot, success, it, label, adv_label)

    def minimal_perturbation(self, image: np.ndarray, max_iters: int = 50,
                             overshoot: float = DEEPFOOL_OVERSHOOT,
                             classifier: Optional[Classifier] = None) -> MinimalPerturbationResult:
        return self.deepfool(classifier or self.segnet, image, max_iters, overshoot)

    def cw_attack(self, image: np.ndarray, c: float, steps: int = 100, step_size: float = 0.01,
                  clean_label: Optional[int] = None,
                  classifier: Optional[Classifier] = None) -> MinimalPerturbationResult:
        """
        Gradient descent on ||r||^2 + c * max(z_clean - max_other z, 0) over an
        unclipped real r. Keeps the smallest r that changes the label.
        """
        if c <= 0:
            raise ValueError(f"c must be positive, got {c}")
        clf = classifier or self.segnet
        x0 = np.asarray(image, dtype=np.float64)
        if clean_label is None:
            clean_label, _ = clf.classify(x0)
        r = np.zeros_like(x0)
        best: Optional[np.ndarray] = None
        best_norm, best_label = math.inf, clean_label
        for step in range(steps + 1):
            logits, jac = clf.logit_jacobian(x0 + r)
            current = int(np.argmax(logits))
            norm = float(np.sqrt(np.sum(r ** 2)))
            if current != clean_label and norm < best_norm:
                best, best_norm, best_label = r.copy(), norm, current
            if step == steps:
                break
            others = np.array(logits, dtype=np.float64)
            others[clean_label] = -np.inf
            j = int(np.argmax(others))
            grad = 2.0 * r
            if logits[clean_label] - logits[j] > 0:
                grad = grad + c * (jac[clean_label] - jac[j])
            r = r - step_size * grad
        success = best is not None
        if not success:
            log.warning(f"C&W (c={c}) did not change label {clean_label} in {steps} steps")
            best, best_norm = r, float(np.sqrt(np.sum(r ** 2)))
        return MinimalPerturbationResult(Perturbation(best, 2.0, best_norm), best, success, steps,
                                         int(clean_label), int(best_label))

    # --- Universal perturbations ---

    def craft_uap(self, train_images: Sequence[np.ndarray], holdout_images: Sequence[np.ndarray],
                  epsilon: float = 10.0, norm_p: float = math.inf, passes: int = 1,
                  max_iters: int = 50, overshoot: float = DEEPFOOL_OVERSHOOT,
                  classifier: Optional[Classifier] = None) -> UapResult:
        """
        Accumulates DeepFool steps of the not-yet-fooled training images into one
        perturbation, projecting onto the eps-ball after every update. Images are
        visited in dataset order.
        """
        from _MetricsMS.metrics import MetricsMS

        if len(train_images) == 0:
            raise ValueError("craft_uap needs at least one training image")
        if epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        if norm_p not in (math.inf, 2.0):
            raise ValueError(f"norm_p must be inf or 2, got {norm_p}")
        train_keys = {np.asarray(x).tobytes() for x in train_images}
        if any(np.asarray(v).tobytes() in train_keys for v in holdout_images):
            raise ValueError("training and holdout images must be disjoint")

        clf = classifier or self.segnet
        r = np.zeros(np.shape(train_images[0]), dtype=np.float64)
        for p in range(passes):
            updates = 0
            for image in train_images:
                x = np.asarray(image, dtype=np.float64)
                clean, _ = clf.classify(x)
                fooled, _ = clf.classify(self.apply_perturbation(x, r).astype(np.float64))
                if fooled != clean:
                    continue
                step = self.deepfool(clf, x + r, max_iters, overshoot)
                if step.success:
                    r = project(r + step.perturbation.values, epsilon, norm_p)
                    updates += 1
            log.info(f"UAP pass {p + 1}/{passes}: {updates} updates")

        uap = Perturbation(r, norm_p, epsilon)
        train_rate = MetricsMS.fooling_rate(clf, train_images, uap)
        holdout_rate = MetricsMS.fooling_rate(clf, holdout_images, uap) if len(holdout_images) else 0.0
        return UapResult(uap, train_rate, holdout_rate)

    def fff_uap(self, epsilon: float = 10.0, steps: int = 20, step_size: float = FFF_STEP_SIZE,
                seed: int = 0) -> FeatureFoolResult:
        """
        Data-free universal perturbation: gradient descent on
        -sum_l log ||f_l(128 + r)||_2 from seeded uniform noise, clamped to
        the eps-box after every step.
        """
        if epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        arch = self.segnet.model.arch
        rng = np.random.default_rng(seed)
        r = rng.uniform(-epsilon, epsilon, size=(arch.height, arch.width, arch.channels))
        trace: List[float] = []
        for step in range(steps):
            objective, grad = self.segnet.feature_norm_objective(128.0 + r)
            trace.append(objective)
            r = np.clip(r - step_size * grad, -epsilon, epsilon)
            log.debug(f"FFF step {step + 1}/{steps}: J = {objective:.6f}")
        trace.append(self.segnet.feature_norm_objective(128.0 + r)[0])
        log.info(f"FFF: J {trace[0]:.4f} -> {trace[-1]:.4f} over {steps} steps")
        return FeatureFoolResult(Perturbation(r, math.inf, epsilon), trace)


# --- Independent Test Block ---
if __name__ == "__main__":
    from _SegNetMS.segnet import SegModel

    print(f"clip_quantize([255.7, -3.2, 127.5]) = {clip_quantize(np.array([255.7, -3.2, 127.5]))}")
    print(f"iterations for eps 4/8/16: {[iteration_budget(e) for e in (4, 8, 16)]}")

    attacker = AttacksMS(SegNetMS(SegModel.initialize(seed=1)))
    img = np.random.default_rng(0).integers(0, 256, size=(64, 128, 3)).astype(np.uint8)
    adv, pert = attacker.fgsm(img, AttackConfig(lambda_=4, epsilon=4))
    print(f"FGSM: ||r||_inf = {pert.norm():.0f}")

    m = np.array([[0, 0], [0, 5]])
    print(f"DNNM target of {m.tolist()} without class 5: {AttacksMS.build_dnnm_target(m, 5).tolist()}")
