import logging
from typing import Any, Optional, Sequence

import numpy as np

from _TensorCoreMS.tensor_core import NumericalError, ShapeError

# ==============================================================================
# CONFIGURATION
# ==============================================================================
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(message)s')
log = logging.getLogger("Metrics")
# ==============================================================================


class ConfusionMatrix:
    """N×N pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.num_classes, self.num_classes):
            raise ShapeError(f"counts must be {self.num_classes}×{self.num_classes}, got {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("confusion counts must be non-negative")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other: Any) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    # TP(s) = diagonal, FP(s) = column sum - diagonal, FN(s) = row sum - diagonal
    def true_positives(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    def false_positives(self) -> np.ndarray:
        return self.counts.sum(axis=0) - np.diag(self.counts)

    def false_negatives(self) -> np.ndarray:
        return self.counts.sum(axis=1) - np.diag(self.counts)

    def class_iou(self) -> np.ndarray:
        """IoU per class, NaN where the class is absent from truth and prediction."""
        tp = self.true_positives().astype(np.float64)
        union = tp + self.false_positives() + self.false_negatives()
        iou = np.full(self.num_classes, np.nan)
        present = union > 0
        iou[present] = tp[present] / union[present]
        return iou

    def to_list(self):
        return self.counts.tolist()


class MetricsMS:
    """
    The Referee: confusion tallies, mIoU, the adversarial mIoU ratio Q and
    the fooling rate of a perturbation.
    """

    @staticmethod
    def accumulate(cm: ConfusionMatrix, pred: np.ndarray, truth: np.ndarray,
                   ignore_class: Optional[int] = None) -> ConfusionMatrix:
        """Returns a new matrix with counts[truth_i][pred_i] incremented per pixel."""
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
        n = cm.num_classes
        p, t = pred.reshape(-1).astype(np.int64), truth.reshape(-1).astype(np.int64)
        if ignore_class is not None:
            keep = t != ignore_class
            p, t = p[keep], t[keep]
        if p.size and (p.min() < 0 or p.max() >= n or t.min() < 0 or t.max() >= n):
            raise ValueError(f"class ids must lie in [0, {n})")
        tally = np.bincount(t * n + p, minlength=n * n).reshape(n, n)
        return ConfusionMatrix(n, cm.counts + tally)

    @staticmethod
    def confusion(pred: np.ndarray, truth: np.ndarray, num_classes: int,
                  ignore_class: Optional[int] = None) -> ConfusionMatrix:
        return MetricsMS.accumulate(ConfusionMatrix(num_classes), pred, truth, ignore_class)

    @staticmethod
    def merge(matrices: Sequence[ConfusionMatrix]) -> ConfusionMatrix:
        if not matrices:
            raise ValueError("nothing to merge")
        out = matrices[0].copy()
        for cm in matrices[1:]:
            out = out + cm
        return out

    @staticmethod
    def miou(cm: ConfusionMatrix) -> float:
        """Mean IoU over classes present in truth or prediction."""
        if cm.total == 0:
            raise NumericalError("mIoU is undefined for an empty confusion matrix")
        iou = cm.class_iou()
        return float(np.mean(iou[~np.isnan(iou)]))

    @staticmethod
    def miou_ratio(miou_adv: float, miou_clean: float) -> float:
        if miou_clean <= 0:
            raise ValueError(f"clean mIoU must be positive, got {miou_clean}")
        return float(miou_adv) / float(miou_clean)

    @staticmethod
    def fooling_rate(model: Any, images: Sequence[np.ndarray], perturbation: Any) -> float:
        """
        Fraction of images whose image-level label changes once the perturbation
        is added and the result clip-quantized to a valid image.
        """
        from _AttacksMS.attacks import AttacksMS

        if len(images) == 0:
            raise ValueError("fooling rate needs at least one image")
        values = getattr(perturbation, "values", perturbation)
        fooled = 0
        for image in images:
            clean_label, _ = model.classify(np.asarray(image, dtype=np.float64))
            adv = AttacksMS.apply_perturbation(image, values)
            adv_label, _ = model.classify(adv.astype(np.float64))
            fooled += int(adv_label != clean_label)
        rate = fooled / len(images)
        log.info(f"Fooling rate: {fooled}/{len(images)} = {rate:.3f}")
        return rate


# --- Independent Test Block ---
if __name__ == "__main__":
    truth = np.array([0, 0, 1, 1])
    pred = np.array([0, 1, 1, 1])
    cm = MetricsMS.confusion(pred, truth, num_classes=2)
    print("--- Hand example ---")
    print(cm.counts)
    print(f"mIoU = {MetricsMS.miou(cm):.5f} (expected 7/12 = {7 / 12:.5f})")
    print(f"Q(4.6 / 67.3) = {MetricsMS.miou_ratio(4.6, 67.3):.4f}")
