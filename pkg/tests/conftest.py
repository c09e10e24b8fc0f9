"""
Shared fixtures: a tiny segmentation net, a linear toy classifier with a
closed-form minimal perturbation, and a generated toy dataset on disk.
"""

import numpy as np
import pytest

from _SegNetMS.segnet import ArchitectureSpec, BranchSpec, ConvSpec, SegModel, SegNetMS
from _ToyDatasetMS.toy_dataset import ToyDatasetMS, ToyDatasetSpec

SMALL_H, SMALL_W = 16, 32


def small_arch(num_classes: int = 8) -> ArchitectureSpec:
    """Two branches (full and half resolution) fused at half resolution."""
    return ArchitectureSpec(
        height=SMALL_H, width=SMALL_W, num_classes=num_classes,
        branches=[
            BranchSpec(downscale=1, convs=[ConvSpec(cin=3, cout=4, stride=2), ConvSpec(cin=4, cout=8)]),
            BranchSpec(downscale=2, convs=[ConvSpec(cin=3, cout=8)]),
        ],
        fusion_downscale=2, classifier_cin=8,
    )


class LinearHead:
    """Image-level classifier z = W x + b, with an exact Jacobian."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.W = np.asarray(weights, dtype=np.float64)
        self.b = np.asarray(bias, dtype=np.float64)

    def logits(self, image: np.ndarray) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64).reshape(-1)
        return self.W.reshape(len(self.b), -1) @ x + self.b

    def classify(self, image):
        z = self.logits(image)
        return int(np.argmax(z)), z

    def logit_jacobian(self, image):
        shape = np.shape(image)
        return self.logits(image), self.W.reshape((len(self.b),) + tuple(shape)).copy()


@pytest.fixture
def arch():
    return small_arch()


@pytest.fixture
def small_model(arch):
    return SegModel.initialize(arch, seed=3)


@pytest.fixture
def net(small_model):
    return SegNetMS(small_model)


@pytest.fixture
def zero_net(arch):
    return SegNetMS(SegModel.initialize(arch, mode="zeros"))


@pytest.fixture
def image():
    """Random uint8 RGB image at the small model's resolution."""
    return np.random.default_rng(42).integers(0, 256, size=(SMALL_H, SMALL_W, 3)).astype(np.uint8)


@pytest.fixture
def linear_head():
    """Two classes on a 2-vector: score difference f(x) = 3 x0 + 4 x1."""
    w = np.array([[3.0, 4.0], [0.0, 0.0]])
    return LinearHead(w, np.zeros(2))


@pytest.fixture
def tiny_spec():
    return ToyDatasetSpec(train_count=4, val_count=3, height=SMALL_H, width=SMALL_W, seed=5)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_spec):
    """Generated dataset matching the small architecture."""
    return ToyDatasetMS(tiny_spec).generate(tmp_path / "data")


@pytest.fixture
def eval_model(small_model):
    """Small model biased toward road, so every toy scene scores a positive clean mIoU."""
    model = small_model.copy()
    model.params[-1][0] += 10.0
    return model


@pytest.fixture
def checkpoint(tmp_path, eval_model):
    return eval_model.save(tmp_path / "model.ckpt")


@pytest.fixture(scope="session")
def trained_toy(tmp_path_factory):
    """Full-size toy dataset plus a model trained on it (acceptance-scale runs only)."""
    root = tmp_path_factory.mktemp("toy")
    ToyDatasetMS(ToyDatasetSpec(train_count=96, val_count=64, seed=0)).generate(root / "data")
    splits = ToyDatasetMS.load_dataset(root / "data")
    from _SegNetMS.segnet import TrainConfig

    net = SegNetMS(SegModel.initialize(seed=7))
    result = net.train([(s.image, s.mask) for s in splits["train"]],
                       TrainConfig(epochs=10, batch_size=4, learning_rate=0.05, seed=7))
    ckpt = result.model.save(root / "model.ckpt")
    return {"root": root, "data": root / "data", "checkpoint": ckpt, "splits": splits,
            "net": net, "loss_trace": result.loss_trace}
