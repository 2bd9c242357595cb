"""Synthetic Gaussian-cluster classification tasks and training on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericalError, ValidationError
from ..parameter_store import Checkpoint, ParameterVector, check_layouts
from . import mlp
from .mlp import MlpSpec

TRAIN_PER_CLASS = 256
VAL_PER_CLASS = 64
TEST_PER_CLASS = 64
MAX_RETRIES = 100


@dataclass(frozen=True, eq=False)
class TaskBundle:
    task_id: str
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_count: int
    generator_seed: int
    head: int = 0

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in ("train", "val", "test"):
            raise ValidationError(f"unknown split {name!r}")
        return getattr(self, f"{name}_x"), getattr(self, f"{name}_y")

    @property
    def dims(self) -> int:
        return self.train_x.shape[1]

    def to_checkpoint(self) -> Checkpoint:
        tensors = {}
        for split in ("train", "val", "test"):
            x, y = self.split(split)
            tensors[f"{split}_x"] = x
            tensors[f"{split}_y"] = y.astype(np.float64)
        meta = {
            "kind": "task",
            "task_id": self.task_id,
            "class_count": str(self.class_count),
            "generator_seed": str(self.generator_seed),
            "head": str(self.head),
        }
        return Checkpoint(tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TaskBundle":
        if ckpt.metadata.get("kind") != "task":
            raise ValidationError("checkpoint does not hold a task bundle")
        t = ckpt.tensors
        return cls(
            ckpt.metadata["task_id"],
            t["train_x"], t["train_y"].astype(np.int64),
            t["val_x"], t["val_y"].astype(np.int64),
            t["test_x"], t["test_y"].astype(np.int64),
            int(ckpt.metadata["class_count"]),
            int(ckpt.metadata["generator_seed"]),
            int(ckpt.metadata.get("head", 0)),
        )


def make_task(
    seed: int,
    class_count: int = 4,
    dims: int = 16,
    separation: float = 3.0,
    sigma: float = 1.0,
    task_id: str | None = None,
    head: int = 0,
) -> TaskBundle:
    """Isotropic Gaussian clusters whose centres are at least ``separation * sigma`` apart."""
    if separation <= 0 or sigma <= 0:
        raise ValidationError("separation and sigma must be positive")
    if class_count < 1 or dims < 1:
        raise ValidationError("class_count and dims must be positive")
    rng = np.random.default_rng(seed)
    min_dist = separation * sigma
    # typical pairwise distance of N(0, s^2 I) centres is s * sqrt(2 * dims)
    spread = 1.5 * min_dist / np.sqrt(2.0 * dims)
    for _ in range(MAX_RETRIES):
        centers = rng.normal(0.0, spread, (class_count, dims))
        diffs = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if class_count == 1 or dist.min() >= min_dist:
            break
    else:
        raise ValidationError(
            f"could not place {class_count} centres {min_dist} apart in {dims} dims after {MAX_RETRIES} tries"
        )

    def draw(per_class):
        y = np.repeat(np.arange(class_count), per_class)
        x = centers[y] + rng.normal(0.0, sigma, (y.size, dims))
        order = rng.permutation(y.size)
        return x[order], y[order]

    train = draw(TRAIN_PER_CLASS)
    val = draw(VAL_PER_CLASS)
    test = draw(TEST_PER_CLASS)
    return TaskBundle(task_id or f"task{seed}", *train, *val, *test, class_count, seed, head)


def nearest_centroid_accuracy(task: TaskBundle) -> float:
    """Accuracy on the test split of a classifier using train-split class means."""
    means = np.vstack([task.train_x[task.train_y == c].mean(axis=0) for c in range(task.class_count)])
    d = ((task.test_x[:, None, :] - means[None]) ** 2).sum(-1)
    return float((d.argmin(axis=1) == task.test_y).mean())


def adam_epochs(
    theta: np.ndarray,
    loss_grad,
    n: int,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """Minibatch Adam; ``loss_grad(theta, idx)`` returns loss and gradient on rows ``idx``."""
    theta = np.array(theta, dtype=np.float64, copy=True)
    if lr == 0 or epochs == 0:
        return theta
    rng = np.random.default_rng(seed)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, g = loss_grad(theta, idx)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise NumericalError("training diverged (non-finite loss or gradient)")
            t += 1
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            theta -= lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
    return theta


def train_task(
    base: ParameterVector,
    spec: MlpSpec,
    task: TaskBundle,
    epochs: int = 10,
    lr: float = 3e-3,
    seed: int = 0,
    batch_size: int = 64,
) -> ParameterVector:
    """Fine-tune ``base`` on the task's training split through its own head."""
    check_layouts(base.layout, spec.layout(), "base and MLP layouts")
    x, y = task.train_x, task.train_y

    def loss_grad(theta, idx):
        return mlp.loss_and_grad(spec, theta, x[idx], y[idx], task.head)

    theta = adam_epochs(base.values, loss_grad, len(y), epochs, lr, seed, batch_size)
    return base.with_values(theta)


def evaluate(theta, spec: MlpSpec, task: TaskBundle, split: str = "test") -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy of ``task``'s head on one split."""
    values = theta.values if isinstance(theta, ParameterVector) else theta
    x, y = task.split(split)
    logits = mlp.forward(spec, values, x, task.head)
    return float(mlp.loss_from_logits(logits, y)), float(mlp.accuracy_from_logits(logits, y))
