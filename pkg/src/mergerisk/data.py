"""Synthetic multi-task data generation and IDX image loading.

Each task is a Gaussian-cluster classification problem in [0, 1]^D. Tasks
share the input space but draw independent cluster centers, so a classifier
for one task carries no information about another's labels. The test split is
divided into two disjoint halves: an eval half (feeds merging/accuracy) and an
attack half (feeds adversarial example generation and ASR measurement).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file."""


@dataclass
class TaskDataset:
    task_id: int
    x_train: np.ndarray  # (n_train, D) in [0, 1]
    y_train: np.ndarray  # (n_train,) int labels in [0, c)
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    image_shape: tuple[int, int]
    eval_idx: np.ndarray = field(default=None)  # indices into the test split
    attack_idx: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.eval_idx is None:
            n = len(self.x_test)
            half = n // 2
            self.eval_idx = np.arange(half)
            self.attack_idx = np.arange(half, n)
        overlap = np.intersect1d(self.eval_idx, self.attack_idx)
        if overlap.size:
            raise ValueError(f"eval/attack halves overlap at indices {overlap[:5]}")
        union = np.union1d(self.eval_idx, self.attack_idx)
        if len(union) != len(self.x_test):
            raise ValueError("eval and attack halves must cover the test split")

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def x_eval(self) -> np.ndarray:
        return self.x_test[self.eval_idx]

    @property
    def y_eval(self) -> np.ndarray:
        return self.y_test[self.eval_idx]

    @property
    def x_attack(self) -> np.ndarray:
        return self.x_test[self.attack_idx]

    @property
    def y_attack(self) -> np.ndarray:
        return self.y_test[self.attack_idx]


def _square_image_shape(d: int) -> tuple[int, int]:
    side = int(round(d ** 0.5))
    if side * side != d:
        raise ValueError(f"input dim {d} is not a square; pass an explicit image shape")
    return (side, side)


def generate_tasks(
    seed: int,
    num_tasks: int,
    input_dim: int,
    classes_per_task: int,
    n_train: int = 512,
    n_test: int = 512,
    center_low: float = 0.38,
    center_high: float = 0.62,
    noise_sigma: float = 0.055,
) -> list[TaskDataset]:
    """Draw `num_tasks` mutually distinct Gaussian-cluster tasks.

    Cluster centers live well inside [0, 1]^D so the noise rarely clips;
    inputs are clipped to [0, 1] so l-inf attack budgets are meaningful.
    Deterministic in `seed`.
    """
    if num_tasks < 2:
        raise ValueError(f"need at least 2 tasks, got {num_tasks}")
    if classes_per_task < 2:
        raise ValueError(f"need at least 2 classes per task, got {classes_per_task}")
    if n_train < 1 or n_test < 2:
        raise ValueError("need n_train >= 1 and n_test >= 2")
    img_shape = _square_image_shape(input_dim)
    rng = np.random.default_rng(np.random.PCG64(seed))
    tasks = []
    for t in range(num_tasks):
        centers = rng.uniform(center_low, center_high, size=(classes_per_task, input_dim))

        def draw(n):
            labels = rng.integers(0, classes_per_task, size=n)
            x = centers[labels] + rng.normal(0.0, noise_sigma, size=(n, input_dim))
            return np.clip(x, 0.0, 1.0), labels

        x_tr, y_tr = draw(n_train)
        x_te, y_te = draw(n_test)
        half = n_test // 2
        tasks.append(TaskDataset(
            task_id=t, x_train=x_tr, y_train=y_tr, x_test=x_te, y_test=y_te,
            n_classes=classes_per_task, image_shape=img_shape,
            eval_idx=np.arange(half), attack_idx=np.arange(half, n_test)))
    return tasks


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at byte offset 0")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: truncated dimension table at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) != expected:
        raise IdxFormatError(
            f"{path}: payload has {len(payload)} bytes at byte offset {header_len}, "
            f"expected {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx_images(
    images_path: str,
    labels_path: str | None = None,
    task_id: int = 0,
    test_fraction: float = 0.5,
    n_classes: int | None = None,
) -> TaskDataset:
    """Load an IDX image file (and optional label file) into a TaskDataset.

    Pixels are scaled to [0, 1]; images stay single-channel and are flattened
    row-major. Without a label file all labels are zero (attack-only use).
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3-D image tensor, got {images.ndim}-D")
    n, h, w = images.shape
    x = images.reshape(n, h * w).astype(np.float64) / 255.0
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
        if labels.shape != (n,):
            raise IdxFormatError(
                f"{labels_path}: {labels.shape[0]} labels for {n} images")
        y = labels.astype(np.int64)
    else:
        y = np.zeros(n, dtype=np.int64)
    c = n_classes if n_classes is not None else max(int(y.max()) + 1, 2)
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels outside [0, {c})")
    n_test = max(int(round(n * test_fraction)), 2) if n >= 4 else n
    n_tr = n - n_test
    if n_tr == 0:  # tiny fixture files become test-only datasets
        x_tr, y_tr = x[:1], y[:1]
        x_te, y_te = x, y
    else:
        x_tr, y_tr, x_te, y_te = x[:n_tr], y[:n_tr], x[n_tr:], y[n_tr:]
    half = len(x_te) // 2
    return TaskDataset(task_id=task_id, x_train=x_tr, y_train=y_tr,
                       x_test=x_te, y_test=y_te, n_classes=c, image_shape=(h, w),
                       eval_idx=np.arange(half), attack_idx=np.arange(half, len(x_te)))
