"""Adversarial example generation under an l-inf budget.

Five gradient attacks (one-step sign, iterative, random-start projected,
momentum-lookahead, kernel-smoothed) plus a query-limited black-box square
search. All outputs satisfy the budget and the [0, 1] box elementwise; the
square attack is compiled against a loss-only scorer so no gradient machinery
can be touched.

Attack labels default to the surrogate's own clean predictions, matching the
prediction-change success metric. Targeted mode flips the loss sign and aims
at sampled labels distinct from the clean prediction.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import _softmax_np, _log_softmax_np
from .data import TaskDataset
from .nets import Network, ParameterVector

GRADIENT_METHODS = ("fgsm", "ifgsm", "pgd", "nifgsm", "tifgsm")
ALL_METHODS = GRADIENT_METHODS + ("square",)

BOX_TOL = 1e-9


@dataclass(frozen=True)
class AttackSpec:
    method: str
    epsilon: float = 16 / 255
    step_size: float = 1.6 / 255
    iterations: int = 10
    momentum_decay: float = 1.0     # nifgsm
    kernel_size: int = 15           # tifgsm
    kernel_sigma: float | None = None  # defaults to kernel_size / sqrt(3)
    pgd_random_init: bool = True
    square_budget: int = 500
    square_p: float = 0.8
    targeted: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.method not in ALL_METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0:  # zero allowed as the degenerate no-op budget
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.step_size <= 0:
            raise ValueError(f"step size must be > 0, got {self.step_size}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.momentum_decay < 0:
            raise ValueError(f"momentum decay must be >= 0, got {self.momentum_decay}")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")

    @property
    def sigma(self) -> float:
        return self.kernel_sigma if self.kernel_sigma is not None else self.kernel_size / np.sqrt(3.0)


@dataclass
class AdvBatch:
    x_clean: np.ndarray
    x_adv: np.ndarray
    labels: np.ndarray          # labels the attack optimized against
    surrogate_id: str
    spec: AttackSpec
    target_labels: np.ndarray | None = None  # targeted mode only
    queries: int = 0            # square attack bookkeeping

    def __post_init__(self):
        gap = np.abs(self.x_adv - self.x_clean).max() if self.x_adv.size else 0.0
        if gap > self.spec.epsilon + BOX_TOL:
            raise ValueError(f"budget violated: max |delta| = {gap} > {self.spec.epsilon}")
        if self.x_adv.size and (self.x_adv.min() < -BOX_TOL or self.x_adv.max() > 1 + BOX_TOL):
            raise ValueError("adversarial inputs left the [0, 1] box")


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized, symmetric 2-D Gaussian kernel."""
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _clip_ball(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Clamp to the l-inf ball around x intersected with [0, 1]."""
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _grad(net: Network, params: ParameterVector, x: np.ndarray, labels: np.ndarray,
          task: int, targeted: bool) -> np.ndarray:
    g = net.input_gradient(params, x, labels, task)
    return -g if targeted else g


def _smooth(grad: np.ndarray, kernel: np.ndarray, image_shape: tuple[int, int]) -> np.ndarray:
    from .autodiff import _corr2d_np
    imgs = grad.reshape(len(grad), *image_shape)
    return _corr2d_np(imgs, kernel).reshape(grad.shape)


def fgsm(net, params, x, labels, task, spec) -> np.ndarray:
    g = _grad(net, params, x, labels, task, spec.targeted)
    return np.clip(x + spec.epsilon * np.sign(g), 0.0, 1.0)


def ifgsm(net, params, x, labels, task, spec) -> np.ndarray:
    x_adv = x.copy()
    for _ in range(spec.iterations):
        g = _grad(net, params, x_adv, labels, task, spec.targeted)
        x_adv = _clip_ball(x_adv + spec.step_size * np.sign(g), x, spec.epsilon)
        assert np.abs(x_adv - x).max() <= spec.epsilon + BOX_TOL
    return x_adv


def pgd(net, params, x, labels, task, spec) -> np.ndarray:
    if spec.pgd_random_init:
        rng = np.random.default_rng(np.random.PCG64(spec.seed))
        x_adv = np.clip(x + rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape), 0.0, 1.0)
    else:
        x_adv = x.copy()
    for _ in range(spec.iterations):
        g = _grad(net, params, x_adv, labels, task, spec.targeted)
        x_adv = _clip_ball(x_adv + spec.step_size * np.sign(g), x, spec.epsilon)
    return x_adv


def nifgsm(net, params, x, labels, task, spec) -> np.ndarray:
    x_adv = x.copy()
    g_acc = np.zeros_like(x)
    mu = spec.momentum_decay
    for _ in range(spec.iterations):
        lookahead = x_adv + spec.step_size * mu * g_acc
        g = _grad(net, params, lookahead, labels, task, spec.targeted)
        norms = np.abs(g).sum(axis=1, keepdims=True)
        normed = np.divide(g, norms, out=np.zeros_like(g), where=norms > 0)
        g_acc = mu * g_acc + normed
        x_adv = _clip_ball(x_adv + spec.step_size * np.sign(g_acc), x, spec.epsilon)
    return x_adv


def tifgsm(net, params, x, labels, task, spec, image_shape) -> np.ndarray:
    kernel = gaussian_kernel(spec.kernel_size, spec.sigma)
    x_adv = x.copy()
    for _ in range(spec.iterations):
        g = _grad(net, params, x_adv, labels, task, spec.targeted)
        g = _smooth(g, kernel, image_shape)
        x_adv = _clip_ball(x_adv + spec.step_size * np.sign(g), x, spec.epsilon)
    return x_adv


def make_loss_scorer(net: Network, params: ParameterVector, task: int,
                     labels: np.ndarray, targeted: bool):
    """Loss-only interface for black-box attacks: batch -> per-sample loss.

    Pure numpy; exposes no gradients. Counts queries on the function object.
    """
    onehot_rows = np.zeros((len(labels), net.spec.classes_per_task))
    onehot_rows[np.arange(len(labels)), labels] = 1.0
    sign = -1.0 if targeted else 1.0

    def scorer(xb: np.ndarray) -> np.ndarray:
        scorer.queries += 1
        logits = net.logits_np(params, xb, task)
        nll = -(_log_softmax_np(logits) * onehot_rows).sum(axis=1)
        return sign * nll

    scorer.queries = 0
    return scorer


def _square_side(base_side: int, it: int, budget: int) -> int:
    frac = it / budget
    side = base_side
    for threshold in (0.1, 0.5, 0.8):
        if frac >= threshold:
            side //= 2
    return max(side, 1)


def square_attack(scorer, x: np.ndarray, spec: AttackSpec,
                  image_shape: tuple[int, int]) -> tuple[np.ndarray, int]:
    """Random square search under the l-inf budget; accepts only loss increases.

    One scorer call per candidate batch; the initial scoring costs one query,
    so the loop runs budget - 1 proposals.
    """
    h, w = image_shape
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    x_adv = x.copy()
    best = scorer(x_adv)
    base_side = max(1, int(round(h * np.sqrt(spec.square_p))))
    n = len(x)
    clean = x.reshape(n, h, w)
    batch_idx = np.arange(n)[:, None, None]
    for it in range(spec.square_budget - 1):
        side = min(_square_side(base_side, it, spec.square_budget), h, w)
        top = rng.integers(0, h - side + 1, size=n)
        left = rng.integers(0, w - side + 1, size=n)
        signs = rng.choice([-1.0, 1.0], size=n)
        rows = top[:, None, None] + np.arange(side)[None, :, None]
        cols = left[:, None, None] + np.arange(side)[None, None, :]
        cand = x_adv.reshape(n, h, w).copy()
        cand[batch_idx, rows, cols] = clean[batch_idx, rows, cols] \
            + signs[:, None, None] * spec.epsilon
        cand = _clip_ball(cand.reshape(n, -1), x, spec.epsilon)
        loss = scorer(cand)
        better = loss > best
        x_adv[better] = cand[better]
        best = np.where(better, loss, best)
    return x_adv, scorer.queries


def sample_target_labels(clean_pred: np.ndarray, num_classes: int, seed: int) -> np.ndarray:
    """Uniform random labels, resampled until they differ from the clean prediction."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    targets = rng.integers(0, num_classes, size=len(clean_pred))
    while np.any(targets == clean_pred):
        clash = targets == clean_pred
        targets[clash] = rng.integers(0, num_classes, size=int(clash.sum()))
    return targets


def generate(net: Network, params: ParameterVector, task: TaskDataset,
             x: np.ndarray, spec: AttackSpec, surrogate_id: str = "",
             labels: np.ndarray | None = None) -> AdvBatch:
    """Run one attack from a surrogate; labels default to clean predictions."""
    clean_pred = net.predict_np(params, x, task.task_id)
    target_labels = None
    if spec.targeted:
        target_labels = sample_target_labels(clean_pred, net.spec.classes_per_task, spec.seed)
        attack_labels = target_labels
    else:
        attack_labels = labels if labels is not None else clean_pred

    if spec.method == "fgsm":
        x_adv = fgsm(net, params, x, attack_labels, task.task_id, spec)
    elif spec.method == "ifgsm":
        x_adv = ifgsm(net, params, x, attack_labels, task.task_id, spec)
    elif spec.method == "pgd":
        x_adv = pgd(net, params, x, attack_labels, task.task_id, spec)
    elif spec.method == "nifgsm":
        x_adv = nifgsm(net, params, x, attack_labels, task.task_id, spec)
    elif spec.method == "tifgsm":
        x_adv = tifgsm(net, params, x, attack_labels, task.task_id, spec, task.image_shape)
    else:  # square
        scorer = make_loss_scorer(net, params, task.task_id, attack_labels, spec.targeted)
        x_adv, queries = square_attack(scorer, x, spec, task.image_shape)
        return AdvBatch(x_clean=x.copy(), x_adv=x_adv, labels=attack_labels,
                        surrogate_id=surrogate_id, spec=spec,
                        target_labels=target_labels, queries=queries)
    return AdvBatch(x_clean=x.copy(), x_adv=x_adv, labels=attack_labels,
                    surrogate_id=surrogate_id, spec=spec, target_labels=target_labels)


# -- persistence ---------------------------------------------------------------

def cache_key(spec: AttackSpec, surrogate_hash: str, split_hash: str) -> str:
    blob = json.dumps([asdict(spec), surrogate_hash, split_hash], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_advbatch(path: str | Path, batch: AdvBatch, key: str = "") -> None:
    header = {
        "spec": asdict(batch.spec),
        "surrogate_id": batch.surrogate_id,
        "cache_key": key,
        "shape": list(batch.x_clean.shape),
        "queries": batch.queries,
        "has_targets": batch.target_labels is not None,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(batch.x_clean.astype("<f8").tobytes())
        fh.write(batch.x_adv.astype("<f8").tobytes())
        fh.write(batch.labels.astype("<f8").tobytes())
        if batch.target_labels is not None:
            fh.write(batch.target_labels.astype("<f8").tobytes())


def load_advbatch(path: str | Path) -> tuple[AdvBatch, str]:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<I", raw, 0)
    header = json.loads(raw[4:4 + hlen])
    shape = tuple(header["shape"])
    n = int(np.prod(shape))
    pos = 4 + hlen
    x_clean = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
    pos += n * 8
    x_adv = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
    pos += n * 8
    labels = np.frombuffer(raw, dtype="<f8", count=shape[0], offset=pos).astype(np.int64)
    pos += shape[0] * 8
    targets = None
    if header["has_targets"]:
        targets = np.frombuffer(raw, dtype="<f8", count=shape[0], offset=pos).astype(np.int64)
    spec = AttackSpec(**header["spec"])
    batch = AdvBatch(x_clean=x_clean, x_adv=x_adv, labels=labels,
                     surrogate_id=header["surrogate_id"], spec=spec,
                     target_labels=targets, queries=header["queries"])
    return batch, header["cache_key"]
