"""Pretraining, per-task fine-tuning and accuracy evaluation.

Pretraining fits the backbone plus one generic cluster head on the mixture of
all tasks' training inputs, labeled by global cluster id (task offset times
classes plus local label). The generic head is then discarded except that each
task head is seeded from its slice of the generic head, which gives the
pretrained checkpoint weak but meaningful per-task accuracy. Fine-tuning runs
SGD with momentum 0.9 on one task, leaving the other heads untouched.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .data import TaskDataset
from .nets import Network, ParameterVector

MOMENTUM = 0.9


class TrainingError(RuntimeError):
    """Loss became non-finite during training."""


def _sgd_epochs(net: Network, params: dict[str, np.ndarray], trainable: list[str],
                x: np.ndarray, y: np.ndarray, task: int, epochs: int, lr: float,
                seed: int, batch_size: int, num_classes: int,
                logits_fn=None) -> None:
    """In-place minibatch SGD with momentum over the named arrays."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    velocity = {k: np.zeros_like(params[k]) for k in trainable}
    n = len(x)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            try:
                tensors = {k: ad.Tensor(v, requires_grad=(k in velocity))
                           for k, v in params.items()}
                xb = ad.Tensor(x[idx])
                onehot = ad.onehot(y[idx], num_classes)
                if logits_fn is None:
                    loss = net.loss_ad(tensors, xb, onehot, task)
                else:
                    loss = ad.cross_entropy(logits_fn(tensors, xb), ad.Tensor(onehot))
            except ad.NonFiniteError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            for k in trainable:
                g = tensors[k].grad
                if g is None:
                    continue
                velocity[k] = MOMENTUM * velocity[k] - lr * g
                params[k] += velocity[k]


def pretrain(net: Network, tasks: list[TaskDataset], epochs: int = 4,
             lr: float = 0.05, seed: int = 0, batch_size: int = 32,
             head_scale: float = 1.0, label_noise: float = 0.3,
             subsample: float = 0.5) -> ParameterVector:
    """Train the shared backbone on the task mixture; seed heads from it.

    The mixture is subsampled and label-noised so the pretrained checkpoint
    lands well above chance but clearly below fine-tuned accuracy, leaving
    fine-tuning real work to do (the usual pretrain/downstream gap).
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if not 0 <= label_noise < 1 or not 0 < subsample <= 1:
        raise ValueError("label_noise must be in [0, 1) and subsample in (0, 1]")
    spec = net.spec
    theta = net.init_params(seed)
    params = {k: v.copy() for k, v in theta.unflatten().items()}

    # generic cluster head over all tasks' clusters
    total_clusters = spec.num_tasks * spec.classes_per_task
    rng = np.random.default_rng(np.random.PCG64(seed + 1))
    params["generic.w"] = rng.normal(0.0, np.sqrt(2.0 / spec.feature_dim),
                                     size=(spec.feature_dim, total_clusters))
    params["generic.b"] = np.zeros(total_clusters)

    x_mix = np.concatenate([t.x_train for t in tasks])
    y_mix = np.concatenate([t.task_id * spec.classes_per_task + t.y_train for t in tasks])
    if subsample < 1.0:
        keep = rng.permutation(len(x_mix))[:max(1, int(round(subsample * len(x_mix))))]
        x_mix, y_mix = x_mix[keep], y_mix[keep]
    if label_noise > 0.0:
        flip = rng.random(len(y_mix)) < label_noise
        y_mix = y_mix.copy()
        y_mix[flip] = rng.integers(0, total_clusters, size=int(flip.sum()))

    def generic_logits(tensors, xb):
        feats = net.features_ad(tensors, xb)
        return ad.matmul(feats, tensors["generic.w"]) + tensors["generic.b"]

    trainable = [k for k in params if k.startswith(("backbone", "conv", "generic"))]
    _sgd_epochs(net, params, trainable, x_mix, y_mix, task=0, epochs=epochs, lr=lr,
                seed=seed + 2, batch_size=batch_size, num_classes=total_clusters,
                logits_fn=generic_logits)

    # seed each task head from its slice of the generic head, then drop it
    c = spec.classes_per_task
    for t in range(spec.num_tasks):
        sl = slice(t * c, (t + 1) * c)
        params[f"head.{t}.w"] = head_scale * params["generic.w"][:, sl].copy()
        params[f"head.{t}.b"] = head_scale * params["generic.b"][sl].copy()
    del params["generic.w"], params["generic.b"]
    return ParameterVector.flatten(params, net.layout)


def finetune(net: Network, theta0: ParameterVector, task: TaskDataset,
             epochs: int = 20, lr: float = 0.02, seed: int = 0,
             batch_size: int = 32) -> ParameterVector:
    """Fine-tune backbone plus the task's own head starting from theta0."""
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if theta0.layout != net.layout:
        raise ValueError("theta0 layout does not match the network spec")
    params = {k: v.copy() for k, v in theta0.unflatten().items()}
    trainable = [k for k in params
                 if k.startswith(("backbone", "conv")) or k.startswith(f"head.{task.task_id}.")]
    _sgd_epochs(net, params, trainable, task.x_train, task.y_train, task.task_id,
                epochs, lr, seed, batch_size, net.spec.classes_per_task)
    return ParameterVector.flatten(params, net.layout)


def evaluate_accuracy(net: Network, theta: ParameterVector, task_id: int,
                      x: np.ndarray, y: np.ndarray) -> float:
    """Top-1 accuracy of head `task_id` on (x, y)."""
    pred = net.predict_np(theta, x, task_id)
    return float(np.mean(pred == np.asarray(y)))
