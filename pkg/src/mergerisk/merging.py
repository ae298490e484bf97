"""Merging methods: weight averaging, task arithmetic, trim-elect-sign-merge,
adaptive coefficient learning, and post-hoc low-rank feature-repair adapters.

All pre-hoc methods are pure functions over layout-compatible flat parameter
vectors. The adaptive method learns scaling coefficients by minimizing mean
prediction entropy on unlabeled eval-half inputs; the feature-repair adapters
(one rank-r pair per task) are trained to cancel the per-task feature gap
between the merged model and the individual fine-tuned model.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nets import LayoutError, Network, ParameterVector, layer_groups

BASE_METHODS = ("wa", "ta", "tm", "am")


@dataclass
class AmConfig:
    learning_rate: float = 0.001
    iterations: int = 300
    initial_lambda: float = 0.3
    mode: str = "taskwise"  # or "layerwise"
    clamp: float = 1.0      # coefficients stay in [0, clamp]


@dataclass
class RsConfig:
    rank: int = 8
    iterations: int = 500
    batch_size: int = 16
    learning_rate: float = 0.01
    seed: int = 0


@dataclass
class MergeSpec:
    method: str  # one of BASE_METHODS
    scale: float = 0.3          # lambda for ta/tm
    trim_fraction: float = 0.2  # tm: fraction of coordinates kept per task vector
    am: AmConfig = field(default_factory=AmConfig)
    rs: RsConfig | None = None

    def __post_init__(self):
        if self.method not in BASE_METHODS:
            raise ValueError(f"unknown merge method {self.method!r}")
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if not 0 < self.trim_fraction <= 1:
            raise ValueError(f"trim_fraction must be in (0, 1], got {self.trim_fraction}")

    @property
    def tag(self) -> str:
        return self.method + ("_rs" if self.rs is not None else "")


@dataclass
class Adapter:
    """Rank-r feature-repair pair: phi(z) = (z @ V) @ U, V: k x r, U: r x k."""
    v: np.ndarray
    u: np.ndarray

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return (z @ self.v) @ self.u


@dataclass
class MergedModel:
    params: ParameterVector
    method: str  # tag, e.g. "ta" or "ta_rs"
    adapters: dict[int, Adapter] | None = None
    learned_scales: dict | None = None

    @property
    def has_adapters(self) -> bool:
        return self.adapters is not None


def _check_models(models: list[ParameterVector]):
    if len(models) < 2:
        raise ValueError(f"need at least 2 models to merge, got {len(models)}")
    for m in models[1:]:
        models[0].check_compatible(m)


def weight_average(models: list[ParameterVector]) -> ParameterVector:
    """Coordinate-wise mean of layout-compatible parameter vectors."""
    _check_models(models)
    stacked = np.stack([m.data for m in models])
    return ParameterVector(stacked.mean(axis=0), models[0].layout)


def task_vectors(theta0: ParameterVector, models: list[ParameterVector]) -> np.ndarray:
    for m in models:
        theta0.check_compatible(m)
    return np.stack([m.data - theta0.data for m in models])


def task_arithmetic(theta0: ParameterVector, models: list[ParameterVector],
                    scale: float) -> ParameterVector:
    """theta0 + scale * sum of task vectors."""
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    _check_models(models)
    tau = task_vectors(theta0, models)
    return ParameterVector(theta0.data + scale * tau.sum(axis=0), theta0.layout)


def _trim(tau: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero all but the top `keep_fraction` coordinates by |value|."""
    n = tau.shape[-1]
    keep = max(1, int(round(keep_fraction * n)))
    if keep >= n:
        return tau.copy()
    out = np.zeros_like(tau)
    for i in range(tau.shape[0]):
        idx = np.argpartition(np.abs(tau[i]), n - keep)[n - keep:]
        out[i, idx] = tau[i, idx]
    return out


def ties_merge(theta0: ParameterVector, models: list[ParameterVector],
               scale: float, trim_fraction: float = 0.2) -> ParameterVector:
    """Trim, elect sign by summed kept values, merge sign-agreeing means.

    A coordinate whose kept values sum to exactly zero contributes nothing.
    """
    if not 0 < trim_fraction <= 1:
        raise ValueError(f"trim_fraction must be in (0, 1], got {trim_fraction}")
    for m in models:
        theta0.check_compatible(m)
    tau = task_vectors(theta0, models)
    kept = _trim(tau, trim_fraction)
    elected = np.sign(kept.sum(axis=0))
    agree = (np.sign(kept) == elected) & (kept != 0.0) & (elected != 0.0)
    counts = agree.sum(axis=0)
    sums = np.where(agree, kept, 0.0).sum(axis=0)
    merged = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return ParameterVector(theta0.data + scale * merged, theta0.layout)


class AmDivergenceError(RuntimeError):
    """Entropy objective became non-finite during coefficient learning."""


def _entropy_objective(net: Network, flat_params: np.ndarray,
                       inputs_per_task: list[np.ndarray]) -> tuple[float, np.ndarray]:
    """Mean prediction entropy over tasks; returns (value, d/d flat params)."""
    theta = ParameterVector(flat_params, net.layout)
    total = 0.0
    grad = np.zeros_like(flat_params)
    for t, x in enumerate(inputs_per_task):
        tensors = net.param_tensors(theta, requires_grad=True)
        probs = ad.softmax(net.logits_ad(tensors, ad.Tensor(x), t))
        ent = -(probs * probs.log()).sum() * (1.0 / len(x))
        ent.backward()
        total += ent.item()
        pieces = []
        arrays = theta.unflatten()
        for name, _ in net.layout:
            g = tensors[name].grad
            pieces.append((g if g is not None else np.zeros_like(arrays[name])).reshape(-1))
        grad += np.concatenate(pieces)
    n = len(inputs_per_task)
    return total / n, grad / n


def ada_merge(net: Network, theta0: ParameterVector, models: list[ParameterVector],
              inputs_per_task: list[np.ndarray], config: AmConfig,
              ) -> tuple[ParameterVector, np.ndarray, list[float]]:
    """Learn per-task (or per-task-per-layer) scaling coefficients.

    Full-batch Adam on the coefficients through the merged parameters
    (d theta / d lambda_t is the task vector). Returns the merged vector, the
    learned coefficients and the recorded objective curve.
    """
    _check_models(models)
    theta0.check_compatible(models[0])
    if len(inputs_per_task) != len(models):
        raise ValueError("need one unlabeled input batch per task")
    tau = task_vectors(theta0, models)
    T = len(models)
    if config.mode == "taskwise":
        lam = np.full(T, config.initial_lambda)
        masks = None
    elif config.mode == "layerwise":
        groups = layer_groups(net.layout)
        masks = np.zeros((len(groups), len(theta0)))
        offsets = {}
        off = 0
        for name, shape in net.layout:
            offsets[name] = (off, off + int(np.prod(shape)))
            off += int(np.prod(shape))
        for gi, names in enumerate(groups):
            for name in names:
                a, b = offsets[name]
                masks[gi, a:b] = 1.0
        lam = np.full((T, len(groups)), config.initial_lambda)
    else:
        raise ValueError(f"unknown mode {config.mode!r}")

    def assemble(lam):
        if masks is None:
            return theta0.data + np.tensordot(lam, tau, axes=1)
        scale = lam @ masks  # (T, n)
        return theta0.data + (scale * tau).sum(axis=0)

    m_adam = np.zeros_like(lam)
    v_adam = np.zeros_like(lam)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    curve: list[float] = []
    for it in range(config.iterations):
        flat = assemble(lam)
        value, dtheta = _entropy_objective(net, flat, inputs_per_task)
        if not np.isfinite(value):
            raise AmDivergenceError(f"non-finite entropy at iteration {it}")
        curve.append(value)
        if masks is None:
            g = tau @ dtheta
        else:
            g = (tau[:, None, :] * masks[None, :, :] * dtheta[None, None, :]).sum(axis=2)
        m_adam = beta1 * m_adam + (1 - beta1) * g
        v_adam = beta2 * v_adam + (1 - beta2) * g * g
        mh = m_adam / (1 - beta1 ** (it + 1))
        vh = v_adam / (1 - beta2 ** (it + 1))
        lam = np.clip(lam - config.learning_rate * mh / (np.sqrt(vh) + eps),
                      0.0, config.clamp)
    merged = ParameterVector(assemble(lam), theta0.layout)
    return merged, lam, curve


def merge(net: Network, theta0: ParameterVector, models: list[ParameterVector],
          spec: MergeSpec, eval_inputs_per_task: list[np.ndarray] | None = None,
          ) -> MergedModel:
    """Dispatch a base merge; adapters are attached separately by train_surgery."""
    if spec.method == "wa":
        params = weight_average(models)
        extra = None
    elif spec.method == "ta":
        params = task_arithmetic(theta0, models, spec.scale)
        extra = None
    elif spec.method == "tm":
        params = ties_merge(theta0, models, spec.scale, spec.trim_fraction)
        extra = None
    else:  # am
        if eval_inputs_per_task is None:
            raise ValueError("adaptive merging needs unlabeled eval inputs")
        params, lam, _curve = ada_merge(net, theta0, models, eval_inputs_per_task, spec.am)
        extra = {"lambda": lam}
    return MergedModel(params=params, method=spec.method, learned_scales=extra)


def train_surgery(net: Network, merged: MergedModel,
                  individual: list[ParameterVector],
                  eval_inputs_per_task: list[np.ndarray],
                  config: RsConfig) -> MergedModel:
    """Fit one rank-r adapter per task minimizing mean |repaired - individual| l1.

    Backbone features for both models are precomputed; only the adapters train.
    The up-projection starts at zero so the adapter is initially a no-op.
    """
    if merged.has_adapters:
        raise ValueError("merged model already has adapters")
    k = net.spec.feature_dim
    if config.rank > k:
        raise ValueError(f"adapter rank {config.rank} exceeds feature dim {k}")
    if len(individual) != len(eval_inputs_per_task):
        raise ValueError("need one input batch per fine-tuned model")
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    adapters: dict[int, Adapter] = {}
    for t, (theta_t, x) in enumerate(zip(individual, eval_inputs_per_task)):
        z_mtl = net.features_np(merged.params, x)
        z_ind = net.features_np(theta_t, x)
        v = rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, config.rank))
        u = np.zeros((config.rank, k))
        m_v, v_v = np.zeros_like(v), np.zeros_like(v)
        m_u, v_u = np.zeros_like(u), np.zeros_like(u)
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        n = len(x)
        for it in range(config.iterations):
            idx = rng.integers(0, n, size=min(config.batch_size, n))
            zb, zi = z_mtl[idx], z_ind[idx]
            resid = zb - (zb @ v) @ u - zi
            sign = np.sign(resid) / len(idx)
            gu = (zb @ v).T @ sign
            gv = zb.T @ (sign @ u.T)
            gu, gv = -gu, -gv  # phi enters with a minus sign
            for arr, g, mav, vav in ((u, gu, m_u, v_u), (v, gv, m_v, v_v)):
                mav *= beta1
                mav += (1 - beta1) * g
                vav *= beta2
                vav += (1 - beta2) * g * g
                mh = mav / (1 - beta1 ** (it + 1))
                vh = vav / (1 - beta2 ** (it + 1))
                arr -= config.learning_rate * mh / (np.sqrt(vh) + eps)
        adapters[t] = Adapter(v=v, u=u)
    return MergedModel(params=merged.params, method=merged.method + "_rs",
                       adapters=adapters, learned_scales=merged.learned_scales)


def forward_merged(net: Network, model: MergedModel, x: np.ndarray,
                   task: int) -> np.ndarray:
    """Class distribution of the merged model on x for one task head."""
    if not 0 <= task < net.spec.num_tasks:
        raise LayoutError(f"no head for task {task}")
    from .autodiff import _softmax_np
    feats = net.features_np(model.params, x)
    if model.adapters is not None:
        feats = feats - model.adapters[task](feats)
    p = model.params.unflatten()
    logits = feats @ p[f"head.{task}.w"] + p[f"head.{task}.b"]
    return _softmax_np(logits)


def surgery_l1(net: Network, model: MergedModel, theta_t: ParameterVector,
               x: np.ndarray, task: int) -> float:
    """Mean l1 gap between (possibly repaired) merged features and individual ones."""
    feats = net.features_np(model.params, x)
    if model.adapters is not None:
        feats = feats - model.adapters[task](feats)
    z_ind = net.features_np(theta_t, x)
    return float(np.abs(feats - z_ind).sum(axis=1).mean())
