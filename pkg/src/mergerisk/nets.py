"""Shared-backbone classifier family over flat parameter vectors.

A checkpoint is a single flat float64 vector plus a layout (ordered
(name, shape) pairs). Every checkpoint carries the backbone and all T task
heads, so fine-tuned models stay merge-compatible by construction. Two
architectures: an MLP backbone and a small one-conv variant used for the
cross-architecture surrogate study.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class LayoutError(ValueError):
    """Parameter vectors have mismatching layouts."""


@dataclass(frozen=True)
class ModelSpec:
    arch: str  # "mlp" | "smallconv"
    input_dim: int
    image_shape: tuple[int, int]
    num_tasks: int
    classes_per_task: int
    hidden: tuple[int, ...] = (128, 64)
    conv_channels: int = 4

    def __post_init__(self):
        if self.arch not in ("mlp", "smallconv"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.image_shape[0] * self.image_shape[1] != self.input_dim:
            raise ValueError(
                f"image shape {self.image_shape} does not cover input dim {self.input_dim}")

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]


@dataclass
class ParameterVector:
    data: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if self.data.shape != (expected,):
            raise LayoutError(
                f"flat vector has {self.data.shape} entries, layout needs {expected}")

    def __len__(self) -> int:
        return len(self.data)

    def compatible(self, other: "ParameterVector") -> bool:
        return self.layout == other.layout

    def check_compatible(self, other: "ParameterVector") -> None:
        if self.layout == other.layout:
            return
        for (na, sa), (nb, sb) in zip(self.layout, other.layout):
            if na != nb or sa != sb:
                raise LayoutError(f"layout mismatch at {na!r} {sa} vs {nb!r} {sb}")
        raise LayoutError("layouts differ in length")

    def unflatten(self) -> dict[str, np.ndarray]:
        """Views into the flat vector, keyed by entry name."""
        out = {}
        off = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.data[off:off + n].reshape(shape)
            off += n
        return out

    def get(self, name: str) -> np.ndarray:
        arrs = self.unflatten()
        if name not in arrs:
            raise LayoutError(f"no layout entry named {name!r}")
        return arrs[name]

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.data.copy(), self.layout)

    @staticmethod
    def flatten(arrays: dict[str, np.ndarray], layout: Layout) -> "ParameterVector":
        parts = []
        for name, shape in layout:
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise LayoutError(f"{name}: array shape {arr.shape} != layout shape {shape}")
            parts.append(arr.reshape(-1))
        return ParameterVector(np.concatenate(parts), layout)


def layer_groups(layout: Layout) -> list[list[str]]:
    """Group layout entries into layers (w/b pairs share a prefix)."""
    groups: dict[str, list[str]] = {}
    for name, _ in layout:
        prefix = name.rsplit(".", 1)[0]
        groups.setdefault(prefix, []).append(name)
    return list(groups.values())


class Network:
    """Forward/loss/gradient machinery for one ModelSpec."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self._layout = self._build_layout()

    def _build_layout(self) -> Layout:
        s = self.spec
        entries: list[tuple[str, tuple[int, ...]]] = []
        if s.arch == "mlp":
            dims = (s.input_dim,) + s.hidden
            for i in range(len(s.hidden)):
                entries.append((f"backbone.{i}.w", (dims[i], dims[i + 1])))
                entries.append((f"backbone.{i}.b", (dims[i + 1],)))
        else:  # smallconv
            c = s.conv_channels
            entries.append(("conv.0.w", (c, 1, 3, 3)))
            entries.append(("conv.0.b", (c,)))
            flat = c * s.input_dim
            entries.append(("backbone.0.w", (flat, s.feature_dim)))
            entries.append(("backbone.0.b", (s.feature_dim,)))
        for t in range(s.num_tasks):
            entries.append((f"head.{t}.w", (s.feature_dim, s.classes_per_task)))
            entries.append((f"head.{t}.b", (s.classes_per_task,)))
        return tuple(entries)

    @property
    def layout(self) -> Layout:
        return self._layout

    def init_params(self, seed: int) -> ParameterVector:
        rng = np.random.default_rng(np.random.PCG64(seed))
        arrays = {}
        for name, shape in self._layout:
            if name.endswith(".b"):
                arrays[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
                if name.startswith("conv"):
                    fan_in = int(np.prod(shape[1:]))
                arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return ParameterVector.flatten(arrays, self._layout)

    def _check_task(self, task: int):
        if not 0 <= task < self.spec.num_tasks:
            raise LayoutError(f"no head for task {task}; model has {self.spec.num_tasks}")

    # -- plain numpy inference path ------------------------------------------
    def features_np(self, params: ParameterVector, x: np.ndarray) -> np.ndarray:
        p = params.unflatten()
        s = self.spec
        h = np.asarray(x, dtype=np.float64)
        if s.arch == "smallconv":
            from .autodiff import _conv2d_forward_np  # same arithmetic as the AD path
            img = h.reshape(len(h), 1, *s.image_shape)
            conv = _conv2d_forward_np(img, p["conv.0.w"])
            c = s.conv_channels
            flat = conv.reshape(len(h), c * s.input_dim)
            bias = np.repeat(p["conv.0.b"], s.input_dim)[None, :]
            h = np.maximum(flat + bias, 0.0)
            h = np.maximum(h @ p["backbone.0.w"] + p["backbone.0.b"], 0.0)
            return h
        for i in range(len(s.hidden)):
            h = np.maximum(h @ p[f"backbone.{i}.w"] + p[f"backbone.{i}.b"], 0.0)
        return h

    def logits_np(self, params: ParameterVector, x: np.ndarray, task: int) -> np.ndarray:
        self._check_task(task)
        p = params.unflatten()
        feats = self.features_np(params, x)
        return feats @ p[f"head.{task}.w"] + p[f"head.{task}.b"]

    def proba_np(self, params: ParameterVector, x: np.ndarray, task: int) -> np.ndarray:
        from .autodiff import _softmax_np
        return _softmax_np(self.logits_np(params, x, task))

    def predict_np(self, params: ParameterVector, x: np.ndarray, task: int) -> np.ndarray:
        return np.argmax(self.logits_np(params, x, task), axis=1)

    # -- autodiff path ---------------------------------------------------------
    def param_tensors(self, params: ParameterVector, requires_grad: bool = True
                      ) -> dict[str, ad.Tensor]:
        return {name: ad.Tensor(arr, requires_grad=requires_grad)
                for name, arr in params.unflatten().items()}

    def features_ad(self, p: dict[str, ad.Tensor], x: ad.Tensor) -> ad.Tensor:
        s = self.spec
        if s.arch == "smallconv":
            img = x.reshape(x.shape[0], 1, *s.image_shape)
            conv = ad.conv2d(img, p["conv.0.w"])
            c = s.conv_channels
            # flatten channel-major, then add the per-channel bias as a repeated row
            flat = conv.reshape(x.shape[0], c * s.input_dim)
            bias_row = _channel_bias_row(p["conv.0.b"], s.input_dim)
            ones = ad.Tensor(np.ones((x.shape[0], 1)))
            h = ad.relu(flat + ad.matmul(ones, bias_row))
            h = ad.relu(ad.matmul(h, p["backbone.0.w"]) + p["backbone.0.b"])
            return h
        h = x
        for i in range(len(s.hidden)):
            h = ad.relu(ad.matmul(h, p[f"backbone.{i}.w"]) + p[f"backbone.{i}.b"])
        return h

    def logits_ad(self, p: dict[str, ad.Tensor], x: ad.Tensor, task: int) -> ad.Tensor:
        self._check_task(task)
        feats = self.features_ad(p, x)
        return ad.matmul(feats, p[f"head.{task}.w"]) + p[f"head.{task}.b"]

    def loss_ad(self, p: dict[str, ad.Tensor], x: ad.Tensor, labels_onehot: np.ndarray,
                task: int) -> ad.Tensor:
        logits = self.logits_ad(p, x, task)
        return ad.cross_entropy(logits, ad.Tensor(labels_onehot))

    def input_gradient(self, params: ParameterVector, x: np.ndarray,
                       labels: np.ndarray, task: int) -> np.ndarray:
        """d(mean cross-entropy)/dx; labels are integer class ids."""
        p = self.param_tensors(params, requires_grad=False)
        xt = ad.Tensor(x, requires_grad=True)
        loss = self.loss_ad(p, xt, ad.onehot(labels, self.spec.classes_per_task), task)
        loss.backward()
        return xt.grad


def _channel_bias_row(bias: ad.Tensor, block: int) -> ad.Tensor:
    """Expand per-channel bias (c,) to a 1 x (c*block) row, channel-major."""
    c = bias.shape[0]
    expand = np.zeros((c, c * block))
    for i in range(c):
        expand[i, i * block:(i + 1) * block] = 1.0
    return ad.matmul(bias.reshape(1, c), ad.Tensor(expand))
