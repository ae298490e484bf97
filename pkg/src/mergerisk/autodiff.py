"""Minimal reverse-mode autodiff over dense float64 arrays.

Covers exactly what small feed-forward / convolutional classifiers need:
matmul, bias-add, relu, softmax, log, sum, mean, elementwise arithmetic and a
depthwise 2-D convolution with a fixed kernel. No broadcasting beyond
bias-add; reshape is explicit. Every op validates shapes and rejects
non-finite outputs at the boundary.
"""
from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "nodes_recorded",
    "matmul",
    "relu",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "conv2d_depthwise",
    "conv2d",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_GRAD_ENABLED = True

# running count of graph nodes recorded; lets tests assert an operation was
# genuinely gradient-free
_NODES_RECORDED = 0


def nodes_recorded() -> int:
    return _NODES_RECORDED


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _shape_check(op: str, ok: bool, a, b=None):
    if not ok:
        other = f" and {tuple(b)}" if b is not None else ""
        raise ShapeError(f"{op}: incompatible shapes {tuple(a)}{other}")


class Tensor:
    """Immutable dense f64 array plus an optional autodiff graph node."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if _op == "leaf":
            _finite("tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents: tuple[Tensor, ...] = _parents
        self.op = _op

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, op: str, parents: tuple["Tensor", ...], backward):
        global _NODES_RECORDED
        record = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=record,
                     _parents=parents if record else (), _op=op)
        if record:
            out._backward = backward
            _NODES_RECORDED += 1
        return out

    # -- basic protocol -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other)
        bias_add = other.ndim == 1 and self.ndim == 2 and self.shape[1] == other.shape[0]
        _shape_check("add", self.shape == other.shape or bias_add, self.shape, other.shape)
        out_data = _finite("add", self.data + other.data)

        def backward(g):
            self._accumulate(g)
            other._accumulate(g.sum(axis=0) if bias_add else g)

        return Tensor._make(out_data, "add", (self, other), backward)

    def __sub__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other)
        _shape_check("sub", self.shape == other.shape, self.shape, other.shape)
        out_data = _finite("sub", self.data - other.data)

        def backward(g):
            self._accumulate(g)
            other._accumulate(-g)

        return Tensor._make(out_data, "sub", (self, other), backward)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            scalar = float(other)
            out_data = _finite("scale", self.data * scalar)

            def backward_s(g):
                self._accumulate(g * scalar)

            return Tensor._make(out_data, "scale", (self,), backward_s)
        other = _as_tensor(other)
        _shape_check("mul", self.shape == other.shape, self.shape, other.shape)
        out_data = _finite("mul", self.data * other.data)

        def backward(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)

        return Tensor._make(out_data, "mul", (self, other), backward)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # -- shape ops ------------------------------------------------------------
    def reshape(self, *shape: int) -> "Tensor":
        new_shape = shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape
        _shape_check("reshape",
                     int(np.prod(new_shape)) == self.size, self.shape, new_shape)
        out_data = self.data.reshape(new_shape)
        old_shape = self.shape

        def backward(g):
            self._accumulate(g.reshape(old_shape))

        return Tensor._make(out_data, "reshape", (self,), backward)

    # -- reductions -----------------------------------------------------------
    def sum(self) -> "Tensor":
        out_data = _finite("sum", np.asarray(self.data.sum()))
        shape = self.shape

        def backward(g):
            self._accumulate(np.full(shape, float(g)))

        return Tensor._make(out_data, "sum", (self,), backward)

    def mean(self) -> "Tensor":
        n = self.size
        out_data = _finite("mean", np.asarray(self.data.mean()))
        shape = self.shape

        def backward(g):
            self._accumulate(np.full(shape, float(g) / n))

        return Tensor._make(out_data, "mean", (self,), backward)

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise NonFiniteError("log: non-positive input")
        out_data = _finite("log", np.log(self.data))

        def backward(g):
            self._accumulate(g / self.data)

        return Tensor._make(out_data, "log", (self,), backward)

    # -- backprop -------------------------------------------------------------
    def backward(self) -> None:
        """Reverse-accumulate gradients from a scalar root into .grad fields."""
        if self.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ok = a.ndim == 2 and b.ndim in (1, 2) and a.shape[-1] == b.shape[0]
    _shape_check("matmul", ok, a.shape, b.shape)
    out_data = _finite("matmul", a.data @ b.data)

    def backward(g):
        if b.ndim == 1:
            a._accumulate(np.outer(g, b.data))
            b._accumulate(a.data.T @ g)
        else:
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.T @ g)

    return Tensor._make(out_data, "matmul", (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._make(out_data, "relu", (x,), backward)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis."""
    x = _as_tensor(x)
    out_data = _finite("softmax", _softmax_np(x.data))

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return Tensor._make(out_data, "softmax", (x,), backward)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = _finite("log_softmax", _log_softmax_np(x.data))

    def backward(g):
        p = np.exp(out_data)
        x._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return Tensor._make(out_data, "log_softmax", (x,), backward)


def cross_entropy(logits: Tensor, labels_onehot: Tensor) -> Tensor:
    """Mean negative log-likelihood over the batch; labels are one-hot rows."""
    logits, labels_onehot = _as_tensor(logits), _as_tensor(labels_onehot)
    _shape_check("cross_entropy", logits.ndim == 2 and logits.shape == labels_onehot.shape,
                 logits.shape, labels_onehot.shape)
    if logits.shape[1] < 2:
        raise ShapeError(f"cross_entropy: needs >= 2 classes, got {logits.shape[1]}")
    rows = labels_onehot.data
    if not (np.all((rows == 0.0) | (rows == 1.0)) and np.all(rows.sum(axis=1) == 1.0)):
        raise ValueError("cross_entropy: label rows must be one-hot")
    lsm = log_softmax(logits)
    picked = lsm * labels_onehot
    return -(picked.sum() * (1.0 / logits.shape[0]))


def onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"label index out of range: [{labels.min()}, {labels.max()}] for {num_classes} classes")
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# -- 2-D convolutions ---------------------------------------------------------

def _pad_same(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, pad)


def _corr2d_np(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """'Same'-padded 2-D cross-correlation over the last two axes."""
    k = kernel.shape[0]
    xp = _pad_same(x, k)
    h, w = x.shape[-2], x.shape[-1]
    out = np.zeros_like(x)
    for di in range(k):
        for dj in range(k):
            out += kernel[di, dj] * xp[..., di:di + h, dj:dj + w]
    return out


def conv2d_depthwise(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Fixed-kernel depthwise 2-D correlation with 'same' padding.

    The kernel is a constant; gradients flow to the input only.
    """
    x = _as_tensor(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    _shape_check("conv2d_depthwise",
                 kernel.ndim == 2 and kernel.shape[0] == kernel.shape[1] and x.ndim >= 2,
                 x.shape, kernel.shape)
    if kernel.shape[0] % 2 == 0:
        raise ShapeError(f"conv2d_depthwise: kernel size must be odd, got {kernel.shape[0]}")
    out_data = _finite("conv2d_depthwise", _corr2d_np(x.data, kernel))
    flipped = kernel[::-1, ::-1]

    def backward(g):
        x._accumulate(_corr2d_np(g, flipped))

    return Tensor._make(out_data, "conv2d_depthwise", (x,), backward)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(b, c, h, w) -> (b, h, w, c*k*k) patch matrix under 'same' padding."""
    b, c_in, h, wd = x.shape
    xp = _pad_same(x, k)
    cols = np.empty((b, h, wd, c_in * k * k))
    idx = 0
    for c in range(c_in):
        for di in range(k):
            for dj in range(k):
                cols[..., idx] = xp[:, c, di:di + h, dj:dj + wd]
                idx += 1
    return cols


def _conv2d_forward_np(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Shared forward for conv2d so inference and autodiff agree bitwise."""
    cols = _im2col(x, w.shape[2])
    wmat = w.reshape(w.shape[0], -1)
    return np.einsum("bhwi,oi->bohw", cols, wmat)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Multi-channel 2-D correlation with 'same' padding.

    x: (batch, c_in, h, w); w: (c_out, c_in, k, k). Gradients flow to both.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    ok = (x.ndim == 4 and w.ndim == 4 and x.shape[1] == w.shape[1]
          and w.shape[2] == w.shape[3] and w.shape[2] % 2 == 1)
    _shape_check("conv2d", ok, x.shape, w.shape)
    k = w.shape[2]
    b, c_in, h, wd = x.shape
    c_out = w.shape[0]
    cols = _im2col(x.data, k)
    out_data = _finite("conv2d", _conv2d_forward_np(x.data, w.data))

    def backward(g):
        # grad wrt weights
        gw = np.einsum("bohw,bhwi->oi", g, cols).reshape(w.shape)
        w._accumulate(gw)
        # grad wrt input: correlate grad with flipped kernels, transposed channels
        gx = np.zeros_like(x.data)
        gp = _pad_same(g, k)
        for c in range(c_in):
            for o in range(c_out):
                ker = w.data[o, c, ::-1, ::-1]
                for di in range(k):
                    for dj in range(k):
                        gx[:, c] += ker[di, dj] * gp[:, o, di:di + h, dj:dj + wd]
        x._accumulate(gx)

    return Tensor._make(out_data, "conv2d", (x, w), backward)
