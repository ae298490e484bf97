"""Input-transformation defenses applied as pre-inference wrappers.

Four kinds: an averaged ensemble of random crops (rescaled back to input
size), bit-depth reduction, a lossy block-DCT quantization round trip (the
information-destroying core of JPEG without entropy coding; labeled
LOSSY_DCT, never JPEG), and small additive Gaussian noise. Defenses never
touch model parameters and always return valid class distributions.

The DCT round trip quantizes only AC coefficients, so constant inputs pass
through bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFENSE_KINDS = ("CROP_ENSEMBLE", "BIT_DEPTH", "LOSSY_DCT", "SND")

# standard 8x8 luminance quantization table
_QUANT_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class DefenseSpec:
    kind: str
    crops: int = 30
    crop_fraction: float = 0.9
    bits: int = 5
    quality: int = 75
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if not 1 <= self.bits <= 8:
            raise ValueError(f"bits must be in [1, 8], got {self.bits}")
        if not 0 < self.crop_fraction < 1:
            raise ValueError(f"crop fraction must be in (0, 1), got {self.crop_fraction}")
        if not 1 <= self.quality <= 100:
            raise ValueError(f"quality must be in [1, 100], got {self.quality}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.noise_sigma}")

    def params_str(self) -> str:
        if self.kind == "CROP_ENSEMBLE":
            return f"crops={self.crops},fraction={self.crop_fraction}"
        if self.kind == "BIT_DEPTH":
            return f"bits={self.bits}"
        if self.kind == "LOSSY_DCT":
            return f"quality={self.quality}"
        return f"sigma={self.noise_sigma}"


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(batch, h, w) -> (batch, out_h, out_w)."""
    b, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    mat[0] = np.sqrt(1.0 / n)
    return mat


_DCT8 = _dct_matrix(8)


def _quality_scale(quality: int) -> float:
    if quality < 50:
        return 5000.0 / quality / 100.0
    return (200.0 - 2.0 * quality) / 100.0


def lossy_dct_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Block-DCT quantization round trip on (batch, h, w) images in [0, 1].

    AC coefficients are quantized with the quality-scaled table; the DC
    coefficient is preserved so flat regions survive exactly.
    """
    b, h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    padded = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    hh, ww = padded.shape[1:]
    step = np.maximum(_QUANT_TABLE * _quality_scale(quality), 1.0) / 255.0
    out = np.empty_like(padded)
    for by in range(0, hh, 8):
        for bx in range(0, ww, 8):
            block = padded[:, by:by + 8, bx:bx + 8]
            coef = np.einsum("ij,bjk,lk->bil", _DCT8, block, _DCT8)
            quant = np.round(coef / step) * step
            quant[:, 0, 0] = coef[:, 0, 0]
            out[:, by:by + 8, bx:bx + 8] = np.einsum("ji,bjk,kl->bil", _DCT8, quant, _DCT8)
    return np.clip(out[:, :h, :w], 0.0, 1.0)


def bit_depth_reduce(x: np.ndarray, bits: int) -> np.ndarray:
    levels = 2 ** bits - 1
    return np.round(x * levels) / levels


def defend_predict(proba_fn, x: np.ndarray, spec: DefenseSpec,
                   image_shape: tuple[int, int],
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Class distribution of the wrapped model under one defense.

    proba_fn maps a (batch, d) array to a (batch, c) distribution.
    """
    if x.min() < 0 or x.max() > 1:
        raise ValueError("defended inputs must lie in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(np.random.PCG64(spec.seed))
    h, w = image_shape
    if spec.kind == "BIT_DEPTH":
        return proba_fn(bit_depth_reduce(x, spec.bits))
    if spec.kind == "SND":
        noisy = np.clip(x + rng.normal(0.0, spec.noise_sigma, size=x.shape), 0.0, 1.0)
        return proba_fn(noisy)
    if spec.kind == "LOSSY_DCT":
        img = x.reshape(len(x), h, w)
        return proba_fn(lossy_dct_roundtrip(img, spec.quality).reshape(x.shape))
    # CROP_ENSEMBLE
    side_h = int(round(h * spec.crop_fraction))
    side_w = int(round(w * spec.crop_fraction))
    if side_h < 1 or side_w < 1 or side_h > h or side_w > w:
        raise ValueError(
            f"crop fraction {spec.crop_fraction} incompatible with image {image_shape}")
    img = x.reshape(len(x), h, w)
    total = None
    for _ in range(spec.crops):
        top = rng.integers(0, h - side_h + 1)
        left = rng.integers(0, w - side_w + 1)
        crop = img[:, top:top + side_h, left:left + side_w]
        resized = _resize_bilinear(crop, h, w).reshape(x.shape)
        probs = proba_fn(np.clip(resized, 0.0, 1.0))
        total = probs if total is None else total + probs
    return total / spec.crops
