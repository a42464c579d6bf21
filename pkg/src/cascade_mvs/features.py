"""Three-scale feature extraction.

Fixed mode yields four channels per scale: intensity, horizontal and vertical
central-difference gradients and a 5x5 local mean (replicate borders). The
trainable mode appends one 3x3 convolution + leaky rectifier per scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import BadDimensions

FIXED_CHANNELS = 4
LEAKY_SLOPE = 0.1


@dataclass
class FeatureWeights:
    """Per-scale conv weights, ordered quarter, half, full resolution."""

    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    channels: int = field(init=False)

    def __post_init__(self):
        if len(self.kernels) != 3 or len(self.biases) != 3:
            raise ValueError("need one kernel bank per scale")
        self.channels = self.kernels[0].shape[0]
        for k, b in zip(self.kernels, self.biases):
            if k.shape != (self.channels, FIXED_CHANNELS, 3, 3) or b.shape != (self.channels,):
                raise ValueError("kernel counts must match the configured channel width")

    @classmethod
    def init(cls, channels: int = 8, seed: int = 0) -> FeatureWeights:
        rng = np.random.default_rng(seed)
        scale = np.sqrt(2.0 / (FIXED_CHANNELS * 9))
        kernels = [rng.normal(0.0, scale, (channels, FIXED_CHANNELS, 3, 3)) for _ in range(3)]
        return cls(kernels, [np.zeros(channels) for _ in range(3)])

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(3):
            out[f"feat{i}.weight"] = self.kernels[i]
            out[f"feat{i}.bias"] = self.biases[i]
        return out


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=-1) if image.ndim == 3 else image


def downsample2(x: np.ndarray) -> np.ndarray:
    """2x2 box average over the last two axes."""
    h, w = x.shape[-2:]
    return x.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))


def _box_mean(img: np.ndarray, r: int) -> np.ndarray:
    p = np.pad(img, r, mode="edge")
    h, w = img.shape
    acc = np.zeros_like(img)
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            acc += p[dy : dy + h, dx : dx + w]
    return acc / (2 * r + 1) ** 2


def fixed_features(gray: np.ndarray) -> np.ndarray:
    """``(H, W) -> (4, H, W)``."""
    p = np.pad(gray, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return np.stack([gray, gx, gy, _box_mean(gray, 2)])


def fixed_pyramid(image: np.ndarray) -> list[np.ndarray]:
    gray = to_gray(image)
    h, w = gray.shape
    if h % 4 or w % 4:
        raise BadDimensions(f"image {w}x{h} must have sides divisible by 4")
    half = downsample2(gray)
    quarter = downsample2(half)
    return [fixed_features(quarter), fixed_features(half), fixed_features(gray)]


def extract_pyramid(image: np.ndarray, weights: FeatureWeights | None = None) -> list[np.ndarray]:
    """Feature maps ``(C, H, W)`` at 1/4, 1/2 and full resolution.

    With ``weights=None`` the fixed four-channel extractor is used.
    """
    fixed = fixed_pyramid(image)
    if weights is None:
        return fixed
    return [apply_conv(f, weights, i)[0] for i, f in enumerate(fixed)]


def apply_conv(fixed: np.ndarray, weights: FeatureWeights, scale: int):
    """Trainable head for one scale; returns ``(features, cache)``."""
    x = fixed[None]
    z, cols = nn.conv3x3(x, weights.kernels[scale], weights.biases[scale])
    return nn.leaky_relu(z, LEAKY_SLOPE)[0], (x.shape, cols, z)


def apply_conv_backward(grad: np.ndarray, cache, weights: FeatureWeights, scale: int):
    """Parameter gradients of the trainable head for one scale."""
    x_shape, cols, z = cache
    dz = grad[None] * np.where(z > 0, 1.0, LEAKY_SLOPE)
    _, dw, db = nn.conv3x3_backward(dz, cols, weights.kernels[scale], x_shape)
    return dw, db
