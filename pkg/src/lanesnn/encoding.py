"""Bernoulli rate coding of intensity images into spike trains.

Each pixel fires independently at every step with probability equal to its
intensity, so the expected spike count over ``steps`` presentations is
``intensity * steps``. Trains are stored bit-packed (one bit per step) and
unpacked on demand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng

__all__ = ["SpikeTrainBatch", "rate_encode", "encode_batch"]


@dataclass
class SpikeTrainBatch:
    """Bit-packed spike tensor of shape (batch, channels, rows, cols, steps)."""

    packed: np.ndarray
    steps: int

    def __post_init__(self):
        if self.packed.ndim != 5:
            raise ValueError("packed must have 5 dimensions")
        if self.packed.dtype != np.uint8:
            raise ValueError("packed must be uint8")
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.packed.shape[-1] != (self.steps + 7) // 8:
            raise ValueError("packed last dimension does not match steps")

    @classmethod
    def from_dense(cls, spikes: np.ndarray) -> "SpikeTrainBatch":
        """Pack a dense (batch, channels, rows, cols, steps) 0/1 array."""
        if spikes.ndim != 5:
            raise ValueError("spikes must have 5 dimensions")
        bits = np.ascontiguousarray(spikes, dtype=np.uint8)
        if not np.all((bits == 0) | (bits == 1)):
            raise ValueError("spikes must be binary")
        return cls(np.packbits(bits, axis=-1), spikes.shape[-1])

    @property
    def shape(self) -> tuple[int, int, int, int, int]:
        b, c, r, k, _ = self.packed.shape
        return (b, c, r, k, self.steps)

    def unpacked(self) -> np.ndarray:
        """Dense uint8 0/1 array of shape (batch, channels, rows, cols, steps)."""
        return np.unpackbits(self.packed, axis=-1)[..., : self.steps]


def rate_encode(intensity: np.ndarray, steps: int, rng: Rng) -> np.ndarray:
    """Encode one (rows, cols) intensity image into (rows, cols, steps) spikes.

    A pixel spikes at a step when a fresh uniform draw falls below its
    intensity; intensity 0 never spikes and intensity 1 spikes every step.
    """
    img = np.asarray(intensity, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("intensity must be 2-dimensional")
    if steps <= 0:
        raise ValueError("steps must be positive")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("intensity values must lie in [0, 1]")
    u = rng.uniform(size=img.shape + (steps,))
    return (u < img[..., None]).astype(np.uint8)


def encode_batch(images: list[np.ndarray], steps: int, rng: Rng) -> SpikeTrainBatch:
    """Encode a list of equally sized intensity images as one packed batch."""
    if not images:
        raise ValueError("images must not be empty")
    dense = np.stack([rate_encode(img, steps, rng) for img in images])
    # (batch, rows, cols, steps) -> (batch, 1, rows, cols, steps)
    return SpikeTrainBatch.from_dense(dense[:, None, :, :, :])
