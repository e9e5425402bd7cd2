"""Deterministic random streams and the float64 grid container.

Every stochastic operation in the package draws from an explicitly passed
:class:`Rng` so that a single integer seed pins down the whole pipeline.
Independent substreams (data generation, augmentation, weight init, per-epoch
encoding, ...) are derived with :meth:`Rng.child`, which never perturbs the
parent stream.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Rng", "Grid2D"]


class Rng:
    """PCG64 generator addressed by (seed, spawn_key) so substreams are stable.

    Two instances built from the same seed and key path produce identical
    sequences. ``child(*keys)`` derives a substream whose output is
    independent of how much the parent has already been consumed.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        if not isinstance(seed, (int, np.integer)):
            raise ValueError("seed must be an integer")
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in _spawn_key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *keys: int) -> "Rng":
        """Return an independent substream addressed by integer keys."""
        if not keys:
            raise ValueError("keys must not be empty")
        return Rng(self.seed, self.spawn_key + tuple(keys))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray | float:
        if not high >= low:
            raise ValueError("high must be >= low")
        return self._gen.uniform(low, high, size)

    def gaussian(self, mean: float = 0.0, std: float = 1.0, size=None) -> np.ndarray | float:
        if not std >= 0.0:
            raise ValueError("std must be >= 0")
        return self._gen.normal(mean, std, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray | int:
        """Uniform integers in [low, high)."""
        if not high > low:
            raise ValueError("high must be > low")
        drawn = self._gen.integers(low, high, size)
        return int(drawn) if size is None else drawn

    def permutation(self, n: int) -> np.ndarray:
        if not n >= 0:
            raise ValueError("n must be >= 0")
        return self._gen.permutation(n)

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value

    def descriptor(self) -> tuple[int, tuple[int, ...]]:
        """(seed, spawn_key) pair sufficient to rebuild this stream from scratch."""
        return self.seed, self.spawn_key

    @classmethod
    def from_descriptor(cls, desc: tuple[int, tuple[int, ...]]) -> "Rng":
        seed, spawn_key = desc
        return cls(seed, tuple(spawn_key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, spawn_key={self.spawn_key})"


class Grid2D:
    """Dense 2-D float64 raster with row-major (C-order) storage."""

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise ValueError("data must be 2-dimensional")
        self._data = np.ascontiguousarray(arr, dtype=np.float64)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Grid2D":
        if rows <= 0:
            raise ValueError("rows must be positive")
        if cols <= 0:
            raise ValueError("cols must be positive")
        return cls(np.zeros((rows, cols), dtype=np.float64))

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    @property
    def data(self) -> np.ndarray:
        return self._data

    def get(self, r: int, c: int) -> float:
        return float(self._data[r, c])

    def set(self, r: int, c: int, value: float) -> None:
        self._data[r, c] = value

    def copy(self) -> "Grid2D":
        return Grid2D(self._data.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Grid2D):
            return NotImplemented
        return self._data.shape == other._data.shape and bool(
            np.array_equal(self._data, other._data)
        )

    def __repr__(self) -> str:
        return f"Grid2D(rows={self.rows}, cols={self.cols})"
