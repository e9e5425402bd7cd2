"""Raw frames to network-sized tensors: crop, block-average resize, label
collapse, and geometric augmentation.

The raw 1280x800 frame keeps only the road band (drop the top 300 and bottom
200 rows). Inputs then shrink to 80x20 by exact block averaging. Labels are
rescaled the same way but first multiplied by a large constant so that one
lane pixel anywhere inside a block survives the average; thresholding at zero
afterwards turns the block on. Augmentation (vertical shift, rotation about
the frame center) runs at raw resolution before any cropping.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .dataset import Sample
from .numerics import Grid2D, Rng

__all__ = [
    "PreprocessConfig",
    "crop_vertical",
    "area_resize",
    "process_label",
    "process_input",
    "apply_augment",
    "augment",
    "process_stream",
    "process_split",
]


@dataclass
class PreprocessConfig:
    crop_top: int = 300
    crop_bottom: int = 200
    input_rows: int = 20
    input_cols: int = 80
    label_rows: int = 10
    label_cols: int = 40
    label_gain: float = 400.0
    augment_count: int = 271
    translate_px: int = 100
    rotate_deg: float = 30.0


def crop_vertical(grid: Grid2D, top: int, bottom: int) -> Grid2D:
    """Drop ``top`` rows from the top and ``bottom`` rows from the bottom."""
    if top < 0:
        raise ValueError("top must be >= 0")
    if bottom < 0:
        raise ValueError("bottom must be >= 0")
    if top + bottom >= grid.rows:
        raise ValueError("top + bottom must leave at least one row")
    return Grid2D(grid.data[top : grid.rows - bottom, :].copy())


def area_resize(grid: Grid2D, out_rows: int, out_cols: int) -> Grid2D:
    """Downscale by averaging disjoint blocks. Dimensions must divide evenly."""
    if out_rows <= 0:
        raise ValueError("out_rows must be positive")
    if out_cols <= 0:
        raise ValueError("out_cols must be positive")
    if grid.rows % out_rows != 0:
        raise ValueError(
            f"rows {grid.rows} not divisible by out_rows {out_rows}"
        )
    if grid.cols % out_cols != 0:
        raise ValueError(
            f"cols {grid.cols} not divisible by out_cols {out_cols}"
        )
    br = grid.rows // out_rows
    bc = grid.cols // out_cols
    blocks = grid.data.reshape(out_rows, br, out_cols, bc)
    return Grid2D(blocks.mean(axis=(1, 3)))


def process_label(cropped_label: Grid2D, cfg: PreprocessConfig) -> Grid2D:
    """Collapse a cropped binary label to label_rows x label_cols.

    The label is scaled by ``label_gain`` before block averaging so a single
    marked pixel inside a block yields a strictly positive mean; the result is
    re-binarized with a strict > 0 test.
    """
    data = cropped_label.data
    if not np.all((data == 0.0) | (data == 1.0)):
        raise ValueError("cropped_label must be binary (0/1)")
    scaled = Grid2D(data * cfg.label_gain)
    small = area_resize(scaled, cfg.label_rows, cfg.label_cols)
    return Grid2D((small.data > 0.0).astype(np.float64))


def process_input(cropped_input: Grid2D, cfg: PreprocessConfig) -> Grid2D:
    return area_resize(cropped_input, cfg.input_rows, cfg.input_cols)


def _sample_bilinear(img: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    """Bilinear lookup with zero fill outside the image."""
    h, w = img.shape
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    out = np.zeros(src_r.shape, dtype=np.float64)
    for dr, dc, wt in (
        (0, 0, (1.0 - fr) * (1.0 - fc)),
        (0, 1, (1.0 - fr) * fc),
        (1, 0, fr * (1.0 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        vals = np.zeros_like(out)
        vals[valid] = img[rr[valid], cc[valid]]
        out += wt * vals
    return out


def _sample_nearest(img: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    h, w = img.shape
    rr = np.rint(src_r).astype(np.int64)
    cc = np.rint(src_c).astype(np.int64)
    valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    out = np.zeros(src_r.shape, dtype=np.float64)
    out[valid] = img[rr[valid], cc[valid]]
    return out


def apply_augment(sample: Sample, translate_px: int, angle_deg: float) -> Sample:
    """Shift a sample vertically and rotate it about the frame center.

    The input resamples bilinearly, the label with nearest neighbor so it
    stays binary; pixels pulled from outside the frame become 0. A positive
    ``translate_px`` moves content toward the bottom of the frame.
    """
    img = sample.input.data
    lab = sample.label.data
    if img.shape != lab.shape:
        raise ValueError("input and label dimensions must match")
    h, w = img.shape
    ctr_r = (h - 1) / 2.0
    ctr_c = (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    rr, cc = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    # Invert dst = R(theta) @ (src - ctr) + ctr + (translate, 0).
    dr = rr - ctr_r - float(translate_px)
    dc = cc - ctr_c
    src_r = cos_t * dr + sin_t * dc + ctr_r
    src_c = -sin_t * dr + cos_t * dc + ctr_c
    new_input = _sample_bilinear(img, src_r, src_c)
    new_label = _sample_nearest(lab, src_r, src_c)
    return Sample(Grid2D(new_input), Grid2D(new_label), sample.id)


def augment(sample: Sample, rng: Rng, cfg: PreprocessConfig) -> Sample:
    """Randomly shifted/rotated copy of ``sample`` (draw order: shift, angle)."""
    t = rng.integers(-cfg.translate_px, cfg.translate_px + 1)
    angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
    return apply_augment(sample, t, angle)


def _process_one(sample: Sample, cfg: PreprocessConfig, new_id: str) -> Sample:
    ci = crop_vertical(sample.input, cfg.crop_top, cfg.crop_bottom)
    cl = crop_vertical(sample.label, cfg.crop_top, cfg.crop_bottom)
    return Sample(process_input(ci, cfg), process_label(cl, cfg), new_id)


def process_stream(
    load_fn: Callable[[int], Sample],
    n: int,
    cfg: PreprocessConfig,
    rng: Rng | None = None,
    augment_split: bool = False,
) -> list[Sample]:
    """Crop and resize a split of ``n`` samples fetched through ``load_fn``.

    With ``augment_split`` the split grows by ``cfg.augment_count`` randomly
    transformed copies of randomly chosen samples (drawn with replacement,
    transformed at raw resolution before any cropping), mirroring how the
    training split is expanded. Raw frames are fetched one at a time and
    dropped after processing, so peak memory stays at a couple of frames no
    matter the split size.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    out = [None] * n
    if augment_split:
        if rng is None:
            raise ValueError("rng is required when augment_split is set")
        for k in range(cfg.augment_count):
            i = rng.integers(0, n)
            src = load_fn(i)
            if out[i] is None:
                out[i] = _process_one(src, cfg, src.id)
            extra = augment(src, rng, cfg)
            out.append(_process_one(extra, cfg, f"{src.id}-a{k:03d}"))
    for i in range(n):
        if out[i] is None:
            src = load_fn(i)
            out[i] = _process_one(src, cfg, src.id)
    return out


def process_split(
    samples: list[Sample],
    cfg: PreprocessConfig,
    rng: Rng | None = None,
    augment_split: bool = False,
) -> list[Sample]:
    """In-memory variant of :func:`process_stream` over an existing list."""
    if not samples:
        raise ValueError("samples must not be empty")
    return process_stream(
        lambda i: samples[i], len(samples), cfg, rng=rng, augment_split=augment_split
    )
