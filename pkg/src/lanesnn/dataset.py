"""Sample containers, PGM file I/O, manifests, and the synthetic scene generator.

Images travel as binary PGM (P5, maxval 255). Inputs store intensity in
[0, 1] scaled to 0..255; labels store {0, 255} and load back as {0.0, 1.0}.
A split lives in one directory: the pixel files plus a ``manifest.tsv`` with
one ``input_path<TAB>label_path<TAB>id`` row per sample.
"""

from __future__ import annotations

import os
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from .numerics import Grid2D, Rng

__all__ = [
    "DataError",
    "Sample",
    "write_pgm",
    "read_pgm",
    "save_sample",
    "load_sample",
    "write_manifest",
    "read_manifest",
    "save_split",
    "load_split",
    "load_det_layout",
    "render_scene",
    "generate_synthetic",
]

MANIFEST_NAME = "manifest.tsv"


class DataError(Exception):
    """Raised for missing, malformed, or inconsistent data files."""


@dataclass
class Sample:
    input: Grid2D
    label: Grid2D
    id: str


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------

def write_pgm(path: str, pixels: np.ndarray) -> None:
    """Write a uint8 image as binary PGM (P5, maxval 255)."""
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError("pixels must be 2-dimensional")
    if arr.dtype != np.uint8:
        raise ValueError("pixels must be uint8")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


def _read_pgm_token(f) -> bytes:
    """Next whitespace-delimited header token, skipping '#' comments."""
    tok = b""
    while True:
        ch = f.read(1)
        if ch == b"":
            return tok
        if ch == b"#":
            while ch not in (b"", b"\n"):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_pgm(path: str) -> np.ndarray:
    """Read a binary PGM (P5, maxval 255) into a uint8 array."""
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    with open(path, "rb") as f:
        magic = _read_pgm_token(f)
        if magic != b"P5":
            raise DataError(f"bad PGM magic in {path}: expected P5, got {magic!r}")
        fields = {}
        for name in ("width", "height", "maxval"):
            tok = _read_pgm_token(f)
            try:
                fields[name] = int(tok)
            except ValueError:
                raise DataError(f"bad PGM {name} in {path}: {tok!r}") from None
            if fields[name] <= 0:
                raise DataError(f"bad PGM {name} in {path}: {fields[name]}")
        if fields["maxval"] != 255:
            raise DataError(f"bad PGM maxval in {path}: expected 255, got {fields['maxval']}")
        n = fields["width"] * fields["height"]
        raw = f.read(n)
        if len(raw) != n:
            raise DataError(
                f"bad PGM pixel data in {path}: expected {n} bytes, got {len(raw)}"
            )
    return np.frombuffer(raw, dtype=np.uint8).reshape(fields["height"], fields["width"])


def save_sample(sample: Sample, input_path: str, label_path: str) -> None:
    inp = np.rint(np.clip(sample.input.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    lab = (sample.label.data > 0).astype(np.uint8) * 255
    write_pgm(input_path, inp)
    write_pgm(label_path, lab)


def load_sample(input_path: str, label_path: str, sample_id: str) -> Sample:
    inp = read_pgm(input_path).astype(np.float64) / 255.0
    lab = (read_pgm(label_path) >= 128).astype(np.float64)
    return Sample(Grid2D(inp), Grid2D(lab), sample_id)


# ---------------------------------------------------------------------------
# Manifests and splits
# ---------------------------------------------------------------------------

def write_manifest(path: str, rows: list[tuple[str, str, str]]) -> None:
    with open(path, "w", newline="") as f:
        for input_path, label_path, sample_id in rows:
            f.write(f"{input_path}\t{label_path}\t{sample_id}\n")


def read_manifest(path: str) -> list[tuple[str, str, str]]:
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"manifest {path} line {lineno}: expected 3 tab-separated "
                    f"fields, got {len(parts)}"
                )
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def save_split(directory: str, samples: Iterable[Sample]) -> None:
    """Write every sample of a split plus its manifest into one directory."""
    os.makedirs(directory, exist_ok=True)
    rows = []
    for s in samples:
        input_name = f"{s.id}.pgm"
        label_name = f"{s.id}_label.pgm"
        save_sample(s, os.path.join(directory, input_name), os.path.join(directory, label_name))
        rows.append((input_name, label_name, s.id))
    write_manifest(os.path.join(directory, MANIFEST_NAME), rows)


def load_split(directory: str) -> list[Sample]:
    rows = read_manifest(os.path.join(directory, MANIFEST_NAME))
    samples = []
    for input_name, label_name, sample_id in rows:
        samples.append(
            load_sample(
                os.path.join(directory, input_name),
                os.path.join(directory, label_name),
                sample_id,
            )
        )
    return samples


def load_det_layout(root: str) -> list[tuple[str, str, str]]:
    """Pair files from parallel ``input/`` and ``label/`` trees under ``root``.

    Files are matched by their path relative to the respective tree. A file
    present on one side only is an error. Returns manifest rows with paths
    relative to ``root``.
    """
    input_root = os.path.join(root, "input")
    label_root = os.path.join(root, "label")
    for d in (input_root, label_root):
        if not os.path.isdir(d):
            raise DataError(f"missing directory: {d}")

    def collect(tree: str) -> dict[str, str]:
        found = {}
        for dirpath, _dirnames, filenames in os.walk(tree):
            for name in sorted(filenames):
                full = os.path.join(dirpath, name)
                rel = os.path.relpath(full, tree)
                found[rel] = full
        return found

    inputs = collect(input_root)
    labels = collect(label_root)
    for rel in sorted(inputs):
        if rel not in labels:
            raise DataError(f"missing label counterpart for {os.path.join(input_root, rel)}")
    for rel in sorted(labels):
        if rel not in inputs:
            raise DataError(f"missing input counterpart for {os.path.join(label_root, rel)}")

    rows = []
    for rel in sorted(inputs):
        sample_id = os.path.splitext(rel)[0].replace(os.sep, "-")
        rows.append(
            (os.path.join("input", rel), os.path.join("label", rel), sample_id)
        )
    return rows


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

FLIP_PROB = 0.02
JITTER_STD = 0.05
MIN_STROKE_INTENSITY = 0.8


def _stamp_segment(
    canvas: np.ndarray, mask: np.ndarray, p0, p1, half_width: float, intensity: float
) -> None:
    """Draw one thick bright segment; mask collects its exact footprint."""
    h, w = canvas.shape
    r0, c0 = p0
    r1, c1 = p1
    pad = half_width + 1.0
    rlo = max(int(np.floor(min(r0, r1) - pad)), 0)
    rhi = min(int(np.ceil(max(r0, r1) + pad)) + 1, h)
    clo = max(int(np.floor(min(c0, c1) - pad)), 0)
    chi = min(int(np.ceil(max(c0, c1) + pad)) + 1, w)
    if rlo >= rhi or clo >= chi:
        return
    rr, cc = np.meshgrid(
        np.arange(rlo, rhi, dtype=np.float64),
        np.arange(clo, chi, dtype=np.float64),
        indexing="ij",
    )
    dr, dc = r1 - r0, c1 - c0
    seg_len2 = dr * dr + dc * dc
    if seg_len2 == 0.0:
        dist = np.hypot(rr - r0, cc - c0)
    else:
        t = ((rr - r0) * dr + (cc - c0) * dc) / seg_len2
        t = np.clip(t, 0.0, 1.0)
        dist = np.hypot(rr - (r0 + t * dr), cc - (c0 + t * dc))
    hit = dist <= half_width
    region = canvas[rlo:rhi, clo:chi]
    np.maximum(region, np.where(hit, intensity, 0.0), out=region)
    mask[rlo:rhi, clo:chi] |= hit


def render_scene(rng: Rng, width: int = 1280, height: int = 800) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free scene: bright straight lanes converging toward a vanishing
    point in the upper third of the frame. Returns (intensity, binary label)."""
    if width <= 0:
        raise ValueError("width must be positive")
    if height <= 0:
        raise ValueError("height must be positive")
    canvas = np.zeros((height, width), dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)

    vp_r = rng.uniform(0.05, 0.32) * height
    vp_c = rng.uniform(0.20, 0.80) * width
    u = rng.uniform()
    n_lanes = 2 if u < 0.08 else (3 if u < 0.34 else 4)
    for _ in range(n_lanes):
        bottom_c = rng.uniform(0.02, 0.98) * width
        stroke_w = rng.uniform(3.0, 9.0)
        intensity = rng.uniform(MIN_STROKE_INTENSITY, 1.0)
        _stamp_segment(
            canvas, mask, (height - 1.0, bottom_c), (vp_r, vp_c), stroke_w / 2.0, intensity
        )
    return canvas, mask.astype(np.float64)


def generate_synthetic(
    n: int,
    rng: Rng,
    width: int = 1280,
    height: int = 800,
    id_prefix: str = "syn-",
) -> list[Sample]:
    """Generate ``n`` noisy lane scenes with pixel-exact labels.

    On top of the clean render, each input gets salt-and-pepper flips
    (probability 0.02) and additive Gaussian jitter (std 0.05), then is
    clamped to [0, 1]. Labels mark the clean strokes and stay binary.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    samples = []
    for i in range(n):
        canvas, label = render_scene(rng, width, height)
        flip = rng.uniform(size=canvas.shape) < FLIP_PROB
        noisy = np.where(flip, 1.0 - canvas, canvas)
        noisy = noisy + rng.gaussian(0.0, JITTER_STD, size=canvas.shape)
        np.clip(noisy, 0.0, 1.0, out=noisy)
        samples.append(Sample(Grid2D(noisy), Grid2D(label), f"{id_prefix}{i:04d}"))
    return samples
