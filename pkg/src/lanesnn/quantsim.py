"""Fixed-point inference: weight quantization and integer membrane dynamics.

A trained float network maps onto integer hardware as follows. One global
scale k = 15 / max|w| stretches the largest synaptic weight to mantissa 15;
every weight becomes a signed 8-bit mantissa (round half away from zero) and
the threshold becomes a 12-bit mantissa on the same scale, so the spike
condition is order-preserving. Because k absorbs any common scale on
(weights, threshold), scaling both by a positive constant leaves the
quantized network unchanged.

The membrane leak becomes a right-shift style decay with denominator 4096:
``delta_v = int(4096 * (1 - tau))`` (3276 for tau = 0.2, a retained fraction
of 820/4096, within 0.1% of the float leak). The integer update per step is

    u <- trunc_toward_zero(u * (4096 - delta_v) / 4096) * (1 - o_prev)
         + sum(mant * spike) + delta_i

with delta_i (constant input current) and all biases fixed at 0, and the
strict spike rule u > vth_mant.

Inference runs as one continuous stream: after each sample's active steps, a
fixed number of blank (all-zero input) steps flushes the membranes before the
next sample begins. Spikes emitted during blank steps are not counted.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import DataError, Sample
from .encoding import SpikeTrainBatch, encode_batch
from .evaluation import EvalReport, evaluate
from .numerics import Rng
from .snn import (
    LayerSpec,
    LifParams,
    Network,
    NetworkSpec,
    _read_container,
    conv2d,
)

__all__ = [
    "QuantParams",
    "QuantizedNetwork",
    "round_half_away",
    "compute_k",
    "quantize",
    "quant_forward",
    "evaluate_quantized",
    "quant_report_rows",
    "save_quantized",
    "load_quantized",
]

QNT_MAGIC = b"LANESNN-QNT-1\n"

MANT_MIN, MANT_MAX = -128, 127   # signed 8-bit weight mantissa
VTH_MAX = 4095                   # unsigned 12-bit threshold mantissa
DECAY_DENOM = 4096
TARGET_MAX_MANT = 15.0           # largest weight maps to this mantissa


@dataclass(frozen=True)
class QuantParams:
    k: float
    vth_mant: int
    delta_v: int
    delta_i: int = 0
    wgt_exp: int = 0
    bias: int = 0


@dataclass
class QuantizedNetwork:
    spec: NetworkSpec
    qp: QuantParams
    mants: list[np.ndarray]

    def weighted_indices(self) -> list[int]:
        return [i for i, ls in enumerate(self.spec.layers) if ls.weighted]


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def compute_k(net: Network) -> float:
    """Global scale mapping the largest absolute weight to TARGET_MAX_MANT."""
    max_abs = 0.0
    for i in net.weighted_indices():
        max_abs = max(max_abs, float(np.max(np.abs(net.states[i].W))))
    if max_abs == 0.0:
        raise ValueError("cannot quantize a network whose weights are all zero")
    return TARGET_MAX_MANT / max_abs


def quantize(net: Network) -> QuantizedNetwork:
    """Map a float network to integer mantissas and threshold."""
    k = compute_k(net)
    mants = []
    for i in net.weighted_indices():
        m = round_half_away(net.states[i].W * k)
        mants.append(np.clip(m, MANT_MIN, MANT_MAX).astype(np.int32))
    vth = int(round_half_away(np.float64(net.spec.lif.v_th * k)))
    if vth > VTH_MAX:
        warnings.warn(
            f"threshold mantissa {vth} exceeds 12-bit range, clamping to {VTH_MAX}",
            stacklevel=2,
        )
        vth = VTH_MAX
    delta_v = int(DECAY_DENOM * (1.0 - net.spec.lif.tau))
    qp = QuantParams(k=k, vth_mant=vth, delta_v=delta_v)
    return QuantizedNetwork(spec=net.spec, qp=qp, mants=mants)


# ---------------------------------------------------------------------------
# Integer simulation
# ---------------------------------------------------------------------------

def _decay(u: np.ndarray, retain: int) -> np.ndarray:
    # trunc toward zero of u * retain / 4096, in pure integer arithmetic
    return np.sign(u) * ((np.abs(u) * retain) // DECAY_DENOM)


def quant_forward(
    qnet: QuantizedNetwork, batch: SpikeTrainBatch, blank: int = 10
) -> np.ndarray:
    """Integer spike counts (batch, out_units) for one continuous stream.

    Samples are presented back to back in batch order, separated by ``blank``
    zero-input steps. Membranes persist across the whole stream and start at
    zero; output spikes are counted only during a sample's active steps.
    """
    if blank < 0:
        raise ValueError("blank must be >= 0")
    spec = qnet.spec
    if batch.shape[1:4] != spec.input_shape:
        raise ValueError(
            f"batch shape {batch.shape[1:4]} does not match network input "
            f"{spec.input_shape}"
        )
    spikes = batch.unpacked()
    n_samples = batch.shape[0]
    steps = batch.steps
    retain = DECAY_DENOM - qnet.qp.delta_v
    weighted = qnet.weighted_indices()

    u: list[np.ndarray | None] = [None] * len(weighted)
    o: list[np.ndarray | None] = [None] * len(weighted)
    counts = np.zeros((n_samples, spec.output_units), dtype=np.int64)
    zero_input = np.zeros((1,) + spec.input_shape, dtype=np.int64)

    def step(x: np.ndarray) -> np.ndarray:
        cur = x
        wl = 0
        for i, ls in enumerate(spec.layers):
            if not ls.weighted:
                continue
            W = qnet.mants[wl].astype(np.int64)
            if ls.kind == "dense":
                if cur.ndim > 2:
                    cur = cur.reshape(1, -1)
                drive = cur @ W.T
            else:
                drive = conv2d(cur, W, np.zeros(ls.out_channels, dtype=np.int64),
                               ls.padding, ls.stride)
            drive += qnet.qp.delta_i
            if u[wl] is None:
                u[wl] = np.zeros_like(drive)
                o[wl] = np.zeros_like(drive)
            u[wl] = _decay(u[wl], retain) * (1 - o[wl]) + drive
            o[wl] = (u[wl] > qnet.qp.vth_mant).astype(np.int64)
            cur = o[wl]
            wl += 1
        return cur

    for s in range(n_samples):
        for t in range(steps):
            out = step(spikes[s][None, ...][..., t].astype(np.int64))
            counts[s] += out.reshape(-1)
        for _ in range(blank):
            step(zero_input)
    return counts


def evaluate_quantized(
    qnet: QuantizedNetwork,
    samples: list[Sample],
    steps: int,
    rng: Rng,
    blank: int = 10,
) -> EvalReport:
    """Encode, stream through the integer network, and score mean IoU."""
    batch = encode_batch([s.input.data for s in samples], steps, rng)
    counts = quant_forward(qnet, batch, blank=blank)
    rates = counts.astype(np.float64) / float(steps)
    preds = [(s.id, r) for s, r in zip(samples, rates)]
    labels = [s.label.data.reshape(-1) for s in samples]
    return evaluate(preds, labels, steps)


# ---------------------------------------------------------------------------
# Reporting and the on-disk container
# ---------------------------------------------------------------------------

def quant_report_rows(net: Network, qnet: QuantizedNetwork) -> list[dict]:
    """Per-layer rounding summary: saturation counts and mantissa error."""
    rows = []
    k = qnet.qp.k
    for wl, i in enumerate(net.weighted_indices()):
        W = net.states[i].W
        raw = round_half_away(W * k)
        saturated = int(np.count_nonzero((raw < MANT_MIN) | (raw > MANT_MAX)))
        err = np.abs(W - qnet.mants[wl] / k)
        rows.append(
            {
                "layer": wl,
                "kind": net.spec.layers[i].kind,
                "max_abs_w": float(np.max(np.abs(W))),
                "saturated": saturated,
                "max_round_err": float(err.max()),
                "mean_round_err": float(err.mean()),
            }
        )
    return rows


def save_quantized(qnet: QuantizedNetwork, path: str) -> None:
    spec = qnet.spec
    arrays = []
    blobs = []
    for wl, i in enumerate(qnet.weighted_indices()):
        arrays.append({"layer": i, "shape": list(qnet.mants[wl].shape)})
        blobs.append(np.ascontiguousarray(qnet.mants[wl], dtype="<i4").tobytes())
    qp = qnet.qp
    meta = {
        "name": spec.name,
        "lif": {"v_th": spec.lif.v_th, "v_reset": spec.lif.v_reset, "tau": spec.lif.tau},
        "input_shape": list(spec.input_shape),
        "layers": [ls.to_dict() for ls in spec.layers],
        "quant": {
            "k": qp.k, "vth_mant": qp.vth_mant, "delta_v": qp.delta_v,
            "delta_i": qp.delta_i, "wgt_exp": qp.wgt_exp, "bias": qp.bias,
        },
        "arrays": arrays,
    }
    with open(path, "wb") as f:
        f.write(QNT_MAGIC)
        f.write(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for blob in blobs:
            f.write(blob)


def load_quantized(path: str) -> QuantizedNetwork:
    meta, payload = _read_container(path, QNT_MAGIC)
    try:
        lif = LifParams(**meta["lif"])
        layers = tuple(LayerSpec.from_dict(d) for d in meta["layers"])
        spec = NetworkSpec(
            name=meta["name"], layers=layers, lif=lif,
            input_shape=tuple(meta["input_shape"]),
        )
        q = meta["quant"]
        qp = QuantParams(
            k=float(q["k"]), vth_mant=int(q["vth_mant"]), delta_v=int(q["delta_v"]),
            delta_i=int(q["delta_i"]), wgt_exp=int(q["wgt_exp"]), bias=int(q["bias"]),
        )
        array_meta = meta["arrays"]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"bad quantized-network metadata in {path}: {e}") from None

    mants = []
    offset = 0
    for entry in array_meta:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(payload):
            raise DataError(f"truncated quantized-network data in {path}")
        mants.append(
            np.frombuffer(payload[offset : offset + nbytes], dtype="<i4")
            .reshape(shape).copy()
        )
        offset += nbytes
    if offset != len(payload):
        raise DataError(f"trailing bytes in quantized network {path}")
    return QuantizedNetwork(spec=spec, qp=qp, mants=mants)
