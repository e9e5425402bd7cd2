"""Spiking network model: layer specs, LIF dynamics, forward simulation.

A network is a list of layers. ``conv2d`` and ``dense`` layers carry weights
and a population of leaky integrate-and-fire neurons; ``noise`` and
``dropout`` layers transform the signal between neuron populations and are
active only during training. Membrane update per step, with hard reset
folded in as a multiplicative gate on the previous potential:

    u[t] = u[t-1] * tau * (1 - o[t-1]) + W x[t] + b
    o[t] = 1 if u[t] > v_th else 0

A neuron that spiked therefore restarts integration from 0 (v_reset). The
forward pass can optionally replace the hard threshold with a bounded linear
ramp of width ``2 * v_th`` centered on the threshold; that mode is
differentiable everywhere and exists to let finite differences validate the
analytic gradients.

Tensors are float64 throughout. Image-shaped signals are (batch, channels,
rows, cols); dense signals are (batch, units). The flatten before a dense
layer is row-major over (channels, rows, cols).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import DataError
from .encoding import SpikeTrainBatch
from .numerics import Rng

__all__ = [
    "LifParams",
    "LayerSpec",
    "LayerState",
    "NetworkSpec",
    "Network",
    "ForwardTrace",
    "lif_step",
    "hard_spike",
    "smooth_spike",
    "conv2d",
    "conv2d_input_grad",
    "conv2d_weight_grad",
    "conv_output_size",
    "build_network",
    "network_from_specs",
    "ARCH_NAMES",
    "count_connections",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
    "networks_equal",
]

CKPT_MAGIC = b"LANESNN-CKPT-1\n"


@dataclass(frozen=True)
class LifParams:
    v_th: float = 0.2
    v_reset: float = 0.0
    tau: float = 0.2

    def __post_init__(self):
        if not self.v_th > 0.0:
            raise ValueError("v_th must be positive")
        if self.v_reset != 0.0:
            raise ValueError("v_reset must be 0 (reset is a multiplicative gate)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    padding: int | None = None
    stride: int | None = None
    in_units: int | None = None
    out_units: int | None = None
    drop_prob: float | None = None
    sigma: float | None = None

    def __post_init__(self):
        if self.kind == "conv2d":
            for name in ("in_channels", "out_channels", "kernel", "padding", "stride"):
                v = getattr(self, name)
                if v is None or v < 0 or (name != "padding" and v <= 0):
                    raise ValueError(f"conv2d layer needs positive {name}")
        elif self.kind == "dense":
            for name in ("in_units", "out_units"):
                v = getattr(self, name)
                if v is None or v <= 0:
                    raise ValueError(f"dense layer needs positive {name}")
        elif self.kind == "dropout":
            if self.drop_prob is None or not 0.0 <= self.drop_prob < 1.0:
                raise ValueError("dropout layer needs drop_prob in [0, 1)")
        elif self.kind == "noise":
            if self.sigma is None or self.sigma < 0.0:
                raise ValueError("noise layer needs sigma >= 0")
        else:
            raise ValueError(f"unknown layer kind: {self.kind}")

    @property
    def weighted(self) -> bool:
        return self.kind in ("conv2d", "dense")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for name in (
            "in_channels", "out_channels", "kernel", "padding", "stride",
            "in_units", "out_units", "drop_prob", "sigma",
        ):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


@dataclass
class LayerState:
    """Parameters of one weighted layer (None for stateless layers)."""

    W: np.ndarray | None = None
    b: np.ndarray | None = None


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    lif: LifParams
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("layers must not be empty")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (channels, rows, cols)")

    @property
    def output_units(self) -> int:
        shape = layer_output_shapes(self)[-1]
        if len(shape) != 1:
            raise ValueError("network must end in a dense layer")
        return shape[0]


@dataclass
class Network:
    spec: NetworkSpec
    states: list[LayerState]

    def weighted_indices(self) -> list[int]:
        return [i for i, ls in enumerate(self.spec.layers) if ls.weighted]


# ---------------------------------------------------------------------------
# Spike functions and the membrane update
# ---------------------------------------------------------------------------

def hard_spike(u: np.ndarray, v_th: float) -> np.ndarray:
    """All-or-nothing spike: strict threshold crossing."""
    return (u > v_th).astype(np.float64)


def smooth_spike(u: np.ndarray, v_th: float, a1: float) -> np.ndarray:
    """Linear ramp from 0 to 1 over the window |u - v_th| < a1 / 2."""
    return np.clip((u - v_th + a1 / 2.0) / a1, 0.0, 1.0)


def lif_step(
    u_prev: np.ndarray,
    o_prev: np.ndarray,
    drive: np.ndarray,
    params: LifParams,
    smooth: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """One membrane update. ``drive`` is the summed weighted input W x + b."""
    u = u_prev * params.tau * (1.0 - o_prev) + drive
    if smooth:
        o = smooth_spike(u, params.v_th, 2.0 * params.v_th)
    else:
        o = hard_spike(u, params.v_th)
    return u, o


# ---------------------------------------------------------------------------
# Convolution via column unrolling
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, padding: int, stride: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise ValueError("kernel/stride/padding leave no output pixels")
    return out


def _im2col(x: np.ndarray, kernel: int, padding: int, stride: int) -> tuple[np.ndarray, int, int]:
    b, c, h, w = x.shape
    ho = conv_output_size(h, kernel, padding, stride)
    wo = conv_output_size(w, kernel, padding, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, kernel, kernel, ho, wo), dtype=x.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            cols[:, :, ki, kj] = xp[
                :, :, ki : ki + stride * (ho - 1) + 1 : stride,
                kj : kj + stride * (wo - 1) + 1 : stride,
            ]
    return cols.reshape(b, c * kernel * kernel, ho * wo), ho, wo


def conv2d(
    x: np.ndarray, W: np.ndarray, b: np.ndarray, padding: int, stride: int
) -> np.ndarray:
    """Cross-correlate (batch, Cin, H, W) with (Cout, Cin, k, k) weights."""
    cout, cin, k, _ = W.shape
    if x.shape[1] != cin:
        raise ValueError(f"input channels {x.shape[1]} do not match weights {cin}")
    cols, ho, wo = _im2col(x, k, padding, stride)
    out = np.matmul(W.reshape(cout, cin * k * k), cols)
    out += b[:, None]
    return out.reshape(x.shape[0], cout, ho, wo)


def conv2d_input_grad(
    dy: np.ndarray, W: np.ndarray, x_shape: tuple, padding: int, stride: int
) -> np.ndarray:
    b, cin, h, w = x_shape
    cout, _, k, _ = W.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dcols = np.matmul(
        W.reshape(cout, cin * k * k).T, dy.reshape(b, cout, ho * wo)
    ).reshape(b, cin, k, k, ho, wo)
    dxp = np.zeros((b, cin, h + 2 * padding, w + 2 * padding), dtype=dy.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[
                :, :, ki : ki + stride * (ho - 1) + 1 : stride,
                kj : kj + stride * (wo - 1) + 1 : stride,
            ] += dcols[:, :, ki, kj]
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d_weight_grad(
    x: np.ndarray, dy: np.ndarray, kernel: int, padding: int, stride: int
) -> tuple[np.ndarray, np.ndarray]:
    b, cout = dy.shape[0], dy.shape[1]
    cols, ho, wo = _im2col(x, kernel, padding, stride)
    dW = np.matmul(dy.reshape(b, cout, ho * wo), cols.transpose(0, 2, 1)).sum(axis=0)
    cin = x.shape[1]
    return dW.reshape(cout, cin, kernel, kernel), dy.sum(axis=(0, 2, 3))


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

ARCH_NAMES = ("cnn", "fully-c600", "fully-c800", "fully-c800600")

_INPUT_SHAPE = (1, 20, 80)
_OUTPUT_UNITS = 400

_CNN_CONVS = (
    (1, 4, 3, 1, 1),
    (4, 4, 3, 1, 1),
    (4, 8, 3, 1, 2),
    (8, 8, 3, 1, 1),
    (8, 16, 3, 1, 2),
)

_FULLY_HIDDEN = {
    "fully-c600": (600,),
    "fully-c800": (800,),
    "fully-c800600": (800, 600),
}


def normalize_arch_name(name: str) -> str:
    key = "".join(ch for ch in name.lower() if ch.isalnum())
    for canonical in ARCH_NAMES:
        if key == "".join(ch for ch in canonical if ch.isalnum()):
            return canonical
    raise ValueError(f"unknown architecture: {name}")


def layer_output_shapes(spec: NetworkSpec) -> list[tuple]:
    """Output shape (without batch) after every layer in order."""
    shape: tuple = spec.input_shape
    shapes = []
    for ls in spec.layers:
        if ls.kind == "conv2d":
            c, h, w = shape
            if c != ls.in_channels:
                raise ValueError(
                    f"conv2d expects {ls.in_channels} channels, got {c}"
                )
            shape = (
                ls.out_channels,
                conv_output_size(h, ls.kernel, ls.padding, ls.stride),
                conv_output_size(w, ls.kernel, ls.padding, ls.stride),
            )
        elif ls.kind == "dense":
            flat = int(np.prod(shape))
            if flat != ls.in_units:
                raise ValueError(f"dense expects {ls.in_units} inputs, got {flat}")
            shape = (ls.out_units,)
        shapes.append(shape)
    return shapes


def count_connections(spec: NetworkSpec) -> dict[str, int]:
    """Synaptic connection count per weighted layer and in total.

    For a convolution every output pixel owns its fan-in, so the layer
    contributes out_pixels * out_channels * in_channels * kernel^2; a dense
    layer contributes in_units * out_units.
    """
    shapes = layer_output_shapes(spec)
    counts: dict[str, int] = {}
    total = 0
    wl = 0
    for ls, out_shape in zip(spec.layers, shapes):
        if ls.kind == "conv2d":
            c, h, w = out_shape
            n = h * w * c * ls.in_channels * ls.kernel * ls.kernel
        elif ls.kind == "dense":
            n = ls.in_units * ls.out_units
        else:
            continue
        counts[f"{wl}:{ls.kind}"] = n
        total += n
        wl += 1
    counts["total"] = total
    return counts


def network_from_specs(
    layers: list[LayerSpec],
    lif: LifParams,
    input_shape: tuple[int, int, int],
    rng: Rng,
    init_scale: float = 1.0,
    name: str = "custom",
) -> Network:
    """Build a network with uniform fan-in weight init and zero biases."""
    spec = NetworkSpec(name=name, layers=tuple(layers), lif=lif, input_shape=input_shape)
    layer_output_shapes(spec)
    states = []
    for ls in spec.layers:
        if ls.kind == "conv2d":
            fan_in = ls.in_channels * ls.kernel * ls.kernel
            bound = init_scale / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, (ls.out_channels, ls.in_channels, ls.kernel, ls.kernel))
            states.append(LayerState(W=W, b=np.zeros(ls.out_channels)))
        elif ls.kind == "dense":
            bound = init_scale / np.sqrt(ls.in_units)
            W = rng.uniform(-bound, bound, (ls.out_units, ls.in_units))
            states.append(LayerState(W=W, b=np.zeros(ls.out_units)))
        else:
            states.append(LayerState())
    return Network(spec=spec, states=states)


def build_network(
    name: str,
    rng: Rng,
    lif: LifParams | None = None,
    noise_sigma: float = 0.1,
    dropout_prob: float = 0.1,
    init_scale: float = 1.0,
) -> Network:
    """Build one of the four canonical lane-extraction architectures.

    Every weighted layer is preceded by a training-time Gaussian noise layer;
    the convolutional network additionally has dropout between its last
    convolution and the readout layer.
    """
    canonical = normalize_arch_name(name)
    lif = lif or LifParams()
    layers: list[LayerSpec] = []

    def weighted_with_noise(ls: LayerSpec):
        layers.append(LayerSpec(kind="noise", sigma=noise_sigma))
        layers.append(ls)

    if canonical == "cnn":
        for cin, cout, k, pad, stride in _CNN_CONVS:
            weighted_with_noise(
                LayerSpec(
                    kind="conv2d", in_channels=cin, out_channels=cout,
                    kernel=k, padding=pad, stride=stride,
                )
            )
        layers.append(LayerSpec(kind="dropout", drop_prob=dropout_prob))
        flat = 16 * 5 * 20
        weighted_with_noise(LayerSpec(kind="dense", in_units=flat, out_units=_OUTPUT_UNITS))
    else:
        widths = (int(np.prod(_INPUT_SHAPE)),) + _FULLY_HIDDEN[canonical] + (_OUTPUT_UNITS,)
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            weighted_with_noise(LayerSpec(kind="dense", in_units=n_in, out_units=n_out))

    return network_from_specs(
        layers, lif, _INPUT_SHAPE, rng, init_scale=init_scale, name=canonical
    )


# ---------------------------------------------------------------------------
# Forward simulation
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Per weighted layer, per step records needed by the backward pass.

    ``inputs[l][t]`` is the tensor actually multiplied by the weights: the
    (possibly noised/dropped) input for dense layers, the unrolled column
    matrix for convolutions. ``x_shapes[l]`` keeps the image shape feeding a
    convolution so its input gradient can be folded back. ``gates[l][t]`` is
    the multiplicative dropout factor between the previous population's
    spikes and this layer's input, or None when no dropout intervened; ``u``
    and ``o`` are membrane potentials and emitted spikes.
    """

    inputs: list[list[np.ndarray]] = field(default_factory=list)
    gates: list[list[np.ndarray | None]] = field(default_factory=list)
    u: list[list[np.ndarray]] = field(default_factory=list)
    o: list[list[np.ndarray]] = field(default_factory=list)
    x_shapes: list[tuple | None] = field(default_factory=list)
    smooth: bool = False


def forward(
    net: Network,
    batch: SpikeTrainBatch,
    rng: Rng | None = None,
    training: bool = False,
    smooth: bool = False,
) -> tuple[np.ndarray, ForwardTrace]:
    """Simulate the network over all encoding steps of a batch.

    Returns per-neuron firing rates (batch, out_units), i.e. spike counts
    divided by the number of steps, together with the trace of the run.
    Membranes start at 0 for every presentation. Noise and dropout draw from
    ``rng`` and fire only when ``training`` is set.
    """
    spec = net.spec
    if batch.shape[1:4] != spec.input_shape:
        raise ValueError(
            f"batch shape {batch.shape[1:4]} does not match network input "
            f"{spec.input_shape}"
        )
    if training and rng is None:
        raise ValueError("rng is required for a training forward pass")

    spikes = batch.unpacked()
    batch_n = batch.shape[0]
    steps = batch.steps
    params = spec.lif
    weighted = [i for i, ls in enumerate(spec.layers) if ls.weighted]
    n_weighted = len(weighted)

    trace = ForwardTrace(
        inputs=[[] for _ in range(n_weighted)],
        gates=[[] for _ in range(n_weighted)],
        u=[[] for _ in range(n_weighted)],
        o=[[] for _ in range(n_weighted)],
        x_shapes=[None] * n_weighted,
        smooth=smooth,
    )
    u_prev: list[np.ndarray | None] = [None] * n_weighted
    o_prev: list[np.ndarray | None] = [None] * n_weighted
    spike_sum: np.ndarray | None = None

    for t in range(steps):
        cur = spikes[..., t].astype(np.float64)
        gate: np.ndarray | None = None
        wl = 0
        for i, ls in enumerate(spec.layers):
            if ls.kind == "noise":
                if training and ls.sigma > 0.0:
                    cur = cur + rng.gaussian(0.0, ls.sigma, size=cur.shape)
            elif ls.kind == "dropout":
                if training and ls.drop_prob > 0.0:
                    keep = rng.uniform(size=cur.shape) >= ls.drop_prob
                    mask = keep.astype(np.float64) / (1.0 - ls.drop_prob)
                    cur = cur * mask
                    gate = mask if gate is None else gate * mask
            else:
                state = net.states[i]
                if ls.kind == "dense":
                    if cur.ndim > 2:
                        cur = cur.reshape(batch_n, -1)
                        if gate is not None:
                            gate = gate.reshape(batch_n, -1)
                    drive = cur @ state.W.T + state.b
                    recorded = cur
                else:
                    if cur.shape[1] != ls.in_channels:
                        raise ValueError(
                            f"input channels {cur.shape[1]} do not match "
                            f"weights {ls.in_channels}"
                        )
                    cols, ho, wo = _im2col(cur, ls.kernel, ls.padding, ls.stride)
                    cout = ls.out_channels
                    drive = (
                        np.matmul(state.W.reshape(cout, -1), cols) + state.b[:, None]
                    ).reshape(batch_n, cout, ho, wo)
                    trace.x_shapes[wl] = cur.shape
                    recorded = cols
                if u_prev[wl] is None:
                    u_prev[wl] = np.zeros_like(drive)
                    o_prev[wl] = np.zeros_like(drive)
                u, o = lif_step(u_prev[wl], o_prev[wl], drive, params, smooth=smooth)
                trace.inputs[wl].append(recorded)
                trace.gates[wl].append(gate)
                trace.u[wl].append(u)
                trace.o[wl].append(o)
                u_prev[wl], o_prev[wl] = u, o
                cur = o
                gate = None
                wl += 1
        spike_sum = cur.copy() if spike_sum is None else spike_sum + cur

    rates = spike_sum / float(steps)
    return rates, trace


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(net: Network, path: str, extra: dict | None = None) -> None:
    """Serialize spec and parameters: magic line, one JSON line, raw float64."""
    spec = net.spec
    arrays = []
    blobs = []
    for i in net.weighted_indices():
        st = net.states[i]
        for pname, arr in (("W", st.W), ("b", st.b)):
            arrays.append({"layer": i, "name": pname, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = {
        "name": spec.name,
        "lif": {"v_th": spec.lif.v_th, "v_reset": spec.lif.v_reset, "tau": spec.lif.tau},
        "input_shape": list(spec.input_shape),
        "layers": [ls.to_dict() for ls in spec.layers],
        "arrays": arrays,
    }
    if extra:
        meta["extra"] = extra
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for blob in blobs:
            f.write(blob)


def _read_container(path: str, magic: bytes) -> tuple[dict, bytes]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    if not raw.startswith(magic):
        raise DataError(f"bad container magic in {path}")
    rest = raw[len(magic):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise DataError(f"truncated container header in {path}")
    try:
        meta = json.loads(rest[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"bad container metadata in {path}: {e}") from None
    return meta, rest[nl + 1:]


def load_checkpoint(path: str) -> tuple[Network, dict]:
    """Rebuild a network from disk; returns (network, extra metadata)."""
    meta, payload = _read_container(path, CKPT_MAGIC)
    try:
        lif = LifParams(**meta["lif"])
        layers = tuple(LayerSpec.from_dict(d) for d in meta["layers"])
        spec = NetworkSpec(
            name=meta["name"], layers=layers, lif=lif,
            input_shape=tuple(meta["input_shape"]),
        )
        array_meta = meta["arrays"]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"bad checkpoint metadata in {path}: {e}") from None

    states = [LayerState() for _ in spec.layers]
    offset = 0
    for entry in array_meta:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        if offset + nbytes > len(payload):
            raise DataError(f"truncated checkpoint array data in {path}")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
        st = states[entry["layer"]]
        if entry["name"] == "W":
            st.W = arr
        else:
            st.b = arr
    if offset != len(payload):
        raise DataError(f"trailing bytes in checkpoint {path}")
    net = Network(spec=spec, states=states)
    for i in net.weighted_indices():
        if net.states[i].W is None or net.states[i].b is None:
            raise DataError(f"checkpoint {path} missing arrays for layer {i}")
    return net, meta.get("extra", {})


def networks_equal(a: Network, b: Network) -> bool:
    if a.spec != b.spec:
        return False
    for sa, sb in zip(a.states, b.states):
        for pa, pb in ((sa.W, sb.W), (sa.b, sb.b)):
            if (pa is None) != (pb is None):
                return False
            if pa is not None and not np.array_equal(pa, pb):
                return False
    return True
