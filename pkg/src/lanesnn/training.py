"""Gradient training of the spiking networks.

The backward pass differentiates the unrolled two-dimensional dynamics: error
flows backward through time within each neuron population (via the leak and
the reset gate) and backward through layers within each step. The hard
threshold is non-differentiable, so its derivative is approximated by a
rectangular pulse of width ``a1`` centered on the threshold with height
``1/a1`` (unit area). In the smooth forward mode the ramp's true derivative
is exactly that rectangle, which is what makes finite-difference validation
of this module possible.

Per step t and weighted layer l, with ``du`` denoting dL/du[t+1] carried from
the next step:

    do[t]  = (spatial gradient from layer l+1, or the rate gradient at the top)
             + du * (-tau * u[t])          # spiking resets the membrane
    du[t]  = do[t] * h(u[t]) + du * tau * (1 - o[t])
    dW    += du[t] (outer) input[t],  db += sum du[t]

The optimizer is Adam with decoupled weight decay in the form

    w <- (1 - decay) * w - lr * m_hat / (sqrt(v_hat) + eps)

i.e. the decay multiplies the parameter directly and is not scaled by the
learning rate.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .dataset import DataError, Sample
from .encoding import encode_batch
from .numerics import Rng
from .snn import (
    Network,
    conv2d_input_grad,
    forward,
    save_checkpoint,
)

__all__ = [
    "NumericError",
    "TrainConfig",
    "LossReport",
    "mse_loss",
    "wce_loss",
    "joint_loss",
    "loss_grad",
    "surrogate_derivative",
    "stbp_backward",
    "Adam",
    "TrainResult",
    "train",
    "mean_test_iou",
    "write_metrics_csv",
    "restore_best",
]

log = logging.getLogger(__name__)

RATE_CLAMP = 1e-7


class NumericError(Exception):
    """Raised when training produces a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    steps: int = 30
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 1e-4
    loss_mix: float = 0.3
    pos_weight: float = 4.0
    surrogate_width: float | None = None
    train_bias: bool = False
    reset_grad: bool = True
    eval_every: int = 5
    seed: int = 1

    def __post_init__(self):
        if not 0.0 <= self.loss_mix <= 0.5:
            raise ValueError("loss_mix must lie in [0, 0.5]")
        if self.pos_weight <= 0.0:
            raise ValueError("pos_weight must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.steps <= 0:
            raise ValueError("steps must be positive")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    total: float
    mse: float
    wce: float


def mse_loss(rates: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean((rates - targets) ** 2))


def wce_loss(rates: np.ndarray, targets: np.ndarray, pos_weight: float) -> float:
    """Cross entropy with the positive class up-weighted by ``pos_weight``.

    Rates are clamped away from 0 and 1 before the logs; the mean runs over
    every pixel of every sample.
    """
    yc = np.clip(rates, RATE_CLAMP, 1.0 - RATE_CLAMP)
    per_pixel = -(pos_weight * targets * np.log(yc) + (1.0 - targets) * np.log1p(-yc))
    return float(np.mean(per_pixel))


def joint_loss(
    rates: np.ndarray, targets: np.ndarray, loss_mix: float, pos_weight: float
) -> LossReport:
    """total = (1 - loss_mix) * MSE + loss_mix * WCE."""
    m = mse_loss(rates, targets)
    w = wce_loss(rates, targets, pos_weight)
    return LossReport(total=(1.0 - loss_mix) * m + loss_mix * w, mse=m, wce=w)


def loss_grad(
    rates: np.ndarray, targets: np.ndarray, loss_mix: float, pos_weight: float
) -> np.ndarray:
    """d(batch-mean joint loss)/d(rates), including the clamp's dead zones."""
    b, n = rates.shape
    d_mse = 2.0 * (rates - targets)
    yc = np.clip(rates, RATE_CLAMP, 1.0 - RATE_CLAMP)
    inside = (rates > RATE_CLAMP) & (rates < 1.0 - RATE_CLAMP)
    d_wce = (-pos_weight * targets / yc + (1.0 - targets) / (1.0 - yc)) * inside
    return ((1.0 - loss_mix) * d_mse + loss_mix * d_wce) / (b * n)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def surrogate_derivative(u: np.ndarray, v_th: float, a1: float) -> np.ndarray:
    """Unit-area rectangular pulse: 1/a1 where |u - v_th| < a1/2, else 0."""
    if a1 <= 0.0:
        raise ValueError("a1 must be positive")
    return (np.abs(u - v_th) < a1 / 2.0).astype(np.float64) / a1


def stbp_backward(
    net: Network, trace, targets: np.ndarray, cfg: TrainConfig
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients (dW, db) for every weighted layer, in layer order.

    ``trace`` is the record produced by :func:`lanesnn.snn.forward` for one
    batch; ``targets`` is (batch, out_units). Gradients are those of the
    batch-mean joint loss.
    """
    spec = net.spec
    weighted = net.weighted_indices()
    n_layers = len(weighted)
    steps = len(trace.u[0])
    v_th = spec.lif.v_th
    tau = spec.lif.tau
    a1 = cfg.surrogate_width if cfg.surrogate_width is not None else 2.0 * v_th

    rates = sum(trace.o[n_layers - 1]) / float(steps)
    do_rate = loss_grad(rates, targets, cfg.loss_mix, cfg.pos_weight) / float(steps)

    d_weights: list[np.ndarray] = []
    d_biases: list[np.ndarray] = []
    for li in weighted:
        d_weights.append(np.zeros_like(net.states[li].W))
        d_biases.append(np.zeros_like(net.states[li].b))

    du_carry: list[np.ndarray | None] = [None] * n_layers

    for t in reversed(range(steps)):
        downstream: np.ndarray | None = None
        for l in reversed(range(n_layers)):
            li = weighted[l]
            ls = spec.layers[li]
            st = net.states[li]
            u_t = trace.u[l][t]
            o_t = trace.o[l][t]

            if l == n_layers - 1:
                do = do_rate.copy()
            else:
                do = downstream
            if cfg.reset_grad and du_carry[l] is not None:
                do = do + du_carry[l] * (-tau * u_t)

            du = do * surrogate_derivative(u_t, v_th, a1)
            if du_carry[l] is not None:
                du = du + du_carry[l] * (tau * (1.0 - o_t))
            du_carry[l] = du

            inp = trace.inputs[l][t]
            if ls.kind == "dense":
                d_weights[l] += du.T @ inp
                d_biases[l] += du.sum(axis=0)
                dinp = du @ st.W
            else:
                # inp holds the forward's unrolled column matrix (B, S, L)
                b_n, cout = du.shape[0], du.shape[1]
                du_flat = du.reshape(b_n, cout, -1)
                d_weights[l] += np.matmul(
                    du_flat, inp.transpose(0, 2, 1)
                ).sum(axis=0).reshape(st.W.shape)
                d_biases[l] += du.sum(axis=(0, 2, 3))
                dinp = conv2d_input_grad(
                    du, st.W, trace.x_shapes[l], ls.padding, ls.stride
                )

            if l > 0:
                gate = trace.gates[l][t]
                if gate is not None:
                    dinp = dinp * gate
                downstream = dinp.reshape(trace.o[l - 1][t].shape)

    return list(zip(d_weights, d_biases))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with decoupled weight decay.

    The decay term shrinks the parameter toward zero by a fixed fraction per
    step, independent of the learning rate:

        w <- (1 - decay) * w - lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("params/grads length does not match optimizer state")
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p *= 1.0 - c.decay
            p -= c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    best_iou: float = float("nan")
    best_epoch: int = -1
    best_states: list | None = None
    optimizer_steps: int = 0


def _flat_labels(samples: list[Sample], out_units: int) -> np.ndarray:
    labels = np.stack([s.label.data.reshape(-1) for s in samples])
    if labels.shape[1] != out_units:
        raise DataError(
            f"label size {labels.shape[1]} does not match network output {out_units}"
        )
    return labels


def _check_inputs(samples: list[Sample], input_shape: tuple[int, int, int]) -> None:
    _c, rows, cols = input_shape
    for s in samples:
        if (s.input.rows, s.input.cols) != (rows, cols):
            raise DataError(
                f"sample {s.id} input is {s.input.rows}x{s.input.cols}, "
                f"expected {rows}x{cols}"
            )


def mean_test_iou(
    net: Network, samples: list[Sample], steps: int, rng: Rng, batch_size: int = 4
) -> float:
    """Mean IoU of the network over ``samples`` with a fresh encoding draw."""
    preds, labels = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        batch = encode_batch([s.input.data for s in chunk], steps, rng)
        rates, _ = forward(net, batch, training=False)
        for s, r in zip(chunk, rates):
            preds.append((s.id, r))
            labels.append(s.label.data.reshape(-1))
    return evaluation.evaluate(preds, labels, steps).mean_iou


def _trained_params(net: Network, cfg: TrainConfig) -> list[np.ndarray]:
    params = []
    for li in net.weighted_indices():
        params.append(net.states[li].W)
        if cfg.train_bias:
            params.append(net.states[li].b)
    return params


def train(
    net: Network,
    train_samples: list[Sample],
    test_samples: list[Sample],
    cfg: TrainConfig,
    rng: Rng,
    out_dir: str | None = None,
) -> TrainResult:
    """Run the full training loop, mutating ``net`` in place.

    Spike trains are regenerated from the input intensities every epoch, so
    the network never sees the same stochastic encoding twice. Test IoU is
    measured every ``cfg.eval_every`` epochs (and on the last one); the
    parameters achieving the best IoU are kept and, when ``out_dir`` is
    given, written to ``checkpoint.ck`` alongside ``metrics.csv``.
    """
    if not train_samples:
        raise ValueError("train_samples must not be empty")
    spec = net.spec
    out_units = spec.output_units
    _check_inputs(train_samples, spec.input_shape)
    if test_samples:
        _check_inputs(test_samples, spec.input_shape)
        _flat_labels(test_samples, out_units)
    inputs = [s.input.data for s in train_samples]
    labels = _flat_labels(train_samples, out_units)

    params = _trained_params(net, cfg)
    adam = Adam(params, cfg)
    result = TrainResult()
    best_iou = -1.0

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    n = len(train_samples)
    for epoch in range(1, cfg.epochs + 1):
        erng = rng.child(epoch)
        enc_rng = erng.child(0)
        sto_rng = erng.child(1)
        perm = erng.child(2).permutation(n)

        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = encode_batch([inputs[i] for i in idx], cfg.steps, enc_rng)
            y = labels[idx]
            rates, trace = forward(net, batch, rng=sto_rng, training=True)
            report = joint_loss(rates, y, cfg.loss_mix, cfg.pos_weight)
            if not np.isfinite(report.total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {adam.t + 1}"
                )
            grads_wb = stbp_backward(net, trace, y, cfg)
            grads = []
            for dw, db in grads_wb:
                grads.append(dw)
                if cfg.train_bias:
                    grads.append(db)
            adam.step(params, grads)
            sums += len(idx) * np.array([report.total, report.mse, report.wce])

        loss_total, loss_mse, loss_wce = sums / n
        row = {
            "epoch": epoch,
            "loss_total": loss_total,
            "loss_mse": loss_mse,
            "loss_wce": loss_wce,
            "test_iou": None,
        }

        if test_samples and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            iou = mean_test_iou(net, test_samples, cfg.steps, erng.child(3), cfg.batch_size)
            row["test_iou"] = iou
            if iou > best_iou:
                best_iou = iou
                result.best_iou = iou
                result.best_epoch = epoch
                result.best_states = [
                    (net.states[li].W.copy(), net.states[li].b.copy())
                    for li in net.weighted_indices()
                ]
                if out_dir is not None:
                    save_checkpoint(
                        net,
                        os.path.join(out_dir, "checkpoint.ck"),
                        extra={"epoch": epoch, "test_iou": iou},
                    )
            log.info("epoch %d loss %.6g test_iou %.4f", epoch, loss_total, iou)
        else:
            log.info("epoch %d loss %.6g", epoch, loss_total)

        result.metrics.append(row)

    result.optimizer_steps = adam.t
    if out_dir is not None:
        write_metrics_csv(result.metrics, os.path.join(out_dir, "metrics.csv"))
        if not test_samples:
            save_checkpoint(net, os.path.join(out_dir, "checkpoint.ck"), extra={})
    return result


def write_metrics_csv(metrics: list[dict], path: str) -> None:
    rows = []
    for row in metrics:
        rows.append(
            [
                str(row["epoch"]),
                evaluation.fmt_num(row["loss_total"]),
                evaluation.fmt_num(row["loss_mse"]),
                evaluation.fmt_num(row["loss_wce"]),
                "" if row["test_iou"] is None else evaluation.fmt_num(row["test_iou"]),
            ]
        )
    evaluation.write_csv(
        path, ["epoch", "loss_total", "loss_mse", "loss_wce", "test_iou"], rows
    )


def restore_best(net: Network, result: TrainResult) -> None:
    """Copy the best-IoU parameters captured during training back into ``net``."""
    if result.best_states is None:
        return
    for (w, b), li in zip(result.best_states, net.weighted_indices()):
        net.states[li].W[...] = w
        net.states[li].b[...] = b
