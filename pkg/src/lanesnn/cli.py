"""Command-line pipeline from scene generation to quantized inference.

Subcommands: gen-data, preprocess, train, eval, quantize, infer-quant.
Options resolve in three layers: built-in defaults, then a ``key = value``
config file (keys spelled like the flags, without the leading dashes), then
explicit flags, later layers winning. Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass

from . import report
from .dataset import (
    DataError,
    MANIFEST_NAME,
    generate_synthetic,
    load_sample,
    load_split,
    read_manifest,
    save_split,
)
from .encoding import encode_batch
from .evaluation import (
    evaluate,
    fmt_num,
    save_rate_masks,
    write_csv,
    write_pr_csv,
    write_report_csv,
)
from .numerics import Rng
from .preprocess import PreprocessConfig, process_stream
from .quantsim import (
    evaluate_quantized,
    load_quantized,
    quant_report_rows,
    quantize,
    save_quantized,
)
from .snn import LifParams, build_network, forward, load_checkpoint, ARCH_NAMES
from .training import NumericError, TrainConfig, train

__all__ = ["main"]

LABEL_SHAPE = (10, 40)


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text}")


@dataclass(frozen=True)
class Opt:
    key: str                # flag spelling without leading dashes
    type: type
    default: object = None
    help: str = ""
    required: bool = False

    @property
    def dest(self) -> str:
        return self.key.replace("-", "_")


_COMMON_SEED = Opt("seed", int, 1, "master random seed")

_OPTS: dict[str, list[Opt]] = {
    "gen-data": [
        Opt("out", str, required=True, help="output directory (train/ and test/ splits)"),
        Opt("n-train", int, 200, "number of training scenes"),
        Opt("n-test", int, 50, "number of test scenes"),
        Opt("width", int, 1280, "scene width in pixels"),
        Opt("height", int, 800, "scene height in pixels"),
        _COMMON_SEED,
    ],
    "preprocess": [
        Opt("data", str, required=True, help="raw data root with train/ and test/"),
        Opt("out", str, required=True, help="output directory for processed splits"),
        Opt("augment", int, 271, "augmented copies appended to the training split"),
        _COMMON_SEED,
    ],
    "train": [
        Opt("data", str, required=True, help="processed data root"),
        Opt("out", str, required=True, help="output directory (checkpoint, metrics, figures)"),
        Opt("arch", str, required=True,
            help="architecture: " + ", ".join(ARCH_NAMES)),
        Opt("epochs", int, 200, "training epochs"),
        Opt("batch-size", int, 4, "samples per optimizer step"),
        Opt("steps", int, 30, "encoding steps per presentation"),
        Opt("lr", float, 1e-4, "Adam learning rate"),
        Opt("lambda", float, 1e-4, "decoupled weight decay per step"),
        Opt("p", float, 0.3, "loss mix: weight of cross entropy vs squared error"),
        Opt("beta", float, 4.0, "positive-class weight inside the cross entropy"),
        Opt("vth", float, 0.2, "spike threshold"),
        Opt("tau", float, 0.2, "membrane retain factor per step"),
        Opt("noise-sigma", float, 0.1, "training-time Gaussian noise on layer inputs"),
        Opt("dropout", float, 0.1, "dropout probability before the readout (cnn only)"),
        Opt("eval-every", int, 5, "epochs between test evaluations"),
        Opt("train-bias", _parse_bool, False, "also train bias terms"),
        Opt("reset-grad", _parse_bool, True,
            "propagate gradient through the membrane reset gate"),
        _COMMON_SEED,
    ],
    "eval": [
        Opt("ckpt", str, required=True, help="checkpoint file"),
        Opt("data", str, required=True, help="processed data root or split directory"),
        Opt("out", str, required=True, help="output directory for reports and figures"),
        Opt("emit-masks", str, None, "also write per-image rate and decision masks here"),
        Opt("steps", int, 30, "encoding steps per presentation"),
        Opt("batch-size", int, 4, "forward batch size"),
        _COMMON_SEED,
    ],
    "quantize": [
        Opt("ckpt", str, required=True, help="checkpoint file"),
        Opt("out", str, required=True, help="output quantized-network file"),
        Opt("report", str, None, "write a per-layer rounding report CSV here"),
    ],
    "infer-quant": [
        Opt("qnt", str, required=True, help="quantized-network file"),
        Opt("data", str, required=True, help="processed data root or split directory"),
        Opt("out", str, None, "output directory for reports and figures"),
        Opt("blank", int, 10, "zero-input steps between samples in the stream"),
        Opt("steps", int, 30, "encoding steps per presentation"),
        Opt("ckpt", str, None, "float checkpoint for an IoU comparison"),
        _COMMON_SEED,
    ],
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="lanesnn", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in _OPTS.items():
        sub = subs.add_parser(name)
        sub.add_argument("--config", dest="config", default=None,
                         help="key = value file supplying defaults for any option")
        for opt in opts:
            extra = "required" if opt.required else f"default: {opt.default}"
            sub.add_argument(
                f"--{opt.key}", dest=opt.dest, default=None,
                help=f"{opt.help} ({extra})",
            )
    return parser


def _parse_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    values: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"config {path} line {lineno}: expected key = value")
            key, _, raw = stripped.partition("=")
            values[key.strip()] = raw.strip()
    return values


def _resolve(ns: argparse.Namespace, opts: list[Opt]) -> dict:
    file_vals = _parse_config_file(ns.config) if ns.config else {}
    known = {opt.key for opt in opts}
    for key in file_vals:
        if key not in known:
            raise ValueError(f"unknown config key: {key}")
    resolved = {}
    for opt in opts:
        raw = getattr(ns, opt.dest)
        if raw is None and opt.key in file_vals:
            raw = file_vals[opt.key]
        if raw is None:
            if opt.required:
                raise ValueError(f"missing required option --{opt.key}")
            resolved[opt.dest] = opt.default
            continue
        try:
            resolved[opt.dest] = opt.type(raw)
        except (TypeError, ValueError):
            raise ValueError(f"invalid value for --{opt.key}: {raw}") from None
    return resolved


def _split_dir(data: str, split: str) -> str:
    """Accept either a split directory itself or a root containing it."""
    if os.path.exists(os.path.join(data, MANIFEST_NAME)):
        return data
    nested = os.path.join(data, split)
    if os.path.exists(os.path.join(nested, MANIFEST_NAME)):
        return nested
    raise DataError(f"missing file: {os.path.join(data, MANIFEST_NAME)}")


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def _run_gen_data(o: dict) -> None:
    rng = Rng(o["seed"])

    def scenes(n: int, sub_rng: Rng, prefix: str):
        # One scene at a time so raw frames never pile up in memory.
        for i in range(n):
            s = generate_synthetic(1, sub_rng, o["width"], o["height"], prefix)[0]
            s.id = f"{prefix}{i:04d}"
            yield s

    save_split(os.path.join(o["out"], "train"), scenes(o["n_train"], rng.child(0), "train-"))
    save_split(os.path.join(o["out"], "test"), scenes(o["n_test"], rng.child(1), "test-"))
    print(f"wrote {o['n_train']} train and {o['n_test']} test scenes to {o['out']}")


def _disk_loader(directory: str):
    rows = read_manifest(os.path.join(directory, MANIFEST_NAME))

    def load_fn(i: int):
        input_name, label_name, sample_id = rows[i]
        return load_sample(
            os.path.join(directory, input_name),
            os.path.join(directory, label_name),
            sample_id,
        )

    return load_fn, len(rows)


def _run_preprocess(o: dict) -> None:
    cfg = PreprocessConfig(augment_count=o["augment"])
    rng = Rng(o["seed"])
    train_fn, n_train = _disk_loader(_split_dir(o["data"], "train"))
    test_fn, n_test = _disk_loader(_split_dir(o["data"], "test"))
    train_p = process_stream(train_fn, n_train, cfg, rng.child(0),
                             augment_split=o["augment"] > 0)
    test_p = process_stream(test_fn, n_test, cfg)
    save_split(os.path.join(o["out"], "train"), train_p)
    save_split(os.path.join(o["out"], "test"), test_p)
    print(
        f"processed {len(train_p)} train ({n_train} raw + "
        f"{len(train_p) - n_train} augmented) and {len(test_p)} test samples"
    )


def _run_train(o: dict) -> None:
    rng = Rng(o["seed"])
    lif = LifParams(v_th=o["vth"], tau=o["tau"])
    net = build_network(
        o["arch"], rng.child(0), lif=lif,
        noise_sigma=o["noise_sigma"], dropout_prob=o["dropout"],
    )
    cfg = TrainConfig(
        epochs=o["epochs"], batch_size=o["batch_size"], steps=o["steps"],
        lr=o["lr"], decay=o["lambda"], loss_mix=o["p"], pos_weight=o["beta"],
        train_bias=o["train_bias"], reset_grad=o["reset_grad"],
        eval_every=o["eval_every"], seed=o["seed"],
    )
    train_s = load_split(_split_dir(o["data"], "train"))
    test_s = load_split(_split_dir(o["data"], "test"))
    result = train(net, train_s, test_s, cfg, rng.child(1), out_dir=o["out"])
    report.save_loss_curves(result.metrics, os.path.join(o["out"], "loss_curve.png"))
    print(
        f"best test IoU {fmt_num(result.best_iou)} at epoch {result.best_epoch}; "
        f"checkpoint and metrics in {o['out']}"
    )


def _collect_predictions(net, samples, steps: int, batch_size: int, rng: Rng):
    preds, labels = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        batch = encode_batch([s.input.data for s in chunk], steps, rng)
        rates, _ = forward(net, batch, training=False)
        for s, r in zip(chunk, rates):
            preds.append((s.id, r))
            labels.append(s.label.data.reshape(-1))
    return preds, labels


def _write_eval_outputs(rep, preds, samples, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_report_csv(rep, os.path.join(out_dir, "report.csv"))
    write_pr_csv(rep, os.path.join(out_dir, "pr_curve.csv"))
    report.save_pr_curve(rep.pr_curve, os.path.join(out_dir, "pr_curve.png"))
    by_id = {s.id: s for s in samples}
    panels = [
        (pid, by_id[pid].input.data, by_id[pid].label.data, rates.reshape(LABEL_SHAPE))
        for pid, rates in preds
    ]
    report.save_mask_grid(panels, os.path.join(out_dir, "masks_grid.png"))


def _run_eval(o: dict) -> None:
    net, _extra = load_checkpoint(o["ckpt"])
    samples = load_split(_split_dir(o["data"], "test"))
    rng = Rng(o["seed"]).child(2)
    preds, labels = _collect_predictions(net, samples, o["steps"], o["batch_size"], rng)
    rep = evaluate(preds, labels, o["steps"])
    _write_eval_outputs(rep, preds, samples, o["out"])
    if o["emit_masks"]:
        save_rate_masks(preds, LABEL_SHAPE, rep.mean_best_th, o["emit_masks"])
    print(f"mean_iou={fmt_num(rep.mean_iou)} mean_best_th={fmt_num(rep.mean_best_th)}")


def _run_quantize(o: dict) -> None:
    net, _extra = load_checkpoint(o["ckpt"])
    qnet = quantize(net)
    save_quantized(qnet, o["out"])
    if o["report"]:
        rows = quant_report_rows(net, qnet)
        write_csv(
            o["report"],
            ["layer", "kind", "max_abs_w", "saturated", "max_round_err", "mean_round_err"],
            [
                [str(r["layer"]), r["kind"], fmt_num(r["max_abs_w"]), str(r["saturated"]),
                 fmt_num(r["max_round_err"]), fmt_num(r["mean_round_err"])]
                for r in rows
            ],
        )
        report.save_quant_report_figure(rows, os.path.splitext(o["report"])[0] + ".png")
    qp = qnet.qp
    print(f"k={fmt_num(qp.k)} vth_mant={qp.vth_mant} delta_v={qp.delta_v}")


def _run_infer_quant(o: dict) -> None:
    qnet = load_quantized(o["qnt"])
    samples = load_split(_split_dir(o["data"], "test"))
    rep = evaluate_quantized(
        qnet, samples, o["steps"], Rng(o["seed"]).child(2), blank=o["blank"]
    )
    print(f"quant mean_iou={fmt_num(rep.mean_iou)} mean_best_th={fmt_num(rep.mean_best_th)}")
    if o["ckpt"]:
        net, _extra = load_checkpoint(o["ckpt"])
        preds, labels = _collect_predictions(
            net, samples, o["steps"], 4, Rng(o["seed"]).child(2)
        )
        float_rep = evaluate(preds, labels, o["steps"])
        delta = float_rep.mean_iou - rep.mean_iou
        print(
            f"float mean_iou={fmt_num(float_rep.mean_iou)} "
            f"quant_drop={fmt_num(delta)}"
        )
    if o["out"]:
        os.makedirs(o["out"], exist_ok=True)
        write_report_csv(rep, os.path.join(o["out"], "report.csv"))
        write_pr_csv(rep, os.path.join(o["out"], "pr_curve.csv"))
        report.save_pr_curve(rep.pr_curve, os.path.join(o["out"], "pr_curve.png"))


_RUNNERS = {
    "gen-data": _run_gen_data,
    "preprocess": _run_preprocess,
    "train": _run_train,
    "eval": _run_eval,
    "quantize": _run_quantize,
    "infer-quant": _run_infer_quant,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else int(e.code)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stdout)
    try:
        opts = _resolve(ns, _OPTS[ns.command])
        _RUNNERS[ns.command](opts)
    except DataError as e:
        print(f"lanesnn: data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"lanesnn: numeric failure: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"lanesnn: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
