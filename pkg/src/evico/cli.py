"""Command-line entry point: ``evico <subcommand> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 2 usage error, 3 invalid configuration,
4 data / evaluation / I/O failure, 5 training diverged.  Failures print a
single JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, EvicoError, TrainingDiverged
from .export import export_uncertainty_maps
from .metrics import evaluate_set, write_aggregate_csv, write_sample_csv
from .netmodel import PREDICT_MODES, load_checkpoint
from .synthdata import DatasetSpec, generate, load_dataset, save_dataset
from .trainer import (TrainConfig, run_ablation, run_ratio_sweep, train, write_summary_csv)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DIVERGED = 0, 2, 3, 4, 5


@dataclass(frozen=True)
class Key:
    name: str        # key in config files; flag is --name with '_' -> '-'
    target: str      # "data", "train" or "both"
    attr: str
    kind: type
    help: str = ""


LOSS_HELP = {
    "ce": "supervised cross-entropy of the softmax head on labeled pixels: -log p_v[y]",
    "enc": "evidential loss on labeled pixels: digamma(S) - digamma(alpha_y) "
           "+ lambda_kl * KL(Dir(alpha_tilde) || Dir(1)), alpha_tilde = y + (1 - y) * alpha",
    "uegv": "evidential head guides the softmax head on all pixels: "
            "mean(w * |sg(p_e) - p_v|), w = 1 - K/S",
    "uvge": "softmax head guides the evidential head on all pixels: "
            "mean(w * |sg(p_v) - p_e|)",
}

KEYS = (
    Key("seed", "both", "seed", int, "single seed for data generation, init and batching"),
    # dataset
    Key("count", "data", "count", int, "number of training images"),
    Key("test_count", "data", "test_count", int, "number of test images"),
    Key("height", "data", "height", int),
    Key("width", "data", "width", int),
    Key("num_classes", "data", "num_classes", int, "classes including background (2 or 3)"),
    Key("labeled_fraction", "data", "labeled_fraction", float, "share of training images with masks"),
    Key("noise_sigma", "data", "noise_sigma", float),
    Key("blur_sigma", "data", "blur_sigma", float),
    Key("contrast_min", "data", "contrast_min", float),
    Key("contrast_max", "data", "contrast_max", float),
    Key("size_min", "data", "size_min", float, "shape radius range as a fraction of image size"),
    Key("size_max", "data", "size_max", float),
    Key("bias_amplitude", "data", "bias_amplitude", float, "strength of the linear intensity drift"),
    # optimisation
    Key("max_iterations", "train", "max_iterations", int),
    Key("batch.size", "train", "batch_size", int, "samples per batch (labeled + unlabeled)"),
    Key("batch.labeled", "train", "labeled_per_batch", int, "labeled samples per batch"),
    Key("lr0", "train", "lr0", float, "initial learning rate, decayed as lr0 * (1 - it/max)^power"),
    Key("poly_power", "train", "poly_power", float),
    Key("momentum", "train", "momentum", float),
    Key("weight_decay", "train", "weight_decay", float),
    Key("iters_per_epoch", "train", "iters_per_epoch", int,
        "iterations per schedule unit t (t = iter // iters_per_epoch)"),
    Key("kl_denominator", "train", "kl_denominator", float, "lambda_kl = min(1, t / kl_denominator)"),
    Key("con_denominator", "train", "con_denominator", float,
        "lambda_c = amplitude * exp(-5 (1 - min(t, T)/T)^2) with T = con_denominator"),
    Key("con_amplitude", "train", "con_amplitude", float, "maximum consistency weight"),
    Key("loss.ce", "train", "loss_ce", bool, LOSS_HELP["ce"]),
    Key("loss.enc", "train", "loss_enc", bool, LOSS_HELP["enc"]),
    Key("loss.uegv", "train", "loss_uegv", bool, LOSS_HELP["uegv"]),
    Key("loss.uvge", "train", "loss_uvge", bool, LOSS_HELP["uvge"]),
    Key("stop_gradient", "train", "stop_gradient", bool, "detach the guide head and w in consistency terms"),
    Key("activation", "train", "activation", str, "evidence activation: softplus, relu or exp"),
    Key("predict_mode", "train", "predict_mode", str, "auto, fused, vanilla or evidential"),
    Key("eval_every", "train", "eval_every", int, "test-set evaluation period (0 = final only)"),
)
KEY_INDEX = {k.name: k for k in KEYS}


def parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(key: Key, text):
    if key.kind is bool:
        return parse_bool(text)
    return key.kind(text.strip())


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        name, value = (p.strip() for p in line.split("=", 1))
        if name not in KEY_INDEX:
            raise ConfigError(f"{path}:{lineno}: unknown key {name!r}")
        try:
            values[name] = _convert(KEY_INDEX[name], value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {name}: {exc}") from None
    return values


def _defaults():
    train_cfg, data = TrainConfig(), DatasetSpec()
    out = {}
    for key in KEYS:
        src = data if key.target == "data" else train_cfg
        out[key.name] = getattr(src, key.attr)
    return out


def build_configs(values: dict):
    """Apply ``values`` over the defaults; returns (TrainConfig, DatasetSpec)."""
    merged = {**_defaults(), **values}
    train_kw, data_kw = {}, {}
    for key in KEYS:
        v = merged[key.name]
        if key.target in ("train", "both"):
            train_kw[key.attr] = v
        if key.target in ("data", "both"):
            data_kw[key.attr] = v
    return TrainConfig(**train_kw), DatasetSpec(**data_kw)


def load_config(path):
    """TrainConfig and DatasetSpec from a config file (missing keys take defaults)."""
    return build_configs(read_config_file(path))


def resolved_lines(config: TrainConfig, spec: DatasetSpec):
    lines = []
    for key in KEYS:
        src = spec if key.target == "data" else config
        v = getattr(src, key.attr)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key.name} = {v}")
    return lines


def write_resolved(config, spec, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved"
    path.write_text("\n".join(resolved_lines(config, spec)) + "\n")
    return path


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", f"{self.prog}: {message}")
        sys.exit(EXIT_USAGE)


def _emit_error(kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def _add_config_flags(p):
    defaults = _defaults()
    g = p.add_argument_group("configuration keys (override --config file values)")
    for key in KEYS:
        default = defaults[key.name]
        shown = ("true" if default else "false") if isinstance(default, bool) else default
        text = f"{key.help} (default: {shown})" if key.help else f"(default: {shown})"
        g.add_argument("--" + key.name.replace("_", "-"), dest=key.name, default=None,
                       metavar="BOOL" if key.kind is bool else key.kind.__name__.upper(),
                       help=text.replace("%", "%%"))
    p.add_argument("--config", type=Path, help="key = value config file")


def _out_arg(p, sub):
    root = Path(os.environ.get("EVICO_OUT", "runs"))
    p.add_argument("--out", type=Path, default=root / sub,
                   help=f"output directory (default: $EVICO_OUT/{sub}, currently {root / sub})")


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser():
    parser = _Parser(prog="evico", description="Dual-head evidential semi-supervised segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = subs.add_parser("gen-data", help="generate and dump a synthetic dataset")
    _add_config_flags(p)
    _out_arg(p, "data")

    p = subs.add_parser("train", help="train one model")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, help="dataset directory (default: generate from the config)")
    _out_arg(p, "train")

    p = subs.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mode", choices=PREDICT_MODES, default="fused")
    p.add_argument("--activation", default="softplus")
    p.add_argument("--pooled", action="store_true", help="pool both directed distance sets")
    _out_arg(p, "eval")

    p = subs.add_parser("ablate", help="train the five loss-toggle settings")
    _add_config_flags(p)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2], help="training seeds (default: 0,1,2)")
    _out_arg(p, "ablate")

    p = subs.add_parser("sweep", help="baseline vs full model over labeled fractions")
    _add_config_flags(p)
    p.add_argument("--fractions", type=_float_list, default=[0.05, 0.1, 0.2],
                   help="labeled fractions (default: 0.05,0.1,0.2)")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2], help="training seeds (default: 0,1,2)")
    _out_arg(p, "sweep")

    p = subs.add_parser("export-maps", help="write confidence maps and contours as PGM files")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--activation", default="softplus")
    _out_arg(p, "maps")
    return parser


def _configs_from_args(args):
    values = read_config_file(args.config) if args.config else {}
    for key in KEYS:
        text = getattr(args, key.name)
        if text is None:
            continue
        try:
            values[key.name] = _convert(key, text)
        except ValueError as exc:
            raise ConfigError(f"--{key.name.replace('_', '-')}: {exc}") from None
    return build_configs(values)


# ---------------------------------------------------------------- subcommands

def _report(payload):
    print(json.dumps(payload))


def cmd_gen_data(args):
    _, spec = _configs_from_args(args)
    out = save_dataset(generate(spec), args.out)
    _report({"dataset": str(out), "train": spec.count, "labeled": spec.labeled_count,
             "test": spec.test_count})


def cmd_train(args):
    config, spec = _configs_from_args(args)
    ds = load_dataset(args.data) if args.data else generate(spec)
    path = write_resolved(config, ds.spec, args.out)
    if args.data:
        with open(path, "a") as fh:
            fh.write(f"# dataset loaded from {args.data}\n")
    rec = train(config, ds, args.out)
    payload = {"out": str(args.out), "iterations": config.max_iterations,
               "final_total_loss": rec.losses[-1]["total"]}
    if rec.final is not None:
        write_sample_csv(rec.final, args.out / "eval_samples.csv")
        write_aggregate_csv(rec.final, args.out / "eval_aggregate.csv")
        payload["dice"] = rec.final.dice_pct
    _report(payload)


def cmd_eval(args):
    params = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    res = evaluate_set(params, ds.test, args.mode, args.activation, args.pooled)
    args.out.mkdir(parents=True, exist_ok=True)
    write_sample_csv(res, args.out / "samples.csv")
    agg = write_aggregate_csv(res, args.out / "aggregate.csv")
    _report({"aggregate": str(agg), "dice": res.dice_pct, "jaccard": res.jaccard_pct,
             "asd": res.mean.asd, "hd95": res.mean.hd95})


def cmd_ablate(args):
    config, spec = _configs_from_args(args)
    write_resolved(config, spec, args.out)
    rows = run_ablation(config, generate(spec), args.seeds, args.out)
    path = write_summary_csv(rows, args.out / "summary.csv")
    _report({"summary": str(path), "dice": {r.name: round(r.dice, 2) for r in rows}})


def cmd_sweep(args):
    config, spec = _configs_from_args(args)
    write_resolved(config, spec, args.out)
    rows = run_ratio_sweep(config, spec, args.fractions, args.seeds, args.out)
    path = write_summary_csv(rows, args.out / "summary.csv")
    _report({"summary": str(path),
             "dice": [[r.labeled_fraction, r.name, round(r.dice, 2)] for r in rows]})


def cmd_export_maps(args):
    params = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    samples = ds.test if args.split == "test" else ds.train
    written = export_uncertainty_maps(params, samples, args.out, args.activation)
    _report({"out": str(args.out), "files": len(written)})


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "sweep": cmd_sweep, "export-maps": cmd_export_maps}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        _emit_error("ConfigError", str(exc))
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        _emit_error("TrainingDiverged", str(exc))
        return EXIT_DIVERGED
    except EvicoError as exc:
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_RUNTIME
    except OSError as exc:
        _emit_error("OSError", f"{exc.filename or ''}: {exc.strerror}".strip(": "))
        return EXIT_RUNTIME
    return EXIT_OK
