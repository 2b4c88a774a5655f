"""Command-line entry point: ``nllinknet <subcommand> [options]``.

Every option can also come from ``--config FILE`` (flat ``key = value`` lines,
``#`` comments); explicit flags win over the file, the file wins over defaults.
Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import NLLinkNetError

logger = logging.getLogger("nllinknet")

VARIANTS = ("baseline", "nl3", "nl4", "nl34")
KINDS = ("dot-product", "gaussian", "embedded-gaussian")
GRAD_TARGETS = ("conv2d", "conv-transpose2d", "maxpool2d", "batchnorm2d", "softmax", "matmul",
                "elementwise", "nonlocal", "model")


class UsageError(Exception):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _choice(options):
    def conv(v):
        v = str(v).strip().lower()
        if v not in options:
            raise ValueError(f"{v!r} is not one of {', '.join(options)}")
        return v
    conv.__name__ = "choice"
    return conv


def _seeds(v):
    return tuple(int(s) for s in str(v).split(",") if s.strip())


# name -> (type, default, help); a None default marks a required option
COMMON = {
    "seed": (int, 0, "random seed"),
    "threads": (int, 1, "cap on BLAS threads (1 = deterministic mode)"),
}
MODEL_OPTS = {
    "variant": (_choice(VARIANTS), "nl34", "architecture variant"),
    "kind": (_choice(KINDS), "embedded-gaussian", "pairwise function"),
    "width": (Fraction, Fraction(1, 8), "channel width multiplier, e.g. 1/8"),
}
TRAIN_OPTS = {
    "epochs": (int, 30, "training epochs"),
    "batch_size": (int, 8, "batch size"),
    "lr": (float, 3e-4, "initial learning rate"),
    "patience": (int, 3, "plateau patience in epochs"),
    "augment": (_bool, True, "enable flip/shift/scale augmentation"),
}
TTA_OPTS = {
    "multi_scale": (_bool, False, "add 0.75/1.25 scales to the 8 flips"),
}

COMMANDS = {
    "synth": ("generate a synthetic occluded-road dataset", {
        "out": (Path, None, "output dataset directory"),
        "n": (int, 16, "number of samples"),
        "size": (int, 64, "canvas side in pixels"),
        **COMMON,
    }),
    "train": ("train a model on a dataset directory", {
        "data": (Path, None, "dataset directory"),
        "out": (Path, None, "output directory for model.ckpt and loss.log"),
        **MODEL_OPTS, **TRAIN_OPTS, **COMMON,
    }),
    "eval": ("score a checkpoint on a dataset with test-time augmentation", {
        "data": (Path, None, "dataset directory"),
        "checkpoint": (Path, None, "checkpoint file"),
        "out": (Path, None, "output directory for report and masks"),
        **TTA_OPTS, **COMMON,
    }),
    "infer": ("predict a road mask for one image", {
        "image": (Path, None, "input RGB image"),
        "checkpoint": (Path, None, "checkpoint file"),
        "out": (Path, None, "output directory"),
        **TTA_OPTS, **COMMON,
    }),
    "params": ("print learnable parameter counts", {
        "variant": MODEL_OPTS["variant"],
        "kind": MODEL_OPTS["kind"],
        "width": (Fraction, Fraction(1), "channel width multiplier"),
        "out": (Path, "", "optional directory for params.json"),
        **COMMON,
    }),
    "gradcheck": ("finite-difference gradient check of an op or the model", {
        "target": (_choice(GRAD_TARGETS), "nonlocal", "what to check"),
        "kind": MODEL_OPTS["kind"],
        "tol": (float, 1e-4, "relative error tolerance"),
        "coords": (int, 64, "coordinates probed per tensor"),
        "out": (Path, "", "optional directory for gradcheck.txt"),
        **COMMON,
    }),
    "oracle": ("compare vectorized non-local op with the double-loop oracle", {
        "instances": (int, 100, "random instances per pairwise kind"),
        "tol": (float, 1e-10, "max relative error"),
        "out": (Path, "", "optional directory for oracle.txt"),
        **COMMON,
    }),
    "sweep-lr": ("train briefly over a learning-rate grid", {
        "data": (Path, None, "dataset directory"),
        "out": (Path, None, "output directory for sweep.tsv"),
        "low": (float, 1e-4, "grid start"),
        "high": (float, 1e-3, "grid end (inclusive)"),
        "step": (float, 1e-5, "grid step"),
        **MODEL_OPTS, **TRAIN_OPTS, **COMMON,
        "epochs": (int, 1, "epochs per grid point"),
    }),
    "occlusion": ("baseline vs non-local occluded-road experiment", {
        "out": (Path, None, "output directory for occlusion_report.json"),
        "train_samples": (int, 256, "synthetic training samples"),
        "test_samples": (int, 128, "synthetic held-out samples"),
        "epochs": (int, 30, "epochs per run"),
        "seeds": (_seeds, (0, 1, 2), "comma-separated run seeds"),
        "kind": MODEL_OPTS["kind"],
        "width": MODEL_OPTS["width"],
        "threads": COMMON["threads"],
    }),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nllinknet", description="NL-LinkNet road extraction toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", type=Path, help="flat key=value file of option overrides")
        for key, (typ, default, h) in opts.items():
            flag = "--" + key.replace("_", "-")
            label = "required" if default is None else f"default {default}"
            if typ is _bool:
                p.add_argument(flag, dest=key, type=_bool, nargs="?", const=True, help=f"{h} ({label})")
            else:
                p.add_argument(flag, dest=key, type=typ, help=f"{h} ({label})")
    return parser


def read_config_file(path: Path, opts: dict) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in opts:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = opts[key][0](value)
        except (ValueError, ZeroDivisionError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return values


def resolve_options(command: str, explicit: dict) -> dict:
    opts = COMMANDS[command][1]
    merged = {k: spec[1] for k, spec in opts.items()}
    if explicit.get("config") is not None:
        merged.update(read_config_file(explicit["config"], opts))
    merged.update({k: v for k, v in explicit.items() if k != "config"})
    missing = [k for k, v in merged.items() if v is None]
    if missing:
        raise UsageError(f"nllinknet {command}: missing required option(s) "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    if merged.get("threads", 1) < 1:
        raise UsageError("--threads must be >= 1")
    return merged


# subcommands


def _model_config(o):
    from .network import ModelConfig
    return ModelConfig(variant=o["variant"], kind=o["kind"], width=o["width"], seed=o["seed"])


def _train_config(o):
    from .training import AugmentConfig, TrainConfig
    aug = AugmentConfig() if o["augment"] else AugmentConfig.off()
    return TrainConfig(epochs=o["epochs"], batch_size=o["batch_size"], lr=o["lr"],
                       patience=o["patience"], augment=aug, seed=o["seed"])


def cmd_synth(o) -> int:
    from .data import SynthConfig, synth_generate, write_dataset
    samples = synth_generate(SynthConfig(size=o["size"], seed=o["seed"]), o["n"])
    write_dataset(o["out"], samples)
    print(f"wrote {len(samples)} samples to {o['out']}")
    return 0


def cmd_train(o) -> int:
    from .data import read_dataset
    from .training import train
    res = train(_model_config(o), read_dataset(o["data"]), _train_config(o), out_dir=o["out"])
    first, last = res.log[0][1], res.log[-1][1]
    print(f"trained {o['epochs']} epochs: loss {first:.6f} -> {last:.6f}; checkpoint {res.checkpoint}")
    return 0


def _tta(o):
    from .evaluation import TtaConfig
    return TtaConfig(multi_scale=o["multi_scale"])


def cmd_eval(o) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_dataset
    from .evaluation import evaluate
    report = evaluate(load_checkpoint(o["checkpoint"]), read_dataset(o["data"]), _tta(o), out_dir=o["out"])
    print(f"mIOU {report.miou:.6f} (global IoU {report.global_iou:.6f}) over {len(report.per_image)} images")
    return 0


def cmd_infer(o) -> int:
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .data import save_mask
    from .errors import UnreadableImageError
    from .evaluation import tta_predict
    try:
        with Image.open(o["image"]) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise UnreadableImageError(f"cannot read image {o['image']}: {exc}") from None
    mask = tta_predict(load_checkpoint(o["checkpoint"]), rgb.transpose(2, 0, 1), _tta(o))
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    target = out / f"{Path(o['image']).stem}_mask.png"
    save_mask(target, mask)
    print(f"road pixels {int(mask.sum())} of {mask.size}; mask written to {target}")
    return 0


def cmd_params(o) -> int:
    from .network import ModelConfig, Variant, build_model, param_count
    cfg = _model_config(o)
    total = param_count(build_model(cfg))
    base = param_count(build_model(replace(cfg, variant=Variant.BASELINE)))
    result = {"variant": cfg.variant.value, "kind": cfg.kind.value, "width": str(cfg.width),
              "total": total, "baseline": base, "delta": total - base}
    print(f"{cfg.variant.value} ({cfg.kind.value}, width {cfg.width}): {total:,} parameters "
          f"(baseline {base:,} + {total - base:,}) = {total / 1e6:.3f}M")
    if str(o["out"]):
        Path(o["out"]).mkdir(parents=True, exist_ok=True)
        (Path(o["out"]) / "params.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_gradcheck(o) -> int:
    from .verify import gradcheck_target
    report = gradcheck_target(o["target"], o["kind"], seed=o["seed"], tolerance=o["tol"], max_coords=o["coords"])
    text = "\n".join(report.lines()) + "\n"
    print(text, end="")
    if str(o["out"]):
        Path(o["out"]).mkdir(parents=True, exist_ok=True)
        (Path(o["out"]) / "gradcheck.txt").write_text(text)
    return 0 if report.passed else 1


def cmd_oracle(o) -> int:
    from .verify import oracle_comparison
    errors = oracle_comparison(o["instances"], seed=o["seed"])
    lines = [f"{kind:<18} instances={o['instances']} max_rel_err={err:.3e}" for kind, err in errors.items()]
    ok = max(errors.values()) <= o["tol"]
    lines.append(("PASS" if ok else "FAIL") + f": tolerance {o['tol']:.0e}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if str(o["out"]):
        Path(o["out"]).mkdir(parents=True, exist_ok=True)
        (Path(o["out"]) / "oracle.txt").write_text(text)
    return 0 if ok else 1


def cmd_sweep_lr(o) -> int:
    from .data import read_dataset
    from .training import lr_grid, sweep_lr
    grid = lr_grid(o["low"], o["high"], o["step"])
    results = sweep_lr(_model_config(o), read_dataset(o["data"]), _train_config(o), grid)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.tsv").write_text("".join(f"{lr:.6g}\t{loss:.8f}\n" for lr, loss in results))
    best = min(results, key=lambda r: r[1])
    print(f"{len(results)} learning rates; best {best[0]:.6g} (final loss {best[1]:.6f})")
    return 0


def cmd_occlusion(o) -> int:
    from .experiment import OcclusionExperimentConfig, run_occlusion_experiment
    from .nonlocal_ops import PairwiseKind
    cfg = OcclusionExperimentConfig(train_samples=o["train_samples"], test_samples=o["test_samples"],
                                    epochs=o["epochs"], seeds=o["seeds"], width=o["width"],
                                    kind=PairwiseKind.parse(o["kind"]))
    report = run_occlusion_experiment(cfg, out_dir=o["out"])
    for variant, s in report["summary"].items():
        print(f"{variant:<9} median occluded IoU {s['median_occluded_iou']:.4f}  median mIOU {s['median_miou']:.4f}")
    return 0


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "params": cmd_params, "gradcheck": cmd_gradcheck, "oracle": cmd_oracle,
    "sweep-lr": cmd_sweep_lr, "occlusion": cmd_occlusion,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = vars(parser.parse_args(argv))
        verbose = ns.pop("verbose", False)
        command = ns.pop("command", None)
        if command is None:
            raise UsageError(parser.format_usage() + "nllinknet: error: a subcommand is required")
        opts = resolve_options(command, ns)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    if verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    T.set_threads(opts.get("threads", 1))
    try:
        return HANDLERS[command](opts)
    except NLLinkNetError as exc:
        print(f"nllinknet {command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"nllinknet {command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        T.set_threads(None)


if __name__ == "__main__":
    sys.exit(main())
