"""Command-line entry point.

Commands: gen-data, train, eval, predict, gradcheck, flops. Every
command validates its inputs before touching the filesystem, emits a
single machine-parsable line to stderr on failure, and exits nonzero.
``FNALPHA_CONFIG_DIR`` provides a fallback directory for bare config
names passed to --config.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import fnt1
from .data import SynthSpec, gen_synth, load_dataset
from .gradcheck import run_gradcheck_suite
from .losses import LossConfig
from .model import (
    Model,
    count_flops,
    count_params,
    load_checkpoint,
    load_config,
    summary,
)
from .optim import AdamConfig
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, train

CONFIG_DIR_ENV = "FNALPHA_CONFIG_DIR"

VARIANTS = ("full", "md", "res_a", "ch", "cs")


class CliError(ValueError):
    pass


def _resolve_config(arg: str) -> Path:
    p = Path(arg)
    candidates = [p]
    if p.suffix != ".json":
        candidates.append(p.with_suffix(".json"))
    env_dir = os.environ.get(CONFIG_DIR_ENV)
    if env_dir and os.sep not in arg:
        candidates.append(Path(env_dir) / arg)
        if p.suffix != ".json":
            candidates.append(Path(env_dir) / (arg + ".json"))
    for c in candidates:
        if c.is_file():
            return c
    raise CliError(f"config file not found: {arg}")


def _apply_variant(config, variant: str, block: str | None):
    if variant == "md":
        config.decoder_mode = "plain"
    elif variant == "res_a":
        config.block_kind = "res_a"
    elif variant == "ch":
        config.block_kind = "concat_horizontal"
    elif variant == "cs":
        config.combine_mode = "channel_shuffle"
    if block is not None:
        config.block_kind = block
    return type(config).from_dict(config.to_dict())  # revalidate


def _cmd_gen_data(args) -> int:
    spec = SynthSpec(count=args.count, height=args.size[0], width=args.size[1],
                     seed=args.seed)
    gen_synth(spec, args.out)
    print(f"wrote {args.count} images to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config_path = _resolve_config(args.config)
    config = _apply_variant(load_config(config_path), args.variant, args.block)
    dataset = load_dataset(args.data)
    train_cfg = TrainConfig(batch_size=args.batch, max_epochs=args.epochs,
                            adam=AdamConfig(), seed=args.seed)
    loss_cfg = LossConfig(wrapper="all" if args.loss == "all" else "none")
    model = Model(config, seed=args.seed)
    result = train(model, dataset, train_cfg, loss_cfg, args.out, log=print)
    print(f"best epoch {result.best_epoch} val_loss {result.best_val_loss:.6f} "
          f"-> {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.weights)
    dataset = load_dataset(args.data)
    report = evaluate(model, dataset, threshold=args.threshold,
                      report_path=args.report)
    g = report["global"]
    print(f"dice={g['dice']:.4f} jaccard={g['jaccard']:.4f} auc={report['auc']:.4f} "
          f"-> {args.report}")
    return 0


def _cmd_predict(args) -> int:
    model = load_checkpoint(args.weights)
    tensors = fnt1.read_tensors(args.input)
    if "images" in tensors:
        images = tensors["images"]
    elif len(tensors) == 1:
        images = next(iter(tensors.values()))
    else:
        raise CliError("input FNT1 must hold an 'images' tensor or a single tensor")
    model.eval()
    with no_grad():
        preds = model(Tensor(np.asarray(images, dtype=np.float64))).data
    fnt1.write_tensors(args.out, {"predictions": preds})
    print(f"wrote predictions {preds.shape} to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    result = run_gradcheck_suite(seed=args.seed, tol=args.tol, log=print)
    print(f"{'PASS' if result.passed else 'FAIL'}: {len(result.checks)} checks "
          f"in {result.elapsed:.1f}s")
    return 0 if result.passed else 1


def _cmd_flops(args) -> int:
    config = load_config(_resolve_config(args.config))
    model = Model(config, seed=0)
    side = 1 << config.scales
    shape = (1, config.in_channels, max(64, side), max(64, side))
    print(summary(model, shape))
    print(f"input {shape}: params={count_params(model)} flops={count_flops(model, shape)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fnalpha")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=[64, 64])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", choices=("all", "hl"), default="all")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--block", choices=("group_attention", "basic", "identity_preact",
                                       "resnext", "resnext_se"), default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("predict", help="run a checkpoint over an FNT1 image file")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("flops", help="print the per-scope params/FLOPs summary")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_flops)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # single machine-parsable line, nonzero exit
        print(f"fnalpha: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
