"""Command-line entry point: ``ffvit {train,eval,params,bench,gradcheck}``."""

from __future__ import annotations

import argparse
import io
import sys

import numpy as np

from . import bench
from .config import TrainConfig, load_config_file
from .data import load_directory, synthetic_blobs
from .errors import FFViTError
from .model import REFERENCE_PARAMS, build_preset, init_params, model_forward, param_count
from .tensor import cross_entropy_logits, grad_check

GRADCHECK_THRESHOLD = 1e-4


def _model_config(args):
    if getattr(args, "config", None):
        model, train = load_config_file(args.config)
    else:
        model, train = build_preset(args.preset), TrainConfig()
    if getattr(args, "variant", None):
        model = model.replace(variant=args.variant)
    return model, train


def _datasets(args, image_size: int, classes: int):
    if args.synthetic:
        return (synthetic_blobs(classes, 100, image_size, seed=1),
                synthetic_blobs(classes, 30, image_size, seed=2))
    train = load_directory(args.data, image_size, "train")
    try:
        test = load_directory(args.data, image_size, "test")
    except FileNotFoundError:
        test = train
    return train, test


def cmd_train(args) -> int:
    from .training import train

    model, tc = _model_config(args)
    changes = {k: v for k, v in (("epochs", args.epochs), ("seed", args.seed),
                                 ("batch_size", args.batch_size),
                                 ("learning_rate", args.lr)) if v is not None}
    tc = tc.replace(**changes)
    train_set, eval_set = _datasets(args, model.image_size, model.num_classes)
    records = train(model, tc, train_set, args.out, eval_dataset=eval_set)
    for r in records:
        print(f"epoch={r['epoch']} step={r['step']} train_loss={r['train_loss']:.6f} "
              f"eval_top1={r['eval_top1']:.4f} seconds={r['seconds']:.3f}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .training import evaluate_top1

    ckpt = load_checkpoint(args.ckpt)
    _, eval_set = _datasets(args, ckpt.model_config.image_size, ckpt.model_config.num_classes)
    top1 = evaluate_top1(ckpt.params, ckpt.model_config, eval_set)
    print(f"top1={top1:.6f} samples={len(eval_set)} epoch={ckpt.epoch}")
    return 0


def cmd_params(args) -> int:
    model, _ = _model_config(args)
    count = param_count(model)
    line = f"params={count}"
    ref = REFERENCE_PARAMS.get(args.preset) if not args.config else None
    if ref is not None and model.variant == "ff_only":
        line += f" reference={ref} delta={count - ref:+d} delta_pct={100.0 * (count - ref) / ref:+.3f}"
    print(line)
    return 0


def cmd_bench(args) -> int:
    lengths = tuple(int(n) for n in args.seq_lens.split(",") if n.strip())
    spec = bench.BenchSpec(args.variant, lengths, dim=args.dim, repetitions=args.repetitions,
                           warmup=args.warmup, fixed_hidden=args.hidden, heads=args.heads)
    report = bench.measure_forward(spec)
    buf = io.StringIO()
    bench.write_csv([report], buf)
    sys.stdout.write(buf.getvalue())
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            fh.write(buf.getvalue())
    return 0


def gradcheck_model(geometry: str, max_elements: int | None = None, seed: int = 0) -> float:
    """Max relative gradient error of the full model's loss over its parameters (float64)."""
    if geometry == "reduced":
        config, batch = build_preset("reduced"), 2
    elif geometry == "tiny":
        config, batch = build_preset("tiny"), 1
        max_elements = 2 if max_elements is None else max_elements
    else:
        raise FFViTError(f"unknown geometry {geometry!r}")
    params = init_params(config, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    images = rng.standard_normal((batch, 3, config.image_size, config.image_size))
    labels = rng.integers(0, config.num_classes, size=batch)

    def loss(_):
        return cross_entropy_logits(model_forward(images, params, config), labels)

    return grad_check(loss, list(params.values()), h=1e-5, max_elements=max_elements, seed=seed)


def cmd_gradcheck(args) -> int:
    err = gradcheck_model(args.geometry, args.max_elements)
    ok = err < args.threshold
    print(f"geometry={args.geometry} max_rel_error={err:.3e} threshold={args.threshold:g} "
          f"status={'pass' if ok else 'fail'}")
    return 0 if ok else 1


def _add_model_source(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group()
    group.add_argument("--preset", default="reduced", help="tiny, base, large or reduced")
    group.add_argument("--config", help="key=value file of model/train fields")


def _add_data_source(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--data", help="directory holding CIFAR binary or IDX files")
    group.add_argument("--synthetic", action="store_true", help="use seeded synthetic blobs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ffvit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    _add_model_source(p)
    _add_data_source(p)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--variant", choices=("ff_only", "attention_baseline", "attention_only"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    _add_data_source(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="exact parameter count")
    _add_model_source(p)
    p.add_argument("--variant", choices=("ff_only", "attention_baseline", "attention_only"))
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("bench", help="forward-time scaling against sequence length")
    p.add_argument("--variant", required=True, choices=bench.BENCH_VARIANTS)
    p.add_argument("--seq-lens", default="128,256,512,1024,2048,4096")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--hidden", type=int, default=256, help="fixed token hidden width")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--repetitions", type=int, default=9)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    p.add_argument("--geometry", choices=("reduced", "tiny"), default="reduced")
    p.add_argument("--threshold", type=float, default=GRADCHECK_THRESHOLD)
    p.add_argument("--max-elements", type=int, help="probe at most this many entries per tensor")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FFViTError, OSError, ValueError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
