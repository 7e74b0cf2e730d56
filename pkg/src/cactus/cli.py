"""Command-line interface.

Subcommands: train, prune, quantize, certify, eval. Exit codes:

    0  success
    1  usage error (bad flags or arguments)
    2  I/O error (missing or malformed files, bad checkpoints)
    3  configuration error (bad config values, incompatible shapes)
    4  numeric divergence during training

Every subcommand accepts --config / --out / --seed.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .compress import PruneSpec, bake_mask, compute_mask, quantize_weights
from .config import default_config, load_config
from .bounds import certify
from .data import Dataset
from .errors import ConfigError, DataFormatError, DivergenceError, ShapeError
from .network import load_checkpoint, predict, save_checkpoint
from .report import EvalReport, evaluate, parse_variant
from .train import resume_train, train


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on usage errors; we document 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p):
    p.add_argument("--config", default=None, help="INI config file (defaults apply if omitted)")
    p.add_argument("--out", default=None, help="output directory or file (overrides [output] dir)")
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")


def build_parser() -> _Parser:
    parser = _Parser(prog="cactus", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a model, writing checkpoints and metrics.csv")
    _add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint to continue from (epoch boundary)")

    p = sub.add_parser("prune", help="apply a magnitude-pruning mask to a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--scope", choices=("local", "global"), default="local")
    p.add_argument("--structure", choices=("unstructured", "channel"), default="unstructured")
    p.add_argument("--score", choices=("l1", "l2"), default="l1")

    p = sub.add_parser("quantize", help="uniformly quantize checkpoint weights")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bits", type=int, default=8)

    p = sub.add_parser("certify", help="per-sample certification verdicts as CSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eps", type=float, default=None, help="radius (default: dataset preset)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int, default=None, help="certify only the first N samples")

    p = sub.add_parser("eval", help="accuracy report across compression variants")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eps", type=float, action="append", default=None,
                   help="radius, repeatable (default: dataset presets)")
    p.add_argument("--variant", action="append", default=None,
                   help="none | prune:<code>:<ratio> | quant:int<bits>; repeatable (default: none)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int, default=None)

    return parser


def _load_run_config(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.with_value("train", "seed", args.seed)
    if args.out is not None:
        cfg = cfg.with_value("output", "dir", args.out)
    return cfg


def _split(ds: Dataset, which: str, limit=None):
    x, y = (ds.x_train, ds.y_train) if which == "train" else (ds.x_test, ds.y_test)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    return x, y


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    ds = cfg.dataset()
    tcfg = cfg.train_config()
    cset = cfg.compression_set()
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.ini"), "w") as f:
        f.write(cfg.dump())
    if args.resume:
        ck = load_checkpoint(args.resume)
        result = resume_train(ck, tcfg, ds.x_train, ds.y_train, cset, out_dir=out_dir)
    else:
        net = cfg.network(ds.input_shape, ds.n_classes)
        result = train(net, ds.x_train, ds.y_train, tcfg, cset, out_dir=out_dir)
    last = result.rows[-1]
    print(f"trained {last['iter']} iterations on {ds.name} "
          f"({ds.x_train.shape[0]} train samples)")
    print(f"final batch: loss {last['loss_total']:.4f}, train acc {last['train_acc']:.3f}")
    print(f"metrics: {result.metrics_path}")
    for path in result.checkpoints:
        print(f"checkpoint: {path}")
    return 0


def _out_path(args, default_name: str) -> str:
    if args.out is None:
        return default_name
    if os.path.isdir(args.out) or args.out.endswith(os.sep):
        os.makedirs(args.out, exist_ok=True)
        return os.path.join(args.out, default_name)
    return args.out


def _cmd_prune(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    spec = PruneSpec(ratio=args.ratio, scope=args.scope, structure=args.structure, score=args.score)
    mask = compute_mask(ck.net, spec)
    pruned = bake_mask(ck.net, mask)
    meta = dict(ck.meta)
    meta["pruned"] = {"ratio": args.ratio, "scope": args.scope,
                      "structure": args.structure, "score": args.score}
    out = _out_path(args, "pruned.ckpt")
    save_checkpoint(out, pruned, meta=meta)
    print(f"pruned {args.scope} {args.structure} {args.score} at ratio {args.ratio:g}: "
          f"sparsity {mask.sparsity:.4f}")
    print(f"checkpoint: {out}")
    return 0


def _cmd_quantize(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    qnet, specs = quantize_weights(ck.net, bits=args.bits)
    meta = dict(ck.meta)
    meta["quantized"] = {"bits": args.bits}
    out = _out_path(args, f"quantized_int{args.bits}.ckpt")
    save_checkpoint(out, qnet, meta=meta)
    print(f"quantized weights to {args.bits} bits ({len(specs)} layer specs)")
    print(f"checkpoint: {out}")
    return 0


def _cmd_certify(args) -> int:
    cfg = _load_run_config(args)
    ck = load_checkpoint(args.checkpoint)
    net = ck.net
    net.mode = "eval"
    ds = cfg.dataset()
    x, y = _split(ds, args.split, args.limit)
    eps = args.eps if args.eps is not None else cfg.eval_eps_presets()[0]
    pred = predict(net, x)
    cert = certify(net, x, y, eps)
    out = _out_path(args, "certify.csv")
    with open(out, "w") as f:
        f.write("index,label,pred,certified\n")
        for i in range(x.shape[0]):
            f.write(f"{i},{int(y[i])},{int(pred[i])},{int(cert[i])}\n")
    n = x.shape[0]
    n_std = int((pred == y).sum())
    n_cert = int((cert & (pred == y)).sum())
    print(f"eps {eps:g} on {n} {args.split} samples: "
          f"standard {n_std}/{n} ({100.0 * n_std / n:.2f}%), "
          f"certified {n_cert}/{n} ({100.0 * n_cert / n:.2f}%)")
    print(f"verdicts: {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    ck = load_checkpoint(args.checkpoint)
    net = ck.net
    net.mode = "eval"
    ds = cfg.dataset()
    x, y = _split(ds, args.split, args.limit)
    eps_list = args.eps if args.eps else list(cfg.eval_eps_presets())
    variants = [parse_variant(v) for v in (args.variant or ["none"])]
    report = evaluate(net, x, y, eps_list, variants)
    print(report.to_table())
    out = _out_path(args, "eval_report.csv")
    with open(out, "w") as f:
        f.write(report.to_csv())
    print(f"report: {out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "prune": _cmd_prune,
    "quantize": _cmd_quantize,
    "certify": _cmd_certify,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, IsADirectoryError, PermissionError, DataFormatError) as exc:
        print(f"cactus: I/O error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ShapeError) as exc:
        print(f"cactus: config error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"cactus: divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
