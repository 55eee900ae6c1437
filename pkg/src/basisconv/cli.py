"""Command-line interface: ``basisconv <command> [flags]``.

Exit codes: 0 ok, 1 usage, 2 file format, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import data as data_mod
from .compress import compress_model, read_sweep_csv, retained_percent, sweep, write_sweep_csv
from .cost import model_cost_report
from .layer import BasisConvLayer
from .network import FINETUNE_MOMENTUM, TrainConfig, build_toy_net, evaluate, finetune, train
from .serialize import (
    ModelFormatError,
    describe_layer,
    load_model,
    save_model,
    write_manifest,
)

log = logging.getLogger("basisconv")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_RUNTIME = 0, 1, 2, 3
ARCHS = ("toy-direct", "toy-basis")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    return vals


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}")


def load_data(source, seed=0, train_per_class=200, test_per_class=50, normalize=True):
    """Resolve a ``--data`` value into (train, test) datasets.

    ``synth`` builds the seeded synthetic set; ``cifar10:DIR`` reads an
    extracted binary archive; ``cifar10:TRAIN[,TEST]`` reads batch files.
    With ``normalize`` both splits are centred on the train split's channel
    means, which every command recomputes identically from the same data.
    """
    tr, te = _read_data(source, seed, train_per_class, test_per_class)
    if normalize:
        tr, means = data_mod.channel_normalize(tr)
        te, _ = data_mod.channel_normalize(te, means)
    return tr, te


def _data(args):
    return load_data(args.data, args.data_seed, args.train_per_class, args.test_per_class,
                     normalize=not args.no_normalize)


def _read_data(source, seed, train_per_class, test_per_class):
    if source == "synth":
        return data_mod.synth_split(train_per_class, test_per_class, seed=seed)
    if source.startswith("cifar10:"):
        target = source[len("cifar10:"):]
        if os.path.isdir(target):
            return data_mod.load_cifar10_dir(target)
        parts = target.split(",")
        if not all(os.path.exists(p) for p in parts):
            raise UsageError(f"no such data file: {target}")
        tr = data_mod.load_cifar10_binary(parts[0], split="train")
        te = data_mod.load_cifar10_binary(parts[-1], split="test")
        return tr, te
    raise UsageError(f"--data must be 'synth' or 'cifar10:PATH', got {source!r}")


def _load(path):
    if not os.path.exists(path):
        raise UsageError(f"no such model file: {path}")
    return load_model(path)


def _save(model, args):
    save_model(model, args.out, width=args.width)
    if args.json_manifest:
        write_manifest(model, args.out + ".json")
    print(f"saved {args.out} ({args.width})")


def _print_history(history):
    for k, e in enumerate(history, 1):
        print(f"epoch {k:3d}  {e.phase:13s} lr={e.lr:<8g} loss={e.train_loss:.4f} "
              f"train_acc={e.train_acc:.4f} eval_acc={e.eval_acc:.4f}")


def cmd_train(args):
    if args.epochs < 1:
        raise UsageError("--epochs must be at least 1")
    tr, te = _data(args)
    model = build_toy_net("direct" if args.arch == "toy-direct" else "basis", seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      lr_schedule=[(0, args.lr)], momentum=args.momentum, seed=args.seed)
    _print_history(train(model, tr, cfg, te))
    print(f"test accuracy: {100 * evaluate(model, te):.2f}%")
    _save(model, args)


def cmd_compress(args):
    model = _load(args.model)
    if args.q_per_layer is not None:
        compressed, reports = compress_model(model, q_per_layer=args.q_per_layer)
    else:
        if not 0 < args.t <= 1:
            raise UsageError("--t must lie in (0, 1]")
        compressed, reports = compress_model(model, t=args.t)
    for k, r in enumerate(reports):
        print(f"conv {k}: P={r.P} Q={r.Q} D={r.D} L={r.L} "
              f"retained_energy={r.retained_fraction:.4f} recon_error={r.recon_error:.4f}")
    before, after = model_cost_report(model), model_cost_report(compressed)
    pct, q_total, p_total = retained_percent(compressed)
    print(f"filters: {q_total}/{p_total} retained ({pct:.2f}%)")
    print(f"mults: {before.total_mults} -> {after.total_mults} "
          f"({before.total_mults / after.total_mults:.3f}x)")
    print(f"conv learnable params: {before.conv_params} -> {after.conv_params}")
    _save(compressed, args)


def cmd_finetune(args):
    model = _load(args.model)
    if not model.has_basis_layers():
        raise ValueError("model has no basis conv layers; run compress first")
    tr, te = _data(args)
    before = evaluate(model, te)
    if args.scale <= 0:
        print("warning: --scale 0 runs no epochs; model unchanged", file=sys.stderr)
        after = before
    else:
        _print_history(finetune(model, tr, scale=args.scale, eval_data=te,
                                batch_size=args.batch_size, momentum=args.momentum,
                                seed=args.seed))
        after = evaluate(model, te)
    print(f"accuracy before finetune: {100 * before:.2f}%")
    print(f"accuracy after finetune: {100 * after:.2f}%")
    _save(model, args)


def cmd_sweep(args):
    if not args.t_list:
        raise UsageError("--t-list is empty")
    model = _load(args.model)
    tr, te = _data(args)
    rows = sweep(model, te, args.t_list,
                 train_data=None if args.no_finetune else tr,
                 scale=None if args.no_finetune else args.scale, seed=args.seed)
    with open(args.csv, "w", newline="") as fh:
        write_sweep_csv(rows, fh)
    with open(args.csv, newline="") as fh:
        write_sweep_csv(read_sweep_csv(fh), sys.stdout)


def cmd_cost(args):
    if (args.model is None) == (args.arch is None):
        raise UsageError("give exactly one of --model or --arch")
    if args.model is not None:
        model = _load(args.model)
    else:
        model = build_toy_net("direct" if args.arch == "toy-direct" else "basis", seed=args.seed)
    shape = args.input_shape if args.input_shape else None
    if shape is not None and len(shape) != 3:
        raise UsageError("--input-shape takes M,N,L")
    report = model_cost_report(model, shape)
    print(f"{'layer':>5} {'kind':>6} {'M':>4} {'N':>4} {'L':>4} {'D':>3} {'P':>4} {'Q':>4} "
          f"{'mults':>12} {'params':>8} {'stored':>8}")
    for c in report.layers:
        d = c.dims
        print(f"{c.index:>5} {c.kind:>6} {d.M:>4} {d.N:>4} {d.L:>4} {d.D:>3} {d.P:>4} "
              f"{d.Q if d.Q is not None else '-':>4} {c.mults:>12} {c.params:>8} "
              f"{c.filter_scalars:>8}")
    print(f"total conv mults: {report.total_mults} ({report.gflops:.6f} GFlops)")
    print(f"conv learnable params: {report.conv_params}")
    print(f"fc params: {report.fc_params}")
    print(f"filters: {report.filters}")


def cmd_eval(args):
    model = _load(args.model)
    _, te = _data(args)
    print(f"accuracy: {100 * evaluate(model, te):.2f}%")


def inspect_lines(model):
    lines = [f"input {model.input_shape}"]
    for i, layer in enumerate(model.layers):
        d = describe_layer(layer, model.shapes[i], model.shapes[i + 1])
        extra = " ".join(f"{k}={v}" for k, v in d.items()
                         if k not in ("kind", "input", "output", "frozen"))
        flag = " frozen" if isinstance(layer, BasisConvLayer) else ""
        lines.append(f"{i:3d} {d['kind']:8s} {tuple(d['input'])} -> {tuple(d['output'])} "
                     f"{extra}{flag}".rstrip())
    return lines


def cmd_inspect(args):
    print("\n".join(inspect_lines(_load(args.model))))


def build_parser():
    p = _Parser(prog="basisconv", description="BasisConv compression toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def data_flags(sp):
        sp.add_argument("--data", default="synth", help="synth | cifar10:PATH (default synth)")
        sp.add_argument("--data-seed", type=int, default=0)
        sp.add_argument("--train-per-class", type=int, default=200)
        sp.add_argument("--test-per-class", type=int, default=50)
        sp.add_argument("--no-normalize", action="store_true",
                        help="skip subtracting the train split's channel means")

    def out_flags(sp):
        sp.add_argument("--out", required=True)
        sp.add_argument("--width", choices=("f32", "f64"), default="f64")
        sp.add_argument("--json-manifest", action="store_true",
                        help="also write OUT.json with a shape summary")

    sp = sub.add_parser("train", help="train a toy network")
    sp.add_argument("--arch", choices=ARCHS, required=True)
    data_flags(sp)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--lr", type=float, default=0.005)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    out_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("compress", help="replace conv layers by eigen-basis layers")
    sp.add_argument("--model", required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--t", type=float)
    g.add_argument("--q-per-layer", type=_ints)
    out_flags(sp)
    sp.set_defaults(func=cmd_compress)

    sp = sub.add_parser("finetune", help="two-step fine-tune of a compressed model")
    sp.add_argument("--model", required=True)
    data_flags(sp)
    sp.add_argument("--scale", type=float, default=1.0)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--momentum", type=float, default=FINETUNE_MOMENTUM)
    sp.add_argument("--seed", type=int, default=0)
    out_flags(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("sweep", help="compress at several thresholds, write CSV")
    sp.add_argument("--model", required=True)
    data_flags(sp)
    sp.add_argument("--t-list", type=_floats, required=True)
    sp.add_argument("--csv", required=True)
    sp.add_argument("--no-finetune", action="store_true")
    sp.add_argument("--scale", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("cost", help="multiplication and parameter counts")
    sp.add_argument("--model")
    sp.add_argument("--arch", choices=ARCHS)
    sp.add_argument("--input-shape", type=_ints)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("eval", help="test accuracy of a model")
    sp.add_argument("--model", required=True)
    data_flags(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="list layers of a model file")
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        seeds = {k: v for k, v in vars(args).items() if k in ("seed", "data_seed")}
        if seeds:
            print(" ".join(f"{k}={v}" for k, v in sorted(seeds.items())))
        args.func(args)
    except UsageError as exc:
        print(f"basisconv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelFormatError, data_mod.DataFormatError) as exc:
        print(f"basisconv: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"basisconv: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
