"""Command-line entry point: ``npkry {gen,pretrain,finetune,solve,bench,report}``.

Exit codes: 0 on success, 1 on usage or input errors, 2 when a numerical
health check fails (non-finite values, diverging training, inconsistent
residuals).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import training, unet
from .autodiff import load_checkpoint
from .krylov import NetworkPreconditioner, NumericalHealthWarning, fgmres
from .problems import make_dataset, read_instance, write_instance

EXIT_OK, EXIT_USAGE, EXIT_HEALTH = 0, 1, 2
SPLIT_OFFSETS = {"train": 0, "val": 100_000, "test": 200_000}

logger = logging.getLogger("npkry")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _split_seeds(base, split, n):
    start = base * 1000 + SPLIT_OFFSETS[split]
    return list(range(start, start + n))


def load_split(data_dir, split):
    root = Path(data_dir) / split
    if not root.is_dir():
        raise UsageError(f"no {split} split under {data_dir}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise UsageError(f"{root} holds no instances")
    return [read_instance(d) for d in dirs]


def _train_config(args, phase):
    if args.config:
        cfg = training.load_config(args.config, phase=phase)
    else:
        cfg = training.TrainConfig.for_phase(phase)
    overrides = {k: getattr(args, k) for k in ("epochs", "lr", "batch", "M", "gamma")
                 if getattr(args, k, None) is not None}
    overrides["seed"] = args.seed
    return training.TrainConfig(**{**cfg.__dict__, **overrides})


# --- subcommands ------------------------------------------------------------


def cmd_gen(args):
    out = Path(args.out_dir) / "data"
    for split, n in (("train", args.n_train), ("val", args.n_val), ("test", args.n_test)):
        seeds = _split_seeds(args.seed, split, n)
        for inst in make_dataset(seeds, args.grid_n, args.eps):
            write_instance(out / split / f"{inst.mu.seed:07d}", inst)
    print(f"wrote {args.n_train}/{args.n_val}/{args.n_test} instances to {out}")
    return EXIT_OK


def _run_phase(args, phase, params, train_set, val_set, alpha):
    out = Path(args.out_dir) / phase
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.csv"
    if metrics.exists():
        metrics.unlink()
    cfg = _train_config(args, phase)
    params, reports = training.train(cfg, train_set, val_set, params, alpha=alpha,
                                     out_dir=out, metrics_path=metrics)
    last = reports[-1]
    print(f"{phase}: epoch {last.epoch} train {last.train_loss:.6g} val {last.val_loss:.6g} -> "
          f"{out / (phase + '_final.npk')}")
    return EXIT_OK


def cmd_pretrain(args):
    data = args.data or Path(args.out_dir) / "data"
    train_set, val_set = load_split(data, "train"), load_split(data, "val")
    alpha = training.alpha_norm(train_set)
    widths = tuple(int(w) for w in args.widths.split(","))
    desc = unet.UNetDescriptor(grid=train_set[0].grid, widths=widths, out_scale=alpha ** 2)
    params = unet.init_params(desc, seed=args.seed)
    return _run_phase(args, "static", params, train_set, val_set, alpha)


def cmd_finetune(args):
    data = args.data or Path(args.out_dir) / "data"
    ckpt = args.checkpoint or Path(args.out_dir) / "static" / "static_final.npk"
    params = load_checkpoint(ckpt)
    train_set, val_set = load_split(data, "train"), load_split(data, "val")
    return _run_phase(args, "dynamic", params, train_set, val_set, None)


def cmd_solve(args):
    inst = read_instance(args.instance)
    pre = None
    if args.precond != "none":
        pre = NetworkPreconditioner(load_checkpoint(args.precond), inst.d)
    x, trace, iters = fgmres(inst.A, inst.b, pre, tol=args.tol, max_iter=args.max_iter)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / args.trace
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "res_norm", "sine"])
        w.writerow([0, repr(float(trace.res_norms[0])), ""])
        for j in range(1, iters + 1):
            w.writerow([j, repr(float(trace.res_norms[j])), repr(float(trace.sines[j - 1]))])
    status = "converged" if trace.converged else "not converged"
    print(f"{status} in {iters} iterations; trace -> {path}")
    if "residual_mismatch" in trace.flags:
        return EXIT_HEALTH
    return EXIT_OK


def cmd_bench(args):
    data = args.data or Path(args.out_dir) / "data"
    test = load_split(data, "test")
    ckpts = {}
    for name in ("static", "dynamic"):
        path = getattr(args, name) or Path(args.out_dir) / name / f"{name}_final.npk"
        if Path(path).exists():
            ckpts[name] = load_checkpoint(path)
    summary = bench_mod.bench(test, ckpts, tol=args.tol, max_iter=args.max_iter,
                              out_dir=Path(args.out_dir) / "bench", workers=args.workers)
    for name in summary.counts:
        st = summary.stats(name)
        print(f"{name:8s} mean {st['mean']:.2f} range {st['min']}-{st['max']} failed {summary.n_failed[name]}")
    return EXIT_OK


def cmd_report(args):
    metrics = args.metrics or Path(args.out_dir) / "dynamic" / "metrics.csv"
    traces = None
    if args.checkpoint:
        data = args.data or Path(args.out_dir) / "data"
        test = load_split(data, "test")
        traces = {}
        for item in args.checkpoint:
            label, _, path = item.partition("=")
            if not path:
                raise UsageError(f"--checkpoint expects LABEL=PATH, got {item!r}")
            params = load_checkpoint(path)
            rows = []
            for inst in test:
                _, tr, _ = fgmres(inst.A, inst.b, NetworkPreconditioner(params, inst.d),
                                  tol=0.0, max_iter=args.M)
                rel = tr.relative_residuals()[1:args.M + 1]
                rows.append(np.pad(rel, (0, args.M - rel.size), constant_values=np.finfo(float).tiny))
            traces[label] = np.array(rows)
    result = bench_mod.report(metrics, Path(args.out_dir) / "report", traces=traces, svg=not args.no_svg)
    print(f"report: {len(result['sine'])} epochs -> {Path(args.out_dir) / 'report'}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser():
    p = _Parser(prog="npkry", description="Neural preconditioners trained through Krylov angles.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, default=None, help="key = value training config")
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate train/val/test instances")
    g.add_argument("--grid-n", type=int, default=9)
    g.add_argument("--eps", type=float, default=0.1)
    g.add_argument("--n-train", type=int, default=20)
    g.add_argument("--n-val", type=int, default=5)
    g.add_argument("--n-test", type=int, default=20)
    g.set_defaults(func=cmd_gen)

    for name, func, helptext in (("pretrain", cmd_pretrain, "static residual pretraining"),
                                 ("finetune", cmd_finetune, "dynamic Krylov-angle fine-tuning")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--data", type=Path, default=None)
        t.add_argument("--epochs", type=int, default=None)
        t.add_argument("--lr", type=float, default=None)
        t.add_argument("--batch", type=int, default=None)
        t.add_argument("--gamma", type=float, default=None)
        t.add_argument("--M", type=int, default=None)
        if name == "pretrain":
            t.add_argument("--widths", default="8,16,32")
        else:
            t.add_argument("--checkpoint", type=Path, default=None)
        t.set_defaults(func=func)

    s = sub.add_parser("solve", help="FGMRES on one instance")
    s.add_argument("--instance", type=Path, required=True)
    s.add_argument("--precond", default="none", help="'none' or a checkpoint path")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iter", type=int, default=400)
    s.add_argument("--trace", default="trace.csv")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="iteration counts on the test split")
    b.add_argument("--data", type=Path, default=None)
    b.add_argument("--static", type=Path, default=None)
    b.add_argument("--dynamic", type=Path, default=None)
    b.add_argument("--tol", type=float, default=1e-6)
    b.add_argument("--max-iter", type=int, default=400)
    b.add_argument("--workers", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="sine and residual evolution tables")
    r.add_argument("--metrics", type=Path, default=None)
    r.add_argument("--data", type=Path, default=None)
    r.add_argument("--checkpoint", action="append", default=[], help="LABEL=PATH, repeatable")
    r.add_argument("--M", type=int, default=10)
    r.add_argument("--no-svg", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", NumericalHealthWarning)
            return args.func(args)
    except (NumericalHealthWarning, ArithmeticError, training.TrainingDiverged) as exc:
        print(f"npkry: numerical health failure: {exc}", file=sys.stderr)
        return EXIT_HEALTH
    except (UsageError, FileNotFoundError, ValueError) as exc:
        print(f"npkry: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
