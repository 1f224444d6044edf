"""Command-line interface: ``maskreg {train,synth,refine,eval,cv,inspect}``."""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import model as model_io
from .dataset import ImageBuffer, SplitSpec, Strategy, load_image, load_manifest, save_image, split
from .errors import MaskRegError
from .evaluation import CvGrid, cross_validate, default_grid, evaluate, train
from .model import count_nonzeros, synthesize, weight_only_synthesize
from .refinement import AlphaParams, compute_alpha, refine
from .solvers import SOLVERS
from .topology import RfGeometry, build_topology, format_mask, total_parameters

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


class UsageError(MaskRegError):
    exit_code = EXIT_USAGE


def _jobs(value):
    jobs = value if value is not None else int(os.environ.get("LRF_JOBS", "1"))
    if jobs < 1:
        raise ValueError("--jobs must be >= 1")
    return jobs


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return h, w


def _write_text(path, text):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _load_split(args):
    pairs = load_manifest(args.manifest)
    spec = SplitSpec.parse(args.split, seed=args.seed)
    return split(pairs, spec)


def _solver_opts(args):
    return {"lasso_tol": args.lasso_tol, "lasso_max_sweeps": args.lasso_max_sweeps}


def cmd_train(args):
    tr, va, _ = _load_split(args)
    lam = int(args.lam) if args.solver == "omp" else args.lam
    t0 = time.perf_counter()
    m = train(tr + va, args.solver, lam, args.strategy, args.rf, args.dilation,
              _jobs(args.jobs), **_solver_opts(args))
    elapsed = time.perf_counter() - t0
    model_io.save(m, args.out)
    print(f"trained {args.solver} on {len(tr) + len(va)} pairs -> {args.out}")
    if args.time:
        print(f"train_seconds {elapsed:.6f}")


def cmd_synth(args):
    m = model_io.load(args.model)
    x = load_image(args.inp)
    t0 = time.perf_counter()
    y = weight_only_synthesize(m, x) if args.weights_only else synthesize(m, x)
    elapsed = time.perf_counter() - t0
    save_image(y, args.out)
    if args.time:
        print(f"synth_ms {elapsed * 1e3:.3f}")


def cmd_refine(args):
    m = model_io.load(args.model)
    x = load_image(args.inp)
    y = load_image(args.synth) if args.synth else synthesize(m, x)
    params = AlphaParams(args.steepness, args.tau, args.radius, args.sigma)
    amap = compute_alpha(m, params)
    save_image(refine(x, y, amap), args.out)
    if args.alpha_out:
        save_image(ImageBuffer(amap.alpha), args.alpha_out)


def cmd_eval(args):
    m = model_io.load(args.model)
    parts = dict(zip(("train", "val", "test"), _load_split(args)))
    pairs = sum(parts.values(), []) if args.subset == "all" else parts[args.subset]
    if not pairs:
        raise UsageError(f"the {args.subset!r} subset is empty under split {args.split}")
    score = evaluate(m, pairs)
    g = m.geometry
    print("subset,pairs,strategy,rf,dilation,parameters,mse_x100")
    print(f"{args.subset},{len(pairs)},{m.strategy.value},{g.taps_per_side},{g.dilation},"
          f"{m.n_parameters},{score:.6f}")


def _parse_grid(text, solver, n_train, rf, comparable):
    if text == "default":
        return default_grid(solver, n_train, rf if comparable else None)
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise ValueError(f"bad grid {text!r}")
    if solver == "omp":
        values = [int(v) for v in values]
    return CvGrid(solver, tuple(values))


def cmd_cv(args):
    tr, va, te = _load_split(args)
    grid = _parse_grid(args.grid, args.solver, len(tr), args.rf, args.omp_comparable)
    res = cross_validate(tr, va, args.solver, grid, args.strategy, args.rf, args.dilation,
                         _jobs(args.jobs), **_solver_opts(args))
    table = res.to_csv()
    if args.csv:
        _write_text(args.csv, table)
    else:
        sys.stdout.write(table)
    print(f"best_lambda {res.best!r}")
    if args.out:
        model_io.save(res.model, args.out)
    if te:
        print(f"test_mse_x100 {evaluate(res.model, te):.6f}")


def cmd_inspect_mask(args):
    h, w = args.size
    topo = build_topology(RfGeometry(h, w, h, w, args.rf, args.dilation))
    print(format_mask(topo))
    print(f"parameters {total_parameters(topo)}")


def cmd_inspect_model(args):
    m = model_io.load(args.model)
    g = m.geometry
    print(f"strategy {m.strategy.value}")
    print(f"input {g.in_height}x{g.in_width} output {g.out_height}x{g.out_width}")
    print(f"taps_per_side {g.taps_per_side} dilation {g.dilation}")
    print(f"parameters {m.n_parameters}")
    print(f"nonzeros {count_nonzeros(m, args.tol)}")
    if args.bias_out:
        b = np.stack([mp.bias.reshape(g.out_height, g.out_width) for mp in m.mappings])
        lo, hi = b.min(), b.max()
        vis = (b - lo) / (hi - lo) if hi > lo else np.zeros_like(b)
        save_image(ImageBuffer(vis), args.bias_out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskreg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def data_opts(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--split", default="0.8,0.1,0.1")
        sp.add_argument("--seed", type=int, default=0)

    def fit_opts(sp):
        sp.add_argument("--solver", choices=SOLVERS, default="mr")
        sp.add_argument("--rf", type=int, default=3)
        sp.add_argument("--dilation", type=int, default=1)
        sp.add_argument("--strategy", choices=[s.value for s in Strategy], default="gray")
        sp.add_argument("--jobs", type=int, default=None)
        sp.add_argument("--lasso-tol", type=float, default=1e-7)
        sp.add_argument("--lasso-max-sweeps", type=int, default=10_000)

    sp = sub.add_parser("train", help="fit a model on the train+val part of a manifest")
    data_opts(sp)
    fit_opts(sp)
    sp.add_argument("--lambda", dest="lam", type=float, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--time", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("synth", help="apply a model to one image")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--weights-only", action="store_true")
    sp.add_argument("--time", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("refine", help="alpha-blend input and synthesized image")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--synth")
    sp.add_argument("--out", required=True)
    sp.add_argument("--alpha-out")
    sp.add_argument("--tau", type=float, default=0.2)
    sp.add_argument("--steepness", type=float, default=10.0)
    sp.add_argument("--radius", type=int)
    sp.add_argument("--sigma", type=float)
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("eval", help="score a model with mse_x100")
    sp.add_argument("--model", required=True)
    data_opts(sp)
    sp.add_argument("--subset", choices=("train", "val", "test", "all"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("cv", help="select lambda on val, refit on train+val")
    data_opts(sp)
    fit_opts(sp)
    sp.add_argument("--grid", default="default")
    sp.add_argument("--omp-comparable", action="store_true",
                    help="cap the OMP grid at rf*rf+1")
    sp.add_argument("--csv")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("inspect", help="print a mask or model summary")
    isub = sp.add_subparsers(dest="what", required=True)
    ip = isub.add_parser("mask")
    ip.add_argument("--size", type=_size, required=True)
    ip.add_argument("--rf", type=int, default=3)
    ip.add_argument("--dilation", type=int, default=1)
    ip.set_defaults(func=cmd_inspect_mask)
    ip = isub.add_parser("model")
    ip.add_argument("--model", required=True)
    ip.add_argument("--tol", type=float, default=0.0)
    ip.add_argument("--bias-out")
    ip.set_defaults(func=cmd_inspect_model)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except MaskRegError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, argparse.ArgumentTypeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ZeroDivisionError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main():
    sys.exit(run())
