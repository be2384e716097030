"""Experiment harness: train / optq / quantize / chebyshev / bench.

Every subcommand takes --seed (default from ZIPML_SEED) and produces
bit-identical output for identical seeds.  Exit codes: 0 success, 1 usage
error, 2 run flagged as diverged, 3 I/O or format error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import datasets as dsmod
from . import nonlinear as nl
from . import optq as oq
from .datasets import ContainerError, DataFormatError, read_quantized, write_quantized
from .linear import Regularizer, SampleQuantizer, TrainConfig, least_squares_loss, train
from .quantize import column_scales, scheme_for_bits
from .rng import new_rng

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _default_seed() -> int:
    return int(os.environ.get("ZIPML_SEED", "0"))


def _load_config_file(path) -> dict:
    """Flat key=value file; keys use the long flag names with dashes or
    underscores.  Flags given on the command line take precedence."""
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}: line {ln}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if val.lower() in ("true", "false"):
                out[key] = val.lower() == "true"
                continue
            for cast in (int, float):
                try:
                    out[key] = cast(val)
                    break
                except ValueError:
                    continue
            else:
                out[key] = val
    return out


def _parse_reg(spec: str) -> Regularizer:
    if spec == "none":
        return Regularizer.none()
    kind, _, value = spec.partition(":")
    try:
        v = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad regularizer {spec!r}; use none|l1:V|l2:V|ball:R")
    if kind == "l1":
        return Regularizer.l1(v)
    if kind == "l2":
        return Regularizer.l2(v)
    if kind == "ball":
        return Regularizer.ball(v)
    raise argparse.ArgumentTypeError(f"bad regularizer {spec!r}; use none|l1:V|l2:V|ball:R")


def _load_dataset(args):
    if args.synth:
        kind = args.synth
        if kind == "bimodal":
            return dsmod.synth_bimodal(args.features, args.n_train, args.n_test, seed=args.seed,
                                       noise=args.noise)
        return dsmod.synth(kind, args.features, args.n_train, args.n_test, seed=args.seed,
                           noise=args.noise, x_star_scale=args.x_scale)
    if args.data is None:
        raise DataFormatError("no input: pass --data FILE or --synth KIND")
    if args.data.endswith(".libsvm") or args.data.endswith(".svm") or args.data.endswith(".txt"):
        return dsmod.load_libsvm(args.data)
    return dsmod.load_csv(args.data, label_col=args.label_col)


def _load_points(path, X):
    """Level grids from partition files: one file, or a directory with one
    file per feature (sorted order)."""
    signed = bool(np.asarray(X).min() < 0)
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".txt")
        )
        if len(files) != X.shape[1]:
            raise DataFormatError(
                f"{path}: found {len(files)} partition files for {X.shape[1]} features"
            )
        return [
            oq.partition_to_scheme(oq.load_boundaries(f), signed=signed) for f in files
        ]
    return oq.partition_to_scheme(oq.load_boundaries(path), signed=signed)


def _add_dataset_flags(p: _Parser):
    p.add_argument("--data", help="dataset file (.csv, .libsvm/.txt sparse)")
    p.add_argument("--label-col", type=int, default=0, help="label column for CSV input")
    p.add_argument("--synth", choices=["regression", "classification", "bimodal"],
                   help="generate synthetic data instead of reading a file")
    p.add_argument("--features", type=int, default=100)
    p.add_argument("--n-train", type=int, default=10_000)
    p.add_argument("--n-test", type=int, default=10_000)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--x-scale", type=float, default=1.0, help="planted model scale for synth")


def build_parser() -> _Parser:
    p = _Parser(prog="zipq", description=__doc__)
    p.add_argument("--config", help="key=value defaults file (flags win)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[], help="run one SGD experiment, emit a CSV trace")
    _add_dataset_flags(t)
    t.add_argument("--loss", default="least_squares",
                   choices=["least_squares", "ls_svm", "logistic", "hinge"])
    t.add_argument("--ls-svm-c", type=float, default=0.01)
    t.add_argument("--reg", type=_parse_reg, default=Regularizer.none(),
                   help="none | l1:V | l2:V | ball:R")
    t.add_argument("--alpha0", type=float, default=1.0)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--seed", type=int, default=_default_seed())
    t.add_argument("--bits", type=int, help="sample quantization bits")
    t.add_argument("--scheme", choices=["uniform", "optimal"], default="uniform")
    t.add_argument("--points", help="partition file or directory (with --scheme optimal)")
    t.add_argument("--anchored-grid", action="store_true",
                   help="use a [0,1] grid when training from a .zipq container")
    t.add_argument("--model-bits", type=int)
    t.add_argument("--gradient-bits", type=int)
    t.add_argument("--no-double-sampling", action="store_true")
    t.add_argument("--no-averaged-pair", action="store_true")
    t.add_argument("--naive-rounding", choices=["nearest", "stochastic"],
                   help="round the data once up front and train on it as-is")
    t.add_argument("--chebyshev-degree", type=int, default=15)
    t.add_argument("--fit-radius", type=float, default=None,
                   help="polynomial fit radius (defaults to the ball-constraint radius)")
    t.add_argument("--exclusion", type=float, default=0.1,
                   help="exclusion half-width for the hinge step fit")
    t.add_argument("--refetch", choices=["l1", "l2"], help="hinge refetch rule")
    t.add_argument("--jl-dim", type=int, default=256)
    t.add_argument("--jl-delta", type=float, default=0.05)
    t.add_argument("--out", default="trace.csv")

    q = sub.add_parser("optq", help="solve variance-optimal quantization levels")
    q.add_argument("--input", required=True,
                   help="one value per line in [0,1], or a dataset file with --per-feature")
    q.add_argument("--label-col", type=int, default=0)
    q.add_argument("--k", type=int, required=True, help="interval count")
    q.add_argument("--algo", choices=["exact", "discretized", "greedy", "combined"],
                   default="combined")
    q.add_argument("--grid-size", type=int, default=256, help="candidate count (discretized)")
    q.add_argument("--gamma", type=float, default=1.0)
    q.add_argument("--delta-slack", type=float, default=2.0)
    q.add_argument("--per-feature", action="store_true")
    q.add_argument("--compare", action="store_true", help="also run the other algorithms")
    q.add_argument("--seed", type=int, default=_default_seed())
    q.add_argument("--out-dir", default="partitions")

    z = sub.add_parser("quantize", help="write a bit-packed quantized dataset")
    _add_dataset_flags(z)
    z.add_argument("--bits", type=int, default=5)
    z.add_argument("--points", help="partition file for a custom grid")
    z.add_argument("--copies", type=int, default=2)
    z.add_argument("--seed", type=int, default=_default_seed())
    z.add_argument("--check", action="store_true", help="verify the container round-trips")
    z.add_argument("--out", default="data.zipq")

    c = sub.add_parser("chebyshev", help="fit and store a polynomial gradient approximation")
    c.add_argument("--target", choices=["sigmoid_deriv", "step", "constant"],
                   default="sigmoid_deriv")
    c.add_argument("--degree", type=int, default=15)
    c.add_argument("--fit-radius", type=float, default=1.0)
    c.add_argument("--exclusion", type=float, default=0.0)
    c.add_argument("--eps", type=float)
    c.add_argument("--seed", type=int, default=_default_seed())
    c.add_argument("--out", default="poly.txt")

    b = sub.add_parser("bench", help="compare quantizer grids and estimators on one dataset")
    _add_dataset_flags(b)
    b.add_argument("--bits-list", default="3,5", help="comma-separated bit widths")
    b.add_argument("--alpha0", type=float, default=1.0)
    b.add_argument("--epochs", type=int, default=10)
    b.add_argument("--batch-size", type=int, default=32)
    b.add_argument("--seed", type=int, default=_default_seed())
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--format", choices=["csv", "md"], default="csv")
    b.add_argument("--out", default="bench.csv")
    return p


# ---------------------------------------------------------------------------
# train


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return ""
    return repr(float(v))


def _write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "test_loss", "grad_var", "refetch_frac"])
        for i, tl in enumerate(trace.train_loss):
            ref = trace.refetch_fraction[i] if i < len(trace.refetch_fraction) else None
            w.writerow([i + 1, _fmt(tl), _fmt(trace.test_loss[i]), _fmt(trace.grad_variance[i]), _fmt(ref)])


def _load_container_for_training(args):
    """Rebuild training inputs from stored quantization copies.

    The container stores level indices and scales but not the grid, so the
    caller restates it (--bits, signedness via --anchored-grid, or
    --points).  Losses are reported against the copy-0 dequantization, the
    best full-precision stand-in available.
    """
    if args.points:
        scheme = oq.partition_to_scheme(
            oq.load_boundaries(args.points), signed=not args.anchored_grid
        )
    elif args.bits:
        scheme = scheme_for_bits(args.bits, signed=not args.anchored_grid)
    else:
        raise DataFormatError("training from .zipq needs --bits or --points to restate the grid")
    zf = read_quantized(args.data, scheme=scheme)
    copies = np.stack([zf.copy_matrix(i) for i in range(min(zf.n_copies, 2))])
    ds = dsmod.Dataset(copies[0], zf.labels)
    return ds, copies, scheme


def cmd_train(args) -> int:
    if args.data and args.data.endswith(".zipq"):
        if args.loss not in ("least_squares", "ls_svm"):
            raise DataFormatError("container training supports the linear losses")
        ds, copies, scheme = _load_container_for_training(args)
        cfg = TrainConfig(
            loss=args.loss, ls_svm_c=args.ls_svm_c if args.loss == "ls_svm" else 0.0,
            reg=args.reg, alpha0=args.alpha0, epochs=args.epochs,
            batch_size=args.batch_size, seed=args.seed,
            sample_scheme=scheme, double_sampling=not args.no_double_sampling,
            averaged_pair=not args.no_averaged_pair,
        )
        trace = train(ds, cfg, sample_copies=copies)
        _write_trace(args.out, trace)
        status = "diverged" if trace.diverged else "converged"
        print(
            f"{status} epochs={len(trace.train_loss)} "
            f"final_train_loss={trace.train_loss[-1]!r} refetch_frac=0.0 trace={args.out}"
        )
        return EXIT_DIVERGED if trace.diverged else EXIT_OK

    ds = _load_dataset(args)
    original = ds
    scheme = None
    if args.scheme == "optimal":
        if not args.points:
            raise DataFormatError("--scheme optimal needs --points FILE|DIR")
        scheme = _load_points(args.points, ds.X)

    if args.naive_rounding:
        qz = SampleQuantizer.for_data(ds.X, args.bits or 8, scheme)
        Xr = (
            qz.round_nearest(ds.X)
            if args.naive_rounding == "nearest"
            else qz.draw(ds.X, new_rng(args.seed))
        )
        ds = dsmod.Dataset(Xr, ds.y, ds.X_test, ds.y_test)
        sample_bits = sample_scheme = None  # train full-precision style on rounded data
    else:
        sample_bits, sample_scheme = args.bits, scheme

    cfg = TrainConfig(
        loss=args.loss if args.loss in ("least_squares", "ls_svm") else "least_squares",
        ls_svm_c=args.ls_svm_c if args.loss == "ls_svm" else 0.0,
        reg=args.reg,
        alpha0=args.alpha0,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        sample_bits=sample_bits,
        sample_scheme=sample_scheme,
        model_bits=args.model_bits,
        gradient_bits=args.gradient_bits,
        double_sampling=not args.no_double_sampling,
        averaged_pair=not args.no_averaged_pair,
    )

    if args.loss in ("least_squares", "ls_svm"):
        trace = train(ds, cfg)
        final = least_squares_loss(original.X, original.y, trace.model,
                                   cfg.ls_svm_c if args.loss == "ls_svm" else 0.0)
    else:
        radius = args.fit_radius
        if radius is None:
            radius = args.reg.radius if args.reg.kind == "ball" else 3.0
        approx = None
        refetch = None
        if args.refetch:
            if args.loss != "hinge":
                raise DataFormatError("--refetch requires --loss hinge")
            mode = "l1" if args.refetch == "l1" else "l2jl"
            refetch = nl.RefetchPolicy(mode, r=args.jl_dim, delta=args.jl_delta)
        if cfg.quantize_samples and (args.loss == "logistic" or args.refetch != "l1"):
            target = "sigmoid_deriv" if args.loss == "logistic" else "step"
            approx = nl.chebyshev_fit(
                target,
                radius=radius + 1.0 if target == "step" else radius,
                delta=args.exclusion if target == "step" else 0.0,
                degree=args.chebyshev_degree,
            )
        trace = nl.train_nonlinear(ds, args.loss, cfg, approx=approx, refetch=refetch)
        loss_fn = nl.logistic_loss if args.loss == "logistic" else nl.hinge_loss
        final = loss_fn(original.X, original.y, trace.model)

    _write_trace(args.out, trace)
    status = "diverged" if trace.diverged else "converged"
    refetched = trace.refetch_fraction[-1] if trace.refetch_fraction else 0.0
    print(
        f"{status} epochs={len(trace.train_loss)} final_train_loss={final!r} "
        f"refetch_frac={refetched!r} trace={args.out}"
    )
    return EXIT_DIVERGED if trace.diverged else EXIT_OK


# ---------------------------------------------------------------------------
# optq


def _load_values(path, label_col):
    if path.endswith(".csv") or path.endswith(".libsvm") or path.endswith(".svm"):
        if path.endswith(".csv"):
            return dsmod.load_csv(path, label_col=label_col).X
        return dsmod.load_libsvm(path).X
    with open(path) as fh:
        vals = [float(line) for line in fh if line.strip()]
    if not vals:
        raise DataFormatError(f"{path}: empty input")
    return np.asarray(vals)[:, None]


def _solve_column(col, args):
    t0 = time.perf_counter()
    part = oq.solve_partition(col, args.k, algo=args.algo, M=args.grid_size,
                              gamma=args.gamma, delta=args.delta_slack)
    return part, time.perf_counter() - t0


def cmd_optq(args) -> int:
    X = _load_values(args.input, args.label_col)
    os.makedirs(args.out_dir, exist_ok=True)
    columns = range(X.shape[1]) if args.per_feature else [None]
    rows = []
    for f in columns:
        if f is None:
            raw = X[:, 0]
            name = "partition.txt"
        else:
            raw = X[:, f]
            name = f"feature_{f:03d}.txt"
        scale = max(abs(raw.min()), abs(raw.max())) or 1.0
        vals = np.abs(raw / scale) if raw.min() < 0 else raw / scale
        if np.unique(vals).size <= args.k:
            print(f"warning: {name}: only {np.unique(vals).size} distinct values for k={args.k}")
        part, dt = _solve_column(vals, args)
        oq.save_partition(part, os.path.join(args.out_dir, name))
        rows.append((name, args.algo, part.mv, dt))
        if args.compare:
            for other in ("exact", "discretized", "greedy", "combined"):
                if other == args.algo:
                    continue
                if other == "exact" and vals.size > 3000:
                    continue  # quadratic cost
                p2, dt2 = _solve_column(vals, argparse.Namespace(**{**vars(args), "algo": other}))
                rows.append((name, other, p2.mv, dt2))
    print(f"{'column':<16} {'algo':<12} {'mv':<24} seconds")
    for name, algo, mv, dt in rows:
        print(f"{name:<16} {algo:<12} {mv!r:<24} {dt:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# quantize


def cmd_quantize(args) -> int:
    ds = _load_dataset(args)
    if args.points:
        scheme = _load_points(args.points, ds.X)
        if isinstance(scheme, list):
            raise DataFormatError("the container stores one grid; pass a single partition file")
        bits = scheme.bits
    else:
        signed = bool(ds.X.min() < 0)
        scheme = scheme_for_bits(args.bits, signed=signed)
        bits = args.bits
    nbytes = write_quantized(ds, scheme, args.copies, args.seed, args.out)
    ratio = dsmod.compression_ratio(ds.n_features, bits, args.copies)
    print(
        f"wrote {args.out}: {ds.n_samples}x{ds.n_features} at {bits}b x{args.copies} copies, "
        f"{nbytes} bytes, payload {ratio:.2f}x smaller than float32"
    )
    if args.check:
        zf = read_quantized(args.out, scheme=scheme)
        from .quantize import encode_copies

        rec = encode_copies(ds.X, scheme, column_scales(ds.X), args.copies, new_rng(args.seed))
        for k in range(min(ds.n_samples, 64)):
            if not np.array_equal(zf.base_indices(k), rec.base[k]):
                raise ContainerError("round-trip check failed")
        print("round-trip check passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# chebyshev


def cmd_chebyshev(args) -> int:
    p = nl.chebyshev_fit(args.target, radius=args.fit_radius, delta=args.exclusion,
                         degree=args.degree, eps=args.eps)
    nl.save_poly(p, args.out)
    print(
        f"degree={p.degree} radius={p.radius!r} exclusion={p.delta!r} "
        f"sup_error={p.sup_error!r} -> {args.out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _bench_one(payload):
    (idx, seed, synth_kind, features, n_train, n_test, noise,
     bits, grid, estimator, alpha0, epochs, batch_size) = payload
    run_seed = int(np.random.SeedSequence([seed, idx]).generate_state(1)[0] % 2**31)
    if synth_kind == "bimodal":
        ds = dsmod.synth_bimodal(features, n_train, n_test, seed=seed, noise=noise)
    else:
        ds = dsmod.synth(synth_kind, features, n_train, n_test, seed=seed, noise=noise)
    if grid == "optimal":
        schemes, _ = oq.optimal_schemes_for_columns(ds.X, bits)
        cfg_scheme, cfg_bits = schemes, None
    else:
        cfg_scheme, cfg_bits = None, bits
    cfg = TrainConfig(
        alpha0=alpha0, epochs=epochs, batch_size=batch_size, seed=run_seed,
        sample_bits=cfg_bits, sample_scheme=cfg_scheme,
        double_sampling=(estimator == "double"),
    )
    tr = train(ds, cfg)
    return idx, grid, bits, estimator, tr.train_loss[-1], tr.test_loss[-1], tr.diverged


def cmd_bench(args) -> int:
    bits_list = [int(b) for b in args.bits_list.split(",") if b.strip()]
    kind = args.synth or "bimodal"
    grid_kinds = ("uniform", "optimal")
    estimators = ("double", "naive")
    matrix = [
        (bits, grid, est) for bits in bits_list for grid in grid_kinds for est in estimators
    ]
    payloads = [
        (i, args.seed, kind, args.features, args.n_train, args.n_test, args.noise,
         bits, grid, est, args.alpha0, args.epochs, args.batch_size)
        for i, (bits, grid, est) in enumerate(matrix)
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = sorted(ex.map(_bench_one, payloads))
    else:
        results = [_bench_one(p) for p in payloads]

    header = ["grid", "bits", "estimator", "train_loss", "test_loss", "diverged"]
    rows = [
        [grid, str(bits), est, _fmt(tl), _fmt(te), str(int(dv))]
        for _, grid, bits, est, tl, te, dv in results
    ]
    if args.format == "csv":
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    else:
        with open(args.out, "w") as fh:
            fh.write("| " + " | ".join(header) + " |\n")
            fh.write("|" + "|".join("---" for _ in header) + "|\n")
            for r in rows:
                fh.write("| " + " | ".join(r) + " |\n")
    for r in rows:
        print(" ".join(f"{h}={v}" for h, v in zip(header, r)))
    print(f"table -> {args.out} ({len(rows)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------


_COMMANDS = {
    "train": cmd_train,
    "optq": cmd_optq,
    "quantize": cmd_quantize,
    "chebyshev": cmd_chebyshev,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args, _ = parser.parse_known_args(argv)
    if args.config:
        try:
            defaults = _load_config_file(args.config)
        except OSError as exc:
            sys.stderr.write(f"error: {exc}\n")
            return EXIT_IO
        for sub_action in parser._subparsers._group_actions:
            for sub in sub_action.choices.values():
                known = {a.dest for a in sub._actions}
                sub.set_defaults(**{k: v for k, v in defaults.items() if k in known})
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (DataFormatError, ContainerError, FileNotFoundError, IsADirectoryError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_IO
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
