"""Command-line pipeline: ``collect -> factorize -> compress -> evaluate``, plus ``bench``.

Each stage reads the previous stage's files, so runs compose through the
filesystem. Every subcommand accepts ``--config FILE`` holding a JSON object
whose keys are flag destinations (``max_iter``, ``out``, ...); explicit flags
override the file.

Exit codes: 0 success, 2 validation, 3 training divergence, 4 non-convergence,
5 definiteness, 6 benchmark correctness gate.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor_io
from .bench import BENCH_COLUMNS, bench_matvec
from .compress import METHODS, CholeskyPair, LowRankLayer, compress
from .errors import (
    ConvergenceError,
    DefinitenessError,
    GateError,
    TensorFormatError,
    TrainingDivergedError,
    ValidationError,
)
from .fisher import (
    DEFAULT_ALPHA,
    EXPLICIT_FIM_CAP,
    GradientAccumulator,
    KroneckerFactors,
    diagonal_fisher,
    explicit_fim,
    extract_kronecker_factors,
)
from .toy import evaluate_layers, make_task, train_and_collect

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGED = 3
EXIT_NONCONVERGED = 4
EXIT_DEFINITENESS = 5
EXIT_GATE = 6

TASK_FILE = "task.json"


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not sizes or any(s < 2 for s in sizes):
        raise argparse.ArgumentTypeError("sizes must be integers >= 2")
    return sizes


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise ValidationError(f"missing required option(s): {', '.join(missing)}")


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise ValidationError(message)


def _read_vector(path) -> np.ndarray:
    return tensor_io.read_tensor(path).ravel()


# -- subcommands -------------------------------------------------------------


def cmd_collect(args) -> int:
    _require(args, "out")
    _check(args.classes >= 2 and args.features >= 2, "--classes and --features must be >= 2")
    _check(args.train >= 1 and args.eval >= 1, "--train and --eval must be >= 1")
    _check(args.batch >= 1 and args.epochs >= 0 and args.lr >= 0, "--batch >= 1, --epochs >= 0, --lr >= 0 required")
    task_args = {
        "seed": args.seed,
        "n": args.classes,
        "m": args.features,
        "n_train": args.train,
        "n_eval": args.eval,
        "separation": args.separation,
        "mean_decay": args.mean_decay,
        "anisotropy": args.anisotropy,
    }
    task = make_task(**task_args)
    model, acc = train_and_collect(task, args.epochs, args.batch, args.lr, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensor_io.write_tensor(model.W, out / "W.gft")
    acc.save(out / "grads")
    train = {"epochs": args.epochs, "batch": args.batch, "lr": args.lr}
    tensor_io.write_report({"task": task_args, "train": train}, out / TASK_FILE, "json")
    print(f"wrote {out / 'W.gft'} and {acc.count} gradient batches to {out / 'grads'}")
    return EXIT_OK


def cmd_factorize(args) -> int:
    _require(args, "grads", "out")
    _check(args.tol > 0, "--tol must be positive")
    _check(args.max_iter >= 1, "--max-iter must be >= 1")
    _check(args.alpha >= 0, "--alpha must be non-negative")
    acc = GradientAccumulator.from_directory(args.grads)
    factors = extract_kronecker_factors(acc, args.tol, args.max_iter, args.seed, args.alpha)
    if not factors.converged and not args.allow_nonconverged:
        raise ConvergenceError(
            f"rank-1 SVD did not converge in {factors.iterations} iterations "
            f"(residual {factors.residual:.3e}); pass --allow-nonconverged to keep it"
        )
    out = Path(args.out)
    factors.save(out)
    tensor_io.write_tensor(diagonal_fisher(acc).D, out / "D.gft")
    print(f"sigma={factors.sigma:.6g} iterations={factors.iterations} residual={factors.residual:.3e}")
    return EXIT_OK


def _load_factors(directory) -> tuple[CholeskyPair | None, np.ndarray | None]:
    if directory is None:
        return None, None
    directory = Path(directory)
    pair = None
    if (directory / "A.gft").exists() or (directory / "B.gft").exists():
        f = KroneckerFactors.load(directory)
        pair = CholeskyPair.from_matrices(f.A, f.B)
    D = _read_vector(directory / "D.gft") if (directory / "D.gft").exists() else None
    return pair, D


def cmd_compress(args) -> int:
    _require(args, "weights", "out", "rank")
    W = tensor_io.read_tensor(args.weights)
    top = min(W.shape)
    _check(1 <= args.rank <= top, f"--rank {args.rank} outside [1, {top}]")
    pair, D = _load_factors(args.factors)
    if args.method == "gfwsvd" and pair is None:
        raise ValidationError("gfwsvd needs --factors with A.gft and B.gft")
    if args.method == "fwsvd" and D is None:
        raise ValidationError("fwsvd needs --factors with D.gft")
    layer = compress(args.method, W, args.rank, factors=pair, weights=D)
    residual = W - layer.reconstruct()
    scale = float(np.linalg.norm(W))
    meta = {
        "method": layer.method,
        "rank": layer.rank,
        "shape": list(W.shape),
        "singular_values": layer.singular_values.tolist(),
        "weighted_error": None,
        "reconstruction_error": float(np.linalg.norm(residual) / scale) if scale > 0 else 0.0,
    }
    if pair is not None:
        E = pair.L_B.T @ residual @ pair.L_A
        meta["weighted_error"] = float(np.sum(E * E))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensor_io.write_tensor(layer.W1, out / "W1.gft")
    tensor_io.write_tensor(layer.W2, out / "W2.gft")
    tensor_io.write_report(meta, out / "metadata.json", "json")
    print(f"{layer.method} rank {layer.rank}: weighted_error={meta['weighted_error']}")
    return EXIT_OK


def _load_layer(directory) -> LowRankLayer:
    directory = Path(directory)
    meta = json.loads((directory / "metadata.json").read_text())
    return LowRankLayer(
        tensor_io.read_tensor(directory / "W1.gft"),
        tensor_io.read_tensor(directory / "W2.gft"),
        int(meta["rank"]),
        meta["method"],
        np.asarray(meta.get("singular_values", []), dtype=np.float64),
    )


def cmd_evaluate(args) -> int:
    _require(args, "weights", "factors", "compressed", "out")
    W = tensor_io.read_tensor(args.weights)
    pair, _ = _load_factors(args.factors)
    if pair is None:
        raise ValidationError(f"no A.gft/B.gft in {args.factors}")
    layers = [_load_layer(d) for d in args.compressed]
    for layer in layers:
        _check(layer.shape == W.shape, f"{layer.method} layer has shape {layer.shape}, expected {W.shape}")
    fim = None
    if args.grads is not None:
        acc = GradientAccumulator.from_directory(args.grads)
        if acc.n * acc.m <= EXPLICIT_FIM_CAP:
            fim = explicit_fim(acc)
    task = None
    if args.task is not None:
        saved = json.loads((Path(args.task) / TASK_FILE).read_text())
        task = make_task(**saved["task"])
    records = evaluate_layers(W, layers, pair, fim, task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensor_io.write_report({"records": records}, out / "report.json", "json")
    tensor_io.write_report(records, out / "report.csv", "csv")
    for rec in records:
        print(f"{rec['method']:>7} r={rec['rank']:<4} weighted_error={rec['weighted_error']:.6g}")
    return EXIT_OK


def cmd_bench(args) -> int:
    _check(args.repeats >= 1 and args.batches >= 1, "--repeats and --batches must be >= 1")
    report = bench_matvec(
        args.sizes,
        repeats=args.repeats,
        batches=args.batches,
        seed=args.seed,
        structured_only=args.structured_only,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensor_io.write_report(report.rows, out / "bench.csv", "csv", columns=BENCH_COLUMNS)
    for row in report.rows:
        print(f"n={row['n']:<5} {row['mode']:<10} {row['median_seconds']:.3e} s")
    if report.slope is not None:
        print(f"structured log-log slope: {report.slope:.3f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfwsvd", description=__doc__, formatter_class=_Formatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    parser.commands = {}

    def add(name, func, help):
        p = sub.add_parser(name, help=help, description=help, formatter_class=_Formatter)
        p.add_argument("--config", type=Path, default=None, help="JSON file of option defaults")
        p.set_defaults(func=func)
        parser.commands[name] = p
        return p

    p = add("collect", cmd_collect, "train the toy softmax model and record per-batch gradients")
    p.add_argument("--out", type=Path, default=None, help="output run directory (required)")
    p.add_argument("--seed", type=int, default=0, help="seed for data, initialization and shuffling")
    p.add_argument("--classes", type=int, default=8, help="number of classes n")
    p.add_argument("--features", type=int, default=16, help="feature dimension m")
    p.add_argument("--train", type=int, default=16384, help="training samples")
    p.add_argument("--eval", type=int, default=4096, help="evaluation samples")
    p.add_argument("--separation", type=float, default=2.0, help="leading singular value of the class means")
    p.add_argument("--mean-decay", type=float, default=0.6, help="geometric decay of the mean spectrum")
    p.add_argument("--anisotropy", type=float, default=2.0, help="log-ratio of largest to smallest noise std")
    p.add_argument("--epochs", type=int, default=30, help="SGD epochs")
    p.add_argument("--batch", type=int, default=64, help="batch size")
    p.add_argument("--lr", type=float, default=0.5, help="SGD learning rate")

    p = add("factorize", cmd_factorize, "extract Kronecker and diagonal Fisher factors from a gradient set")
    p.add_argument("--grads", type=Path, default=None, help="gradient-set directory (required)")
    p.add_argument("--out", type=Path, default=None, help="output factor directory (required)")
    p.add_argument("--tol", type=float, default=1e-8, help="relative residual tolerance of the rank-1 SVD")
    p.add_argument("--max-iter", type=int, default=200, help="Lanczos iteration limit")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="diagonal regularization; 0 disables it")
    p.add_argument("--seed", type=int, default=0, help="seed for the Lanczos start vector")
    p.add_argument("--allow-nonconverged", action="store_true", help="keep factors that missed --tol")

    p = add("compress", cmd_compress, "compress a weight matrix to rank r")
    p.add_argument("--weights", type=Path, default=None, help="weight tensor W.gft (required)")
    p.add_argument("--factors", type=Path, default=None, help="factor directory with A.gft, B.gft, D.gft")
    p.add_argument("--method", choices=METHODS, default="gfwsvd", help="compression rule")
    p.add_argument("--rank", type=int, default=None, help="target rank r (required)")
    p.add_argument("--out", type=Path, default=None, help="output directory (required)")

    p = add("evaluate", cmd_evaluate, "score compressed layers against the original")
    p.add_argument("--weights", type=Path, default=None, help="original weight tensor (required)")
    p.add_argument("--factors", type=Path, default=None, help="factor directory with A.gft and B.gft (required)")
    p.add_argument("--compressed", type=Path, nargs="+", default=None, help="one or more compress output directories (required)")
    p.add_argument("--grads", type=Path, default=None, help="gradient set for the exact quadratic increase")
    p.add_argument("--task", type=Path, default=None, help="collect run directory for empirical loss and accuracy")
    p.add_argument("--out", type=Path, default=None, help="output directory (required)")

    p = add("bench", cmd_bench, "time structured versus explicit rearranged-Fisher matvecs")
    p.add_argument("--sizes", type=_sizes, default=[32, 64, 128], help="comma-separated n = m values")
    p.add_argument("--repeats", type=int, default=5, help="timed repetitions per size and mode")
    p.add_argument("--batches", type=int, default=8, help="gradient batches per synthetic accumulator")
    p.add_argument("--seed", type=int, default=0, help="seed for the synthetic gradients")
    p.add_argument("--structured-only", action="store_true", help="skip the explicit matvec")
    p.add_argument("--out", type=Path, default=Path("."), help="directory for bench.csv")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        values = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config {args.config}: {exc}")
    if not isinstance(values, dict):
        parser.error("--config must hold a JSON object")
    sub = parser.commands[args.command]
    known = {a.dest for a in sub._actions} - {"help", "config"}
    unknown = sorted(set(values) - known)
    if unknown:
        parser.error(f"unknown --config keys: {', '.join(unknown)}")
    for action in sub._actions:
        if action.dest in values and action.type is not None and isinstance(values[action.dest], str):
            values[action.dest] = action.type(values[action.dest])
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DefinitenessError as exc:
        # A factorize run with --alpha 0 fails definiteness as a convergence-stage failure.
        code = EXIT_NONCONVERGED if args.command == "factorize" else EXIT_DEFINITENESS
        print(f"gfwsvd: definiteness error: {exc}", file=sys.stderr)
        return code
    except (ValidationError, TensorFormatError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"gfwsvd: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as exc:
        print(f"gfwsvd: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConvergenceError as exc:
        print(f"gfwsvd: not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except GateError as exc:
        print(f"gfwsvd: correctness gate failed: {exc}", file=sys.stderr)
        return EXIT_GATE


if __name__ == "__main__":
    sys.exit(main())
