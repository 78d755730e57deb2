"""Command-line front end: ``mdm <command> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numeric failure. Every non-zero exit prints one JSON line on stderr::

    {"error": "FormatError", "exit": 2, "message": "..."}
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import benchmark
from .config import TrainConfig, load_config
from .dataio import (EmbeddingPairSet, ToySpec, atomic_write_text, gen_toy, load_pairs,
                     load_synthetic, save_pairs, save_synthetic)
from .distill import run, seed_synthetic, write_run_artifacts
from .errors import (ConfigError, DataError, FormatError, NumericError, PoolError, ShapeError,
                     SizeError, UnsupportedError)
from .experts import build_pool, load_pool, save_pool
from .gradcheck import run_gradcheck
from .numerics import Rng
from .projector import ArchSpec
from .retrieval import evaluate_pairs, reports_to_csv
from .seeding import METHODS

log = logging.getLogger("mdmkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (UsageError, ConfigError, SizeError, UnsupportedError)):
        return EXIT_USAGE
    if isinstance(exc, (FormatError, DataError, PoolError, ShapeError, FileNotFoundError,
                        IsADirectoryError, json.JSONDecodeError)):
        return EXIT_DATA
    return EXIT_USAGE if isinstance(exc, ValueError) else EXIT_DATA


def _fail(exc: BaseException) -> int:
    code = _exit_code(exc)
    msg = " ".join(str(exc).split()) or type(exc).__name__
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "exit": code, "message": msg}) + "\n")
    return code


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text if text is not None else json.dumps(payload, indent=2, sort_keys=True))


def _write_echo(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / f"{command.replace('-', '_')}_config.json",
                      json.dumps({"command": command, **resolved}, indent=2, sort_keys=True) + "\n")


def _widths(text: str) -> tuple:
    try:
        widths = tuple(int(w) for w in text.replace("-", ",").split(",") if w.strip())
    except ValueError as exc:
        raise ConfigError(f"bad width list {text!r}") from exc
    if not widths:
        raise ConfigError("empty width list")
    return widths


def _arch_for(data: EmbeddingPairSet, widths: tuple, activation: str) -> ArchSpec:
    dv, dt = data.dims
    return ArchSpec((dv,) + widths, (dt,) + widths, activation)


# -- commands ---------------------------------------------------------------

def cmd_gen_toy(args) -> int:
    spec = ToySpec(n_pairs=args.pairs, n_clusters=args.clusters, d_v_raw=args.dim_v,
                   d_t_raw=args.dim_t, intra_noise=args.noise,
                   cross_noise=args.noise if args.cross_noise is None else args.cross_noise,
                   seed=args.seed, n_test=args.test)
    train, test = gen_toy(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifests = {"train": save_pairs(out / "train", train), "test": save_pairs(out / "test", test)}
    for m in manifests.values():
        m.pop("labels", None)
    _emit(args, {"out": str(out), "manifests": manifests})
    return EXIT_OK


def cmd_train_experts(args) -> int:
    data = load_pairs(args.data)
    arch = _arch_for(data, _widths(args.widths), args.activation)
    train = TrainConfig(epochs=args.epochs, lr=args.lr, batch=args.batch, tau=args.tau)
    if args.lr == 0:
        sys.stderr.write("warning: lr is 0, every expert checkpoint will equal the anchor\n")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pool = build_pool(data, arch, args.experts, train, seed=args.seed)
    out = Path(args.out)
    save_pool(out, pool)
    resolved = {"data": str(args.data), "arch": arch.to_dict(), "experts": args.experts,
                "train": vars(train), "seed": args.seed}
    _write_echo(out, "train-experts", resolved)
    losses = {str(eid): [c.train_loss for c in ck] for eid, ck in pool.experts.items()}
    n_files = 1 + sum(len(v) for v in pool.experts.values())
    _emit(args, {"out": str(out), "checkpoints": n_files, "train_loss": losses,
                 "data_fingerprint": data.fingerprint(), "config": resolved})
    return EXIT_OK


def cmd_seed(args) -> int:
    data = load_pairs(args.data)
    pool = load_pool(args.pool)
    method = args.method.replace("-", "_")
    if method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}")
    syn, sel = seed_synthetic(data, pool, args.pairs, method, Rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fp = save_synthetic(out / "syn_init.mdms", syn, include_state=False)
    payload = {"method": method, "k": args.pairs, "indices": sel.indices.tolist(),
               "quantization_error": sel.objective, "syn_fingerprint": fp}
    atomic_write_text(out / "selection.json", json.dumps(payload, indent=2) + "\n")
    _write_echo(out, "seed", {"data": str(args.data), "pool": str(args.pool),
                              "method": method, "k": args.pairs, "seed": args.seed})
    log.info("selected %d pairs, quantization error %.6f", args.pairs, sel.objective)
    _emit(args, payload)
    return EXIT_OK


def cmd_distill(args) -> int:
    overrides = {"lr": args.lr, "max_iters": args.iters, "kernel": args.kernel,
                 "seed": args.seed, "merge.alpha": args.alpha}
    cfg = load_config(args.config, overrides)
    data = load_pairs(args.data)
    pool = load_pool(args.pool)
    syn, rng = None, None
    if args.syn_in:
        syn, state = load_synthetic(args.syn_in, with_rng=True)
        if state is not None and args.resume:
            rng = Rng.from_state(state)
    result = run(data, pool, cfg, method=args.method.replace("-", "_"), k=args.pairs,
                 syn=syn, rng=rng)
    extra = {"data": str(args.data), "pool": str(args.pool), "syn_in": args.syn_in,
             "method": args.method, "k": result.syn.k}
    fp = write_run_artifacts(args.out, result, cfg, extra)
    totals = [r.loss.total for r in result.logs]
    payload = {"out": str(args.out), "syn_fingerprint": fp, "iterations": len(totals),
               "loss_first": totals[0] if totals else None,
               "loss_last": totals[-1] if totals else None,
               "stopped_early": result.stopped_early, "config": cfg.to_dict()}
    _emit(args, payload)
    return EXIT_OK


def _load_eval_archs(args, test: EmbeddingPairSet) -> list:
    if args.arch and Path(args.arch).is_file():
        spec = json.loads(Path(args.arch).read_text())
        entries = spec.get("archs") if isinstance(spec, dict) else spec
        if not isinstance(entries, list) or not entries:
            raise ConfigError("arch sweep file must hold a non-empty list under 'archs'")
        archs = []
        for e in entries:
            if isinstance(e, dict):
                archs.append(ArchSpec.from_dict(e))
            else:
                archs.append(_arch_for(test, tuple(int(w) for w in e), args.activation))
        return archs
    return [_arch_for(test, _widths(args.arch or "32,16"), args.activation)]


def cmd_eval(args) -> int:
    test = load_pairs(args.test)
    if str(args.syn).endswith(".mdms"):
        syn = load_synthetic(args.syn)
        image, text = syn.img_params, syn.txt_params
    else:
        pairs = load_pairs(args.syn)
        image, text = pairs.image, pairs.text
    if not (np.isfinite(image).all() and np.isfinite(text).all()):
        raise NumericError("training pairs contain non-finite values")
    train = TrainConfig(epochs=args.epochs, lr=args.lr, batch=args.batch, tau=args.tau)
    archs = _load_eval_archs(args, test)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        reports = {a.label: evaluate_pairs(image, text, test, a, train, args.repeats, args.seed)
                   for a in archs}
    summary = {label: r.to_dict() for label, r in reports.items()}
    mean = float(np.mean([r.mean for r in reports.values()]))
    payload = {"reports": summary, "Mean": mean,
               "config": {"train": vars(train), "repeats": args.repeats, "seed": args.seed,
                          "archs": [a.to_dict() for a in archs]}}
    csv_text = reports_to_csv(reports)
    if args.csv:
        print(csv_text, end="")
        if len(reports) > 1:
            print(f"# Mean,{mean:.6f}")
    else:
        _emit(args, payload, csv_text + (f"# Mean,{mean:.6f}" if len(reports) > 1 else ""))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed, instances=args.instances)
    payload = report.to_dict()
    lines = [f"{name:20s} max_rel_err={err:.3e}" for name, err in report.worst.items()]
    lines.append(f"{'PASS' if report.passed else 'FAIL'} ({report.n_instances} instances, "
                 f"tol {report.tol:g}, {report.seconds:.1f}s)")
    _emit(args, payload, "\n".join(lines))
    if not report.passed:
        bad = [k for k, v in report.worst.items() if not v < report.tol]
        raise NumericError(f"gradient check failed for {', '.join(bad)}")
    return EXIT_OK


def cmd_toy_benchmark(args) -> int:
    r = benchmark.run_toy(args.data_seed, lr=args.lr, kernel=args.kernel)
    summary = r.summary()
    text = (f"distilled {r.distilled.mean:.4f}  random {r.baseline.mean:.4f}  "
            f"kmeans-seed {r.seeded.mean:.4f}  margin {summary['diff']:.4f} "
            f"(se {summary['se']:.4f}, z {summary['z']:.2f})  {r.seconds:.1f}s")
    _emit(args, summary, text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="one-line JSON on stdout")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default: $MDM_THREADS, else all cores)")
    common.add_argument("--log-level", default="WARNING")

    ap = _Parser(prog="mdm", description="Multimodal distribution matching toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-toy", parents=[common], help="generate the toy pair sets")
    p.add_argument("--pairs", type=int, default=1000, help="training pairs")
    p.add_argument("--test", type=int, default=200, help="test pairs")
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--dim-v", type=int, default=16)
    p.add_argument("--dim-t", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--cross-noise", type=float, default=None, help="default: --noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_toy)

    p = sub.add_parser("train-experts", parents=[common], help="build the expert pool")
    p.add_argument("--data", required=True, help="training pair set (stem, .mdmx or .json)")
    p.add_argument("--experts", type=int, default=2)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--widths", default="32,16", help="hidden and output widths")
    p.add_argument("--activation", default="tanh", choices=("tanh", "linear"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_experts)

    p = sub.add_parser("seed", parents=[common], help="select initial synthetic pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--method", default="kmeans-joint")
    p.add_argument("--pairs", type=int, default=20, help="K")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_seed)

    p = sub.add_parser("distill", parents=[common], help="run the distillation loop")
    p.add_argument("--data", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--syn-in", default=None, help="start from this .mdms instead of seeding")
    p.add_argument("--resume", action="store_true",
                   help="also restore the generator state stored in --syn-in")
    p.add_argument("--method", default="kmeans-joint")
    p.add_argument("--pairs", type=int, default=20, help="K when seeding")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--iters", type=int, default=None, help="max_iters")
    p.add_argument("--kernel", default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", parents=[common], help="train on pairs, score on test")
    p.add_argument("--syn", required=True, help=".mdms synthetic set or a pair set")
    p.add_argument("--test", required=True)
    p.add_argument("--arch", default=None, help="widths like 32,16 or a JSON sweep file")
    p.add_argument("--activation", default="tanh", choices=("tanh", "linear"))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("toy-benchmark", parents=[common],
                       help="distilled vs random subset on the calibrated toy task")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--kernel", default="geodesic")
    p.set_defaults(fn=cmd_toy_benchmark)
    return ap


def _thread_limit(n):
    if n is None:
        env = os.environ.get("MDM_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError as exc:
                raise ConfigError(f"MDM_THREADS={env!r} is not an integer") from exc
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        logging.captureWarnings(True)
        with _thread_limit(args.threads):
            return args.fn(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (Exception, UsageError) as exc:
        log.debug("command failed", exc_info=True)
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
