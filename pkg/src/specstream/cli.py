"""Command-line entry point: training/evaluation runs and numerical
diagnostics.

Commands are batch-style: they read flags (optionally pre-seeded from a
``key = value`` config file, with explicit flags winning), run, write their
outputs, and exit 0 on success, 1 on a property or metric failure, and 2 on
usage or input errors.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, framelet, linalg, model_train, spectral_attention
from ._kernels import BACKEND
from .eventstream import ParseError, parse_jodie_csv

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_USAGE = 2

_COMMANDS = ("train", "eval", "svd-inspect", "framelet-check", "attn-gap")

# Flag destinations that may appear in a config file, with their parsers.
_CONFIG_TYPES = {
    "data": str, "seed": int, "batch_size": int, "lr": float,
    "weight_decay": float, "epochs": int, "d_mem": int, "d_embed": int,
    "cheb_order": int, "levels": int, "svd_fit": str, "rank_lo": int,
    "rank_hi": int, "out": str, "neg_ratio": float, "hidden": int,
    "patience": int, "checkpoint": str, "fixture": str, "rank": int,
    "graphs": int, "max_nodes": int,
}


def _build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """The CLI parser; with ``suppress`` the per-flag defaults are dropped so
    a second parse reveals which flags were given explicitly."""
    p = argparse.ArgumentParser(
        prog="specstream",
        description="Dynamic-graph learning on temporal event streams.",
        argument_default=argparse.SUPPRESS if suppress else None,
    )

    def add(*names, **kwargs):
        if suppress:
            kwargs.pop("default", None)
        p.add_argument(*names, **kwargs)

    add("command", choices=_COMMANDS)
    add("--config", default=None,
        help="key = value file supplying flag defaults")
    add("--data", default=None, help="interaction CSV path")
    add("--seed", type=int, default=0,
        help="root seed; all randomness derives from it")
    add("--batch-size", dest="batch_size", type=int, default=1000)
    add("--lr", type=float, default=1e-4)
    add("--weight-decay", dest="weight_decay", type=float, default=1e-2)
    add("--epochs", type=int, default=200)
    add("--d-mem", dest="d_mem", type=int, default=100)
    add("--d-embed", dest="d_embed", type=int, default=100)
    add("--cheb-order", dest="cheb_order", type=int, default=16)
    add("--levels", type=int, default=2)
    add("--svd-fit", dest="svd_fit", choices=("all", "train"), default="train")
    add("--rank-lo", dest="rank_lo", type=int, default=50)
    add("--rank-hi", dest="rank_hi", type=int, default=100)
    add("--out", default="run_out", help="output directory")
    add("--neg-ratio", dest="neg_ratio", type=float, default=0.5)
    add("--hidden", type=int, default=100)
    add("--patience", type=int, default=10)
    add("--checkpoint", default=None, help="checkpoint to evaluate")
    add("--fixture", choices=("geometric", "lowrank", "random"),
        default="geometric", help="built-in matrix when --data is not given")
    add("--rank", type=int, default=5, help="encoder rank for attn-gap")
    add("--graphs", type=int, default=10,
        help="random graphs for framelet-check")
    add("--max-nodes", dest="max_nodes", type=int, default=40)
    return p


class SystemExit2(Exception):
    """Usage/input error carrying its message (mapped to exit code 2)."""


def _read_config_file(path: str) -> dict:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SystemExit2(f"cannot read config file {path}: {exc.strerror}")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit2(f"{path}:{line_no}: expected 'key = value'")
        raw_key, _, value = line.partition("=")
        raw_key = raw_key.strip()
        key = raw_key.replace("-", "_")
        if key not in _CONFIG_TYPES:
            raise SystemExit2(f"{path}:{line_no}: unknown key {raw_key!r}")
        try:
            values[key] = _CONFIG_TYPES[key](value.strip())
        except ValueError:
            raise SystemExit2(f"{path}:{line_no}: bad value for {key!r}")
    return values


def parse_args(argv) -> argparse.Namespace:
    parser = _build_parser()
    args = parser.parse_args(argv)
    explicit = vars(_build_parser(suppress=True).parse_args(argv))
    if args.config:
        for key, value in _read_config_file(args.config).items():
            if key not in explicit:
                setattr(args, key, value)
    return args


def _require_file(path, what: str = "file") -> Path:
    if path is None:
        raise SystemExit2(f"missing required --data ({what})")
    p = Path(path)
    if not p.is_file():
        raise SystemExit2(f"no such {what}: {p}")
    return p


def _train_config(args: argparse.Namespace) -> model_train.TrainConfig:
    return model_train.TrainConfig(
        batch_size=args.batch_size, lr=args.lr, weight_decay=args.weight_decay,
        max_epochs=args.epochs, d_mem=args.d_mem, d_embed=args.d_embed,
        hidden=args.hidden, neg_ratio=args.neg_ratio, seed=args.seed,
        rank_lo=args.rank_lo, rank_hi=args.rank_hi, svd_fit=args.svd_fit,
        cheb_order=args.cheb_order, levels=args.levels, patience=args.patience,
    )


def _write_metrics_csv(path: Path, history) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,split,precision,roc_auc,loss,seconds\n")
        for row in history:
            fh.write(
                f"{row['epoch']},{row['split']},{row['precision']:.6f},"
                f"{row['roc_auc']:.6f},{row['loss']:.6f},{row['seconds']:.4f}\n"
            )


def _report_dict(report) -> dict:
    return {
        "precision": report.precision, "roc_auc": report.roc_auc,
        "n_pos": report.n_pos, "n_neg": report.n_neg, "loss": report.loss,
    }


def cmd_train(args: argparse.Namespace) -> int:
    data = _require_file(args.data, "dataset")
    log = parse_jodie_csv(data)
    cfg = _train_config(args)
    tic = time.perf_counter()
    result = model_train.train(log, cfg)
    wall = time.perf_counter() - tic
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics_csv(out / "metrics.csv", result.history)
    model_train.save_checkpoint(out / "checkpoint.npz", result)
    epochs_run = max(row["epoch"] for row in result.history)
    summary = {
        "dataset": str(data),
        "backend": BACKEND,
        "n_events": log.n,
        "n_nodes": log.n_nodes,
        "feature_dim": log.d,
        "encoder_rank": result.encoding.rank,
        "encoder_rel_err": result.encoding.err,
        "parameter_count": result.n_params,
        "best_epoch": result.best_epoch,
        "epochs_run": epochs_run,
        "seconds_total": wall,
        "seconds_per_epoch": wall / epochs_run,
        "splits": {name: _report_dict(r) for name, r in result.reports.items()},
        "node_task": ({name: _report_dict(r) for name, r in result.node_reports.items()}
                      if result.node_reports else None),
        "config": {f: getattr(cfg, f) for f in cfg.__dataclass_fields__},
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(f"parameters: {result.n_params}")
    print(f"best epoch: {result.best_epoch} of {epochs_run}")
    for name in ("train", "val", "test"):
        r = result.reports[name]
        print(f"{name}: precision={r.precision:.4f} roc_auc={r.roc_auc:.4f} "
              f"loss={r.loss:.4f}")
    print(f"wrote {out / 'metrics.csv'}, {out / 'checkpoint.npz'}, "
          f"{out / 'summary.json'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if args.checkpoint is None:
        raise SystemExit2("eval requires --checkpoint")
    ck_path = Path(args.checkpoint)
    if not ck_path.is_file():
        raise SystemExit2(f"no such checkpoint: {ck_path}")
    data = _require_file(args.data, "dataset")
    log = parse_jodie_csv(data)
    bundle = model_train.load_checkpoint(ck_path)
    reports = model_train.evaluate(log, bundle["config"], bundle["model"],
                                   bundle["fb"], bundle["theta"],
                                   bundle["encoding"])
    payload = {name: _report_dict(r) for name, r in reports.items()}
    print(json.dumps(payload, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
    return EXIT_OK


def _fixture_matrix(name: str, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    if name == "geometric":
        rows, cols = 1000, 172
        sigmas = 0.97 ** np.arange(1, cols + 1)
    elif name == "lowrank":
        rows, cols = 500, 172
        sigmas = np.concatenate([np.linspace(5.0, 1.0, 10), np.zeros(cols - 10)])
    else:
        return rng.standard_normal((100, 20))
    u = np.linalg.qr(rng.standard_normal((rows, cols)))[0]
    v = np.linalg.qr(rng.standard_normal((cols, cols)))[0]
    return (u * sigmas) @ v.T


def _load_matrix_arg(args: argparse.Namespace) -> np.ndarray:
    if args.data is not None:
        data = _require_file(args.data, "dataset")
        return parse_jodie_csv(data).features
    return _fixture_matrix(args.fixture, args.seed)


def cmd_svd_inspect(args: argparse.Namespace) -> int:
    x = _load_matrix_arg(args)
    print(f"matrix: {x.shape[0]}x{x.shape[1]} (fixture={args.fixture if args.data is None else 'data'})")
    selection = linalg.select_rank(x, lo=args.rank_lo, hi=args.rank_hi,
                                   tol=0.1, q=3, seed=args.seed)
    print(f"selected rank: {selection.rank}")
    print(f"relative error: {selection.rel_err:.6e}")
    print(f"tolerance warning: {'yes' if selection.warned else 'no'}")
    result = linalg.randomized_power_svd(x, selection.rank, q=3, seed=args.seed)
    print("sigma: " + ",".join(f"{s:.6g}" for s in result.sigma))
    for q in (1, 2, 3):
        times = []
        for _ in range(5):
            tic = time.perf_counter()
            linalg.randomized_power_svd(x, selection.rank, q=q, seed=args.seed)
            times.append(time.perf_counter() - tic)
        print(f"q={q}: {float(np.median(times)):.4f} s")
    return EXIT_OK


def _random_adjacency(n: int, rng: np.random.Generator, p: float = 0.25) -> np.ndarray:
    a = (rng.random((n, n)) < p).astype(np.float64)
    a = np.triu(a, 1)
    return a + a.T


def cmd_framelet_check(args: argparse.Namespace) -> int:
    fb = framelet.haar_filter_bank(args.cheb_order, args.levels)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    worst = {"round_trip": 0.0, "parseval": 0.0, "adjoint": 0.0}
    sizes = [1] + [int(rng.integers(2, args.max_nodes + 1))
                   for _ in range(args.graphs)]
    for n in sizes:
        adj = _random_adjacency(n, rng) if n > 1 else np.zeros((1, 1))
        lap = framelet.normalized_laplacian(adj)
        x = rng.standard_normal((n, 3))
        coeffs = framelet.framelet_decompose(lap, x, fb)
        recon = framelet.framelet_reconstruct(lap, coeffs, fb)
        x_norm = np.linalg.norm(x)
        worst["round_trip"] = max(worst["round_trip"],
                                  np.linalg.norm(recon - x) / x_norm)
        energy = sum(np.linalg.norm(band) ** 2 for band in coeffs.bands)
        worst["parseval"] = max(worst["parseval"],
                                abs(energy - x_norm ** 2) / x_norm ** 2)
        c_rand = framelet.FrameletCoeffs(
            bands=[rng.standard_normal(b.shape) for b in coeffs.bands],
            index=list(coeffs.index),
        )
        lhs = sum(float(np.sum(b1 * b2))
                  for b1, b2 in zip(coeffs.bands, c_rand.bands))
        rhs = float(np.sum(x * framelet.framelet_reconstruct(lap, c_rand, fb)))
        scale = max(abs(lhs), abs(rhs), 1e-30)
        worst["adjoint"] = max(worst["adjoint"], abs(lhs - rhs) / scale)
    bounds = {"round_trip": 1e-3, "parseval": 2e-3, "adjoint": 1e-10}
    failed = False
    for prop, err in worst.items():
        ok = err < bounds[prop]
        failed = failed or not ok
        print(f"{prop}: {'PASS' if ok else 'FAIL'} "
              f"(max rel err {err:.3e}, bound {bounds[prop]:.0e})")
    print(f"graphs checked: {len(sizes)} (orders m={args.cheb_order}, "
          f"levels={args.levels})")
    return EXIT_PROPERTY if failed else EXIT_OK


def cmd_attn_gap(args: argparse.Namespace) -> int:
    x = _load_matrix_arg(args)
    rank = min(args.rank, x.shape[1])
    print(f"matrix: {x.shape[0]}x{x.shape[1]}, rank parameter {rank}")
    for q in (1, 2, 3):
        gap = spectral_attention.attention_svd_gap(x, q=q, rank=rank,
                                                   seed=args.seed)
        print(f"q={q}: gap={gap:.6e}")
    return EXIT_OK


_HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "svd-inspect": cmd_svd_inspect,
    "framelet-check": cmd_framelet_check,
    "attn-gap": cmd_attn_gap,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # argparse exits 2 on usage errors already
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return _HANDLERS[args.command](args)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROPERTY


if __name__ == "__main__":
    sys.exit(main())
