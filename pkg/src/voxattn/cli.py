"""Command-line entry point: ``voxattn {synth,train,eval,cam,params,gradcheck}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from contextlib import contextmanager, nullcontext
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError, FormatError, InputError, NumericError, ShapeError, StateError, VoxAttnError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5

log = logging.getLogger("voxattn")


class LockedError(VoxAttnError):
    pass


@contextmanager
def output_lock(out_dir: Path):
    """Exclusive ownership of ``out_dir`` for one run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{out_dir} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _thread_limit():
    n = os.environ.get("VOXATTN_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _resolve(path: Optional[str], what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} given (flag or config)")
    return Path(path)


def _load_split(manifest: Path, geometry, folds=None):
    from .data import load_samples, read_manifest
    rows = read_manifest(manifest)
    if folds is not None:
        rows = [r for r in rows if r.fold not in folds]
    return load_samples(rows, manifest.parent, geometry)


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args, cfg) -> int:
    from .synth import synth_generate
    out = _resolve(args.out, "--out")
    train_cfg = cfg.synth.train if args.seed is None else dataclasses.replace(cfg.synth.train, seed=args.seed)
    section = dataclasses.replace(cfg.synth, train=train_cfg)
    with output_lock(out):
        rows = synth_generate(section.train, out / "train")
        test_rows = synth_generate(section.test_config(), out / "test")
    print(f"wrote {len(rows)} training and {len(test_rows)} test volumes under {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    import numpy as np
    from .metrics import MetricsReport
    from .train import summarize_folds, train_and_evaluate
    out = _resolve(args.out, "--out")
    train_manifest = _resolve(args.manifest or cfg.data.train_manifest, "training manifest (--manifest)")
    test_manifest = _resolve(args.test_manifest or cfg.data.test_manifest, "test manifest (--test-manifest)")
    train_cfg = cfg.train if args.seed is None else dataclasses.replace(cfg.train, seed=args.seed)
    folds = cfg.data.folds if args.folds is None else args.folds
    geometry = cfg.network.input_geometry
    test = _load_split(test_manifest, geometry)
    started = time.time()
    with output_lock(out):
        results = []
        fold_ids = [None] if folds <= 1 else list(range(folds))
        for fold in fold_ids:
            train = _load_split(train_manifest, geometry, None if fold is None else {fold})
            log.info("training %s on %d volumes", "single split" if fold is None else f"fold {fold}", len(train))
            res = train_and_evaluate(cfg.network, train_cfg, train, test, out, fold, cfg.eval.batch_size)
            results.append(res)
            print(f"[{'single' if fold is None else f'fold {fold}'}] " + res.report.csv_line())
        agg = summarize_folds(results)
        summary = {
            "config_hash": cfg.hash,
            "seed": train_cfg.seed,
            "wall_clock_s": round(time.time() - started, 3),
            "folds": [
                {"fold": r.fold, "epoch_log": str(out / f"{'single' if r.fold is None else f'fold{r.fold}'}_epochs.jsonl"),
                 "checkpoint": str(r.checkpoint), "metrics": r.report.to_dict()}
                for r in results
            ],
            "mean_std": agg,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        text = "\n".join(f"{k}: {m:.4f} +/- {s:.4f}" for k, (m, s) in agg.items())
        (out / "metrics.txt").write_text(text + "\n")
        print(text)
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import evaluate
    ckpt = _resolve(args.checkpoint, "--checkpoint")
    manifest = _resolve(args.manifest or cfg.data.test_manifest, "test manifest (--manifest)")
    params = load_checkpoint(ckpt)
    samples = _load_split(manifest, params.cfg.input_geometry)
    report = evaluate(params, samples, cfg.eval.batch_size)
    print(report.as_text())
    print(report.csv_header())
    print(report.csv_line())
    if args.out:
        out = Path(args.out)
        with output_lock(out):
            (out / "metrics.txt").write_text(report.as_text() + "\n")
            (out / "metrics.csv").write_text(report.csv_header() + "\n" + report.csv_line() + "\n")
    return EXIT_OK


def cmd_cam(args, cfg) -> int:
    from .cam import cam_export, sample_cams
    from .checkpoint import load_checkpoint
    ckpt = _resolve(args.checkpoint, "--checkpoint")
    manifest = _resolve(args.manifest or cfg.data.test_manifest, "volume manifest (--manifest)")
    out = _resolve(args.out, "--out")
    params = load_checkpoint(ckpt)
    from .data import load_samples, read_manifest
    rows = read_manifest(manifest)
    if cfg.eval.cam_limit:
        rows = rows[: cfg.eval.cam_limit]
    samples = load_samples(rows, manifest.parent, params.cfg.input_geometry)
    with output_lock(out):
        for row, cam in zip(rows, sample_cams(params, samples, cfg.eval.batch_size)):
            stem = Path(row.path).stem
            cam_export(cam, cam.values.shape, out / stem, "cam")
            print(f"{row.path}: predicted {cam.predicted_class}, label {row.label} -> {out / stem}")
    return EXIT_OK


def cmd_params(args, cfg) -> int:
    from .backbone import build_network, count_parameters
    net = cfg.network
    full = count_parameters(build_network(net, initialize=False))
    print(full)
    if net.use_ca or net.use_da:
        base = count_parameters(build_network(dataclasses.replace(net, use_ca=False, use_da=False), initialize=False))
        print(f"{'no attn':>10}: {base.total:>12,d}  ({base.total / 1e6:.2f}M)")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import gradient_suite
    tol = args.tol
    seeds = range(args.seeds)
    failed = 0
    for rep in gradient_suite(seeds):
        ok = rep.passed(tol)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {rep.op:48s} max rel err {rep.max_rel_error:.3e}")
    print(f"{failed} failure(s) at tolerance {tol:g}")
    return EXIT_GRADCHECK if failed else EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "cam": cmd_cam, "params": cmd_params, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="overrides train.seed (synth: synth.seed)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--folds", type=int, help="k-fold training; 1 = single split")
    common.add_argument("--checkpoint", help="model checkpoint")
    common.add_argument("--manifest", help="volume manifest (train: training set; eval/cam: volumes)")
    common.add_argument("--test-manifest", help="test manifest for train")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="voxattn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "gradcheck":
            p.add_argument("--tol", type=float, default=1e-4)
            p.add_argument("--seeds", type=int, default=5)
    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .config import parse_config
    try:
        cfg = parse_config(args.config)
        with _thread_limit():
            return COMMANDS[args.command](args, cfg)
    except (ConfigError, LockedError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FormatError, ShapeError, StateError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
