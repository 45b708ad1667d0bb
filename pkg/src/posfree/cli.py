"""``posfree`` command line: gen, train, sweep, cost and report.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure, 4 sweep finished with failed runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, format_config, load_config
from .costmodel import CONVENTION, cost_pair, cost_csv, scaling_table
from .errors import PARTIAL_SWEEP_EXIT, ConfigError, DataError, PosfreeError, UsageError
from .layers import save_checkpoint
from .sweep import SweepReport, cell_name, emit_curves, emit_table, emit_table_csv, run_sweep
from .synthgen import SynthDataset, gen_dataset, read_split, write_split
from .training import train

SEED_ENV = "POSFREE_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def _resolve_seed(args, cfg: ExperimentConfig, keys: list[tuple[str, str]]) -> int | None:
    """--seed wins; POSFREE_SEED fills in only where the config file left
    the seed unset."""
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None or any(k in cfg.explicit for k in keys):
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(path: Path, command: str, cfg: ExperimentConfig, seed, artifacts: list[Path],
                    started: float, extra: dict | None = None) -> None:
    """Written after every artifact; its presence marks a finished run."""
    lines = [f"tool=posfree {__version__}", f"python={platform.python_version()}", f"numpy={np.__version__}",
             f"command={command}", f"seed={seed}",
             f"finished_utc={datetime.now(timezone.utc).isoformat(timespec='seconds')}",
             f"wall_clock_seconds={time.perf_counter() - started:.3f}"]
    lines.extend(f"{k}={v}" for k, v in (extra or {}).items())
    for a in artifacts:
        lines.append(f"artifact={a.name} sha256={hashlib.sha256(a.read_bytes()).hexdigest()}")
    lines.append("[config]")
    lines.append(format_config(cfg))
    path.write_text("\n".join(lines))


def cmd_gen(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg, [("synth", "seed")])
    if seed is not None:
        cfg = cfg.with_(synth=cfg.synth.with_(seed=seed))
    out = _out_dir(args)
    dataset = gen_dataset(cfg.synth)
    paths = [out / "train.txt", out / "test.txt"]
    write_split(paths[0], dataset, "train")
    write_split(paths[1], dataset, "test")
    _write_manifest(out / "manifest.txt", "gen", cfg, cfg.synth.seed, paths, started)
    print(f"wrote {len(dataset.train[0])} train / {len(dataset.test[0])} test samples to {out}")
    return 0


def load_dataset(directory) -> SynthDataset:
    directory = Path(directory)
    parts = []
    for split in ("train", "test"):
        path = directory / f"{split}.txt"
        if not path.exists():
            raise DataError(f"missing dataset file {path}")
        parts.append(read_split(path))
    (cfg, transfer, tr_tok, tr_val), (cfg2, transfer2, te_tok, te_val) = parts
    if cfg != cfg2 or not np.array_equal(transfer, transfer2):
        raise DataError(f"{directory}: train and test files come from different generator settings")
    return SynthDataset(cfg, transfer, np.concatenate([tr_tok, te_tok]), np.concatenate([tr_val, te_val]),
                        len(tr_tok))


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg, [("train", "seed"), ("model", "seed")])
    model, train_cfg = cfg.model, cfg.train
    if args.arch:
        model = model.with_(architecture=args.arch)
    if seed is not None:
        model, train_cfg = model.with_(seed=seed), train_cfg.with_(seed=seed)
    if args.epochs is not None:
        train_cfg = train_cfg.with_(epochs=args.epochs)
    cfg = cfg.with_(model=model, train=train_cfg)
    dataset = load_dataset(args.data)
    out = _out_dir(args)
    params, report = train(model, dataset, train_cfg)
    csv_path = out / "report.csv"
    meta = report.write(csv_path)
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, params)
    _write_manifest(out / "manifest.txt", "train", cfg, train_cfg.seed, [csv_path, meta, ckpt], started,
                    {"data": Path(args.data).resolve()})
    if report.best_test_loss is None:
        print("best test loss: n/a (0 epochs)")
    else:
        print(f"best test loss: {report.best_test_loss:.6f} (epoch {report.best_epoch})")
    return 0


def _avg_row(report: SweepReport) -> str:
    parts = []
    for i, e_p in enumerate(report.grid.e_p_values):
        r = report.avg_r_delta(i)
        parts.append(f"{e_p:g}:{'--' if r is None else f'{r:.3f}'}")
    return "avg r_delta by e_p  " + "  ".join(parts)


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg, [("sweep", "master_seed")])
    if seed is not None:
        cfg = cfg.with_(sweep=dataclasses.replace(cfg.sweep, master_seed=seed))
    if args.epochs is not None:
        cfg = cfg.with_(train=cfg.train.with_(epochs=args.epochs))
    grid = cfg.sweep_grid()
    workers = args.workers or os.cpu_count() or 1
    out = _out_dir(args)

    def progress(done, total):
        print(f"\r{done}/{total} tasks", end="", file=sys.stderr, flush=True)

    report = run_sweep(grid, workers, progress if not args.quiet else None)
    if not args.quiet:
        print(file=sys.stderr)
    paths = [out / "table1.txt", out / "table1.csv", out / "sweep_report.json"]
    paths[0].write_text(emit_table(report))
    paths[1].write_text(emit_table_csv(report))
    report.save(paths[2])
    for e_p in grid.e_p_values:
        for sigma in grid.sigma_values:
            p = out / f"curves_{cell_name(e_p, sigma)}.csv"
            p.write_text(emit_curves(report, (e_p, sigma)))
            paths.append(p)
    seeds = {f"run.{r.e_p_index}.{r.sigma_index}.{r.trial}.{r.architecture}":
             f"data={r.data_seed} train={r.train_seed} init={r.init_seed}"
             + ("" if r.error is None else f" error={r.error}") for r in report.runs}
    _write_manifest(out / "sweep_manifest.txt", "sweep", cfg, grid.master_seed, paths, started,
                    {"workers": workers, "complete": report.complete, **seeds})
    print(emit_table(report), end="")
    print(_avg_row(report))
    if not report.complete:
        print(f"sweep incomplete: {len(report.failures)} failed run(s)", file=sys.stderr)
        return PARTIAL_SWEEP_EXIT
    return 0


def cmd_cost(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config)
    out = _out_dir(args)
    reports = []
    for c in cfg.cost.configs():
        reports.extend(cost_pair(c))
    path = out / "cost_report.csv"
    path.write_text(cost_csv(reports))
    artifacts = [path]
    extra = {"convention": CONVENTION}
    if cfg.cost.budget_bytes is not None:
        lengths = sorted({c.seq_len for c in cfg.cost.configs()})
        for c in {c.with_(seq_len=1) for c in cfg.cost.configs()}:
            _, crossing = scaling_table(c, lengths, cfg.cost.budget_bytes)
            for arch, l in crossing.items():
                extra[f"budget_crossing.d{c.hidden_dim}.{arch}"] = l
    _write_manifest(out / "manifest.txt", "cost", cfg, None, artifacts, started, extra)
    print(path.read_text(), end="")
    return 0


def cmd_report(args) -> int:
    path = Path(args.report)
    if path.is_dir():
        path = path / "sweep_report.json"
    try:
        report = SweepReport.load(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read sweep report {path}: {exc}") from None
    print(emit_table(report), end="")
    print(_avg_row(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="posfree", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"posfree {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_default):
        p.add_argument("--config", help="experiment config file (defaults apply when omitted)")
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, "data")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model on a generated dataset")
    common(p, "run")
    p.add_argument("--data", required=True, help="directory written by 'posfree gen'")
    p.add_argument("--arch", choices=["attention", "adjacency"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run the (e_p, sigma) grid for both architectures")
    common(p, "sweep")
    p.add_argument("--workers", type=int, help="parallel worker processes (default: all cores)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true", help="no progress on stderr")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("cost", help="analytic FLOPs and memory for the configured shapes")
    common(p, "cost")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("report", help="print the table of a saved sweep")
    p.add_argument("report", help="sweep_report.json or the sweep output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PosfreeError as exc:
        print(f"posfree {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"posfree {args.command}: error: {exc}", file=sys.stderr)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
