"""Grid experiments over (e_p, sigma): paired training of both architectures,
r_delta aggregation, and the table/curve emitters.

Every run derives its seeds from ``(master_seed, e_p index, sigma index,
trial)``. Because of that the report is independent of worker count and of
scheduling order. A grid that is a prefix of another (same leading e_p and
sigma values) reproduces the matching cells exactly.
"""

from __future__ import annotations

import io
import json
import math
import multiprocessing
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, UsageError
from .layers import ModelConfig
from .numerics import derive_seed, make_rng
from .synthgen import SynthConfig, bayes_risk, bayes_risk_stderr, gen_dataset, sample_e_ij
from .training import TrainConfig, train

DEFAULT_E_P = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
DEFAULT_SIGMA = (0.1, 0.2, 0.3, 0.4, 0.5)
PAIR = ("attention", "adjacency")
LABELS = {"attention": "TF", "adjacency": "GNN"}


@dataclass(frozen=True)
class SweepGrid:
    e_p_values: tuple[float, ...] = DEFAULT_E_P
    sigma_values: tuple[float, ...] = DEFAULT_SIGMA
    trials: int = 5
    synth: SynthConfig = SynthConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "e_p_values", tuple(float(x) for x in self.e_p_values))
        object.__setattr__(self, "sigma_values", tuple(float(x) for x in self.sigma_values))
        if not self.e_p_values or not self.sigma_values:
            raise ConfigError("sweep grid needs at least one e_p and one sigma value")
        if self.trials < 1:
            raise ConfigError(f"trials must be positive, got {self.trials}")
        for s in self.sigma_values:
            if s <= 0:
                raise ConfigError(f"sweep sigma values must be positive, got {s}")
        for e in self.e_p_values:
            self.synth.with_(e_p=e)  # range validation

    def with_(self, **changes) -> "SweepGrid":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return SweepGrid(**{**fields, **changes})

    def tasks(self) -> list[tuple[int, int, int]]:
        return [(i, j, t) for i in range(len(self.e_p_values))
                for j in range(len(self.sigma_values)) for t in range(self.trials)]

    @property
    def run_count(self) -> int:
        return len(self.tasks()) * len(PAIR)

    def to_dict(self) -> dict:
        return {"e_p_values": list(self.e_p_values), "sigma_values": list(self.sigma_values),
                "trials": self.trials, "master_seed": self.master_seed,
                "synth": asdict(self.synth), "model": asdict(self.model), "train": asdict(self.train)}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepGrid":
        return cls(tuple(d["e_p_values"]), tuple(d["sigma_values"]), d["trials"],
                   SynthConfig(**d["synth"]), ModelConfig(**d["model"]), TrainConfig(**d["train"]),
                   d["master_seed"])


@dataclass
class RunRecord:
    e_p_index: int
    sigma_index: int
    trial: int
    architecture: str
    data_seed: int
    train_seed: int
    init_seed: int
    best_test_loss: float | None
    test_losses: list[float] = field(default_factory=list)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.best_test_loss is None


@dataclass
class CellInfo:
    e_p: float
    sigma: float
    transfer: list[list[float]]
    bayes_risk: float
    bayes_stderr: float


def cell_transfer(grid: SweepGrid, i: int, j: int) -> np.ndarray:
    """Coupling matrix shared by every trial of cell (i, j)."""
    return sample_e_ij(make_rng(grid.master_seed, "transfer", i, j), grid.synth.token_count)


def cell_info(grid: SweepGrid, i: int, j: int) -> CellInfo:
    transfer = cell_transfer(grid, i, j)
    cfg = grid.synth.with_(e_p=grid.e_p_values[i], sigma=grid.sigma_values[j])
    n_test = cfg.sample_count - cfg.n_train
    return CellInfo(grid.e_p_values[i], grid.sigma_values[j], transfer.tolist(),
                    bayes_risk(cfg, transfer, grid.train.masks_per_sample),
                    bayes_risk_stderr(cfg, n_test, transfer, grid.train.masks_per_sample))


def run_task(grid: SweepGrid, i: int, j: int, trial: int) -> list[RunRecord]:
    """Train both architectures on one freshly generated dataset."""
    data_seed = derive_seed(grid.master_seed, "data", i, j, trial)
    train_seed = derive_seed(grid.master_seed, "train", i, j, trial)
    init_seed = derive_seed(grid.master_seed, "init", i, j, trial)
    transfer = cell_transfer(grid, i, j)
    synth = grid.synth.with_(e_p=grid.e_p_values[i], sigma=grid.sigma_values[j], seed=data_seed,
                             transfer=tuple(map(tuple, transfer)))
    dataset = gen_dataset(synth)
    train_cfg = grid.train.with_(seed=train_seed)
    records = []
    for arch in PAIR:
        model = grid.model.with_(architecture=arch, seed=init_seed)
        try:
            _, report = train(model, dataset, train_cfg)
            records.append(RunRecord(i, j, trial, arch, data_seed, train_seed, init_seed,
                                     report.best_test_loss, report.test_losses))
        except Exception as exc:  # a failed run marks a gap, never aborts the sweep
            records.append(RunRecord(i, j, trial, arch, data_seed, train_seed, init_seed,
                                     None, [], f"{type(exc).__name__}: {exc}"))
    return records


def _run_task_args(args) -> list[RunRecord]:
    return run_task(*args)


@dataclass
class SweepReport:
    grid: SweepGrid
    cells: dict[tuple[int, int], CellInfo]
    runs: list[RunRecord]

    def __post_init__(self):
        self.runs.sort(key=lambda r: (r.e_p_index, r.sigma_index, r.trial, PAIR.index(r.architecture)))

    # ---- aggregation -----------------------------------------------------

    def records(self, i: int, j: int, architecture: str) -> list[RunRecord]:
        return [r for r in self.runs if (r.e_p_index, r.sigma_index, r.architecture) == (i, j, architecture)]

    def losses(self, i: int, j: int, architecture: str) -> list[float]:
        return [r.best_test_loss for r in self.records(i, j, architecture) if not r.failed]

    def mean(self, i: int, j: int, architecture: str) -> float | None:
        xs = self.losses(i, j, architecture)
        return float(statistics.fmean(xs)) if xs else None

    def std(self, i: int, j: int, architecture: str) -> float | None:
        xs = self.losses(i, j, architecture)
        if not xs:
            return None
        return float(statistics.stdev(xs)) if len(xs) > 1 else 0.0

    def r_delta(self, i: int, j: int) -> float | None:
        tf, gnn = self.mean(i, j, "attention"), self.mean(i, j, "adjacency")
        if tf is None or gnn is None or tf <= 0:
            return None
        return gnn / tf

    def trial_r_delta(self, i: int, j: int) -> list[float]:
        """r_delta of each trial whose two runs both succeeded."""
        by_trial: dict[int, dict[str, float]] = {}
        for r in self.runs:
            if (r.e_p_index, r.sigma_index) == (i, j) and not r.failed:
                by_trial.setdefault(r.trial, {})[r.architecture] = r.best_test_loss
        return [d["adjacency"] / d["attention"] for _, d in sorted(by_trial.items()) if len(d) == 2]

    def avg_r_delta(self, i: int) -> float | None:
        """Arithmetic mean of r_delta over the sigma values with data."""
        rs = [self.r_delta(i, j) for j in range(len(self.grid.sigma_values))]
        rs = [r for r in rs if r is not None]
        return float(statistics.fmean(rs)) if rs else None

    @property
    def failures(self) -> list[RunRecord]:
        expected = {(i, j, t, a) for i, j, t in self.grid.tasks() for a in PAIR}
        have = {(r.e_p_index, r.sigma_index, r.trial, r.architecture) for r in self.runs}
        missing = [RunRecord(i, j, t, a, 0, 0, 0, None, [], "missing") for i, j, t, a in sorted(expected - have)]
        return [r for r in self.runs if r.failed] + missing

    @property
    def complete(self) -> bool:
        return not self.failures

    def index_of(self, e_p: float, sigma: float) -> tuple[int, int]:
        try:
            return self.grid.e_p_values.index(float(e_p)), self.grid.sigma_values.index(float(sigma))
        except ValueError:
            raise UsageError(f"no cell e_p={e_p}, sigma={sigma} in this sweep") from None

    def select(self, e_p_indices: Iterable[int]) -> "SweepReport":
        """Report restricted to the given e_p rows, re-indexed from 0."""
        keep = list(e_p_indices)
        remap = {old: new for new, old in enumerate(keep)}
        grid = self.grid.with_(e_p_values=tuple(self.grid.e_p_values[i] for i in keep))
        cells = {(remap[i], j): c for (i, j), c in self.cells.items() if i in remap}
        runs = [RunRecord(**{**asdict(r), "e_p_index": remap[r.e_p_index]})
                for r in self.runs if r.e_p_index in remap]
        return SweepReport(grid, cells, runs)

    # ---- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(),
                "cells": [{"e_p_index": i, "sigma_index": j, **asdict(c)} for (i, j), c in sorted(self.cells.items())],
                "runs": [asdict(r) for r in self.runs]}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepReport":
        cells = {}
        for c in d["cells"]:
            c = dict(c)
            key = (c.pop("e_p_index"), c.pop("sigma_index"))
            cells[key] = CellInfo(**c)
        return cls(SweepGrid.from_dict(d["grid"]), cells, [RunRecord(**r) for r in d["runs"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "SweepReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def from_losses(cls, e_p_values, sigma_values, losses: dict[tuple[int, int], tuple[float, float]]) -> "SweepReport":
        """One-trial report built from given (TF, GNN) losses, for replaying
        published tables through the formatter."""
        grid = SweepGrid(tuple(e_p_values), tuple(sigma_values), trials=1)
        runs = [RunRecord(i, j, 0, arch, 0, 0, 0, float(loss))
                for (i, j), pair in losses.items() for arch, loss in zip(PAIR, pair)]
        return cls(grid, {}, runs)


def run_sweep(grid: SweepGrid, workers: int = 1,
              progress: Callable[[int, int], None] | None = None) -> SweepReport:
    tasks = grid.tasks()
    runs: list[RunRecord] = []
    if workers <= 1:
        for n, task in enumerate(tasks, start=1):
            runs.extend(run_task(grid, *task))
            if progress:
                progress(n, len(tasks))
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for n, recs in enumerate(pool.map(_run_task_args, [(grid, *t) for t in tasks]), start=1):
                runs.extend(recs)
                if progress:
                    progress(n, len(tasks))
    cells = {(i, j): cell_info(grid, i, j)
             for i in range(len(grid.e_p_values)) for j in range(len(grid.sigma_values))}
    return SweepReport(grid, cells, runs)


# ---------------------------------------------------------------------------
# Emitters
# ---------------------------------------------------------------------------

GAP = "--"


def _fmt(x: float | None) -> str:
    return GAP if x is None else f"{x:.3f}"


def emit_table(report: SweepReport) -> str:
    """Fixed-width text table: TF, GNN and r_delta rows per e_p, one column
    per sigma plus an Avg column (r_delta rows only). Gaps are ``--``."""
    g = report.grid
    head = ["e_p", ""] + [f"{s:g}" for s in g.sigma_values] + ["Avg"]
    rows = [head]
    for i, e_p in enumerate(g.e_p_values):
        for k, arch in enumerate(PAIR):
            rows.append([f"{e_p:g}" if k == 0 else "", LABELS[arch]]
                        + [_fmt(report.mean(i, j, arch)) for j in range(len(g.sigma_values))] + ["-"])
        rows.append(["", "r_delta"] + [_fmt(report.r_delta(i, j)) for j in range(len(g.sigma_values))]
                    + [_fmt(report.avg_r_delta(i))])
    widths = [max(len(r[c]) for r in rows) for c in range(len(head))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    if not report.complete:
        lines.append(f"incomplete: {len(report.failures)} run(s) failed or missing")
    return "\n".join(lines) + "\n"


CSV_COLUMNS = ("e_p", "sigma", "tf_loss", "tf_std", "gnn_loss", "gnn_std", "r_delta", "tf_trials", "gnn_trials")


def _num(x: float | None) -> str:
    return "" if x is None else "%.17g" % x


def emit_table_csv(report: SweepReport) -> str:
    """CSV twin of :func:`emit_table` at full precision. Each e_p has one row
    per sigma and then an ``avg`` row that carries only r_delta. Gaps are
    empty fields."""
    g = report.grid
    out = [",".join(CSV_COLUMNS)]
    for i, e_p in enumerate(g.e_p_values):
        for j, sigma in enumerate(g.sigma_values):
            out.append(",".join([_num(e_p), _num(sigma),
                                 _num(report.mean(i, j, "attention")), _num(report.std(i, j, "attention")),
                                 _num(report.mean(i, j, "adjacency")), _num(report.std(i, j, "adjacency")),
                                 _num(report.r_delta(i, j)),
                                 str(len(report.losses(i, j, "attention"))),
                                 str(len(report.losses(i, j, "adjacency")))]))
        out.append(",".join([_num(e_p), "avg", "", "", "", "", _num(report.avg_r_delta(i)), "", ""]))
    return "\n".join(out) + "\n"


def parse_table_csv(text: str) -> list[dict]:
    """Inverse of :func:`emit_table_csv`; empty fields become None."""
    lines = text.strip().splitlines()
    if tuple(lines[0].split(",")) != CSV_COLUMNS:
        raise UsageError("not a sweep table CSV")
    rows = []
    for line in lines[1:]:
        row = {}
        for key, raw in zip(CSV_COLUMNS, line.split(",")):
            if raw == "":
                row[key] = None
            elif key == "sigma" and raw == "avg":
                row[key] = raw
            elif key.endswith("_trials"):
                row[key] = int(raw)
            else:
                row[key] = float(raw)
        rows.append(row)
    return rows


def emit_curves(report: SweepReport, cell: tuple[float, float] | None) -> str:
    """Long-format per-epoch test losses (epoch, architecture, trial,
    test_loss) for both architectures of one (e_p, sigma) cell. ``None``
    gives the header only."""
    out = io.StringIO()
    out.write("epoch,architecture,trial,test_loss\n")
    if cell is None:
        return out.getvalue()
    i, j = report.index_of(*cell)
    for arch in PAIR:
        for r in report.records(i, j, arch):
            for epoch, loss in enumerate(r.test_losses, start=1):
                out.write(f"{epoch},{arch},{r.trial},{loss!r}\n")
    return out.getvalue()


def cell_name(e_p: float, sigma: float) -> str:
    return f"ep{e_p:g}_sigma{sigma:g}"


def final_losses(report: SweepReport, i: int, j: int, architecture: str) -> list[float]:
    """Last-epoch test loss of every successful trial."""
    return [r.test_losses[-1] for r in report.records(i, j, architecture) if r.test_losses]


def bayes_floor_violations(report: SweepReport, k: float = 3.0) -> list[tuple[RunRecord, float]]:
    """Runs whose best test loss falls below ``bayes_risk - k * stderr``."""
    bad = []
    for r in report.runs:
        c = report.cells.get((r.e_p_index, r.sigma_index))
        if c is None or r.failed:
            continue
        floor = c.bayes_risk - k * c.bayes_stderr
        if r.best_test_loss < floor or not math.isfinite(r.best_test_loss):
            bad.append((r, floor))
    return bad
