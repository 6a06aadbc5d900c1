"""Grid runner: methods x adaptation modes x seeds, with metrics files and a summary table.

A *cell* is one (method, mode, seed) triple. Cells sharing (method, seed) share
one pretraining run, so the grid is executed in units of (method, seed) that
pretrain once and then adapt every test task in each requested mode. Every cell
gets its own line-delimited metrics file holding the pretraining records
followed by that mode's adaptation and evaluation records.
"""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .adapters import ROUTED, adapter_param_count, routing_row_size
from .harness import (
    DivergenceError,
    ExperimentConfig,
    adapt,
    canonical_mode,
    expected_trainable,
    make_suite,
    pretrain,
)

DEFAULT_METHODS = ("lora", "tlora", "poly", "tp1", "tp2", "tpx")
DEFAULT_MODES = ("full", "z-only", "mu-only")
DEFAULT_SEEDS = (0, 1024, 42)
ENV_WORKERS = "TENSORPOLY_WORKERS"
ENV_RUN_ROOT = "TENSORPOLY_RUN_ROOT"
SUMMARY_FIELDS = ("method", "mode", "adapt_params", "pretrain_params", "median_test_loss",
                  "seed_losses", "seeds", "status")


@dataclass
class SuiteSpec:
    base: ExperimentConfig = field(default_factory=ExperimentConfig)
    methods: tuple = DEFAULT_METHODS
    modes: tuple = DEFAULT_MODES
    seeds: tuple = DEFAULT_SEEDS

    def cells(self) -> list[tuple[str, str, int]]:
        """Valid (method, mode, seed) triples; unrouted methods only adapt in full mode."""
        out = []
        for m in self.methods:
            for mode in self.modes:
                if m not in ROUTED and mode != "full":
                    continue
                out.extend((m, mode, s) for s in self.seeds)
        return out

    def as_dict(self) -> dict:
        return {"base": self.base.as_dict(), "methods": list(self.methods),
                "modes": list(self.modes), "seeds": list(self.seeds)}


@dataclass
class CellResult:
    method: str
    mode: str
    seed: int
    status: str
    mean_test_loss: Optional[float]
    task_losses: list
    adapt_trainable: Optional[int]
    lines: list
    error: str = ""


def cell_name(method: str, mode: str, seed: int) -> str:
    return f"{method}_{mode}_seed{seed}.jsonl"


def _json_line(rec) -> str:
    return json.dumps(rec.as_dict(), sort_keys=True, separators=(",", ":"))


def run_unit(base: dict, method: str, seed: int, modes: tuple) -> list[CellResult]:
    """Pretrain one (method, seed) and adapt in each mode. Never raises."""
    cfg = ExperimentConfig.from_mapping({**base, "method": method, "seed": seed})
    pre_lines: list[str] = []
    try:
        suite = make_suite(cfg)
        ckpt = pretrain(cfg, suite, emit=lambda r: pre_lines.append(_json_line(r)))
    except Exception as exc:  # the whole unit fails
        return [CellResult(method, m, seed, _status(exc), None, [], None, list(pre_lines), repr(exc))
                for m in modes]
    results = []
    for mode in modes:
        lines = list(pre_lines)
        try:
            losses, trainable = [], None
            for task in suite.test_tasks:
                res = adapt(ckpt, task, mode, emit=lambda r: lines.append(_json_line(r)))
                losses.append(res.test_loss)
                trainable = res.trainable
            mean = float(np.mean(losses)) if losses else float("nan")
            results.append(CellResult(method, mode, seed, "ok", mean, losses, trainable, lines))
        except Exception as exc:
            results.append(CellResult(method, mode, seed, _status(exc), None, [], None, lines, repr(exc)))
    return results


def _status(exc) -> str:
    return "diverged" if isinstance(exc, (DivergenceError, FloatingPointError)) else "failed"


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(ENV_WORKERS)
    if not raw:
        return default
    n = int(raw)
    if n < 1:
        raise ValueError(f"{ENV_WORKERS} must be a positive integer, got {raw!r}")
    return n


def run_root(default: str = "runs") -> Path:
    return Path(os.environ.get(ENV_RUN_ROOT) or default)


def _units(spec: SuiteSpec):
    units: dict[tuple, list] = {}
    for m, mode, s in spec.cells():
        units.setdefault((m, s), []).append(mode)
    return [(m, s, tuple(modes)) for (m, s), modes in units.items()]


def execute(spec: SuiteSpec, workers: int = 1) -> list[CellResult]:
    base = spec.base.as_dict()
    units = _units(spec)
    if workers > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_unit, base, m, s, modes) for m, s, modes in units]
            nested = [f.result() for f in futures]
    else:
        nested = [run_unit(base, m, s, modes) for m, s, modes in units]
    return [c for group in nested for c in group]


@dataclass
class SummaryRow:
    method: str
    mode: str
    adapt_params: int
    pretrain_params: int
    median_test_loss: float
    seed_losses: list
    seeds: list
    status: str

    def as_row(self) -> list[str]:
        med = f"{self.median_test_loss:.10g}"
        losses = ";".join("nan" if v is None else f"{v:.10g}" for v in self.seed_losses)
        return [self.method, self.mode, str(self.adapt_params), str(self.pretrain_params), med, losses,
                ";".join(str(s) for s in self.seeds), self.status]


def per_layer_adapt_params(cfg: ExperimentConfig, mode: str) -> int:
    mode = canonical_mode(mode)
    return expected_trainable(cfg.replace(layers=1), "finetune", mode)


def summarize(spec: SuiteSpec, cells: list[CellResult]) -> list[SummaryRow]:
    """One row per (method, mode); parameter columns are per layer, the loss is the median over seeds."""
    rows = []
    seen = []
    for c in cells:
        if (c.method, c.mode) not in seen:
            seen.append((c.method, c.mode))
    for method, mode in seen:
        group = sorted((c for c in cells if c.method == method and c.mode == mode),
                       key=lambda c: spec.seeds.index(c.seed))
        cfg = spec.base.replace(method=method)
        ok = all(c.status == "ok" for c in group)
        losses = [c.mean_test_loss for c in group]
        median = float(np.median(losses)) if ok else float("nan")
        status = "ok" if ok else ",".join(sorted({c.status for c in group if c.status != "ok"}))
        pre = adapter_param_count(method, cfg.dims, "pretrain", T=cfg.T_train, S=cfg.S)
        rows.append(SummaryRow(method, mode, per_layer_adapt_params(cfg, mode), pre, median, losses,
                               [c.seed for c in group], status))
    return rows


def summary_table(rows: list[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in rows:
        w.writerow(r.as_row())
    return buf.getvalue()


def _write_once(path: Path, text: str) -> None:
    with open(path, "x", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


@dataclass
class SuiteOutcome:
    out_dir: Path
    cells: list[CellResult]
    rows: list[SummaryRow]

    @property
    def ok(self) -> bool:
        return all(c.status == "ok" for c in self.cells)

    @property
    def numerical_failure(self) -> bool:
        return any(c.status == "diverged" for c in self.cells)


def run_suite(spec: SuiteSpec, out_dir, workers: Optional[int] = None) -> SuiteOutcome:
    """Run the grid and write ``config.json``, ``metrics/*.jsonl`` and ``summary.tsv`` into ``out_dir``.

    ``out_dir`` must be new or empty; nothing in it is ever overwritten.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise FileExistsError(f"run directory {out_dir} is not empty; outputs are write-once")
    workers = worker_count() if workers is None else workers
    cells = execute(spec, workers)
    rows = summarize(spec, cells)

    (out_dir / "metrics").mkdir(parents=True, exist_ok=True)
    _write_once(out_dir / "config.json", json.dumps(spec.as_dict(), indent=2, sort_keys=True) + "\n")
    for c in cells:
        _write_once(out_dir / "metrics" / cell_name(c.method, c.mode, c.seed),
                    "".join(line + "\n" for line in c.lines))
    failures = [c for c in cells if c.status != "ok"]
    if failures:
        _write_once(out_dir / "failures.txt",
                    "".join(f"{c.method}\t{c.mode}\t{c.seed}\t{c.status}\t{c.error}\n" for c in failures))
    _write_once(out_dir / "summary.tsv", summary_table(rows))
    return SuiteOutcome(out_dir, cells, rows)


def read_summary(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def routing_budget(cfg: ExperimentConfig) -> int:
    """Logits trained per layer in z-only adaptation."""
    return routing_row_size(cfg.method, cfg.dims, cfg.S)
