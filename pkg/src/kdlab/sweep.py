"""Teacher x alpha sweeps with resumable cells and CSV result tables.

Every trained model is a *cell* with its own directory under
``<output_dir>/cells``. A cell is complete once ``status.json`` says
``done`` and its checkpoint and ``report.json`` exist; completed cells are
skipped on re-invocation. All status and checkpoint writes go through an
atomic rename, so an interrupted sweep resumes where it stopped.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import logging
import math
import re
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import checkpoint
from .corpus import TokenPool, build_pools
from .evaluation import (
    METRICS,
    EvalReport,
    ImprovementTable,
    IncompleteGrid,
    benchmark_improvements,
    evaluate,
    minmax_normalize,
    perplexity,
    select_best_alpha,
    summarize_improvements,
)
from .model import ModelConfig, init_params
from .synthetic import arithmetic_task, cloze_task
from .training import RunConfig, TeacherLogitCache, train_lockstep, train_run

log = logging.getLogger(__name__)

ALPHA_GRID = (0.2, 0.4, 0.5, 0.6, 0.8, 1.0)

ARCHS = {
    "tiny": ModelConfig(hidden_dim=32, num_layers=1, mlp_dim=128, query_heads=4, kv_heads=2, head_dim=8),
    "small": ModelConfig(),
    "medium": ModelConfig(hidden_dim=96, num_layers=4, mlp_dim=384, query_heads=4, kv_heads=2, head_dim=24),
}
DESK_BUDGETS = {"0.5M": 500_000, "2M": 2_000_000, "8M": 8_000_000}

_TRAIN_KEYS = ("peak_lr", "warmup_frac", "final_lr_frac", "betas", "weight_decay",
               "clip_norm", "eps", "batch_size", "tau")


# -- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class TeacherSpec:
    label: str
    arch: str
    model: ModelConfig
    token_budget: int
    data_seed: int | None = None
    init_seed: int | None = None
    checkpoint: str | None = None  # use a pretrained teacher instead of training one


@dataclass
class SweepConfig:
    student: ModelConfig
    student_budget: int
    teachers: list[TeacherSpec]
    alphas: list[float]
    corpus: str
    ood: dict[str, str] = field(default_factory=dict)
    data_seed: int = 0
    init_seed: int = 0
    held_out_fraction: float = 0.1
    pool_seed: int = 0
    train: dict = field(default_factory=dict)
    tasks: list[dict] = field(default_factory=list)
    logit_cache: str | int | None = None  # None: on the fly, "full": exact, int: top-k
    eval_every: int | None = None  # None: evaluate at the end of training only
    output_dir: str | None = None

    def __post_init__(self):
        labels = [t.label for t in self.teachers]
        if len(set(labels)) != len(labels):
            raise ValueError(f"teacher labels must be unique: {labels}")
        if "baseline" in labels:
            raise ValueError("'baseline' is reserved")
        ids = [Cell("teacher", t).cell_id for t in labels]
        if len(set(ids)) != len(ids):
            raise ValueError(f"teacher labels collide once made path-safe: {labels}")
        if not all(0.0 < a <= 1.0 for a in self.alphas):
            raise ValueError(f"alphas must lie in (0, 1]: {self.alphas}")
        if len(set(self.alphas)) != len(self.alphas):
            raise ValueError("duplicate alphas")
        for t in self.teachers:
            if t.model.vocab_size != self.student.vocab_size:
                raise ValueError(f"teacher {t.label!r} vocabulary differs from the student's")
            if t.model.context_len < self.student.context_len:
                raise ValueError(f"teacher {t.label!r} context is shorter than the student's")
        unknown = set(self.train) - set(_TRAIN_KEYS)
        if unknown:
            raise ValueError(f"unknown training keys {sorted(unknown)}")
        for path in [self.corpus, *self.ood.values()]:
            if not Path(path).is_file():
                raise FileNotFoundError(f"pool file {path} does not exist")

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "SweepConfig":
        base = Path(base_dir)

        def resolve(p):
            return str(p if Path(p).is_absolute() else base / p)

        pools = d["pools"]
        seeds = d.get("seeds", {})
        teachers = []
        for i, t in enumerate(d["teachers"]):
            t = dict(t)
            t["model"] = _model_from(t.get("model", t.get("arch")))
            t.setdefault("arch", t["label"])
            if t.get("checkpoint"):
                t["checkpoint"] = resolve(t["checkpoint"])
            teachers.append(TeacherSpec(**t))
        return cls(
            student=_model_from(d["student"]["model"]),
            student_budget=int(d["student"]["token_budget"]),
            teachers=teachers,
            alphas=[float(a) for a in d["alphas"]],
            corpus=resolve(pools["corpus"]),
            ood={k: resolve(v) for k, v in pools.get("ood", {}).items()},
            data_seed=seeds.get("data", 0),
            init_seed=seeds.get("init", 0),
            held_out_fraction=pools.get("held_out_fraction", 0.1),
            pool_seed=pools.get("seed", 0),
            train=d.get("train", {}),
            tasks=d.get("tasks", []),
            logit_cache=d.get("logit_cache"),
            eval_every=d.get("eval_every"),
            output_dir=resolve(d["output_dir"]) if d.get("output_dir") else None,
        )

    @classmethod
    def load(cls, path: str | Path) -> "SweepConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def to_dict(self) -> dict:
        return {
            "student": {"model": self.student.to_dict(), "token_budget": self.student_budget},
            "teachers": [
                {"label": t.label, "arch": t.arch, "model": t.model.to_dict(), "token_budget": t.token_budget,
                 "data_seed": t.data_seed, "init_seed": t.init_seed, "checkpoint": t.checkpoint}
                for t in self.teachers
            ],
            "alphas": list(self.alphas),
            "seeds": {"data": self.data_seed, "init": self.init_seed},
            "pools": {"corpus": self.corpus, "ood": dict(self.ood),
                      "held_out_fraction": self.held_out_fraction, "seed": self.pool_seed},
            "train": dict(self.train),
            "tasks": list(self.tasks),
            "logit_cache": self.logit_cache,
            "eval_every": self.eval_every,
            "output_dir": self.output_dir,
        }

    def teacher(self, label: str) -> TeacherSpec:
        for t in self.teachers:
            if t.label == label:
                return t
        raise KeyError(label)

    def teacher_seeds(self, label: str) -> tuple[int, int]:
        i = [t.label for t in self.teachers].index(label)
        t = self.teachers[i]
        return (self.data_seed + 1 + i if t.data_seed is None else t.data_seed,
                self.init_seed + 1 + i if t.init_seed is None else t.init_seed)


def _model_from(spec) -> ModelConfig:
    if isinstance(spec, str):
        return ARCHS[spec]
    return ModelConfig.from_dict(spec)


def desk_default_config(corpus: str, ood: dict[str, str] | None = None, output_dir: str | None = None) -> SweepConfig:
    """tiny/small/medium teachers x 0.5M/2M/8M tokens, small@2M student, full alpha grid."""
    teachers = [
        TeacherSpec(f"{arch}@{b}", arch, ARCHS[arch], n)
        for arch in ("tiny", "small", "medium") for b, n in DESK_BUDGETS.items()
    ]
    return SweepConfig(
        student=ARCHS["small"], student_budget=DESK_BUDGETS["2M"], teachers=teachers,
        alphas=list(ALPHA_GRID), corpus=corpus, ood=dict(ood or {}), output_dir=output_dir,
        tasks=[{"kind": "arith", "n_items": 100, "seed": 0}, {"kind": "cloze", "n_items": 100, "seed": 0}],
    )


# -- data -----------------------------------------------------------------------------


@dataclass
class SweepData:
    train: TokenPool
    held_out: TokenPool
    ood: list[TokenPool]
    tasks: list


def build_tasks(specs: list[dict], held_out: TokenPool) -> list:
    """Task specs look like ``{"kind": "arith" | "cloze", "n_items": 100, "seed": 0, ...}``."""
    built = []
    for t in specs:
        kind = t.get("kind")
        if kind == "arith":
            built.append(arithmetic_task(t.get("n_items", 100), t.get("seed", 0), t.get("n_choices", 4)))
        elif kind == "cloze":
            built.append(cloze_task(held_out, t.get("n_items", 100), t.get("seed", 0),
                                    t.get("prompt_len", 48), t.get("n_choices", 4), t.get("length_norm", True)))
        else:
            raise ValueError(f"unknown task kind {kind!r}")
    return built


@functools.lru_cache(maxsize=4)
def _load_data(corpus: str, ood: tuple, fraction: float, seed: int, context_len: int, tasks: str) -> SweepData:
    blobs = {name: Path(p).read_bytes() for name, p in ood}
    train, held, ood_pools = build_pools(Path(corpus).read_bytes(), fraction, seed, blobs, context_len)
    built = build_tasks(json.loads(tasks), held)
    return SweepData(train, held, ood_pools, built)


def load_data(cfg: SweepConfig) -> SweepData:
    return _load_data(cfg.corpus, tuple(sorted(cfg.ood.items())), cfg.held_out_fraction, cfg.pool_seed,
                      cfg.student.context_len, json.dumps(cfg.tasks, sort_keys=True))


# -- cells -------------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    role: str  # teacher | baseline | distill
    teacher_label: str | None = None
    alpha: float = 0.0

    @property
    def cell_id(self) -> str:
        if self.role == "baseline":
            return "baseline"
        safe = re.sub(r"[^A-Za-z0-9._-]", "_", self.teacher_label)
        if self.role == "teacher":
            return f"teacher-{safe}"
        return f"distill-{safe}-a{self.alpha:g}"


def plan_cells(cfg: SweepConfig) -> list[Cell]:
    cells = [Cell("teacher", t.label) for t in cfg.teachers] + [Cell("baseline")]
    cells += [Cell("distill", t.label, a) for t in cfg.teachers for a in cfg.alphas]
    return cells


def cell_dir(cfg: SweepConfig, cell: Cell) -> Path:
    return Path(cfg.output_dir) / "cells" / cell.cell_id


def model_path(cfg: SweepConfig, cell: Cell) -> Path:
    if cell.role == "teacher" and cfg.teacher(cell.teacher_label).checkpoint:
        return Path(cfg.teacher(cell.teacher_label).checkpoint)
    return cell_dir(cfg, cell) / "model.ckpt"


def read_status(cfg: SweepConfig, cell: Cell) -> dict:
    p = cell_dir(cfg, cell) / "status.json"
    if not p.exists():
        return {"status": "pending"}
    return json.loads(p.read_text())


def is_done(cfg: SweepConfig, cell: Cell) -> bool:
    d = cell_dir(cfg, cell)
    return (read_status(cfg, cell).get("status") == "done"
            and model_path(cfg, cell).exists() and (d / "report.json").exists())


def _write_status(cfg: SweepConfig, cell: Cell, status: str, **extra) -> None:
    body = {"cell": cell.cell_id, "status": status, **extra}
    checkpoint.atomic_write(cell_dir(cfg, cell) / "status.json", json.dumps(body, indent=2).encode())


def run_config_for(cfg: SweepConfig, cell: Cell) -> RunConfig:
    common = dict(cfg.train)
    if "betas" in common:
        common["betas"] = tuple(common["betas"])
    if cell.role == "teacher":
        t = cfg.teacher(cell.teacher_label)
        ds, is_ = cfg.teacher_seeds(t.label)
        return RunConfig("teacher", t.model, t.token_budget, ds, is_, **common)
    if cell.role == "baseline":
        return RunConfig("baseline", cfg.student, cfg.student_budget, cfg.data_seed, cfg.init_seed, **common)
    teacher_ckpt = str(model_path(cfg, Cell("teacher", cell.teacher_label)))
    return RunConfig("distill", cfg.student, cfg.student_budget, cfg.data_seed, cfg.init_seed,
                     alpha=cell.alpha, teacher_checkpoint=teacher_ckpt, **common)


def _logit_cache(cfg: SweepConfig, cell: Cell) -> TeacherLogitCache | None:
    if cell.role != "distill" or cfg.logit_cache is None:
        return None
    topk = None if cfg.logit_cache == "full" else int(cfg.logit_cache)
    safe = Cell("teacher", cell.teacher_label).cell_id
    return TeacherLogitCache(Path(cfg.output_dir) / "logit_cache" / f"{safe}-seed{cfg.data_seed}", topk)


def execute_cell(cfg: SweepConfig, cell: Cell) -> dict:
    """Train (unless a pretrained teacher is given) and evaluate one cell; never raises."""
    t0 = time.time()
    out = cell_dir(cfg, cell)
    out.mkdir(parents=True, exist_ok=True)
    _write_status(cfg, cell, "running")
    try:
        data = load_data(cfg)
        if cell.role == "teacher" and cfg.teacher(cell.teacher_label).checkpoint:
            params = checkpoint.load(model_path(cfg, cell))
        else:
            run = run_config_for(cfg, cell)
            checkpoint.atomic_write(out / "run.json", json.dumps(run.to_dict(), indent=2).encode())
            params = _train_cell(cfg, cell, run, data, out)
        ctx = min(params.config.context_len, cfg.student.context_len)
        report = evaluate(params, cell.cell_id, data.held_out, data.ood, data.tasks, ctx)
        checkpoint.atomic_write(out / "report.json", report.to_json().encode())
        status = {"status": "done", "runtime_s": round(time.time() - t0, 3)}
    except Exception as exc:  # recorded per cell; the sweep continues
        log.exception("cell %s failed", cell.cell_id)
        status = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    _write_status(cfg, cell, **status)
    return {"cell": cell.cell_id, **status}


def _train_cell(cfg: SweepConfig, cell: Cell, run: RunConfig, data: SweepData, out: Path):
    if cfg.eval_every is None:
        return train_run(run, data.train, out, logit_cache=_logit_cache(cfg, cell)).params
    teacher = checkpoint.load(run.teacher_checkpoint).freeze() if run.role == "distill" else None
    curve = []

    def on_step(step, key, params):
        if (step + 1) % cfg.eval_every == 0:
            curve.append((step + 1, perplexity(params, data.held_out, run.context_len)))

    res = train_lockstep({0: (init_params(run.model, run.init_seed), run.alpha)}, data.train, run,
                         teacher, _logit_cache(cfg, cell), callback=on_step)[0]
    if res.status != "done":
        raise RuntimeError(f"training {res.status}")
    checkpoint.save(out / "model.ckpt", res.params, {"run": run.to_dict()})
    checkpoint.atomic_write(out / "train_log.csv", res.log_csv().encode())
    lines = ["step,held_out_ppl"] + [f"{s},{p!r}" for s, p in curve]
    checkpoint.atomic_write(out / "eval_curve.csv", ("\n".join(lines) + "\n").encode())
    return res.params


def _cell_worker(cfg_dict: dict, cell: Cell) -> dict:
    logging.basicConfig(level=logging.INFO)
    return execute_cell(SweepConfig.from_dict(cfg_dict), cell)


def _run_many(cfg: SweepConfig, cells: list[Cell], workers: int) -> list[dict]:
    if not cells:
        return []
    if workers <= 1 or len(cells) == 1:
        return [execute_cell(cfg, c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell_worker, [cfg.to_dict()] * len(cells), cells))


def parse_cell(spec: str) -> Cell:
    """``baseline``, ``<label>:teacher`` or ``<label>:<alpha>``."""
    if spec == "baseline":
        return Cell("baseline")
    label, _, what = spec.rpartition(":")
    if not label:
        raise ValueError(f"cell spec {spec!r} is not label:alpha")
    if what == "teacher":
        return Cell("teacher", label)
    return Cell("distill", label, float(what))


def run_sweep(cfg: SweepConfig, workers: int = 1, only: Cell | None = None) -> "SweepResult":
    """Train every incomplete cell (teachers and baseline first), then load all results."""
    if cfg.output_dir is None:
        raise ValueError("sweep needs an output_dir")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.atomic_write(out / "sweep_config.json", json.dumps(cfg.to_dict(), indent=2).encode())
    cells = plan_cells(cfg)
    if only is not None:
        if only not in cells:
            raise ValueError(f"cell {only.cell_id} is not part of this sweep")
        cells = [only]
        if only.role == "distill":
            cells.insert(0, Cell("teacher", only.teacher_label))
    trained = []
    first = [c for c in cells if c.role != "distill" and not is_done(cfg, c)]
    trained += [r["cell"] for r in _run_many(cfg, first, workers)]
    second = []
    for c in cells:
        if c.role != "distill" or is_done(cfg, c):
            continue
        if not is_done(cfg, Cell("teacher", c.teacher_label)):
            _write_status(cfg, c, "blocked", error=f"teacher {c.teacher_label!r} unavailable")
            continue
        second.append(c)
    trained += [r["cell"] for r in _run_many(cfg, second, workers)]
    result = load_result(cfg)
    result.trained = trained
    manifest = {
        "output_dir": str(out),
        "cells": {c.cell_id: read_status(cfg, c).get("status") for c in plan_cells(cfg)},
        "trained_this_invocation": trained,
    }
    checkpoint.atomic_write(out / "manifest.json", json.dumps(manifest, indent=2).encode())
    return result


# -- results ---------------------------------------------------------------------------------


@dataclass
class CellResult:
    cell: Cell
    status: str
    report: EvalReport | None = None
    error: str | None = None


@dataclass
class SweepResult:
    config: SweepConfig
    baseline: CellResult
    teachers: dict[str, CellResult]
    cells: dict[tuple[str, float], CellResult]
    trained: list[str] = field(default_factory=list)

    def summaries(self) -> dict[tuple[str, float], dict[str, float]]:
        if self.baseline.report is None:
            return {}
        return {k: summarize_improvements(self.baseline.report, c.report)
                for k, c in self.cells.items() if c.report is not None}

    def per_benchmark(self) -> dict[tuple[str, float], dict[str, float]]:
        if self.baseline.report is None:
            return {}
        return {k: benchmark_improvements(self.baseline.report, c.report)
                for k, c in self.cells.items() if c.report is not None}

    def improvement_table(self) -> ImprovementTable:
        rows = []
        summ, per = self.summaries(), self.per_benchmark()
        for (label, alpha) in sorted(summ):
            tokens = self.config.teacher(label).token_budget
            metrics = {**summ[(label, alpha)], **per[(label, alpha)]}
            for m in sorted(metrics):
                rows.append((label, tokens, alpha, m, metrics[m]))
        return ImprovementTable("baseline", rows)


def _cell_result(cfg: SweepConfig, cell: Cell) -> CellResult:
    st = read_status(cfg, cell)
    report = None
    if is_done(cfg, cell):
        report = EvalReport.from_json((cell_dir(cfg, cell) / "report.json").read_text())
    status = st.get("status", "pending")
    if status == "done" and report is None:
        status = "incomplete"
    return CellResult(cell, status, report, st.get("error"))


def load_result(cfg: SweepConfig) -> SweepResult:
    teachers = {t.label: _cell_result(cfg, Cell("teacher", t.label)) for t in cfg.teachers}
    cells = {(t.label, a): _cell_result(cfg, Cell("distill", t.label, a))
             for t in cfg.teachers for a in cfg.alphas}
    return SweepResult(cfg, _cell_result(cfg, Cell("baseline")), teachers, cells)


# -- tables ------------------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _csv(header: Iterable[str], rows: Iterable[Iterable]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue().encode()


def best_alpha_rows(result: SweepResult, mode: str) -> list[dict]:
    """One row per (teacher, metric) with the selected alpha and its improvement.

    Teachers whose alpha row is incomplete get blank values and a status note.
    ``best_in_row`` marks the best teacher among equal token budgets and
    ``best_in_col`` among equal architectures, per metric.
    """
    cfg = result.config
    summ = result.summaries()
    rows = []
    for t in cfg.teachers:
        sub = {k: v for k, v in summ.items() if k[0] == t.label}
        try:
            choice = select_best_alpha(sub, mode, METRICS, cfg.alphas) if sub else None
            note = "" if choice else "no completed cells"
        except IncompleteGrid as exc:
            choice, note = None, f"incomplete: {exc}"
        for m in METRICS:
            a = choice[(t.label, m)] if choice else None
            pct = summ[(t.label, a)].get(m) if a is not None else None
            rows.append({"teacher_label": t.label, "arch": t.arch, "tokens": t.token_budget,
                         "metric": m, "alpha": a, "pct": pct, "status": note})
    for r in rows:
        for key, group in (("best_in_row", "tokens"), ("best_in_col", "arch")):
            peers = [p["pct"] for p in rows if p["metric"] == r["metric"] and p[group] == r[group]
                     and p["pct"] is not None]
            r[key] = int(r["pct"] is not None and r["pct"] == max(peers))
    return rows


def emit_tables(result: SweepResult, out_dir: str | Path | None = None) -> list[Path]:
    """Write the result tables as CSV under ``<out>/tables``."""
    cfg = result.config
    out = Path(out_dir or cfg.output_dir) / "tables"
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, bytes] = {}

    files["improvements.csv"] = result.improvement_table().to_csv().encode()

    raw = []
    for label, c in [("baseline", result.baseline)] + [(k, v) for k, v in result.teachers.items()]:
        role = "baseline" if label == "baseline" else "teacher"
        tokens = cfg.student_budget if role == "baseline" else cfg.teacher(label).token_budget
        raw += _raw_rows(c, role, label if role == "teacher" else "", tokens, None)
    for (label, a), c in sorted(result.cells.items()):
        raw += _raw_rows(c, "distill", label, cfg.student_budget, a)
    files["raw_scores.csv"] = _csv(("model_id", "role", "teacher_label", "tokens", "alpha", "benchmark",
                                    "value", "status"), raw)

    cols = ("teacher_label", "arch", "tokens", "metric", "alpha", "pct", "best_in_row", "best_in_col", "status")
    for name, mode in (("best_alpha.csv", "per_metric"), ("joint_alpha.csv", "joint")):
        files[name] = _csv(cols, ([r[c] for c in cols] for r in best_alpha_rows(result, mode)))

    summ = result.summaries()
    heat, trend = [], []
    for t in cfg.teachers:
        for m in METRICS:
            vals = [summ.get((t.label, a), {}).get(m) for a in cfg.alphas]
            present = [v for v in vals if v is not None]
            norm = iter(minmax_normalize(present)) if present else iter(())
            missing = [f"{a:g}:{result.cells[(t.label, a)].status}" for a, v in zip(cfg.alphas, vals) if v is None]
            note = "missing " + " ".join(missing) if missing else ""
            heat.append((t.label, m, *[next(norm) if v is not None else None for v in vals], note))
            trend.append((t.label, t.arch, t.token_budget, m, *vals, note))
    alpha_cols = [f"alpha={a:g}" for a in cfg.alphas]
    files["heatmap.csv"] = _csv(("teacher_label", "metric", *alpha_cols, "status"), heat)
    files["trend.csv"] = _csv(("teacher_label", "arch", "tokens", "metric", *alpha_cols, "status"), trend)

    if 1.0 in cfg.alphas:
        pure = []
        for r in best_alpha_rows(result, "per_metric"):
            p1 = summ.get((r["teacher_label"], 1.0), {}).get(r["metric"])
            diff = p1 - r["pct"] if p1 is not None and r["pct"] is not None else None
            pure.append((r["teacher_label"], r["tokens"], r["metric"], p1, r["alpha"], r["pct"], diff, r["status"]))
        files["pure_kd.csv"] = _csv(("teacher_label", "tokens", "metric", "pct_alpha1", "best_alpha",
                                     "pct_best", "difference", "status"), pure)

    paths = []
    for name, data in files.items():
        checkpoint.atomic_write(out / name, data)
        paths.append(out / name)
    manifest = {"files": sorted(files), "baseline_status": result.baseline.status,
                "cells": {f"{k[0]}:{k[1]:g}": c.status for k, c in result.cells.items()}}
    checkpoint.atomic_write(out / "manifest.json", json.dumps(manifest, indent=2).encode())
    return paths + [out / "manifest.json"]


def _raw_rows(c: CellResult, role, label, tokens, alpha):
    if c.report is None:
        return [(c.cell.cell_id, role, label, tokens, alpha, None, None, c.status)]
    rows = [(c.cell.cell_id, role, label, tokens, alpha, f"ppl:{k}", v, "") for k, v in sorted(c.report.ppl.items())]
    rows += [(c.cell.cell_id, role, label, tokens, alpha, f"acc:{k}", v, "") for k, v in sorted(c.report.acc.items())]
    return rows


# -- same-level desk experiment -------------------------------------------------------------------


def same_level_experiment(
    corpus: bytes,
    data_seeds: Iterable[int] = (0, 1, 2),
    alphas: Iterable[float] = ALPHA_GRID,
    model: ModelConfig = ARCHS["small"],
    token_budget: int = 2_000_000,
    teacher_seed: int = 1000,
    train: dict | None = None,
    held_out_fraction: float = 0.1,
) -> dict:
    """Teacher and student share one config and budget; students differ by data seed.

    For each data seed the baseline and every alpha student are trained in
    lockstep on the same batches. Returns held-out perplexities per seed and
    their medians per alpha.
    """
    t0 = time.time()
    alphas = [0.0] + [float(a) for a in alphas]
    train = dict(train or {})
    if "betas" in train:
        train["betas"] = tuple(train["betas"])
    pool, held, _ = build_pools(corpus, held_out_fraction, 0, None, model.context_len)
    t_run = RunConfig("teacher", model, token_budget, teacher_seed, teacher_seed, **train)
    teacher = train_lockstep({0: (init_params(model, teacher_seed), 0.0)}, pool, t_run)[0].params.freeze()
    teacher_ppl = perplexity(teacher, held, model.context_len)
    per_seed = {}
    for seed in data_seeds:
        run = replace(t_run, role="baseline", data_seed=seed, init_seed=seed)
        res = train_lockstep({a: (init_params(model, seed), a) for a in alphas}, pool, run, teacher)
        per_seed[seed] = {a: (perplexity(r.params, held, model.context_len) if r.status == "done" else math.nan)
                          for a, r in res.items()}
        log.info("seed %d: %s", seed, per_seed[seed])
    medians = {a: statistics.median(per_seed[s][a] for s in per_seed) for a in alphas}
    improved = [a for a in alphas if a > 0 and medians[a] <= medians[0.0]]
    return {"teacher_ppl": teacher_ppl, "per_seed": per_seed, "median": medians,
            "improving_alphas": improved, "passed": bool(improved), "runtime_s": time.time() - t0}
