"""Command line entry point: ``kdlab <verb> --config <file> --out <dir>``.

Every verb writes its outputs plus a ``manifest.json`` under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__, checkpoint, mechanism
from .corpus import build_pools
from .evaluation import evaluate
from .model import ModelConfig
from .sweep import SweepConfig, build_tasks, emit_tables, load_result, parse_cell, run_sweep
from .synthetic import STYLES, generate_corpus
from .training import RunConfig, train_run

log = logging.getLogger("kdlab")


def _load_json(path: str | None) -> tuple[dict, Path]:
    if path is None:
        raise SystemExit("--config is required for this verb")
    p = Path(path)
    return json.loads(p.read_text()), p.parent


def _resolve(base: Path, p: str) -> str:
    return str(p if Path(p).is_absolute() else base / p)


def _pools(d: dict, base: Path, context_len: int):
    ood = {name: Path(_resolve(base, p)).read_bytes() for name, p in d.get("ood", {}).items()}
    corpus = Path(_resolve(base, d["corpus"])).read_bytes()
    return build_pools(corpus, d.get("held_out_fraction", 0.1), d.get("seed", 0), ood, context_len)


def _manifest(out: Path, verb: str, args, files: list[Path], extra: dict | None = None) -> None:
    body = {
        "verb": verb,
        "version": __version__,
        "argv": sys.argv[1:],
        "seed": args.seed,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "files": sorted(str(f.relative_to(out)) if f.is_relative_to(out) else str(f) for f in files),
        **(extra or {}),
    }
    checkpoint.atomic_write(out / "manifest.json", json.dumps(body, indent=2).encode())


def _out(args) -> Path:
    if args.out is None:
        raise SystemExit("--out is required for this verb")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args, role: str) -> int:
    """Config: ``{"run": {...RunConfig fields...}, "pools": {...}}``."""
    d, base = _load_json(args.config)
    run_d = dict(d["run"])
    run_d.setdefault("role", role)
    if run_d.get("teacher_checkpoint"):
        run_d["teacher_checkpoint"] = _resolve(base, run_d["teacher_checkpoint"])
    run = RunConfig.from_dict(run_d)
    allowed = ("distill",) if role == "distill" else ("baseline", "teacher")
    if run.role not in allowed:
        raise SystemExit(f"config role {run.role!r} does not fit this verb")
    if args.seed is not None:
        run = replace(run, data_seed=args.seed, init_seed=args.seed)
    out = _out(args)
    train, _, _ = _pools(d["pools"], base, run.context_len)
    res = train_run(run, train, out)
    checkpoint.atomic_write(out / "run.json", json.dumps(run.to_dict(), indent=2).encode())
    _manifest(out, "distill" if role == "distill" else "train", args,
              [out / "model.ckpt", out / "train_log.csv", out / "run.json"],
              {"role": run.role, "steps": len(res.log), "final_loss": res.log[-1]["mixed_loss"] if res.log else None})
    print(f"{run.role}: {len(res.log)} steps, final loss {res.log[-1]['mixed_loss']:.4f}")
    return 0


def cmd_eval(args) -> int:
    """Config: ``{"checkpoint": path, "pools": {...}, "tasks": [...]}``."""
    d, base = _load_json(args.config)
    params = checkpoint.load(_resolve(base, d["checkpoint"]))
    ctx = d.get("context_len", params.config.context_len)
    _, held, ood = _pools(d["pools"], base, ctx)
    report = evaluate(params, d.get("model_id", Path(d["checkpoint"]).stem), held, ood,
                      build_tasks(d.get("tasks", []), held), ctx)
    out = _out(args)
    checkpoint.atomic_write(out / "report.json", report.to_json().encode())
    _manifest(out, "eval", args, [out / "report.json"])
    print(report.to_json())
    return 0


def _sweep_config(args) -> SweepConfig:
    d, base = _load_json(args.config)
    if args.out is not None:
        d["output_dir"] = str(Path(args.out).resolve())
    if args.seed is not None:
        d.setdefault("seeds", {})
        d["seeds"]["data"] = d["seeds"]["init"] = args.seed
    return SweepConfig.from_dict(d, base)


def cmd_sweep(args) -> int:
    cfg = _sweep_config(args)
    only = parse_cell(args.cell) if args.cell else None
    result = run_sweep(cfg, workers=args.workers, only=only)
    files = emit_tables(result)
    n_done = sum(c.status == "done" for c in result.cells.values())
    print(f"sweep: trained {len(result.trained)} cells this run; {n_done}/{len(result.cells)} distill cells done")
    for label, c in list(result.teachers.items()) + [("baseline", result.baseline)] + \
            [(f"{k[0]}:{k[1]:g}", v) for k, v in result.cells.items()]:
        if c.status != "done":
            print(f"  {label}: {c.status} {c.error or ''}")
    log.info("tables: %s", [str(f) for f in files])
    return 0


def cmd_report(args) -> int:
    cfg = _sweep_config(args)
    files = emit_tables(load_result(cfg))
    for f in files:
        print(f)
    return 0


def cmd_analyze(args) -> int:
    """Config: ``{"baseline", "student", "teacher": ckpt paths, "pools": {...}, "pool": name, "k", "cap"}``.

    Optional ``edges`` (entropy bin edges) with ``edge_unit`` "nats" (default) or "bits".
    """
    d, base = _load_json(args.config)
    models = {role: checkpoint.load(_resolve(base, d[role])) for role in ("baseline", "student", "teacher")}
    ctx = d.get("context_len", models["student"].config.context_len)
    _, held, ood = _pools(d["pools"], base, ctx)
    pools = {held.pool_id: held, **{p.pool_id: p for p in ood}}
    pool = pools[d.get("pool", held.pool_id)]
    k, cap = d.get("k", 10), d.get("cap", 50_000)
    out = _out(args)
    V = models["student"].config.vocab_size
    recs = list(mechanism.collect_records(models, pool, ctx, k=k, cap=cap))
    path = out / "records.jsonl.gz"
    mechanism.write_records(path, recs, vocab_size=V, k=k, context_len=ctx,
                            models={r: d[r] for r in models})
    edges = d.get("edges")
    summary = mechanism.summarize(recs, V, edges, d.get("resamples", 1000), args.seed or 0,
                                  d.get("edge_unit", "nats"))
    checkpoint.atomic_write(out / "mechanism.json", json.dumps(summary, indent=2).encode())
    _manifest(out, "analyze", args, [path, out / "mechanism.json"], {"n_records": len(recs)})
    print(json.dumps({k: summary[k] for k in ("n_records", "overall_pct", "concentration")}, indent=2))
    return 0


def cmd_make_corpus(args) -> int:
    """Synthetic prose corpus, one OOD file per other style, and ready-to-run configs."""
    out = _out(args)
    seed = args.seed or 0
    files = [out / "corpus.txt"]
    (out / "corpus.txt").write_bytes(generate_corpus(args.size, seed, "prose"))
    ood = {}
    for i, style in enumerate(s for s in STYLES if s != "prose"):
        f = out / f"ood_{style}.txt"
        f.write_bytes(generate_corpus(max(args.size // 10, 20_000), seed + 1 + i, style))
        ood[style] = f.name
        files.append(f)
    pools = {"corpus": "corpus.txt", "ood": ood, "held_out_fraction": 0.1, "seed": seed}
    small = ModelConfig(hidden_dim=32, num_layers=2, mlp_dim=128, query_heads=4, kv_heads=2, head_dim=8,
                        context_len=64)
    tiny = ModelConfig(hidden_dim=16, num_layers=1, mlp_dim=64, query_heads=2, kv_heads=1, head_dim=8,
                       context_len=64)
    train = {"peak_lr": 3e-3, "batch_size": 8}
    configs = {
        "train.json": {"run": {"role": "baseline", "model": small.to_dict(), "token_budget": 200_000, **train},
                       "pools": pools},
        "eval.json": {"checkpoint": "runs/baseline/model.ckpt", "pools": pools,
                      "tasks": [{"kind": "arith", "n_items": 50}, {"kind": "cloze", "n_items": 50}]},
        "sweep.json": {
            "student": {"model": small.to_dict(), "token_budget": 100_000},
            "teachers": [
                {"label": f"{name}@{n // 1000}k", "arch": name, "model": m.to_dict(), "token_budget": n}
                for name, m in (("tiny", tiny), ("small", small)) for n in (50_000, 100_000)
            ],
            "alphas": [0.5, 1.0],
            "seeds": {"data": seed, "init": seed},
            "pools": pools,
            "train": train,
            "tasks": [{"kind": "arith", "n_items": 50}, {"kind": "cloze", "n_items": 50}],
            "output_dir": "sweep_out",
        },
    }
    for name, body in configs.items():
        (out / name).write_text(json.dumps(body, indent=2))
        files.append(out / name)
    _manifest(out, "make-corpus", args, files)
    print(f"wrote {len(files)} files to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdlab", description="Pretraining distillation experiments on a desk budget.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", required=True)
    verbs = {
        "train": "train a baseline or teacher from scratch",
        "distill": "train a student against a frozen teacher",
        "eval": "evaluate a checkpoint on held-out, OOD pools and tasks",
        "sweep": "run the teacher x alpha grid (resumable)",
        "analyze": "per-token mechanism analysis of baseline/student/teacher",
        "report": "re-emit sweep tables from stored reports",
        "make-corpus": "write a synthetic corpus and example configs",
    }
    for name, help_ in verbs.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override data and init seeds")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep":
            s.add_argument("--workers", type=int, default=1)
            s.add_argument("--cell", help="single cell: label:alpha, label:teacher or baseline")
        if name == "make-corpus":
            s.add_argument("--size", type=int, default=2_000_000, help="corpus bytes")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    handlers = {
        "train": lambda: cmd_train(args, "baseline"),
        "distill": lambda: cmd_train(args, "distill"),
        "eval": lambda: cmd_eval(args),
        "sweep": lambda: cmd_sweep(args),
        "analyze": lambda: cmd_analyze(args),
        "report": lambda: cmd_report(args),
        "make-corpus": lambda: cmd_make_corpus(args),
    }
    return handlers[args.verb]()


if __name__ == "__main__":
    sys.exit(main())
