"""Training recipe: AdamW, warmup + cosine schedule, clipping, and the three run roles.

``teacher`` and ``baseline`` runs optimize the LM loss only. ``distill`` runs
mix in forward KL against a frozen teacher whose logits are computed on the
fly or read from a :class:`TeacherLogitCache`. A distill run and its baseline
with the same ``data_seed`` see the same batches in the same order.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Mapping

import numpy as np

from . import checkpoint
from .corpus import PoolExhausted, TokenPool, next_batch, open_stream
from .losses import check_alpha, mixed_objective
from .model import (
    Divergence,
    GradientSet,
    ModelConfig,
    ParameterSet,
    forward_logits,
    init_params,
    is_norm,
    loss_and_grads,
)

log = logging.getLogger(__name__)

ROLES = ("teacher", "baseline", "distill")
LOG_FIELDS = ("step", "tokens_seen", "lm_loss", "kd_loss", "mixed_loss", "lr", "grad_norm")


@dataclass(frozen=True)
class RunConfig:
    role: str
    model: ModelConfig = field(default_factory=ModelConfig)
    token_budget: int = 2_000_000
    data_seed: int = 0
    init_seed: int = 0
    alpha: float = 0.0
    tau: float = 1.0
    peak_lr: float = 3e-4
    warmup_frac: float = 0.05
    final_lr_frac: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    eps: float = 1e-8
    batch_size: int = 16
    teacher_checkpoint: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        check_alpha(self.alpha)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.role == "distill" and (self.teacher_checkpoint is None or self.alpha <= 0):
            raise ValueError("distill runs need a teacher checkpoint and alpha > 0")
        if self.role != "distill" and self.alpha != 0:
            raise ValueError(f"{self.role} runs train with alpha == 0")
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def context_len(self) -> int:
        return self.model.context_len

    @property
    def total_steps(self) -> int:
        return self.token_budget // (self.batch_size * self.context_len)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


# -- optimizer pieces ----------------------------------------------------------


def lr_at_step(step: int, total_steps: int, peak: float, warmup_frac: float, final_frac: float) -> float:
    """Linear warmup from 0 to ``peak``, then cosine decay to ``final_frac * peak`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(warmup_frac * total_steps)
    if step < warmup:
        return peak * step / warmup
    if step == warmup:
        return peak
    progress = (step - warmup) / (total_steps - warmup)
    floor = final_frac * peak
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: GradientSet) -> float:
    sq = math.fsum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                   for g in grads.values())
    return math.sqrt(sq)


def clip_global_norm(grads: GradientSet, max_norm: float) -> GradientSet:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise Divergence("non-finite gradient norm")
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParameterSet) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(
    params: ParameterSet,
    grads: GradientSet,
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.1,
    eps: float = 1e-8,
) -> tuple[ParameterSet, OptimizerState]:
    """One AdamW update with bias correction and decoupled decay (norm gains not decayed)."""
    b1, b2 = betas
    t = state.step + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        wd = 0.0 if is_norm(name) else weight_decay
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[name] = (p * (1.0 - lr * wd) - lr * upd).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return ParameterSet(params.config, new_p), OptimizerState(new_m, new_v, t)


# -- teacher logits --------------------------------------------------------------


class TeacherLogitCache:
    """Per-step teacher logits on disk.

    ``topk=None`` stores full float32 logits (exact). Otherwise only the top-k
    logits and ids are kept; every other id shares the remaining probability
    mass uniformly when the logits are rebuilt. The rebuilt logits reproduce
    that compressed distribution exactly at tau = 1.
    """

    def __init__(self, directory: str | Path, topk: int | None = None):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.topk = topk
        self.hits = 0
        self.misses = 0

    def _path(self, step: int) -> Path:
        return self.dir / f"step{step:07d}.npz"

    def get(self, step: int, window_starts: np.ndarray, compute) -> np.ndarray:
        path = self._path(step)
        if path.exists():
            with np.load(path) as z:
                if np.array_equal(z["window_starts"], window_starts):
                    self.hits += 1
                    return self._rebuild(z)
            log.warning("cache entry %s belongs to a different batch stream; recomputing", path)
        self.misses += 1
        logits = compute()
        self._store(path, logits, window_starts)
        if self.topk is None:
            return logits
        with np.load(path) as z:
            return self._rebuild(z)

    def _store(self, path: Path, logits: np.ndarray, window_starts: np.ndarray) -> None:
        buf = io.BytesIO()
        if self.topk is None:
            np.savez(buf, window_starts=window_starts, logits=logits.astype(np.float32))
        else:
            V = logits.shape[-1]
            k = min(self.topk, V)
            ids = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
            vals = np.take_along_axis(logits, ids, axis=-1)
            m = logits.max(axis=-1, keepdims=True)
            lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
            np.savez(buf, window_starts=window_starts, ids=ids.astype(np.int32),
                     vals=vals.astype(np.float32), lse=lse.astype(np.float32),
                     vocab=np.array(V))
        checkpoint.atomic_write(path, buf.getvalue())

    @staticmethod
    def _rebuild(z) -> np.ndarray:
        if "logits" in z:
            return z["logits"]
        ids, vals, lse, V = z["ids"], z["vals"].astype(np.float64), z["lse"].astype(np.float64), int(z["vocab"])
        k = ids.shape[-1]
        kept = np.exp(vals - lse[..., None]).sum(axis=-1)
        rest = np.clip(1.0 - kept, 1e-30, None)
        fill = lse + np.log(rest / max(V - k, 1))
        out = np.repeat(fill[..., None], V, axis=-1)
        np.put_along_axis(out, ids, vals, axis=-1)
        return out.astype(np.float32)


# -- runs --------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParameterSet
    log: list[dict]
    status: str = "done"

    def log_csv(self) -> str:
        return log_to_csv(self.log)


def log_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_FIELDS})
    return buf.getvalue()


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, log: list[dict]):
        super().__init__(msg)
        self.log = log


def train_lockstep(
    students: Mapping[Hashable, tuple[ParameterSet, float]],
    pool: TokenPool,
    run: RunConfig,
    teacher: ParameterSet | None = None,
    logit_cache: TeacherLogitCache | None = None,
    max_steps: int | None = None,
    callback: Callable[[int, Hashable, ParameterSet], None] | None = None,
) -> dict[Hashable, TrainResult]:
    """Train several students on one batch stream, one teacher forward per batch.

    ``students`` maps a key to ``(initial params, alpha)``; the alphas bypass
    the role checks of :class:`RunConfig`, so a distill run can be driven at
    alpha=0. Each student follows exactly the trajectory it would follow if
    trained alone. A diverging student stops with status ``diverged``; the
    others continue. ``callback(step, key, params)`` runs after every update.
    """
    total = run.total_steps
    if total < 1:
        raise ValueError(f"token budget {run.token_budget} is below one batch")
    steps = total if max_steps is None else min(total, max_steps)
    stream = open_stream(pool, run.data_seed, run.context_len, run.batch_size)
    if stream.windows_left < steps * run.batch_size:
        raise PoolExhausted(
            f"budget needs {steps * run.batch_size} windows, pool {pool.pool_id!r} has {stream.windows_left}"
        )
    live = {key: [p, OptimizerState.zeros_like(p), alpha] for key, (p, alpha) in students.items()}
    results = {key: TrainResult(p, []) for key, (p, _) in students.items()}
    need_teacher = teacher is not None and any(a > 0 for _, a in students.values())
    tokens = 0
    for step in range(steps):
        if not live:
            break
        batch, stream = next_batch(pool, stream)
        tokens += batch.inputs.size
        lr = lr_at_step(step + 1, total, run.peak_lr, run.warmup_frac, run.final_lr_frac)
        teacher_logits = None
        if need_teacher:
            compute = lambda: forward_logits(teacher, batch.inputs)  # noqa: E731
            teacher_logits = (logit_cache.get(step, batch.window_starts, compute)
                              if logit_cache is not None else compute())
        for key in list(live):
            params, state, alpha = live[key]
            objective = mixed_objective(teacher_logits if alpha > 0 else None, alpha, run.tau)
            try:
                loss, grads, parts = loss_and_grads(params, batch, objective, return_parts=True)
                gnorm = global_norm(grads)
                grads = clip_global_norm(grads, run.clip_norm)
            except Divergence as exc:
                log.warning("student %r diverged at step %d: %s", key, step, exc)
                results[key].status = "diverged"
                del live[key]
                continue
            params, state = adamw_step(params, grads, state, lr, run.betas, run.weight_decay, run.eps)
            live[key] = [params, state, alpha]
            results[key].params = params
            results[key].log.append({"step": step, "tokens_seen": tokens, "lm_loss": parts["lm"],
                                     "kd_loss": parts["kd"], "mixed_loss": loss, "lr": lr,
                                     "grad_norm": gnorm})
            if callback is not None:
                callback(step, key, params)
    return results


def train_loop(
    params: ParameterSet,
    pool: TokenPool,
    run: RunConfig,
    teacher: ParameterSet | None = None,
    alpha: float | None = None,
    logit_cache: TeacherLogitCache | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Single-student :func:`train_lockstep`; raises :class:`TrainingAborted` on divergence."""
    alpha = run.alpha if alpha is None else alpha
    res = train_lockstep({0: (params, alpha)}, pool, run, teacher, logit_cache, max_steps)[0]
    if res.status != "done":
        raise TrainingAborted(f"run {res.status} after {len(res.log)} steps", res.log)
    return res


def train_run(
    run: RunConfig,
    pool: TokenPool,
    out_dir: str | Path | None = None,
    logit_cache: TeacherLogitCache | None = None,
) -> TrainResult:
    """Train one run from scratch; optionally write ``model.ckpt`` and ``train_log.csv``."""
    teacher = None
    if run.role == "distill":
        teacher = checkpoint.load(run.teacher_checkpoint).freeze()
        if teacher.config.vocab_size != run.model.vocab_size:
            raise ValueError("teacher and student vocabularies differ")
    params = init_params(run.model, run.init_seed)
    log.info("%s run: %d steps, alpha=%s", run.role, run.total_steps, run.alpha)
    result = train_loop(params, pool, run, teacher=teacher, logit_cache=logit_cache)
    if out_dir is not None:
        out = Path(out_dir)
        checkpoint.save(out / "model.ckpt", result.params, {"run": run.to_dict()})
        checkpoint.atomic_write(out / "train_log.csv", result.log_csv().encode())
    return result
