"""Perplexity, multiple-choice scoring and improvement bookkeeping.

Improvements are always percentages relative to the baseline, signed so that
positive means better, and averaged across benchmarks as percentages (never
as raw scores).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import TokenPool, sequential_windows
from .losses import log_softmax, token_nll
from .model import ParameterSet, forward_logits

LogitFn = Callable[[np.ndarray], np.ndarray]

ID_POOL = "held_out"
METRICS = ("id_ppl", "ood_ppl", "acc")


class PoolTooSmall(ValueError):
    pass


class IncompleteGrid(ValueError):
    pass


def as_logit_fn(model) -> LogitFn:
    if isinstance(model, ParameterSet):
        return lambda x: forward_logits(model, x)
    if callable(model):
        return model
    raise TypeError(f"cannot evaluate {type(model).__name__}")


# -- perplexity -----------------------------------------------------------------


def window_nlls(model, pool: TokenPool, context_len: int, batch_size: int = 16) -> np.ndarray:
    """Per-token NLL ``[n_windows, context_len]`` over sequential non-overlapping windows."""
    f = as_logit_fn(model)
    windows = sequential_windows(pool, context_len)
    if len(windows) == 0:
        raise PoolTooSmall(f"pool {pool.pool_id!r} ({len(pool)} tokens) is shorter than one window")
    out = []
    for i in range(0, len(windows), batch_size):
        w = windows[i : i + batch_size]
        out.append(token_nll(np.asarray(f(w[:, :-1]), dtype=np.float64), w[:, 1:]))
    return np.concatenate(out)


def perplexity(model, pool: TokenPool, context_len: int, batch_size: int = 16) -> float:
    nll = window_nlls(model, pool, context_len, batch_size)
    return math.exp(math.fsum(nll.ravel().tolist()) / nll.size)


# -- multiple choice --------------------------------------------------------------


def continuation_logprob(model, prompt: Sequence[int], continuation: Sequence[int],
                         context_len: int | None = None) -> float:
    """Sum of log p(continuation token | prompt, earlier continuation tokens).

    Prompts longer than the context window are cut from the left. For a
    :class:`ParameterSet` the window defaults to the model's own.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    cont = np.asarray(continuation, dtype=np.int64)
    if cont.size == 0:
        raise ValueError("empty choice")
    if prompt.size == 0:
        raise ValueError("prompt must contain at least one token")
    if context_len is None and isinstance(model, ParameterSet):
        context_len = model.config.context_len
    if context_len is not None:
        if cont.size >= context_len + 1:
            raise ValueError(f"choice of {cont.size} tokens does not fit context {context_len}")
        prompt = prompt[max(0, prompt.size + cont.size - context_len - 1) :]
    seq = np.concatenate([prompt, cont])
    logits = np.asarray(as_logit_fn(model)(seq[None, :-1]), dtype=np.float64)[0]
    logp = log_softmax(logits)
    rows = np.arange(prompt.size - 1, seq.size - 1)
    return math.fsum(logp[rows, seq[prompt.size :]].tolist())


def char_count(tokens: Sequence[int]) -> int:
    return len(bytes(np.asarray(tokens, dtype=np.uint8).tolist()).decode("utf-8", errors="replace"))


def mc_scores(model, prompt, choices, length_norm: bool = False) -> list[float]:
    scores = []
    for c in choices:
        s = continuation_logprob(model, prompt, c)
        scores.append(s / char_count(c) if length_norm else s)
    return scores


def mc_select(model, prompt, choices, length_norm: bool = False) -> int:
    """Index of the highest-scoring choice; the first one wins ties."""
    if len(choices) < 2:
        raise ValueError("need at least two choices")
    scores = mc_scores(model, prompt, choices, length_norm)
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def task_accuracy(model, task) -> float:
    hits = sum(mc_select(model, it.prompt, it.choices, task.length_norm) == it.answer for it in task.items)
    return hits / len(task.items)


# -- reports ------------------------------------------------------------------------


@dataclass
class EvalReport:
    model_id: str
    ppl: dict[str, float] = field(default_factory=dict)
    acc: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.ppl.items():
            if not v >= 1.0:
                raise ValueError(f"perplexity {k}={v} < 1")
        for k, v in self.acc.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {k}={v} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps({"model_id": self.model_id, "ppl": self.ppl, "acc": self.acc},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["model_id"], d["ppl"], d["acc"])


def evaluate(model, model_id: str, held_out: TokenPool, ood: Iterable[TokenPool] = (),
             tasks: Iterable = (), context_len: int = 256) -> EvalReport:
    ppl = {ID_POOL: perplexity(model, held_out, context_len)}
    for pool in ood:
        ppl[pool.pool_id] = perplexity(model, pool, context_len)
    acc = {t.name: task_accuracy(model, t) for t in tasks}
    return EvalReport(model_id, ppl, acc)


def pct_improvement(baseline: float, value: float, kind: str) -> float:
    """Signed percent change vs. baseline; positive is better for both kinds."""
    if not baseline > 0:
        raise ValueError(f"baseline must be positive, got {baseline}")
    if kind == "ppl":
        return 100.0 * (baseline - value) / baseline
    if kind == "acc":
        return 100.0 * (value - baseline) / baseline
    raise ValueError(f"unknown metric kind {kind!r}")


def aggregate_improvements(pcts: Sequence[float]) -> float:
    if len(pcts) == 0:
        raise ValueError("no improvements to aggregate")
    return math.fsum(pcts) / len(pcts)


def benchmark_improvements(baseline: EvalReport, report: EvalReport) -> dict[str, float]:
    """Per-benchmark percents keyed ``ppl:<pool>`` / ``acc:<task>``.

    An accuracy benchmark whose baseline is zero has no defined percentage and
    is left out.
    """
    out = {}
    for name, b in baseline.ppl.items():
        if name in report.ppl:
            out[f"ppl:{name}"] = pct_improvement(b, report.ppl[name], "ppl")
    for name, b in baseline.acc.items():
        if name in report.acc and b > 0:
            out[f"acc:{name}"] = pct_improvement(b, report.acc[name], "acc")
    return out


def summarize_improvements(baseline: EvalReport, report: EvalReport) -> dict[str, float]:
    """``id_ppl``, ``ood_ppl`` (mean over OOD pools), ``acc`` (mean over tasks) and ``joint``.

    ``joint`` weights every benchmark equally. Missing groups are omitted.
    """
    per = benchmark_improvements(baseline, report)
    out: dict[str, float] = {}
    if f"ppl:{ID_POOL}" in per:
        out["id_ppl"] = per[f"ppl:{ID_POOL}"]
    ood = [v for k, v in per.items() if k.startswith("ppl:") and k != f"ppl:{ID_POOL}"]
    acc = [v for k, v in per.items() if k.startswith("acc:")]
    if ood:
        out["ood_ppl"] = aggregate_improvements(ood)
    if acc:
        out["acc"] = aggregate_improvements(acc)
    if per:
        out["joint"] = aggregate_improvements(list(per.values()))
    return out


# -- alpha selection and normalization ------------------------------------------------


def select_best_alpha(
    grid: Mapping[tuple[str, float], Mapping[str, float]],
    mode: str = "per_metric",
    metrics: Sequence[str] = METRICS,
    alphas: Sequence[float] | None = None,
) -> dict[tuple[str, str], float]:
    """Best alpha per (teacher, metric); ties go to the smaller alpha.

    ``grid`` maps ``(teacher_label, alpha)`` to a summary from
    :func:`summarize_improvements`. ``joint`` mode picks one alpha per teacher
    from the equal-weight mean over all benchmarks and reports it for every
    metric.
    """
    if mode not in ("per_metric", "joint"):
        raise ValueError(f"unknown mode {mode!r}")
    alphas = sorted(set(alphas) if alphas is not None else {a for _, a in grid})
    teachers = sorted({t for t, _ in grid})
    out = {}
    for t in teachers:
        missing = [a for a in alphas if (t, a) not in grid]
        if missing:
            raise IncompleteGrid(f"teacher {t!r} lacks alphas {missing}")

        def best(key):
            b = None
            for a in alphas:
                v = grid[(t, a)].get(key)
                if v is None:
                    raise IncompleteGrid(f"cell ({t!r}, {a}) lacks metric {key!r}")
                if b is None or v > grid[(t, b)][key]:
                    b = a
            return b

        if mode == "joint":
            a = best("joint")
            out.update({(t, m): a for m in metrics})
        else:
            out.update({(t, m): best(m) for m in metrics})
    return out


def minmax_normalize(values: Sequence[float]) -> list[float]:
    """Scale so the best (largest) value is 100 and the worst 0; all-equal gives all 100."""
    lo, hi = min(values), max(values)
    if hi == lo:
        return [100.0] * len(values)
    return [100.0 if v == hi else 0.0 if v == lo else min(100.0, 100.0 * (v - lo) / (hi - lo)) for v in values]


# -- improvement table ------------------------------------------------------------------

TABLE_FIELDS = ("teacher_label", "tokens", "alpha", "metric", "pct")


@dataclass
class ImprovementTable:
    baseline_id: str
    rows: list[tuple[str, int, float, str, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_FIELDS)
        for label, tokens, alpha, metric, pct in self.rows:
            w.writerow([label, tokens, repr(float(alpha)), metric, repr(float(pct))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, baseline_id: str = "") -> "ImprovementTable":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            rows.append((r["teacher_label"], int(r["tokens"]), float(r["alpha"]), r["metric"], float(r["pct"])))
        return cls(baseline_id, rows)
