"""Per-token analysis of what a distilled student gained over its baseline.

Records are collected from three models evaluated on the same windows
(baseline, distilled student, teacher). Every analysis is a single streaming
fold over records, except the bootstrap, which needs the records in memory.

Per-group perplexity is ``exp(mean NLL in the group)`` and group improvement
is the usual signed percent against the baseline's group perplexity.
Entropies are in nats.
"""

from __future__ import annotations

import gzip
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .corpus import TokenPool, sequential_windows
from .evaluation import as_logit_fn, pct_improvement
from .losses import log_softmax

FORMAT = "DFREC1"
BINS = ("easy", "moderate", "hard", "difficult")
DEFAULT_EDGES = (2.0, 5.0, 8.0)
CATEGORIES = ("both", "teacher_only", "baseline_only", "neither")
DESK_POSITION_EDGES = (0, 32, 64, 128, 256)


def desk_edges(vocab_size: int) -> tuple[float, float, float]:
    """Entropy edges rescaled to a small vocabulary: 0.25, 0.625 and 1.0 times ln V."""
    lnv = math.log(vocab_size)
    return (0.25 * lnv, 0.625 * lnv, 1.0 * lnv)


@dataclass(slots=True)
class TokenRecord:
    corpus_tag: str
    position: int
    gt_id: int
    H_base: float
    H_student: float
    nll_base: float
    nll_student: float
    nll_teacher: float
    topk_base: list[int]
    topk_student: list[int]
    topk_teacher: list[int]

    def nll(self, which: str) -> float:
        return getattr(self, "nll_" + which)


# -- collection -------------------------------------------------------------------


def _entropy(logp: np.ndarray) -> np.ndarray:
    return -(np.exp(logp) * logp).sum(axis=-1)


def _topk(logits: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated logits: equal logits keep ascending token id
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def collect_records(
    models: Mapping[str, object],
    pool: TokenPool,
    context_len: int,
    k: int = 10,
    cap: int = 50_000,
    batch_size: int = 8,
) -> Iterator[TokenRecord]:
    """Yield one record per evaluated position, window by window, up to ``cap``.

    ``models`` needs keys ``baseline``, ``student`` and ``teacher``.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    fns = {name: as_logit_fn(models[name]) for name in ("baseline", "student", "teacher")}
    vocabs = {getattr(getattr(m, "config", None), "vocab_size", None) for m in models.values()}
    vocabs.discard(None)
    if len(vocabs) > 1:
        raise ValueError(f"models disagree on vocabulary size: {sorted(vocabs)}")
    windows = sequential_windows(pool, context_len)
    emitted = 0
    for i in range(0, len(windows), batch_size):
        w = windows[i : i + batch_size]
        inputs, targets = w[:, :-1], w[:, 1:]
        out = {}
        for name, f in fns.items():
            logits = np.asarray(f(inputs), dtype=np.float64)
            out[name] = (logits, log_softmax(logits))
        Vs = {o[0].shape[-1] for o in out.values()}
        if len(Vs) > 1:
            raise ValueError(f"models disagree on vocabulary size: {sorted(Vs)}")
        nll = {n: -np.take_along_axis(lp, targets[..., None], -1)[..., 0] for n, (_, lp) in out.items()}
        top = {n: _topk(lg, k) for n, (lg, _) in out.items()}
        H_b = _entropy(out["baseline"][1])
        H_s = _entropy(out["student"][1])
        for b in range(w.shape[0]):
            for t in range(inputs.shape[1]):
                yield TokenRecord(
                    pool.pool_id, t, int(targets[b, t]), float(H_b[b, t]), float(H_s[b, t]),
                    float(nll["baseline"][b, t]), float(nll["student"][b, t]), float(nll["teacher"][b, t]),
                    top["baseline"][b, t].tolist(), top["student"][b, t].tolist(), top["teacher"][b, t].tolist(),
                )
                emitted += 1
                if emitted >= cap:
                    return


# -- record files -------------------------------------------------------------------


def _open(path: Path, mode: str):
    return gzip.open(path, mode + "t", encoding="utf-8") if path.suffix == ".gz" else open(path, mode, encoding="utf-8")


def write_records(path: str | Path, records: Iterable[TokenRecord], *, vocab_size: int, k: int,
                  context_len: int, models: Mapping[str, str]) -> int:
    path = Path(path)
    header = {"format": FORMAT, "vocab_size": vocab_size, "k": k, "context_len": context_len,
              "models": dict(models)}
    n = 0
    with _open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")
            n += 1
    return n


def read_records(path: str | Path) -> tuple[dict, list[TokenRecord]]:
    path = Path(path)
    with _open(path, "r") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT:
            raise ValueError(f"{path} is not a {FORMAT} record file")
        return header, [TokenRecord(**json.loads(line)) for line in fh if line.strip()]


# -- difficulty bins ---------------------------------------------------------------


def difficulty_bin(H: float, edges: Sequence[float] = DEFAULT_EDGES) -> str:
    """easy < e0 <= moderate < e1 <= hard < e2 <= difficult."""
    if H < 0:
        raise ValueError(f"negative entropy {H}")
    for label, edge in zip(BINS, edges):
        if H < edge:
            return label
    return BINS[len(edges)]


@dataclass(frozen=True)
class BinStat:
    count: int
    pct: float | None
    mean_nll_base: float | None = None
    mean_nll_variant: float | None = None


BinReport = dict  # label -> BinStat, in bin order


class _GroupFold:
    def __init__(self):
        self.n = defaultdict(int)
        self.sb = defaultdict(float)
        self.sv = defaultdict(float)

    def add(self, key, nb, nv):
        self.n[key] += 1
        self.sb[key] += nb
        self.sv[key] += nv

    def report(self, labels) -> BinReport:
        out = {}
        for key in labels:
            n = self.n.get(key, 0)
            if n == 0:
                out[key] = BinStat(0, None)
                continue
            mb, mv = self.sb[key] / n, self.sv[key] / n
            out[key] = BinStat(n, pct_improvement(math.exp(mb), math.exp(mv), "ppl"), mb, mv)
        return out


def bin_improvements(records: Iterable[TokenRecord], model_pair=("base", "student"),
                     edges: Sequence[float] = DEFAULT_EDGES) -> BinReport:
    base, variant = model_pair
    fold = _GroupFold()
    for r in records:
        fold.add(difficulty_bin(r.H_base, edges), r.nll(base), r.nll(variant))
    if not fold.n:
        raise ValueError("no records")
    return fold.report(BINS[: len(edges) + 1])


def overall_improvement(records: Iterable[TokenRecord], model_pair=("base", "student")) -> float:
    base, variant = model_pair
    fold = _GroupFold()
    for r in records:
        fold.add("all", r.nll(base), r.nll(variant))
    if not fold.n:
        raise ValueError("no records")
    return fold.report(["all"])["all"].pct


# -- information categories -----------------------------------------------------------


def categorize_token(gt_id: int, topk_base: Sequence[int], topk_teacher: Sequence[int]) -> str:
    in_b, in_t = gt_id in topk_base, gt_id in topk_teacher
    if in_b and in_t:
        return "both"
    if in_t:
        return "teacher_only"
    if in_b:
        return "baseline_only"
    return "neither"


def category_improvements(records: Iterable[TokenRecord], model_pair=("base", "student")) -> dict[str, tuple[float, float | None]]:
    """category -> (fraction of tokens, student PPL improvement within the category)."""
    base, variant = model_pair
    fold = _GroupFold()
    total = 0
    for r in records:
        fold.add(categorize_token(r.gt_id, r.topk_base, r.topk_teacher), r.nll(base), r.nll(variant))
        total += 1
    if total == 0:
        raise ValueError("no records")
    rep = fold.report(CATEGORIES)
    return {c: (rep[c].count / total, rep[c].pct) for c in CATEGORIES}


# -- hard-token concentration ------------------------------------------------------------


@dataclass(frozen=True)
class Concentration:
    statistic: float
    ci_low: float
    ci_high: float
    p_value: float
    resamples: int
    p_raw: float = float("nan")  # before clamping; 0.0 when no resample reaches 0


def concentration(records: Iterable[TokenRecord], model_pair=("base", "student"),
                  edges: Sequence[float] = DEFAULT_EDGES) -> float:
    """pct(hard) - pct(easy)."""
    rep = bin_improvements(records, model_pair, edges)
    if rep["hard"].count == 0 or rep["easy"].count == 0:
        raise ValueError("hard and easy bins must both be nonempty")
    return rep["hard"].pct - rep["easy"].pct


def concentration_bootstrap(
    records: Sequence[TokenRecord],
    resamples: int = 1000,
    seed: int = 0,
    model_pair=("base", "student"),
    edges: Sequence[float] = DEFAULT_EDGES,
    level: float = 0.95,
    chunk: int = 100,
) -> Concentration:
    """Percentile bootstrap over records resampled with replacement.

    p is ``2 * min(P(stat <= 0), P(stat >= 0))`` under the bootstrap
    distribution, clamped to ``[1/resamples, 1]``.
    """
    base, variant = model_pair
    records = list(records)
    stat = concentration(records, model_pair, edges)
    bins = np.array([difficulty_bin(r.H_base, edges) for r in records])
    nb = np.array([r.nll(base) for r in records])
    nv = np.array([r.nll(variant) for r in records])
    hard, easy = (bins == "hard").astype(float), (bins == "easy").astype(float)
    cols = np.stack([hard, nb * hard, nv * hard, easy, nb * easy, nv * easy], axis=1)
    n = len(records)
    rng = np.random.default_rng(seed)
    stats = []
    for start in range(0, resamples, chunk):
        c = min(chunk, resamples - start)
        counts = rng.multinomial(n, np.full(n, 1.0 / n), size=c).astype(float)
        s = counts @ cols
        with np.errstate(invalid="ignore", divide="ignore"):
            pct_h = 100.0 * (1.0 - np.exp((s[:, 2] - s[:, 1]) / s[:, 0]))
            pct_e = 100.0 * (1.0 - np.exp((s[:, 5] - s[:, 4]) / s[:, 3]))
        stats.append(pct_h - pct_e)
    boot = np.concatenate(stats)
    boot = boot[np.isfinite(boot)]
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(boot, [tail, 100.0 - tail])
    raw = float(2.0 * min(np.mean(boot <= 0), np.mean(boot >= 0)))
    p = min(1.0, max(1.0 / resamples, raw))
    return Concentration(float(stat), float(lo), float(hi), p, resamples, raw)


# -- label smoothing null model -----------------------------------------------------------


def ls_benefit(H: float, vocab_size: int) -> float:
    """Analytic label-smoothing benefit profile, ``ln V - H``."""
    lnv = math.log(vocab_size)
    if H < 0 or H > lnv + 1e-12:
        raise ValueError(f"entropy {H} outside [0, ln {vocab_size}]")
    return lnv - H


def count_crossings(a: Sequence[float], b: Sequence[float]) -> int:
    """Sign changes of ``a - b`` along the profile (exact ties are skipped)."""
    signs = [np.sign(x - y) for x, y in zip(a, b) if x != y]
    return sum(1 for s, t in zip(signs, signs[1:]) if s != t)


def label_smoothing_profile(records: Iterable[TokenRecord], vocab_size: int,
                            model_pair=("base", "student"),
                            edges: Sequence[float] = DEFAULT_EDGES) -> list[tuple[str, float, float, float | None]]:
    """Per difficulty bin: (label, mean baseline entropy, ls_benefit at it, measured pct)."""
    base, variant = model_pair
    fold = _GroupFold()
    hsum = defaultdict(float)
    for r in records:
        key = difficulty_bin(r.H_base, edges)
        fold.add(key, r.nll(base), r.nll(variant))
        hsum[key] += r.H_base
    rep = fold.report(BINS[: len(edges) + 1])
    out = []
    for label, st in rep.items():
        if st.count:
            h = hsum[label] / st.count
            out.append((label, h, ls_benefit(min(h, math.log(vocab_size)), vocab_size), st.pct))
    return out


# -- convergence, entropy and position ------------------------------------------------------


class UndefinedRatio(ZeroDivisionError):
    pass


def convergence_ratio(records: Iterable[TokenRecord]) -> float:
    """Mean top-k overlap(student, teacher) over mean top-k overlap(student, baseline)."""
    num = den = 0.0
    n = 0
    for r in records:
        k = len(r.topk_student)
        s = set(r.topk_student)
        num += len(s.intersection(r.topk_teacher)) / k
        den += len(s.intersection(r.topk_base)) / k
        n += 1
    if n == 0:
        raise ValueError("no records")
    if den == 0:
        raise UndefinedRatio(f"student shares no top-k ids with the baseline over {n} records")
    return (num / n) / (den / n)


def entropy_delta_points(records_by_student: Mapping[str, Iterable[TokenRecord]]) -> list[tuple[str, float, float]]:
    """(student label, mean H_student - H_base, overall pct improvement) per student."""
    points = []
    for label, recs in records_by_student.items():
        n, dh, sb, ss = 0, 0.0, 0.0, 0.0
        for r in recs:
            n += 1
            dh += r.H_student - r.H_base
            sb += r.nll_base
            ss += r.nll_student
        if n == 0:
            raise ValueError(f"no records for {label!r}")
        points.append((label, dh / n, pct_improvement(math.exp(sb / n), math.exp(ss / n), "ppl")))
    return points


def position_improvements(records: Iterable[TokenRecord], edges: Sequence[int] = DESK_POSITION_EDGES,
                          model_pair=("base", "student")) -> BinReport:
    edges = list(edges)
    if len(edges) < 2 or edges[0] < 0 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"position edges must be ascending and nonnegative: {edges}")
    base, variant = model_pair
    labels = [f"{a}-{b}" for a, b in zip(edges, edges[1:])]
    fold = _GroupFold()
    for r in records:
        i = int(np.searchsorted(edges, r.position, side="right")) - 1
        if i < 0 or i >= len(labels):
            raise ValueError(f"position {r.position} outside [{edges[0]}, {edges[-1]})")
        fold.add(labels[i], r.nll(base), r.nll(variant))
    return fold.report(labels)


def edges_in_nats(edges: Sequence[float], unit: str = "nats") -> tuple[float, ...]:
    """Record entropies are in nats; edges given in bits are converted."""
    if unit == "nats":
        return tuple(float(e) for e in edges)
    if unit == "bits":
        return tuple(float(e) * math.log(2) for e in edges)
    raise ValueError(f"unknown entropy unit {unit!r}")


def summarize(records: Sequence[TokenRecord], vocab_size: int, edges: Sequence[float] | None = None,
              resamples: int = 1000, seed: int = 0, edge_unit: str = "nats") -> dict:
    """Every analysis on one record set, as plain JSON-ready values."""
    edges = desk_edges(vocab_size) if edges is None else edges_in_nats(edges, edge_unit)
    out: dict = {"n_records": len(records), "edges": list(edges),
                 "overall_pct": overall_improvement(records)}
    out["bins"] = {k: asdict(v) for k, v in bin_improvements(records, edges=edges).items()}
    out["teacher_bins"] = {k: asdict(v) for k, v in
                           bin_improvements(records, ("base", "teacher"), edges).items()}
    out["categories"] = {k: {"fraction": f, "pct": p} for k, (f, p) in category_improvements(records).items()}
    try:
        c = concentration_bootstrap(records, resamples, seed, edges=edges)
        out["concentration"] = asdict(c)
    except ValueError as exc:
        out["concentration"] = {"error": str(exc)}
    try:
        out["convergence_ratio"] = convergence_ratio(records)
    except UndefinedRatio as exc:
        out["convergence_ratio"] = None
        out["convergence_error"] = str(exc)
    profile = label_smoothing_profile(records, vocab_size, edges=edges)
    out["label_smoothing"] = [{"bin": b, "mean_H": h, "ls_benefit": ls, "pct": p} for b, h, ls, p in profile]
    out["ls_crossings"] = count_crossings([p[2] for p in profile if p[3] is not None],
                                          [p[3] for p in profile if p[3] is not None])
    (_, dh, pct), = entropy_delta_points({"student": records})
    out["entropy_delta"] = {"mean_dH": dh, "pct": pct}
    top = max(r.position for r in records) + 1 if records else 1
    pos_edges = [e for e in DESK_POSITION_EDGES if e < top] + [max(top, DESK_POSITION_EDGES[-1])]
    out["positions"] = {k: asdict(v) for k, v in position_improvements(records, pos_edges).items()}
    return out
