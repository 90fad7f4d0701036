import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdlab import checkpoint
from kdlab.corpus import PoolExhausted, TokenPool, build_pools
from kdlab.losses import softmax
from kdlab.model import Divergence, ModelConfig, init_params
from kdlab.synthetic import generate_corpus
from kdlab.training import (
    LOG_FIELDS,
    OptimizerState,
    RunConfig,
    TeacherLogitCache,
    TrainingAborted,
    adamw_step,
    clip_global_norm,
    global_norm,
    lr_at_step,
    train_lockstep,
    train_loop,
    train_run,
)

MICRO = ModelConfig(hidden_dim=16, num_layers=1, mlp_dim=32, query_heads=2, kv_heads=1, head_dim=8,
                    context_len=16)


@pytest.fixture(scope="module")
def pool():
    train, _, _ = build_pools(generate_corpus(120_000, 0), 0.1, 0, context_len=16)
    return train


def micro_run(role="baseline", budget=4096, **kw):
    kw.setdefault("batch_size", 4)
    kw.setdefault("peak_lr", 3e-3)
    return RunConfig(role, MICRO, budget, **kw)


# -- config -------------------------------------------------------------------------


def test_run_config_defaults_and_roles():
    r = RunConfig("baseline")
    assert (r.peak_lr, r.warmup_frac, r.final_lr_frac, r.betas, r.weight_decay, r.clip_norm) == \
        (3e-4, 0.05, 0.1, (0.9, 0.95), 0.1, 1.0)
    assert r.context_len == 256 and r.total_steps == 2_000_000 // (16 * 256)
    with pytest.raises(ValueError):
        RunConfig("distill", alpha=0.5)
    with pytest.raises(ValueError):
        RunConfig("distill", alpha=0.0, teacher_checkpoint="t.ckpt")
    with pytest.raises(ValueError):
        RunConfig("baseline", alpha=0.2)
    with pytest.raises(ValueError):
        RunConfig("student")
    d = RunConfig("distill", alpha=0.4, teacher_checkpoint="t.ckpt")
    assert RunConfig.from_dict(d.to_dict()) == d


# -- schedule ----------------------------------------------------------------------


def test_lr_examples():
    assert lr_at_step(0, 1000, 3e-4, 0.05, 0.1) == 0.0
    assert lr_at_step(50, 1000, 3e-4, 0.05, 0.1) == 3e-4
    assert abs(lr_at_step(1000, 1000, 3e-4, 0.05, 0.1) - 3e-5) < 1e-18
    assert abs(lr_at_step(25, 1000, 3e-4, 0.05, 0.1) - 1.5e-4) < 1e-18
    with pytest.raises(ValueError):
        lr_at_step(1001, 1000, 3e-4, 0.05, 0.1)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5000), st.floats(0.01, 0.5), st.floats(0.0, 0.9))
def test_lr_shape(total, wf, ff):
    lrs = [lr_at_step(s, total, 1.0, wf, ff) for s in range(total + 1)]
    w = math.ceil(wf * total)
    assert max(lrs) == lrs[w] == 1.0
    assert all(a <= b for a, b in zip(lrs[:w], lrs[1 : w + 1]))
    assert all(a >= b - 1e-15 for a, b in zip(lrs[w:], lrs[w + 1 :]))
    assert abs(lrs[-1] - ff) < 1e-12
    # continuity: no jump larger than one warmup increment or the steepest cosine slope
    bound = max(1.0 / w, math.pi / 2 * (1 - ff) / max(total - w, 1)) + 1e-12
    assert all(abs(a - b) <= bound for a, b in zip(lrs, lrs[1:]))


# -- clipping ----------------------------------------------------------------------------


def test_clip_examples():
    g = {"a": np.array([0.3, 0.4])}
    assert clip_global_norm(g, 1.0) is g
    g = {"a": np.array([2.0, 0.0]), "b": np.array([[0.0, 2.0], [2.0, -2.0]])}
    assert global_norm(g) == 4.0
    c = clip_global_norm(g, 1.0)
    assert np.array_equal(c["a"], g["a"] * 0.25) and np.array_equal(c["b"], g["b"] * 0.25)
    with pytest.raises(Divergence):
        clip_global_norm({"a": np.array([np.nan])}, 1.0)
    with pytest.raises(ValueError):
        clip_global_norm(g, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.floats(1e-3, 10))
def test_clip_norm_recomputed(seed, scale, max_norm):
    rng = np.random.default_rng(seed)
    g = {"x": rng.normal(size=(3, 4)) * scale, "y": rng.normal(size=7) * scale}
    before = math.sqrt(sum(float((v**2).sum()) for v in g.values()))
    after = global_norm(clip_global_norm(g, max_norm))
    assert abs(after - min(before, max_norm)) <= 1e-9 * max(1.0, before)


# -- AdamW --------------------------------------------------------------------------------


def _toy(values, name="w"):
    from kdlab.model import ParameterSet
    return ParameterSet(MICRO, {name: np.array(values, dtype=np.float64)})


def test_adamw_zero_grads_no_decay():
    p = _toy([1.0, -2.0, 3.0])
    q, st_ = adamw_step(p, {"w": np.zeros(3)}, OptimizerState.zeros_like(p), 0.1, weight_decay=0.0)
    assert np.array_equal(q["w"], p["w"]) and st_.step == 1


def test_adamw_decay_only():
    p = _toy([1.0, -2.0, 3.0])
    q, _ = adamw_step(p, {"w": np.zeros(3)}, OptimizerState.zeros_like(p), 0.1, weight_decay=0.5)
    assert np.array_equal(q["w"], p["w"] * (1 - 0.05))
    n = _toy([2.0, 2.0], "layers.0.attn_norm")
    q, _ = adamw_step(n, {"layers.0.attn_norm": np.zeros(2)}, OptimizerState.zeros_like(n), 0.1, weight_decay=0.5)
    assert np.array_equal(q["layers.0.attn_norm"], n["layers.0.attn_norm"])


def test_adamw_single_step_by_hand():
    p = _toy([0.5, -1.0, 2.0])
    g = np.array([0.1, -0.2, 0.0])
    lr, b1, b2, wd, eps = 0.01, 0.9, 0.95, 0.1, 1e-8
    q, s = adamw_step(p, {"w": g}, OptimizerState.zeros_like(p), lr, (b1, b2), wd, eps)
    expect = []
    for w, gi in zip([0.5, -1.0, 2.0], [0.1, -0.2, 0.0]):
        m = (1 - b1) * gi / (1 - b1)
        v = (1 - b2) * gi * gi / (1 - b2)
        expect.append(w * (1 - lr * wd) - lr * m / (math.sqrt(v) + eps))
    assert np.allclose(q["w"], expect, rtol=0, atol=1e-15)
    # first step moves every nonzero-gradient coordinate by ~lr against the gradient sign
    assert np.allclose((q["w"] - p["w"] * (1 - lr * wd))[:2], [-lr, lr], atol=1e-8)
    assert np.allclose(s.m["w"], 0.1 * g) and np.allclose(s.v["w"], 0.05 * g * g)


def test_adamw_shape_mismatch():
    p = _toy([1.0, 2.0])
    with pytest.raises(ValueError):
        adamw_step(p, {"w": np.zeros(3)}, OptimizerState.zeros_like(p), 0.1)


# -- runs ----------------------------------------------------------------------------------


def test_alpha_zero_distill_matches_baseline_bitwise(pool):
    run = micro_run(budget=100 * 4 * 16)
    teacher = init_params(MICRO, 99).freeze()
    assert run.total_steps == 100
    init = init_params(MICRO, 0)
    base = train_loop(init.copy(), pool, run)
    res = train_lockstep({"a0": (init.copy(), 0.0), "a5": (init.copy(), 0.5)}, pool, run, teacher)
    assert len(base.log) == 100
    assert all(base.params[k].tobytes() == res["a0"].params[k].tobytes() for k in base.params)
    assert any(base.params[k].tobytes() != res["a5"].params[k].tobytes() for k in base.params)


def test_lockstep_matches_solo_runs(pool):
    run = micro_run(budget=20 * 4 * 16)
    teacher = init_params(MICRO, 5).freeze()
    init = init_params(MICRO, 1)
    both = train_lockstep({0.3: (init.copy(), 0.3), 1.0: (init.copy(), 1.0)}, pool, run, teacher)
    for a in (0.3, 1.0):
        solo = train_loop(init.copy(), pool, run, teacher=teacher, alpha=a)
        assert all(solo.params[k].tobytes() == both[a].params[k].tobytes() for k in solo.params)


def test_reproducible_checkpoint_and_seed_dependence(pool, tmp_path):
    run = micro_run("teacher", budget=10 * 4 * 16)
    train_run(run, pool, tmp_path / "a")
    train_run(run, pool, tmp_path / "b")
    train_run(RunConfig.from_dict({**run.to_dict(), "data_seed": 1}), pool, tmp_path / "c")
    a, b, c = ((tmp_path / x / "model.ckpt").read_bytes() for x in "abc")
    assert a == b and a != c


def test_distill_run_leaves_teacher_untouched(pool, tmp_path):
    train_run(micro_run("teacher", budget=5 * 64), pool, tmp_path / "t")
    before = (tmp_path / "t" / "model.ckpt").read_bytes()
    run = micro_run("distill", budget=5 * 64, alpha=0.5, teacher_checkpoint=str(tmp_path / "t" / "model.ckpt"))
    res = train_run(run, pool, tmp_path / "s")
    assert (tmp_path / "t" / "model.ckpt").read_bytes() == before
    assert all(math.isfinite(r["kd_loss"]) and math.isfinite(r["lm_loss"]) for r in res.log)


def test_log_csv_fields(pool, tmp_path):
    res = train_run(micro_run(budget=3 * 64), pool, tmp_path)
    rows = list(csv.DictReader(io.StringIO((tmp_path / "train_log.csv").read_text())))
    assert tuple(rows[0]) == LOG_FIELDS and len(rows) == 3
    assert [int(r["tokens_seen"]) for r in rows] == [64, 128, 192]
    assert float(rows[-1]["mixed_loss"]) == res.log[-1]["mixed_loss"]


def test_pool_exhausted():
    tiny = TokenPool(np.arange(17 * 8) % 256)
    with pytest.raises(PoolExhausted):
        train_loop(init_params(MICRO, 0), tiny, micro_run(budget=3 * 64))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_policy(pool):
    run = micro_run(budget=4 * 64)
    bad = init_params(MICRO, 0)
    bad.tensors["lm_head"][0, 0] = np.nan
    res = train_lockstep({"bad": (bad, 0.0), "ok": (init_params(MICRO, 0), 0.0)}, pool, run)
    assert res["bad"].status == "diverged" and res["bad"].log == []
    assert res["ok"].status == "done" and len(res["ok"].log) == 4
    with pytest.raises(TrainingAborted):
        train_loop(bad, pool, run)


def test_logit_cache_full_is_exact(pool, tmp_path):
    run = micro_run(budget=6 * 64)
    teacher = init_params(MICRO, 8).freeze()
    init = init_params(MICRO, 2)
    ref = train_loop(init.copy(), pool, run, teacher=teacher, alpha=0.5)
    cache = TeacherLogitCache(tmp_path / "c")
    first = train_loop(init.copy(), pool, run, teacher=teacher, alpha=0.5, logit_cache=cache)
    second = train_loop(init.copy(), pool, run, teacher=teacher, alpha=0.5, logit_cache=cache)
    assert (cache.misses, cache.hits) == (6, 6)
    for r in (first, second):
        assert all(ref.params[k].tobytes() == r.params[k].tobytes() for k in ref.params)


def test_logit_cache_topk_keeps_head_and_mass(tmp_path):
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 3, 50)).astype(np.float32) * 3
    cache = TeacherLogitCache(tmp_path, topk=5)
    rebuilt = cache.get(0, np.array([0, 17]), lambda: logits)
    q, r = softmax(logits.astype(np.float64)), softmax(rebuilt.astype(np.float64))
    top = np.argsort(-logits, axis=-1)[..., :5]
    assert np.allclose(np.take_along_axis(q, top, -1), np.take_along_axis(r, top, -1), atol=1e-6)
    assert np.allclose(r.sum(-1), 1.0)
    mask = np.ones_like(r, dtype=bool)
    np.put_along_axis(mask, top, False, -1)
    tail = r[mask].reshape(2, 3, 45)
    assert np.allclose(tail, tail[..., :1], rtol=1e-5)
    again = cache.get(0, np.array([0, 17]), lambda: pytest.fail("should hit"))
    assert np.array_equal(again, rebuilt)
    # a different batch under the same step recomputes
    cache.get(0, np.array([1, 2]), lambda: logits)
    assert cache.misses == 2


def test_tiny_run_smoke(tmp_path):
    cfg = ModelConfig(hidden_dim=32, num_layers=2, mlp_dim=128, query_heads=4, kv_heads=2, head_dim=8,
                      context_len=64)
    train, _, _ = build_pools(generate_corpus(260_000, 3), 0.1, 0, context_len=64)
    run = RunConfig("baseline", cfg, 200_000, batch_size=16, peak_lr=3e-3)
    res = train_run(run, train)
    untrained = math.log(256)
    first = res.log[0]["lm_loss"]
    assert abs(first - untrained) < 0.05
    final = sum(r["lm_loss"] for r in res.log[-10:]) / 10
    assert final <= 0.7 * first, (first, final)
    assert checkpoint.to_bytes(res.params)
