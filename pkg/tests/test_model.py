import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdlab.corpus import Batch
from kdlab.losses import lm_objective, mixed_objective
from kdlab.model import (
    ContextOverflow,
    Divergence,
    ModelConfig,
    ParameterSet,
    causal_gqa_attention,
    forward_logits,
    init_params,
    loss_and_grads,
    rms_norm,
    rope_apply,
    silu,
    swiglu_mlp,
)

TINY = ModelConfig(hidden_dim=8, num_layers=1, mlp_dim=12, query_heads=2, kv_heads=1, head_dim=4,
                   vocab_size=11, context_len=8)


def random_params(cfg, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed, np.float64)
    return ParameterSet(cfg, {k: v + rng.normal(0, scale, v.shape) for k, v in p.items()})


# -- straight-line reference ------------------------------------------------------


def ref_forward(p, tokens):
    """One sequence, explicit loops over positions and heads."""
    c = p.config
    T, G = len(tokens), c.query_heads // c.kv_heads

    def norm(x, g):
        ms = sum(float(v) * float(v) for v in x) / len(x)
        return np.array([float(v) / math.sqrt(ms + c.norm_eps) * float(w) for v, w in zip(x, g)])

    def rot(vec, pos):
        half = c.head_dim // 2
        out = np.zeros(c.head_dim)
        for j in range(half):
            th = pos * c.rope_base ** (-2.0 * j / c.head_dim)
            a, b = vec[j], vec[j + half]
            out[j] = a * math.cos(th) - b * math.sin(th)
            out[j + half] = a * math.sin(th) + b * math.cos(th)
        return out

    hs = [p["tok_emb"][t].astype(float).copy() for t in tokens]
    for i in range(c.num_layers):
        pre = f"layers.{i}."
        xs = [norm(h, p[pre + "attn_norm"]) for h in hs]
        Q = [x @ p[pre + "wq"] for x in xs]
        K = [x @ p[pre + "wk"] for x in xs]
        V = [x @ p[pre + "wv"] for x in xs]
        new = []
        for t in range(T):
            heads = []
            for h in range(c.query_heads):
                kv = h // G
                sl = slice(h * c.head_dim, (h + 1) * c.head_dim)
                kl = slice(kv * c.head_dim, (kv + 1) * c.head_dim)
                q = rot(Q[t][sl], t)
                scores = [float(q @ rot(K[s][kl], s)) / math.sqrt(c.head_dim) for s in range(t + 1)]
                m = max(scores)
                w = [math.exp(x - m) for x in scores]
                z = sum(w)
                heads.append(sum((w[s] / z) * V[s][kl] for s in range(t + 1)))
            new.append(hs[t] + np.concatenate(heads) @ p[pre + "wo"])
        hs = new
        out = []
        for h in hs:
            x = norm(h, p[pre + "mlp_norm"])
            g = x @ p[pre + "w_gate"]
            u = x @ p[pre + "w_up"]
            act = np.array([gi / (1 + math.exp(-gi)) * ui for gi, ui in zip(g, u)])
            out.append(h + act @ p[pre + "w_down"])
        hs = out
    return np.stack([norm(h, p["final_norm"]) @ p["lm_head"] for h in hs])


def naive_attention(q, k, v):
    B, Hq, T, hd = q.shape
    G = Hq // k.shape[1]
    out = np.zeros_like(q)
    for b in range(B):
        for h in range(Hq):
            s = q[b, h] @ k[b, h // G].T / math.sqrt(hd)
            s[np.triu_indices(T, 1)] = -np.inf
            w = np.exp(s - s.max(axis=1, keepdims=True))
            out[b, h] = (w / w.sum(axis=1, keepdims=True)) @ v[b, h // G]
    return out


# -- config / init ------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(query_heads=3, kv_heads=2)
    with pytest.raises(ValueError):
        ModelConfig(head_dim=7)
    with pytest.raises(ValueError):
        ModelConfig(norm_eps=0.0)
    # projection widths follow head counts, not hidden_dim
    c = ModelConfig(hidden_dim=10, query_heads=4, kv_heads=2, head_dim=6)
    assert c.param_shapes()["layers.0.wq"] == (10, 24)
    assert ModelConfig.from_dict(c.to_dict()) == c


def test_untied_embeddings():
    p = init_params(ModelConfig(), 0)
    assert p["tok_emb"].shape == (256, 64) and p["lm_head"].shape == (64, 256)
    assert not np.shares_memory(p["tok_emb"], p["lm_head"])


def test_init_determinism():
    a, b, c = init_params(TINY, 1), init_params(TINY, 1), init_params(TINY, 2)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)
    assert all(np.all(a[k] == 1) for k in a if k.endswith("norm"))


def test_init_sampling_bounds():
    cfg = ModelConfig(hidden_dim=40, vocab_size=250, num_layers=2)
    w = init_params(cfg, 7, np.float64)["lm_head"].ravel()
    n, sigma = w.size, 0.02
    assert n == 10_000
    assert abs(w.mean()) < 5 * sigma / math.sqrt(n)
    assert abs(w.var(ddof=1) - sigma**2) < 5 * sigma**2 * math.sqrt(2 / (n - 1))
    wo = init_params(cfg, 7, np.float64)["layers.0.wo"].ravel()
    s = sigma / math.sqrt(2 * cfg.num_layers)
    assert abs(wo.var(ddof=1) - s**2) < 5 * s**2 * math.sqrt(2 / (wo.size - 1))


# -- blocks ---------------------------------------------------------------------------


def test_rms_norm_examples():
    assert np.allclose(rms_norm(np.ones(5), np.ones(5), 1e-12), 1.0)
    assert np.all(rms_norm(np.zeros(4), np.ones(4), 1e-5) == 0.0)
    out = rms_norm(np.array([3.0, 4.0]), np.ones(2), 0.0)
    assert np.allclose(out, [3 / math.sqrt(12.5), 4 / math.sqrt(12.5)], rtol=0, atol=1e-15)
    assert abs(out[0] - 0.8485281374) < 1e-9 and abs(out[1] - 1.1313708499) < 1e-9


def test_rope_position_zero_identity_and_odd_dim():
    x = np.random.default_rng(0).normal(size=(1, 1, 8))
    assert np.array_equal(rope_apply(x, 10_000.0), x)
    with pytest.raises(ValueError):
        rope_apply(np.zeros((3, 5)), 10_000.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([2, 4, 8, 16]))
def test_rope_norm_preserving(seed, hd):
    x = np.random.default_rng(seed).normal(size=(2, 20, hd))
    y = rope_apply(x, 500_000.0)
    half = hd // 2
    for a, b in ((x, y),):
        pa = a[..., :half] ** 2 + a[..., half:] ** 2
        pb = b[..., :half] ** 2 + b[..., half:] ** 2
        assert np.allclose(pa, pb, rtol=1e-12, atol=1e-12)
    assert np.allclose(rope_apply(y, 500_000.0, inverse=True), x, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
def test_rope_relative_position(seed, p1, p2, shift):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=8), rng.normal(size=8)
    T = 64

    def at(vec, pos):
        seq = np.zeros((T, 8))
        seq[pos] = vec
        return rope_apply(seq, 100.0)[pos]

    d0 = at(q, p1) @ at(k, p2)
    d1 = at(q, p1 + shift) @ at(k, p2 + shift)
    assert abs(d0 - d1) < 1e-10


def test_attention_single_key_returns_value():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=(2, 4, 1, 3)), rng.normal(size=(2, 2, 1, 3)), rng.normal(size=(2, 2, 1, 3))
    out = causal_gqa_attention(q, k, v)
    assert np.allclose(out, np.repeat(v, 2, axis=1), rtol=0, atol=1e-15)


@pytest.mark.parametrize("hq,hkv", [(3, 3), (4, 2), (4, 1)])
def test_attention_matches_naive(hq, hkv):
    rng = np.random.default_rng(hq * 10 + hkv)
    q = rng.normal(size=(2, hq, 6, 4))
    k, v = rng.normal(size=(2, hkv, 6, 4)), rng.normal(size=(2, hkv, 6, 4))
    out, probs = causal_gqa_attention(q, k, v, return_probs=True)
    assert np.allclose(out, naive_attention(q, k, v), atol=1e-13)
    assert np.allclose(probs.sum(-1), 1.0, atol=1e-14)
    assert np.all(probs[..., np.triu_indices(6, 1)[0], np.triu_indices(6, 1)[1]] == 0.0)


def test_attention_shape_errors():
    with pytest.raises(ValueError):
        causal_gqa_attention(np.zeros((1, 3, 2, 4)), np.zeros((1, 2, 2, 4)), np.zeros((1, 2, 2, 4)))
    with pytest.raises(ValueError):
        causal_gqa_attention(np.zeros((1, 2, 2, 4)), np.zeros((1, 2, 3, 4)), np.zeros((1, 2, 3, 4)))


def test_swiglu_examples():
    rng = np.random.default_rng(0)
    wg, wu, wd = rng.normal(size=(2, 2)), rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    assert np.all(swiglu_mlp(np.zeros(2), wg, wu, wd) == 0.0)
    # huge gate pre-activation: silu(a) -> a, so the output approaches (a * up) @ w_down
    x = np.array([1.0, 0.0])
    big = np.array([[1e6, 1e6], [0.0, 0.0]])
    assert np.allclose(swiglu_mlp(x, big, wu, wd), ((x @ big) * (x @ wu)) @ wd, rtol=1e-12)
    # 2x2 by hand
    x = np.array([0.5, -1.0])
    wg = np.array([[1.0, 2.0], [0.0, 1.0]])
    wu = np.array([[2.0, 0.0], [1.0, 1.0]])
    wd = np.array([[1.0, -1.0], [0.5, 2.0]])
    g = [0.5, 0.0]
    u = [0.0, -1.0]
    a = [g[i] / (1 + math.exp(-g[i])) * u[i] for i in range(2)]
    expect = [a[0] * 1.0 + a[1] * 0.5, a[0] * -1.0 + a[1] * 2.0]
    assert np.allclose(swiglu_mlp(x, wg, wu, wd), expect, rtol=0, atol=1e-15)
    assert silu(np.array([0.0]))[0] == 0.0


# -- full model -------------------------------------------------------------------------


def test_forward_matches_straight_line_reference():
    cfg = ModelConfig(hidden_dim=8, num_layers=1, mlp_dim=16, query_heads=2, kv_heads=1, head_dim=4,
                      vocab_size=11, context_len=3, rope_base=10.0)
    p = random_params(cfg, 3, scale=0.5)
    toks = np.array([4, 0, 10])
    got = forward_logits(p, toks[None])[0]
    assert np.max(np.abs(got - ref_forward(p, toks))) < 1e-12


def test_forward_reference_two_layers_gqa():
    cfg = ModelConfig(hidden_dim=12, num_layers=2, mlp_dim=10, query_heads=4, kv_heads=2, head_dim=4,
                      vocab_size=13, context_len=6)
    p = random_params(cfg, 4)
    toks = np.array([1, 12, 5, 5, 0, 7])
    assert np.max(np.abs(forward_logits(p, toks[None])[0] - ref_forward(p, toks))) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 6))
def test_causality(seed, t):
    p = random_params(TINY, 0)
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 11, size=(2, 8))
    y = x.copy()
    y[:, t + 1 :] = rng.integers(0, 11, size=(2, 8 - t - 1))
    a, b = forward_logits(p, x), forward_logits(p, y)
    assert a[:, : t + 1].tobytes() == b[:, : t + 1].tobytes()


def test_identical_rows_and_determinism():
    p = init_params(TINY, 0)
    x = np.tile(np.array([[3, 1, 4, 1, 5]]), (3, 1))
    out = forward_logits(p, x)
    assert out[0].tobytes() == out[1].tobytes() == out[2].tobytes()
    assert out.tobytes() == forward_logits(p, x).tobytes()
    assert np.all(np.isfinite(out))


def test_forward_errors():
    p = init_params(TINY, 0)
    with pytest.raises(ContextOverflow):
        forward_logits(p, np.zeros((1, 9), dtype=int))
    with pytest.raises(ValueError):
        forward_logits(p, np.array([[11]]))


def _batch(cfg, B, T, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, cfg.vocab_size, size=(B, T + 1))
    return Batch(x[:, :-1], x[:, 1:], np.arange(B))


def test_gradients_match_finite_differences_quick():
    cfg = ModelConfig(hidden_dim=8, num_layers=2, mlp_dim=12, query_heads=4, kv_heads=2, head_dim=4,
                      vocab_size=13, context_len=5)
    p = random_params(cfg, 5)
    batch = _batch(cfg, 2, 5, 1)
    teacher = np.random.default_rng(9).normal(size=(2, 5, 13))
    obj = mixed_objective(teacher, 0.3)
    _, grads = loss_and_grads(p, batch, obj)
    rng = np.random.default_rng(0)
    for name in p:
        for _ in range(3):
            idx = tuple(int(rng.integers(s)) for s in p[name].shape)
            old = p[name][idx]
            p[name][idx] = old + 1e-5
            lp = loss_and_grads(p, batch, obj)[0]
            p[name][idx] = old - 1e-5
            lm = loss_and_grads(p, batch, obj)[0]
            p[name][idx] = old
            num = (lp - lm) / 2e-5
            assert abs(num - grads[name][idx]) <= 1e-6 * max(1.0, abs(num)), name


def test_grads_congruent_with_params():
    p = init_params(TINY, 0, np.float64)
    _, g = loss_and_grads(p, _batch(TINY, 2, 4, 0), lm_objective())
    assert set(g) == set(p.tensors)
    assert all(g[k].shape == p[k].shape and np.all(np.isfinite(g[k])) for k in g)


def test_row_duplication_leaves_loss_and_grads():
    p = random_params(TINY, 1)
    b = _batch(TINY, 3, 6, 2)
    b2 = Batch(np.concatenate([b.inputs] * 2), np.concatenate([b.targets] * 2), np.arange(6))
    l1, g1 = loss_and_grads(p, b, lm_objective())
    l2, g2 = loss_and_grads(p, b2, lm_objective())
    assert abs(l1 - l2) < 1e-14
    assert all(np.allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15) for k in g1)


def test_frozen_teacher_gets_no_gradient():
    student = random_params(TINY, 2)
    teacher = student.copy().freeze()
    b = _batch(TINY, 2, 6, 3)
    t_logits = forward_logits(teacher, b.inputs)
    before = {k: v.tobytes() for k, v in teacher.items()}
    loss, grads = loss_and_grads(student, b, mixed_objective(t_logits, 1.0))
    # KL(q||q) = 0 and so is its gradient; the teacher is only ever read
    assert abs(loss) < 1e-12
    assert all(np.max(np.abs(g)) < 1e-12 for g in grads.values())
    assert all(teacher[k].tobytes() == before[k] for k in before)
    with pytest.raises(ValueError):
        teacher["lm_head"][0, 0] = 1.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_on_nonfinite_loss():
    p = init_params(TINY, 0, np.float64)
    p["lm_head"][:] = np.inf
    with pytest.raises(Divergence):
        loss_and_grads(p, _batch(TINY, 1, 3, 0), lm_objective())
