"""Llama-style decoder (RMSNorm, RoPE, GQA, SwiGLU, untied head) in numpy.

The forward pass keeps the intermediates it needs and :func:`backward`
walks them in reverse to produce exact gradients for every parameter.
Computation runs in the dtype of the parameters, so casting a
:class:`ParameterSet` to float64 gives a model suitable for gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import Objective


class ContextOverflow(ValueError):
    pass


class Divergence(FloatingPointError):
    """Raised when a loss comes out non-finite."""


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    num_layers: int = 2
    mlp_dim: int = 256
    query_heads: int = 4
    kv_heads: int = 2
    head_dim: int = 16
    vocab_size: int = 256
    rope_base: float = 500_000.0
    norm_eps: float = 1e-5
    context_len: int = 256

    def __post_init__(self):
        if self.query_heads % self.kv_heads:
            raise ValueError("query_heads must be divisible by kv_heads")
        if self.head_dim % 2:
            raise ValueError("RoPE needs an even head_dim")
        if self.norm_eps <= 0 or self.rope_base <= 0:
            raise ValueError("norm_eps and rope_base must be positive")
        for name in ("hidden_dim", "num_layers", "mlp_dim", "vocab_size", "context_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, hd = self.hidden_dim, self.head_dim
        shapes = {"tok_emb": (self.vocab_size, d)}
        for i in range(self.num_layers):
            p = f"layers.{i}."
            shapes.update({
                p + "attn_norm": (d,),
                p + "wq": (d, self.query_heads * hd),
                p + "wk": (d, self.kv_heads * hd),
                p + "wv": (d, self.kv_heads * hd),
                p + "wo": (self.query_heads * hd, d),
                p + "mlp_norm": (d,),
                p + "w_gate": (d, self.mlp_dim),
                p + "w_up": (d, self.mlp_dim),
                p + "w_down": (self.mlp_dim, d),
            })
        shapes["final_norm"] = (d,)
        shapes["lm_head"] = (d, self.vocab_size)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def is_norm(name: str) -> bool:
    return name.endswith("norm")


@dataclass(eq=False)
class ParameterSet:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def freeze(self) -> "ParameterSet":
        for v in self.tensors.values():
            v.setflags(write=False)
        return self


GradientSet = dict  # name -> array, congruent with ParameterSet.tensors


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ParameterSet:
    """N(0, 0.02) weights; ``wo`` and ``w_down`` further scaled by 1/sqrt(2L); norms at one."""
    rng = np.random.default_rng(seed)
    resid_scale = 1.0 / math.sqrt(2 * config.num_layers)
    tensors = {}
    for name, shape in config.param_shapes().items():
        if is_norm(name):
            w = np.ones(shape)
        else:
            w = rng.normal(0.0, 0.02, size=shape)
            if name.endswith(("wo", "w_down")):
                w *= resid_scale
        tensors[name] = w.astype(dtype)
    return ParameterSet(config, tensors)


# -- building blocks ---------------------------------------------------------


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def _rms_norm_fwd(x, gain, eps):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * gain, r


def _rms_norm_bwd(dy, x, r, gain):
    u = dy * gain
    dgain = (dy * x * r).reshape(-1, x.shape[-1]).sum(axis=0)
    dx = r * u - x * (r ** 3) * np.mean(u * x, axis=-1, keepdims=True)
    return dx, dgain


def rope_tables(seq_len: int, head_dim: int, base: float, dtype=np.float64):
    if head_dim % 2:
        raise ValueError("odd head_dim cannot be split into rotation planes")
    half = head_dim // 2
    inv_freq = base ** (-2.0 * np.arange(half) / head_dim)
    angles = np.arange(seq_len)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(x: np.ndarray, base: float, inverse: bool = False, tables=None) -> np.ndarray:
    """Rotate ``x[..., T, head_dim]``; plane j pairs dims ``j`` and ``j + head_dim/2``.

    Position t rotates plane j by ``t * base**(-2j/head_dim)``. ``inverse``
    applies the transpose rotation (used by backprop).
    """
    T, hd = x.shape[-2], x.shape[-1]
    cos, sin = tables if tables is not None else rope_tables(T, hd, base, x.dtype)
    if inverse:
        sin = -sin
    half = hd // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _causal_bias(T: int, dtype) -> np.ndarray:
    return np.triu(np.full((T, T), -np.inf, dtype=dtype), k=1)


def causal_gqa_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, return_probs: bool = False):
    """Causal attention with grouped key/value heads.

    ``q`` is ``[B, Hq, T, hd]``; ``k`` and ``v`` are ``[B, Hkv, T, hd]``.
    Query head ``h`` reads kv head ``h // (Hq // Hkv)``.
    """
    B, Hq, T, hd = q.shape
    Hkv = k.shape[1]
    if k.shape != v.shape or k.shape[0] != B or k.shape[2:] != (T, hd) or Hq % Hkv:
        raise ValueError(f"incompatible attention shapes q={q.shape} k={k.shape} v={v.shape}")
    G = Hq // Hkv
    # query heads sharing a kv head are stacked along the row axis: [B, Hkv, G*T, hd]
    qg = q.reshape(B, Hkv, G * T, hd)
    probs = qg @ k.swapaxes(-1, -2)
    probs *= 1.0 / math.sqrt(hd)
    probs += np.tile(_causal_bias(T, probs.dtype), (G, 1))
    probs -= probs.max(axis=-1, keepdims=True)
    np.exp(probs, out=probs)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = (probs @ v).reshape(B, Hq, T, hd)
    if return_probs:
        return out, probs.reshape(B, Hq, T, T)
    return out


def silu(a: np.ndarray) -> np.ndarray:
    return a * _sigmoid(a)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def swiglu_mlp(x, w_gate, w_up, w_down):
    return (silu(x @ w_gate) * (x @ w_up)) @ w_down


# -- full model ----------------------------------------------------------------


def _check_inputs(config: ModelConfig, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    if inputs.shape[1] > config.context_len:
        raise ContextOverflow(f"sequence length {inputs.shape[1]} > context_len {config.context_len}")
    if inputs.size and (inputs.min() < 0 or inputs.max() >= config.vocab_size):
        raise ValueError(f"token id outside [0, {config.vocab_size})")
    return inputs


def _forward(params: ParameterSet, inputs: np.ndarray, keep: bool):
    cfg = params.config
    inputs = _check_inputs(cfg, inputs)
    B, T = inputs.shape
    d, hd, Hq, Hkv = cfg.hidden_dim, cfg.head_dim, cfg.query_heads, cfg.kv_heads
    G = Hq // Hkv
    dt = params.dtype
    tables = rope_tables(T, hd, cfg.rope_base, dt)
    cache = {"inputs": inputs, "tables": tables, "layers": []}

    h = params["tok_emb"][inputs]
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        lc = {"h_in": h}
        a_in, r1 = _rms_norm_fwd(h, params[p + "attn_norm"], cfg.norm_eps)
        q = (a_in @ params[p + "wq"]).reshape(B, T, Hq, hd).transpose(0, 2, 1, 3)
        k = (a_in @ params[p + "wk"]).reshape(B, T, Hkv, hd).transpose(0, 2, 1, 3)
        v = (a_in @ params[p + "wv"]).reshape(B, T, Hkv, hd).transpose(0, 2, 1, 3)
        q = rope_apply(q, cfg.rope_base, tables=tables)
        k = rope_apply(k, cfg.rope_base, tables=tables)
        ctx, probs = causal_gqa_attention(q, k, v, return_probs=True)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, T, Hq * hd)
        h = h + ctx @ params[p + "wo"]
        m_in, r2 = _rms_norm_fwd(h, params[p + "mlp_norm"], cfg.norm_eps)
        gate = m_in @ params[p + "w_gate"]
        up = m_in @ params[p + "w_up"]
        sig = _sigmoid(gate)
        act = gate * sig * up
        h_out = h + act @ params[p + "w_down"]
        if keep:
            lc.update(a_in=a_in, r1=r1, qg=q.reshape(B, Hkv, G * T, hd), k=k, v=v,
                      probs=probs.reshape(B, Hkv, G * T, T), ctx=ctx,
                      h_mid=h, m_in=m_in, r2=r2, gate=gate, up=up, sig=sig, act=act)
            cache["layers"].append(lc)
        h = h_out
    f, rf = _rms_norm_fwd(h, params["final_norm"], cfg.norm_eps)
    logits = f @ params["lm_head"]
    cache.update(h_final=h, rf=rf, f=f)
    return logits, cache


def forward_logits(params: ParameterSet, inputs: np.ndarray) -> np.ndarray:
    """Logits ``[B, T, V]``; position t depends on ``inputs[:, :t+1]`` only."""
    return _forward(params, inputs, keep=False)[0]


def backward(params: ParameterSet, cache: dict, dlogits: np.ndarray) -> GradientSet:
    cfg = params.config
    inputs = cache["inputs"]
    B, T = inputs.shape
    d, hd, Hq, Hkv = cfg.hidden_dim, cfg.head_dim, cfg.query_heads, cfg.kv_heads
    G = Hq // Hkv
    scale = 1.0 / math.sqrt(hd)
    tables = cache["tables"]
    grads: GradientSet = {}

    def mm_grad(x, dy):
        return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])

    grads["lm_head"] = mm_grad(cache["f"], dlogits)
    df = dlogits @ params["lm_head"].T
    dh, grads["final_norm"] = _rms_norm_bwd(df, cache["h_final"], cache["rf"], params["final_norm"])

    for i in reversed(range(cfg.num_layers)):
        p = f"layers.{i}."
        lc = cache["layers"][i]
        # MLP branch
        grads[p + "w_down"] = mm_grad(lc["act"], dh)
        dact = dh @ params[p + "w_down"].T
        gate, sig, up = lc["gate"], lc["sig"], lc["up"]
        silu_g = gate * sig
        dup = dact * silu_g
        dgate = dact * up * (sig * (1.0 + gate * (1.0 - sig)))
        grads[p + "w_gate"] = mm_grad(lc["m_in"], dgate)
        grads[p + "w_up"] = mm_grad(lc["m_in"], dup)
        dm_in = dgate @ params[p + "w_gate"].T + dup @ params[p + "w_up"].T
        dx, grads[p + "mlp_norm"] = _rms_norm_bwd(dm_in, lc["h_mid"], lc["r2"], params[p + "mlp_norm"])
        dh = dh + dx
        # attention branch
        grads[p + "wo"] = mm_grad(lc["ctx"], dh)
        dctx = (dh @ params[p + "wo"].T).reshape(B, T, Hq, hd).transpose(0, 2, 1, 3)
        dctx = dctx.reshape(B, Hkv, G * T, hd)
        probs = lc["probs"]
        dv = probs.swapaxes(-1, -2) @ dctx
        dprobs = dctx @ lc["v"].swapaxes(-1, -2)
        ds = dprobs
        ds -= (dprobs * probs).sum(axis=-1, keepdims=True)
        ds *= probs
        ds *= scale
        dq = (ds @ lc["k"]).reshape(B, Hq, T, hd)
        dk = ds.swapaxes(-1, -2) @ lc["qg"]
        dq = rope_apply(dq, cfg.rope_base, inverse=True, tables=tables)
        dk = rope_apply(dk, cfg.rope_base, inverse=True, tables=tables)
        dq = dq.transpose(0, 2, 1, 3).reshape(B, T, Hq * hd)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, T, Hkv * hd)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, T, Hkv * hd)
        a_in = lc["a_in"]
        grads[p + "wq"] = mm_grad(a_in, dq)
        grads[p + "wk"] = mm_grad(a_in, dk)
        grads[p + "wv"] = mm_grad(a_in, dv)
        da = dq @ params[p + "wq"].T + dk @ params[p + "wk"].T + dv @ params[p + "wv"].T
        dx, grads[p + "attn_norm"] = _rms_norm_bwd(da, lc["h_in"], lc["r1"], params[p + "attn_norm"])
        dh = dh + dx

    demb = np.zeros_like(params["tok_emb"])
    np.add.at(demb, inputs.ravel(), dh.reshape(-1, d))
    grads["tok_emb"] = demb
    return {name: grads[name] for name in params}


def loss_and_grads(params: ParameterSet, batch, objective: Objective, return_parts: bool = False):
    """Evaluate ``objective`` on the model's logits and backpropagate through the model.

    ``batch`` needs ``inputs`` and ``targets``. Raises :class:`Divergence` on a
    non-finite loss.
    """
    logits, cache = _forward(params, batch.inputs, keep=True)
    val = objective(logits, batch.targets)
    if not math.isfinite(val.loss):
        raise Divergence(f"non-finite loss {val.loss}")
    grads = backward(params, cache, val.dlogits)
    if return_parts:
        return val.loss, grads, val.parts
    return val.loss, grads
