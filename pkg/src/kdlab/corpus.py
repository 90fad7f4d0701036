"""Byte-level corpus handling: tokenization, pool splitting and batch streams.

Every run draws fixed-size windows of ``context_len + 1`` tokens from a pool.
The window order is a pure function of ``(seed, window index)`` so a stream
is reproducible without storing permutations, and windows are never reused
within one run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

VOCAB_SIZE = 256
DEFAULT_CONTEXT_LEN = 256
DEFAULT_BATCH_SIZE = 16

_MASK64 = (1 << 64) - 1


class CorpusTooSmall(ValueError):
    pass


class PoolExhausted(RuntimeError):
    """The requested token budget is larger than what the pool can serve."""


def tokenize(text: bytes | str) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def decode(tokens) -> bytes:
    return bytes(np.asarray(tokens, dtype=np.uint8).tolist())


@dataclass(frozen=True, eq=False)
class TokenPool:
    tokens: np.ndarray
    vocab_size: int = VOCAB_SIZE
    pool_id: str = "train"
    seed: int = 0
    # [start, end) byte ranges of the source corpus this pool was cut from
    byte_offsets: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        toks = np.ascontiguousarray(self.tokens, dtype=np.int64)
        if toks.ndim != 1:
            raise ValueError("pool tokens must be one-dimensional")
        if toks.size and (toks.min() < 0 or toks.max() >= self.vocab_size):
            raise ValueError(f"token id out of range for vocab_size={self.vocab_size}")
        toks.setflags(write=False)
        object.__setattr__(self, "tokens", toks)

    def __len__(self) -> int:
        return int(self.tokens.size)

    def manifest(self) -> dict:
        return {
            "pool_id": self.pool_id,
            "byte_offsets": [list(r) for r in self.byte_offsets],
            "seed": self.seed,
            "vocab_size": self.vocab_size,
        }


def build_pools(
    corpus: bytes,
    held_out_fraction: float,
    seed: int,
    ood: Mapping[str, bytes] | None = None,
    context_len: int = DEFAULT_CONTEXT_LEN,
) -> tuple[TokenPool, TokenPool, list[TokenPool]]:
    """Split ``corpus`` into a train pool and one contiguous held-out block.

    The held-out block starts at a seed-dependent offset; the train pool is the
    remainder with the two flanking ranges concatenated (contiguous packing).
    Each OOD corpus becomes its own pool tagged by its name.
    """
    if not 0.0 < held_out_fraction < 0.5:
        raise ValueError("held_out_fraction must lie in (0, 0.5)")
    n = len(corpus)
    n_held = int(round(n * held_out_fraction))
    window = context_len + 1
    if n_held < window or n - n_held < window:
        raise CorpusTooSmall(
            f"corpus of {n} tokens cannot hold one {window}-token window per split"
        )
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, n - n_held + 1))
    toks = tokenize(corpus)
    held = TokenPool(
        toks[start : start + n_held],
        pool_id="held_out",
        seed=seed,
        byte_offsets=((start, start + n_held),),
    )
    ranges = tuple(r for r in ((0, start), (start + n_held, n)) if r[1] > r[0])
    train = TokenPool(
        np.concatenate([toks[a:b] for a, b in ranges]),
        pool_id="train",
        seed=seed,
        byte_offsets=ranges,
    )
    ood_pools = []
    for name, blob in (ood or {}).items():
        if len(blob) < window:
            raise CorpusTooSmall(f"OOD corpus {name!r} is shorter than one window")
        ood_pools.append(
            TokenPool(tokenize(blob), pool_id=name, seed=seed, byte_offsets=((0, len(blob)),))
        )
    return train, held, ood_pools


def write_manifest(path: str | Path, pools: list[TokenPool]) -> None:
    Path(path).write_text(json.dumps([p.manifest() for p in pools], indent=2))


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def window_order(n_windows: int, seed: int) -> np.ndarray:
    """Permutation of window indices keyed by ``hash(seed, index)``."""
    key = _splitmix64(np.array([seed & _MASK64], dtype=np.uint64))[0]
    idx = np.arange(n_windows, dtype=np.uint64)
    keys = _splitmix64(idx ^ key)
    return np.argsort(keys, kind="stable").astype(np.int64)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    # pool token indices covered by each row, start of the window
    window_starts: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class StreamState:
    seed: int
    context_len: int
    batch_size: int
    order: np.ndarray = field(repr=False)
    position: int = 0

    @property
    def windows_left(self) -> int:
        return int(self.order.size) - self.position


def open_stream(
    pool: TokenPool,
    seed: int,
    context_len: int = DEFAULT_CONTEXT_LEN,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> StreamState:
    n_windows = len(pool) // (context_len + 1)
    return StreamState(seed, context_len, batch_size, window_order(n_windows, seed))


def next_batch(pool: TokenPool, cursor: StreamState) -> tuple[Batch, StreamState]:
    bs, w = cursor.batch_size, cursor.context_len + 1
    if cursor.windows_left < bs:
        raise PoolExhausted(
            f"pool {pool.pool_id!r} has {cursor.windows_left} windows left, batch needs {bs}"
        )
    starts = cursor.order[cursor.position : cursor.position + bs] * w
    rows = pool.tokens[starts[:, None] + np.arange(w)[None, :]]
    batch = Batch(inputs=rows[:, :-1], targets=rows[:, 1:], window_starts=starts)
    return batch, replace(cursor, position=cursor.position + bs)


def sequential_windows(pool: TokenPool, context_len: int) -> np.ndarray:
    """Non-overlapping windows in pool order; the trailing partial window is dropped."""
    w = context_len + 1
    n = len(pool) // w
    return pool.tokens[: n * w].reshape(n, w)
