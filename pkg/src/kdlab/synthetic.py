"""Procedural text corpora and planted-rule multiple-choice tasks.

Corpora mix templated prose, small arithmetic facts and key/value records so
a byte-level model sees tokens of very different difficulty: spelling inside
a word is nearly deterministic, the next noun is not, and an arithmetic
result is determined only by the operands seen earlier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import TokenPool, tokenize

NAMES = ["Anna", "Boris", "Chen", "Dara", "Emil", "Fatima", "Goran", "Hana", "Ivo", "Jun",
         "Kira", "Lena", "Milo", "Nia", "Oskar", "Pia"]
ANIMALS = ["fox", "owl", "horse", "cat", "dog", "heron", "otter", "crow", "mole", "goat"]
COLORS = ["red", "blue", "green", "grey", "brown", "white", "black", "golden"]
PLACES = ["river", "forest", "market", "garden", "harbor", "village", "valley", "library"]
VERBS = ["saw", "followed", "painted", "fed", "found", "watched", "called", "met"]
ITEMS = ["apples", "pears", "stones", "books", "coins", "shells", "cups", "keys"]
KEYWORDS = ["def", "return", "for", "if", "while", "print", "yield", "else"]


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _prose_sentence(rng) -> str:
    kind = int(rng.integers(5))
    if kind == 0:
        return (f"The {_pick(rng, COLORS)} {_pick(rng, ANIMALS)} {_pick(rng, VERBS)} "
                f"{_pick(rng, NAMES)} near the {_pick(rng, PLACES)}.")
    if kind == 1:
        a, b = int(rng.integers(1, 10)), int(rng.integers(1, 10))
        it = _pick(rng, ITEMS)
        return f"{_pick(rng, NAMES)} has {a} {it} and gets {b} more, so now {a + b} {it}."
    if kind == 2:
        n = _pick(rng, NAMES)
        return f"{n} went to the {_pick(rng, PLACES)} and {n} {_pick(rng, VERBS)} a {_pick(rng, ANIMALS)}."
    if kind == 3:
        a, b = int(rng.integers(10, 60)), int(rng.integers(1, 40))
        return f"We know that {a} + {b} = {a + b}."
    return f"In the {_pick(rng, PLACES)} every {_pick(rng, ANIMALS)} is {_pick(rng, COLORS)}."


def _arith_line(rng) -> str:
    a, b = int(rng.integers(0, 100)), int(rng.integers(0, 100))
    op = int(rng.integers(3))
    if op == 0:
        return f"{a} + {b} = {a + b}"
    if op == 1:
        return f"{max(a, b)} - {min(a, b)} = {max(a, b) - min(a, b)}"
    a, b = a % 13, b % 13
    return f"{a} * {b} = {a * b}"


def _code_line(rng) -> str:
    kw = _pick(rng, KEYWORDS)
    var = _pick(rng, ANIMALS)
    n = int(rng.integers(0, 20))
    if kw == "def":
        return f"def count_{var}({_pick(rng, ITEMS)}):"
    if kw == "for":
        return f"    for {var} in range({n}):"
    if kw == "print":
        return f"        print({var}, {n})"
    return f"    {kw} {var} + {n}"


def _record_line(rng) -> str:
    n = _pick(rng, NAMES)
    return f"name={n}; pet={_pick(rng, ANIMALS)}; color={_pick(rng, COLORS)}; count={int(rng.integers(100))}"


STYLES = {
    "prose": (_prose_sentence, " "),
    "arith": (_arith_line, "\n"),
    "code": (_code_line, "\n"),
    "records": (_record_line, "\n"),
}


def generate_corpus(n_bytes: int, seed: int, style: str = "prose") -> bytes:
    """Deterministic ASCII text of exactly ``n_bytes`` bytes."""
    make, sep = STYLES[style]
    rng = np.random.default_rng(seed)
    parts, size = [], 0
    while size < n_bytes:
        s = make(rng) + sep
        if style == "prose" and rng.random() < 0.15:
            s += "\n"
        parts.append(s)
        size += len(s)
    return "".join(parts).encode("ascii")[:n_bytes]


@dataclass(frozen=True)
class MCItem:
    prompt: np.ndarray
    choices: tuple[np.ndarray, ...]
    answer: int


@dataclass(frozen=True)
class MCTask:
    name: str
    items: tuple[MCItem, ...]
    length_norm: bool = False


def arithmetic_task(n_items: int, seed: int, n_choices: int = 4) -> MCTask:
    """``"We know that a + b = "`` with the true sum among distractor sums."""
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n_items):
        a, b = int(rng.integers(10, 60)), int(rng.integers(1, 40))
        right = a + b
        wrong: list[int] = []
        while len(wrong) < n_choices - 1:
            w = right + int(rng.integers(-9, 10))
            if w != right and w not in wrong and w > 0:
                wrong.append(w)
        opts = [right] + wrong
        order = rng.permutation(n_choices)
        choices = tuple(tokenize(f"{opts[j]}.") for j in order)
        items.append(MCItem(tokenize(f"We know that {a} + {b} = "), choices, int(np.argmax(order == 0))))
    return MCTask("arith_mc", tuple(items))


def cloze_task(pool: TokenPool, n_items: int, seed: int, prompt_len: int = 48,
               n_choices: int = 4, length_norm: bool = True) -> MCTask:
    """True continuation of a held-out passage vs. continuations taken elsewhere.

    Continuations run to the next sentence end, so choice lengths differ and
    length normalization matters.
    """
    rng = np.random.default_rng(seed)
    toks = pool.tokens
    stop = set(tokenize(".\n").tolist())

    def span(start):
        end = start
        while end < len(toks) - 1 and toks[end] not in stop and end - start < 40:
            end += 1
        return toks[start : end + 1]

    items = []
    limit = len(toks) - prompt_len - 64
    if limit <= 0:
        raise ValueError("pool too short for cloze items")
    for _ in range(n_items):
        s = int(rng.integers(0, limit))
        prompt = toks[s : s + prompt_len]
        opts = [span(s + prompt_len)]
        while len(opts) < n_choices:
            cand = span(int(rng.integers(0, limit)))
            if not any(len(cand) == len(o) and np.array_equal(cand, o) for o in opts):
                opts.append(cand)
        order = rng.permutation(n_choices)
        items.append(MCItem(prompt, tuple(opts[j] for j in order), int(np.argmax(order == 0))))
    return MCTask("cloze_mc", tuple(items), length_norm=length_norm)
