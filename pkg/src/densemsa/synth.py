"""Synthetic rendered-expression corpus for desk-scale experiments.

Expressions are drawn from a small grammar and rasterized with a built-in
5x7 bitmap font.  Tier 0 has integers joined by ``+ - =``; tier 1 adds
decimal numbers whose point is drawn at about a quarter of glyph height,
squeezed between its neighbours; tier 2 adds superscripts and (nested)
fractions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Sample, Vocabulary, preprocess
from .tensor import DTYPE

DIGITS = [str(d) for d in range(10)]
SYMBOLS = DIGITS + ["+", "-", "=", ".", "^", "{", "}", "\\frac"]
TIERS = (0, 1, 2)

_FONT = {
    "0": ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    "1": ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    "2": ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    "3": ["11110", "00001", "00001", "01110", "00001", "00001", "11110"],
    "4": ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    "5": ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    "6": ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    "7": ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    "8": ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    "9": ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
    "+": ["00000", "00100", "00100", "11111", "00100", "00100", "00000"],
    "-": ["00000", "00000", "00000", "11111", "00000", "00000", "00000"],
    "=": ["00000", "00000", "11111", "00000", "11111", "00000", "00000"],
}


def builtin_vocab() -> Vocabulary:
    return Vocabulary(SYMBOLS)


@dataclass
class Box:
    """Rendered fragment; ``ascent`` rows lie above the baseline."""

    img: np.ndarray
    ascent: int

    @property
    def descent(self) -> int:
        return self.img.shape[0] - self.ascent

    @property
    def width(self) -> int:
        return self.img.shape[1]


def _glyph(tok: str, scale: int) -> Box:
    bits = np.array([[c == "1" for c in row] for row in _FONT[tok]], dtype=DTYPE)
    img = np.kron(bits, np.ones((scale, scale), dtype=DTYPE))
    return Box(img, img.shape[0])


def _dot(scale: int) -> Box:
    size = max(1, round(7 * scale / 4))
    return Box(np.ones((size, size), dtype=DTYPE), size)


def _hcat(boxes: list[Box], gaps: list[int]) -> Box:
    asc = max(b.ascent for b in boxes)
    desc = max(b.descent for b in boxes)
    width = sum(b.width for b in boxes) + sum(gaps)
    img = np.zeros((asc + desc, width), dtype=DTYPE)
    x = 0
    for i, b in enumerate(boxes):
        top = asc - b.ascent
        img[top:top + b.img.shape[0], x:x + b.width] = np.maximum(
            img[top:top + b.img.shape[0], x:x + b.width], b.img)
        x += b.width + (gaps[i] if i < len(gaps) else 0)
    return Box(img, asc)


class _Renderer:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def gap(self, scale):
        return int(self.rng.integers(1, 2 * scale + 1))

    def render(self, node, scale: int) -> Box:
        kind = node[0]
        if kind == "seq":
            parts = [self.render(ch, scale) for ch in node[1]]
            gaps = []
            for left, right in zip(node[1][:-1], node[1][1:]):
                tight = left[0] == "dot" or right[0] == "dot"
                gaps.append(max(1, scale // 2) if tight else self.gap(scale))
            return _hcat(parts, gaps)
        if kind == "tok":
            return _glyph(node[1], scale)
        if kind == "dot":
            return _dot(scale)
        if kind == "sup":
            base = self.render(node[1], scale)
            small = max(1, scale // 2)
            exp = self.render(node[2], small)
            raise_by = base.ascent // 2
            lifted = Box(exp.img, exp.ascent + raise_by)
            # keep the exponent from hanging below the base
            if lifted.descent > base.descent:
                pad = np.zeros((lifted.ascent + base.descent, exp.width), dtype=DTYPE)
                pad[:exp.img.shape[0]] = exp.img
                lifted = Box(pad, lifted.ascent)
            return _hcat([base, lifted], [1])
        if kind == "frac":
            num = self.render(node[1], scale)
            den = self.render(node[2], scale)
            width = max(num.width, den.width) + 2 * scale
            bar = max(1, scale // 2)
            gap = scale
            h = num.img.shape[0] + gap + bar + gap + den.img.shape[0]
            img = np.zeros((h, width), dtype=DTYPE)
            x = (width - num.width) // 2
            img[:num.img.shape[0], x:x + num.width] = num.img
            y = num.img.shape[0] + gap
            img[y:y + bar, :] = 1.0
            x = (width - den.width) // 2
            img[y + bar + gap:, x:x + den.width] = den.img
            axis = (7 * scale) // 2
            return Box(img, y + axis)
        raise ValueError(kind)


def _number(rng, tier: int, max_digits: int = 3):
    digits = [("tok", str(rng.integers(0, 10))) for _ in range(rng.integers(1, max_digits + 1))]
    if tier >= 1 and rng.random() < 0.5:
        frac = [("tok", str(rng.integers(0, 10))) for _ in range(rng.integers(1, 3))]
        digits = digits[:2] + [("dot",)] + frac
    return digits


def _term(rng, tier: int, depth: int):
    if tier >= 2 and depth > 0:
        r = rng.random()
        if r < 0.25:
            return [("frac", _expr(rng, tier, depth - 1, 2), _expr(rng, tier, depth - 1, 2))]
        if r < 0.5:
            base = ("tok", str(rng.integers(0, 10)))
            exp = ("seq", [("tok", str(rng.integers(0, 10))) for _ in range(rng.integers(1, 3))])
            return [("sup", base, exp)]
    return _number(rng, tier)


def _expr(rng, tier: int, depth: int, max_terms: int):
    items = _term(rng, tier, depth)
    for _ in range(rng.integers(0, max_terms)):
        items = items + [("tok", str(rng.choice(["+", "-", "="])))] + _term(rng, tier, depth)
    return ("seq", items)


def to_tokens(node) -> list[str]:
    kind = node[0]
    if kind == "seq":
        return [t for ch in node[1] for t in to_tokens(ch)]
    if kind == "tok":
        return [node[1]]
    if kind == "dot":
        return ["."]
    if kind == "sup":
        return to_tokens(node[1]) + ["^", "{"] + to_tokens(node[2]) + ["}"]
    if kind == "frac":
        return ["\\frac", "{"] + to_tokens(node[1]) + ["}", "{"] + to_tokens(node[2]) + ["}"]
    raise ValueError(kind)


def render_tokens(tree, rng: np.random.Generator, scale: int = 2) -> np.ndarray:
    box = _Renderer(rng).render(tree, scale)
    top, bottom, left, right = (int(v) for v in rng.integers(1, 2 * scale + 1, size=4))
    h, w = box.img.shape
    canvas = np.zeros((h + top + bottom, w + left + right), dtype=DTYPE)
    canvas[top:top + h, left:left + w] = box.img
    return canvas


def synth_corpus(n: int, seed: int = 0, tier: int = 1, max_terms: int = 2,
                 scale: int = 2) -> list[Sample]:
    """Render ``n`` random expressions; identical seeds give identical corpora."""
    if n < 1:
        raise ValueError("corpus size must be ≥ 1")
    if tier not in TIERS:
        raise ValueError(f"tier must be one of {TIERS}, got {tier}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        tree = _expr(rng, tier, depth=2 if tier >= 2 else 0, max_terms=max_terms)
        ink = render_tokens(tree, rng, scale)
        img, extent = preprocess(ink, max_side=None, return_extent=True)
        out.append(Sample(img, to_tokens(tree), extent, f"synth_{i:05d}.pgm"))
    return out


# ---------------------------------------------------------------- recognizer for the grammar

class GrammarError(ValueError):
    pass


def parse(tokens: list[str]):
    """Parse a token list back into the generating grammar's tree shape."""
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def expect(tok):
        nonlocal pos
        if peek() != tok:
            raise GrammarError(f"expected {tok!r} at {pos}, found {peek()!r}")
        pos += 1

    def digit():
        nonlocal pos
        if peek() not in DIGITS:
            raise GrammarError(f"expected a digit at {pos}, found {peek()!r}")
        pos += 1
        return ("tok", tokens[pos - 1])

    def term():
        nonlocal pos
        if peek() == "\\frac":
            pos += 1
            expect("{")
            num = expr()
            expect("}")
            expect("{")
            den = expr()
            expect("}")
            return [("frac", num, den)]
        items = [digit()]
        while peek() in DIGITS:
            items.append(digit())
        if peek() == "^" and len(items) == 1:
            pos += 1
            expect("{")
            exp = [digit()]
            while peek() in DIGITS:
                exp.append(digit())
            expect("}")
            return [("sup", items[0], ("seq", exp))]
        if peek() == ".":
            pos += 1
            items.append(("dot",))
            items.append(digit())
            while peek() in DIGITS:
                items.append(digit())
        return items

    def expr():
        nonlocal pos
        items = term()
        while peek() in ("+", "-", "="):
            items.append(("tok", tokens[pos]))
            pos += 1
            items.extend(term())
        return ("seq", items)

    tree = expr()
    if pos != len(tokens):
        raise GrammarError(f"trailing tokens from position {pos}: {tokens[pos:]}")
    return tree
