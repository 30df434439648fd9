"""Token-level WER, expression recognition rate and error-count buckets.

Expressions are compared as normalized token lists rather than through a
MathML conversion, so two structurally different spellings of the same
formula count as different.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

NORMALIZER_VERSION = 1
BUCKETS = (1, 2, 3)

_TOKEN = re.compile(r"\\[A-Za-z]+|\\.|\S")

Tokens = Union[str, Sequence[str]]


def tokenize(text: str) -> list[str]:
    """Split LaTeX into commands and single characters, dropping whitespace."""
    return _TOKEN.findall(text)


def normalize(expr: Tokens) -> list[str]:
    """Canonical token list: whitespace-free tokens, braces around bare scripts."""
    toks = tokenize(expr) if isinstance(expr, str) else [t for s in expr for t in tokenize(s)]
    out = []
    i = 0
    while i < len(toks):
        t = toks[i]
        out.append(t)
        if t in ("^", "_") and i + 1 < len(toks) and toks[i + 1] != "{":
            out.extend(["{", toks[i + 1], "}"])
            i += 1
        i += 1
    return out


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer(pairs: Iterable[tuple[Sequence, Sequence]]) -> float:
    """Total edit distance over total reference length for (target, prediction) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("wer needs at least one pair")
    total = sum(len(t) for t, _ in pairs)
    if total == 0:
        raise ValueError("wer undefined: all references are empty")
    return sum(edit_distance(t, p) for t, p in pairs) / total


@dataclass
class ExpressionRecord:
    target: list
    prediction: list
    distance: int


@dataclass
class EvalReport:
    n: int
    exprate: float
    le1: float
    le2: float
    le3: float
    wer: float
    records: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"n": self.n, "exprate": self.exprate, "le1": self.le1, "le2": self.le2,
                "le3": self.le3, "wer": self.wer, "normalizer": NORMALIZER_VERSION}

    def write(self, out_dir) -> tuple[Path, Path]:
        """Write ``report.tsv`` (summary + per-expression lines) and ``report.kv``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        s = self.summary()
        tsv = out_dir / "report.tsv"
        with open(tsv, "w", encoding="utf-8") as fh:
            fh.write("\t".join(s) + "\n")
            fh.write("\t".join(_fmt(v) for v in s.values()) + "\n")
            fh.write("\nindex\tdistance\ttarget\tprediction\n")
            for i, r in enumerate(self.records):
                fh.write(f"{i}\t{r.distance}\t{' '.join(r.target)}\t{' '.join(r.prediction)}\n")
        kv = out_dir / "report.kv"
        kv.write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in s.items()), encoding="utf-8")
        return tsv, kv


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def exprate_report(pairs: Iterable[tuple[Tokens, Tokens]]) -> EvalReport:
    pairs = [(normalize(t), normalize(p)) for t, p in pairs]
    if not pairs:
        raise ValueError("exprate_report needs at least one pair")
    records = [ExpressionRecord(t, p, edit_distance(t, p)) for t, p in pairs]
    n = len(records)

    def rate(k):
        return sum(r.distance <= k for r in records) / n

    total = sum(len(r.target) for r in records)
    w = sum(r.distance for r in records) / total if total else float("nan")
    return EvalReport(n, rate(0), rate(1), rate(2), rate(3), w, records)
