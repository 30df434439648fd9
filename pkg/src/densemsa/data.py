"""Vocabulary, image preprocessing, on-disk datasets and masked batching."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .tensor import DTYPE

PAD, BOS, EOS = "<pad>", "<s>", "</s>"
RESERVED = (PAD, BOS, EOS)
ALIGN = 16
DEFAULT_MAX_SIDE = 256


class DataError(ValueError):
    pass


class Vocabulary:
    """Token list with ids 0..2 reserved for padding, begin and end sentinels."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens:
            raise DataError("vocabulary has no symbols")
        seen = {}
        for i, tok in enumerate(tokens):
            if tok in RESERVED:
                raise DataError(f"token {tok!r} collides with a reserved sentinel")
            if tok in seen:
                raise DataError(f"duplicate token {tok!r} on line {i + 1} (first on line {seen[tok] + 1})")
            seen[tok] = i
        self.tokens = list(RESERVED) + tokens
        self.index = {t: i for i, t in enumerate(self.tokens)}

    pad_id, bos_id, eos_id = 0, 1, 2

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def symbols(self) -> list[str]:
        return self.tokens[len(RESERVED):]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        out = []
        for t in tokens:
            if t not in self.index or t in RESERVED:
                raise DataError(f"token {t!r} is not in the vocabulary")
            out.append(self.index[t])
        return out

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            out.append(self.tokens[i])
        return out

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.symbols), encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    tokens = [ln.strip() for ln in lines if ln.strip()]
    if not tokens:
        raise DataError(f"vocabulary file {path} is empty")
    return Vocabulary(tokens)


@dataclass
class Sample:
    """``image`` is ink-positive in [0, 1] and padded to multiples of 16;
    ``extent`` is the (height, width) of real content in its top-left corner."""

    image: np.ndarray
    label: list[str]
    extent: tuple[int, int]
    name: str = ""


def _pad_to(size: int) -> int:
    return max(ALIGN, int(math.ceil(size / ALIGN)) * ALIGN)


def preprocess(raster, max_side: Optional[int] = DEFAULT_MAX_SIDE, return_extent: bool = False):
    """Normalize a single-channel raster for the encoder.

    Light backgrounds are inverted so ink is near 1; the result is scaled to
    [0, 1], shrunk so the longest side is at most ``max_side``, and zero-padded
    at the bottom/right to multiples of 16.
    """
    a = np.asarray(raster)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    if a.ndim != 2:
        raise DataError(f"expected a single-channel image, got shape {a.shape}")
    if a.size == 0:
        raise DataError("empty image")
    a = a.astype(DTYPE)
    if np.issubdtype(np.asarray(raster).dtype, np.integer) or a.max() > 1.0:
        a = a / 255.0
    a = np.clip(a, 0.0, 1.0)
    # background estimated from the border; light background means dark ink
    border = np.concatenate([a[0], a[-1], a[:, 0], a[:, -1]])
    if np.median(border) > 0.5:
        a = 1.0 - a
    h, w = a.shape
    if max_side and max(h, w) > max_side:
        scale = max_side / max(h, w)
        nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
        img = Image.fromarray((a * 255).round().astype(np.uint8))
        a = np.asarray(img.resize((nw, nh), Image.BILINEAR), dtype=DTYPE) / 255.0
        h, w = nh, nw
    out = np.zeros((_pad_to(h), _pad_to(w)), dtype=DTYPE)
    out[:h, :w] = a
    return (out, (h, w)) if return_extent else out


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def write_pgm(path, ink: np.ndarray):
    """Write an ink-positive [0,1] array as an 8-bit dark-on-light PGM."""
    pix = ((1.0 - np.clip(ink, 0, 1)) * 255).round().astype(np.uint8)
    Image.fromarray(pix, mode="L").save(path, format="PPM")


def read_manifest(path) -> list[tuple[str, list[str]]]:
    """Parse ``<filename><TAB><token token ...>`` lines."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"{path}:{lineno}: expected '<filename>\\t<tokens>'")
        name, label = line.split("\t", 1)
        entries.append((name, label.split()))
    return entries


def write_manifest(path, entries: Iterable[tuple[str, Sequence[str]]]):
    with open(path, "w", encoding="utf-8") as fh:
        for name, tokens in entries:
            fh.write(f"{name}\t{' '.join(tokens)}\n")


def load_dataset(manifest, max_side: Optional[int] = DEFAULT_MAX_SIDE) -> list[Sample]:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    samples = []
    for name, tokens in read_manifest(manifest):
        img, extent = preprocess(read_image(manifest.parent / name), max_side, return_extent=True)
        samples.append(Sample(img, tokens, extent, name))
    return samples


@dataclass
class Batch:
    images: np.ndarray   # N, 1, H, W
    masks: np.ndarray    # N, H, W
    labels: np.ndarray   # N, T  (ids, end sentinel then padding)
    lengths: np.ndarray  # N     (tokens incl. end sentinel)
    indices: list

    def __len__(self):
        return self.images.shape[0]


def collate(samples: Sequence[Sample], vocab: Vocabulary, indices=None) -> Batch:
    h = max(s.image.shape[0] for s in samples)
    w = max(s.image.shape[1] for s in samples)
    n = len(samples)
    images = np.zeros((n, 1, h, w), dtype=DTYPE)
    masks = np.zeros((n, h, w), dtype=DTYPE)
    seqs = [vocab.encode(s.label) + [vocab.eos_id] for s in samples]
    t = max(len(q) for q in seqs)
    labels = np.full((n, t), vocab.pad_id, dtype=np.int64)
    for i, (s, q) in enumerate(zip(samples, seqs)):
        eh, ew = s.extent
        images[i, 0, :eh, :ew] = s.image[:eh, :ew]
        masks[i, :eh, :ew] = 1.0
        labels[i, :len(q)] = q
    lengths = np.array([len(q) for q in seqs], dtype=np.int64)
    return Batch(images, masks, labels, lengths, list(indices) if indices is not None else list(range(n)))


def make_batches(samples: Sequence[Sample], batch_size: int, seed, vocab: Vocabulary) -> list[Batch]:
    """Seeded shuffle, grouped by image area, every sample exactly once."""
    if not samples:
        raise DataError("no samples to batch")
    if batch_size < 1:
        raise DataError(f"batch size must be ≥ 1, got {batch_size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    areas = np.array([samples[i].image.size for i in order])
    order = order[np.argsort(areas, kind="stable")]
    groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    groups = [groups[i] for i in rng.permutation(len(groups))]
    return [collate([samples[i] for i in g], vocab, g.tolist()) for g in groups]
