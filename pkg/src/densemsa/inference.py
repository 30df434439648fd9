"""Greedy and beam-search decoding with probability-averaging ensembles."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Batch, Sample, Vocabulary, collate
from .model import PROB_FLOOR, Model

DEFAULT_MAX_LEN = 200


class IncompatibleEnsemble(ValueError):
    pass


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool


def check_ensemble(models: Sequence[Model]) -> Vocabulary:
    if not models:
        raise IncompatibleEnsemble("an ensemble needs at least one model")
    vocab = models[0].vocab
    for i, m in enumerate(models[1:], 1):
        if m.vocab != vocab:
            raise IncompatibleEnsemble(f"ensemble member {i} has a different vocabulary than member 0")
    return vocab


def ensemble_probs(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of per-model probability rows."""
    if len(rows) == 0:
        raise ValueError("ensemble_probs needs at least one row")
    first = np.shape(rows[0])
    for r in rows[1:]:
        if np.shape(r) != first:
            raise ValueError(f"probability rows differ in shape: {first} vs {np.shape(r)}")
    if len(rows) == 1:
        return np.asarray(rows[0])
    return np.mean(np.stack(rows), axis=0)


def _blocked(vocab: Vocabulary) -> list[int]:
    return [vocab.pad_id, vocab.bos_id]


def greedy_decode(model: Model, batch: Batch, max_len: int = DEFAULT_MAX_LEN) -> list[list[int]]:
    """Batched argmax decoding; returns token ids without the end sentinel."""
    vocab = model.vocab
    mem = model.decoder.prepare(model.encode(batch.images, batch.masks))
    state = model.decoder.init_state(mem)
    n = len(batch)
    y = np.full(n, vocab.bos_id, dtype=np.int64)
    out = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        probs, state = model.decoder.step_probs(y, state, mem)
        p = probs.data.copy()
        p[:, _blocked(vocab)] = -1.0
        y = p.argmax(axis=-1)
        for i in np.flatnonzero(~done):
            if y[i] == vocab.eos_id:
                done[i] = True
            else:
                out[i].append(int(y[i]))
        if done.all():
            break
    return out


def beam_search(models: Sequence[Model], images: np.ndarray, mask: np.ndarray, beam: int = 10,
                max_len: int = DEFAULT_MAX_LEN, length_norm: bool = False) -> Hypothesis:
    """Left-to-right beam search over one image (``images`` is ``[1,1,H,W]``).

    Each step expands every live hypothesis with every member model, averages
    the members' symbol probabilities, and keeps the ``beam`` best live
    extensions by summed log probability.  Extensions ending in the end
    sentinel retire and stop occupying beam slots.
    """
    if beam < 1 or max_len < 1:
        raise ValueError(f"beam and max_len must be ≥ 1, got {beam} and {max_len}")
    vocab = check_ensemble(models)
    mems = [m.decoder.prepare(m.encode(images, mask)) for m in models]
    states = [m.decoder.init_state(mem) for m, mem in zip(models, mems)]
    blocked = _blocked(vocab)
    eos = vocab.eos_id
    live_tokens: list[list[int]] = [[]]
    live_scores = np.zeros(1)
    y = np.array([vocab.bos_id])
    finished: list[Hypothesis] = []
    expanded = {1: mems}

    for _ in range(max_len):
        k = len(live_tokens)
        if k not in expanded:
            expanded[k] = [mem.take(np.zeros(k, dtype=np.int64)) for mem in mems]
        rows, new_states = [], []
        for m, mem, st in zip(models, expanded[k], states):
            p, ns = m.decoder.step_probs(y, st, mem)
            rows.append(p.data)
            new_states.append(ns)
        logp = np.log(np.maximum(ensemble_probs(rows), PROB_FLOOR))
        logp[:, blocked] = -np.inf
        cand = live_scores[:, None] + logp
        flat = cand.ravel()
        order = np.argsort(-flat, kind="stable")
        width = cand.shape[1]
        parents, tokens, scores = [], [], []
        for idx in order:
            score = flat[idx]
            if not np.isfinite(score):
                break
            h, tok = divmod(int(idx), width)
            if tok == eos:
                finished.append(Hypothesis(list(live_tokens[h]), float(score), True))
                continue
            parents.append(h)
            tokens.append(tok)
            scores.append(score)
            if len(parents) == beam:
                break
        if not parents:
            break
        live_tokens = [live_tokens[h] + [t] for h, t in zip(parents, tokens)]
        live_scores = np.array(scores)
        idx = np.array(parents, dtype=np.int64)
        states = [ns.take(idx) for ns in new_states]
        y = np.array(tokens, dtype=np.int64)
        # scores only fall as tokens are appended
        if finished and not length_norm and max(h.score for h in finished) >= live_scores.max():
            break

    def key(h: Hypothesis):
        return h.score / (len(h.tokens) + 1) if length_norm else h.score

    if finished:
        return max(finished, key=key)
    best = int(np.argmax(live_scores))
    return Hypothesis(live_tokens[best], float(live_scores[best]), False)


def recognize(models: Sequence[Model], samples: Sequence[Sample], beam: int = 10,
              max_len: int = DEFAULT_MAX_LEN, workers: int = 1) -> list[Hypothesis]:
    """Decode each sample independently; output order follows ``samples``."""
    vocab = check_ensemble(models)

    def one(sample):
        b = collate([sample], vocab)
        return beam_search(models, b.images, b.masks, beam, max_len)

    if workers > 1 and len(samples) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, samples))
    return [one(s) for s in samples]


def attention_maps(model: Model, sample: Sample, token_ids: Sequence[int]):
    """Per-step attention maps for a decoded sequence.

    Returns one ``(alpha_a, alpha_b)`` pair per emitted token (``alpha_b`` is
    None for single-scale models).
    """
    b = collate([sample], model.vocab)
    grids = model.encode(b.images, b.masks)
    ids = list(token_ids)
    if not ids:
        return []
    _, states = model.decoder.decode_teacher_forced(grids, np.array(ids), model.vocab.bos_id,
                                                    collect_attention=True)
    return [(st.alpha_a.data[0], None if st.alpha_b is None else st.alpha_b.data[0]) for st in states]
