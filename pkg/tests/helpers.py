"""Shared builders and independent oracles for the test-suite."""
import itertools

import numpy as np

from densemsa.data import Vocabulary, collate
from densemsa.model import PROB_FLOOR, Model, ModelConfig

TOY_VOCAB = Vocabulary(["a", "b", "c"])


def toy_model(seed: int, vocab: Vocabulary = TOY_VOCAB, sharpen: float = 4.0) -> Model:
    """Width-reduced model with random weights; the output layer is scaled so
    step distributions are far from uniform."""
    m = Model(ModelConfig.tiny(), vocab, seed=seed)
    rng = np.random.default_rng(1000 + seed)
    m.params["dec.out.W_o"].data *= sharpen
    m.params["dec.out.b_o"].data[:] = rng.normal(0, 1.0, len(vocab))
    return m


def toy_image(seed: int, h: int = 16, w: int = 32):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(1, 1, h, w)), np.ones((1, h, w))


def sequence_logprob(model: Model, images, mask, tokens) -> float:
    """Summed log probability of ``tokens`` followed by the end sentinel."""
    v = model.vocab
    grids = model.encode(images, mask)
    rows = model.decoder.decode_teacher_forced(grids, np.array(list(tokens) + [v.eos_id]), v.bos_id)
    target = list(tokens) + [v.eos_id]
    return float(sum(np.log(max(r.data[0, t], PROB_FLOOR)) for r, t in zip(rows, target)))


def exhaustive_best(model: Model, images, mask, max_len: int):
    """Enumerate every finished sequence of at most ``max_len`` decoding steps."""
    v = model.vocab
    symbols = [v.index[s] for s in v.symbols]
    best, best_score = None, -np.inf
    for n in range(max_len):
        for seq in itertools.product(symbols, repeat=n):
            s = sequence_logprob(model, images, mask, seq)
            if s > best_score:
                best, best_score = list(seq), s
    return best, best_score


def batch_of(samples, vocab):
    return collate(samples, vocab)
