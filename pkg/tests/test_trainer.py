import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densemsa.data import collate
from densemsa.inference import greedy_decode
from densemsa.model import Model, ModelConfig, ce_loss
from densemsa.synth import builtin_vocab, synth_corpus
from densemsa.tensor import Parameter, Tensor
from densemsa.trainer import (Adadelta, AdadeltaSlot, TrainConfig, TrainingDiverged, adadelta_step,
                              clip_gradients, global_norm, train)

VOCAB = builtin_vocab()


def P(values, name="p", grad=None):
    p = Parameter(np.asarray(values, dtype=float), name)
    if grad is not None:
        p.grad = np.asarray(grad, dtype=float)
    return p


# loss

def test_ce_loss_examples():
    rows = [Tensor(np.array([[0.0, 1.0, 0.0]]))]
    assert ce_loss(rows, [[1]]).data == 0.0
    e = math.exp(-1)
    rows = [Tensor(np.array([[e, 1 - e]]))]
    assert ce_loss(rows, [[0]]).data == pytest.approx(1.0, abs=1e-12)


def test_ce_loss_averages_sequences_and_skips_padding():
    p = np.array([[[0.5, 0.5], [0.25, 0.75]], [[0.1, 0.9], [0.3, 0.7]]])   # T=2, N=2
    rows = [Tensor(p[0]), Tensor(p[1])]
    got = ce_loss(rows, [[0, 1], [1, 0]], lengths=[2, 1]).data
    want = (-np.log(0.5) - np.log(0.9) + -np.log(0.75)) / 2
    assert got == pytest.approx(want, rel=1e-12)


def test_ce_loss_length_mismatch():
    with pytest.raises(ValueError):
        ce_loss([Tensor(np.array([[0.5, 0.5]]))], [[0, 1]])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=6), st.integers(0, 1))
def test_ce_loss_nonnegative(ws, tgt):
    w = np.array(ws)
    probs = w / w.sum()
    assert ce_loss([Tensor(probs[None, :])], [[tgt]]).data >= 0.0


# clipping

def test_clip_below_threshold_untouched():
    p = P([0.1, 0.2], grad=[0.3, -0.4])
    before = p.grad.copy()
    clip_gradients([p], 1.0)
    np.testing.assert_array_equal(p.grad, before)


def test_clip_three_four():
    p = P([0.0, 0.0], grad=[3.0, 4.0])
    assert clip_gradients([p], 1.0) == 5.0
    np.testing.assert_allclose(p.grad, [0.6, 0.8])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=10), st.floats(1e-3, 100))
def test_clip_bounds_global_norm(values, threshold):
    half = len(values) // 2
    a, b = P(np.zeros(half), "a", values[:half]), P(np.zeros(len(values) - half), "b", values[half:])
    clip_gradients([a, b], threshold)
    assert global_norm([a, b]) <= threshold + 1e-6


# adadelta

def slots_for(*ps):
    return {p.name: AdadeltaSlot(np.zeros_like(p.data), np.zeros_like(p.data)) for p in ps}


def test_adadelta_zero_gradient_no_change():
    p = P([1.5, -2.0], grad=[0.0, 0.0])
    adadelta_step([p], slots_for(p), weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adadelta_first_step_value():
    p = P([0.0], grad=[1.0])
    adadelta_step([p], slots_for(p), rho=0.95, eps=1e-6)
    want = -math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6)
    assert p.data[0] == pytest.approx(want, rel=1e-12)
    assert p.data[0] == pytest.approx(-0.00447, abs=5e-6)


def test_weight_decay_applied_once():
    a = P([2.0, -1.0], "a", grad=[0.0, 0.0])
    b = P([2.0, -1.0], "b", grad=[2e-2, -1e-2])
    adadelta_step([a], slots_for(a), weight_decay=1e-2)
    adadelta_step([b], slots_for(b), weight_decay=0.0)
    np.testing.assert_array_equal(a.data, b.data)


def test_adadelta_accumulators_nonnegative():
    rng = np.random.default_rng(0)
    p = P(rng.normal(size=5))
    opt = Adadelta([p], weight_decay=1e-3)
    for _ in range(30):
        p.grad = rng.normal(scale=10, size=5)
        opt.step()
    slot = opt.slots["p"]
    assert (slot.sq_grad >= 0).all() and (slot.sq_delta >= 0).all()
    assert set(opt.state_arrays()) == {"slot/p/sq_grad", "slot/p/sq_delta"}


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(clip=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay=-1)


# training runs

@pytest.mark.slow
def test_seeded_runs_identical_at_step_100():
    data = synth_corpus(4, seed=11, tier=0)
    cfg = TrainConfig(batch_size=4, max_epochs=100, valid_every=100, seed=5)
    runs = []
    for _ in range(2):
        m = Model(ModelConfig.tiny(), VOCAB, seed=2)
        runs.append(train(m, data, data, cfg))
    assert len(runs[0].losses) == 100
    assert runs[0].losses == runs[1].losses
    assert runs[0].history == runs[1].history


def test_best_snapshot_not_worse_than_last():
    data = synth_corpus(6, seed=2, tier=1)
    m = Model(ModelConfig.tiny(), VOCAB, seed=0)
    r = train(m, data, data, TrainConfig(batch_size=3, max_epochs=12, valid_every=2))
    assert r.best.valid_wer <= r.last.valid_wer
    assert r.best.valid_wer == min(h[2] for h in r.history)
    assert any(k.startswith("slot/") for k in r.best.arrays)


@pytest.mark.slow
def test_single_sample_overfit():
    sample = synth_corpus(1, seed=3, tier=1)
    m = Model(ModelConfig.tiny(dropout=0.0), VOCAB, seed=0)
    r = train(m, sample, sample, TrainConfig(batch_size=1, max_epochs=300, weight_decay=0.0,
                                             valid_every=50))
    assert min(r.losses) < 0.01
    first, last = np.mean(r.losses[:25]), np.mean(r.losses[-25:])
    assert last < first
    pred = greedy_decode(m, collate(sample, VOCAB))[0]
    assert VOCAB.decode(pred) == sample[0].label


def test_divergence_reported():
    data = synth_corpus(2, seed=0, tier=0)
    m = Model(ModelConfig.tiny(), VOCAB, seed=0)
    m.params["dec.out.b_o"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 1, batch 0"):
        train(m, data, data, TrainConfig(batch_size=2, max_epochs=1))


def test_empty_sets_rejected():
    m = Model(ModelConfig.tiny(), VOCAB, seed=0)
    with pytest.raises(ValueError):
        train(m, [], synth_corpus(1), TrainConfig())
