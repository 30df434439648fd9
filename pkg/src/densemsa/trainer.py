"""Cross-entropy training with Adadelta, global-norm clipping and WER-based selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Sample, collate, make_batches
from .inference import greedy_decode
from .metrics import wer
from .model import Model
from .tensor import Parameter, Tape, backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 100
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    clip: float = 100.0
    weight_decay: float = 1e-4
    seed: int = 0
    valid_every: int = 1          # epochs between validation points
    valid_max_len: int = 64
    stop_at_wer: Optional[float] = None   # end early once validation WER ≤ this

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be ≥ 0")
        if self.clip <= 0:
            raise ValueError("clip threshold must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.valid_every < 1:
            raise ValueError("batch_size, max_epochs and valid_every must be ≥ 1")


class TrainingDiverged(RuntimeError):
    pass


def global_norm(params: Sequence[Parameter]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def clip_gradients(params: Sequence[Parameter], threshold: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``threshold``.

    Returns the norm before clipping.
    """
    norm = global_norm(params)
    if norm > threshold:
        scale = threshold / norm
        for p in params:
            p.grad = p.grad * scale
    return norm


@dataclass
class AdadeltaSlot:
    sq_grad: np.ndarray    # running E[g^2]
    sq_delta: np.ndarray   # running E[dx^2]


def adadelta_step(params: Sequence[Parameter], slots: dict, rho: float = 0.95,
                  eps: float = 1e-6, weight_decay: float = 0.0):
    """One in-place Adadelta update; weight decay is folded into the gradient."""
    for p in params:
        slot = slots[p.name]
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        slot.sq_grad *= rho
        slot.sq_grad += (1 - rho) * g * g
        delta = -np.sqrt(slot.sq_delta + eps) / np.sqrt(slot.sq_grad + eps) * g
        slot.sq_delta *= rho
        slot.sq_delta += (1 - rho) * delta * delta
        p.data += delta


class Adadelta:
    def __init__(self, params: Sequence[Parameter], rho: float = 0.95, eps: float = 1e-6,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.rho = rho
        self.eps = eps
        self.weight_decay = weight_decay
        self.slots = {p.name: AdadeltaSlot(np.zeros_like(p.data), np.zeros_like(p.data))
                      for p in self.params}

    def step(self):
        adadelta_step(self.params, self.slots, self.rho, self.eps, self.weight_decay)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, slot in self.slots.items():
            out[f"slot/{k}/sq_grad"] = slot.sq_grad.copy()
            out[f"slot/{k}/sq_delta"] = slot.sq_delta.copy()
        return out

    def load_state_arrays(self, arrays: dict):
        for k, slot in self.slots.items():
            if f"slot/{k}/sq_grad" in arrays:
                slot.sq_grad[...] = arrays[f"slot/{k}/sq_grad"]
                slot.sq_delta[...] = arrays[f"slot/{k}/sq_delta"]


@dataclass
class Snapshot:
    arrays: dict
    step: int
    epoch: int
    valid_wer: float


@dataclass
class TrainResult:
    best: Snapshot
    last: Snapshot
    history: list = field(default_factory=list)    # (step, train_loss, valid_wer)
    losses: list = field(default_factory=list)     # per-step training loss


def evaluate_wer(model: Model, samples: Sequence[Sample], batch_size: int = 16,
                 max_len: int = 64) -> float:
    pairs = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        preds = greedy_decode(model, collate(chunk, model.vocab), max_len)
        pairs.extend((s.label, model.vocab.decode(p)) for s, p in zip(chunk, preds))
    return wer(pairs)


def train(model: Model, train_set: Sequence[Sample], valid_set: Sequence[Sample],
          cfg: TrainConfig, on_validate: Optional[Callable] = None,
          optimizer: Optional[Adadelta] = None) -> TrainResult:
    """Train ``model`` in place and return the lowest-validation-WER snapshot."""
    if not train_set or not valid_set:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = optimizer or Adadelta(params, cfg.adadelta_rho, cfg.adadelta_eps, cfg.weight_decay)
    best: Optional[Snapshot] = None
    result = TrainResult(best=None, last=None)
    step = 0
    window: list[float] = []
    for epoch in range(1, cfg.max_epochs + 1):
        for bi, batch in enumerate(make_batches(train_set, cfg.batch_size, rng, model.vocab)):
            with Tape() as tape:
                loss = model.loss(batch, training=True, rng=rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, batch {bi} (samples {batch.indices})")
            backward(loss, tape, params)
            clip_gradients(params, cfg.clip)
            opt.step()
            step += 1
            window.append(value)
            result.losses.append(value)
        if epoch % cfg.valid_every == 0 or epoch == cfg.max_epochs:
            w = evaluate_wer(model, valid_set, max_len=cfg.valid_max_len)
            train_loss = float(np.mean(window)) if window else float("nan")
            window = []
            result.history.append((step, train_loss, w))
            log.info("step %d epoch %d loss %.4f valid WER %.4f", step, epoch, train_loss, w)
            if on_validate is not None:
                on_validate(step, train_loss, w)
            if best is None or w < best.valid_wer:
                best = Snapshot({**model.state_arrays(), **opt.state_arrays()}, step, epoch, w)
            if cfg.stop_at_wer is not None and w <= cfg.stop_at_wer:
                break
    result.best = best
    result.last = Snapshot({**model.state_arrays(), **opt.state_arrays()}, step, epoch,
                           result.history[-1][2])
    return result
