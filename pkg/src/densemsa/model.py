"""Encoder-decoder model: parameter registry, presets, and loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .data import Batch, Vocabulary
from .decoder import DecoderConfig, MSADecoder
from .encoder import AnnotationGrid, DenseEncoder, EncoderConfig
from .tensor import DTYPE, Parameter, Tensor, gather_last, log, mul, stack, tsum

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    dropout: float = 0.2

    @classmethod
    def full(cls, branch_depth: Optional[int] = 16) -> "ModelConfig":
        return cls(EncoderConfig(branch_depth=branch_depth), DecoderConfig())

    @classmethod
    def tiny(cls, branch_depth: Optional[int] = 2, **overrides) -> "ModelConfig":
        """Width-reduced variant for gradient checks and overfit runs."""
        enc = EncoderConfig(initial_channels=16, growth_rate=4, block_depth=4, branch_depth=branch_depth)
        dec = DecoderConfig(embed_dim=16, hidden_dim=16, attn_dim=32, coverage_channels=8)
        cfg = cls(enc, dec, dropout=0.2)
        return cfg.with_overrides(**overrides) if overrides else cfg

    def to_dict(self) -> dict:
        return {**{f"encoder.{k}": v for k, v in asdict(self.encoder).items()},
                **{f"decoder.{k}": v for k, v in asdict(self.decoder).items()},
                "dropout": self.dropout}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = {k.split(".", 1)[1]: v for k, v in d.items() if k.startswith("encoder.")}
        dec = {k.split(".", 1)[1]: v for k, v in d.items() if k.startswith("decoder.")}
        return cls(EncoderConfig(**enc), DecoderConfig(**dec), dropout=d.get("dropout", 0.2))

    def with_overrides(self, **kw) -> "ModelConfig":
        enc_names = {f.name for f in fields(EncoderConfig)}
        dec_names = {f.name for f in fields(DecoderConfig)}
        enc = {k: v for k, v in kw.items() if k in enc_names}
        dec = {k: v for k, v in kw.items() if k in dec_names}
        unknown = set(kw) - enc_names - dec_names - {"dropout"}
        if unknown:
            raise ValueError(f"unknown model settings: {sorted(unknown)}")
        return ModelConfig(EncoderConfig(**{**asdict(self.encoder), **enc}),
                           DecoderConfig(**{**asdict(self.decoder), **dec}),
                           kw.get("dropout", self.dropout))


class Model:
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0):
        self.cfg = cfg
        self.vocab = vocab
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.encoder = DenseEncoder(cfg.encoder, self.params, self.buffers, rng)
        self.decoder = MSADecoder(cfg.decoder, len(vocab), self.encoder.channels_a,
                                  self.encoder.channels_b, self.params, rng)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def encode(self, images, masks, training: bool = False, rng=None, trace=None) -> AnnotationGrid:
        images = images if isinstance(images, Tensor) else Tensor(images)
        return self.encoder(images, masks, training, rng, self.cfg.dropout if training else 0.0, trace)

    def forward_probs(self, batch: Batch, training: bool = False, rng=None) -> list[Tensor]:
        grids = self.encode(batch.images, batch.masks, training, rng)
        return self.decoder.decode_teacher_forced(grids, batch.labels, self.vocab.bos_id)

    def loss(self, batch: Batch, training: bool = False, rng=None) -> Tensor:
        rows = self.forward_probs(batch, training, rng)
        return ce_loss(rows, batch.labels, batch.lengths)

    # -- state snapshots (plain arrays, used by checkpoints and model selection)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data.copy() for k, p in self.params.items()}
        out.update({f"buffer/{k}": b.copy() for k, b in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            a = arrays[f"param/{k}"]
            if a.shape != p.shape:
                raise ValueError(f"parameter {k}: stored shape {a.shape} != model shape {p.shape}")
            p.data[...] = a
        for k, b in self.buffers.items():
            b[...] = arrays[f"buffer/{k}"]


def ce_loss(rows, targets, lengths=None) -> Tensor:
    """Cross-entropy ``-sum_t log p(w_t)``, averaged over the batch.

    ``rows`` is a list of ``T`` probability tensors ``[N, K]`` (or ``[K]``),
    or one stacked tensor; positions at or beyond ``lengths`` are ignored.
    """
    probs = stack(rows, axis=0) if isinstance(rows, (list, tuple)) else rows
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim == 2:
        probs = probs.reshape(probs.shape[0], 1, probs.shape[1])
        targets = targets.reshape(1, -1)
    n, t = targets.shape
    if probs.shape[0] != t or probs.shape[1] != n:
        raise ValueError(f"ce_loss: {probs.shape[0]} probability rows for {t} target positions")
    picked = gather_last(probs, targets.T)                     # T, N
    nll = mul(log(picked, PROB_FLOOR), -1.0)
    if lengths is not None:
        keep = (np.arange(t)[:, None] < np.asarray(lengths)[None, :]).astype(DTYPE)
        nll = mul(nll, keep)
    return mul(tsum(nll), 1.0 / n)
