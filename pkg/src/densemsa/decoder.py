"""GRU decoder with coverage attention over one or two annotation grids.

Each step runs::

    s_hat = GRU1(E[y_prev], s_prev)
    cA, alphaA = attend(head_a, A, s_hat)      # and likewise for B
    c = [cA; cB]
    s = GRU2(c, s_hat)
    logits = W_o · maxout2(E[y_prev] + W_s·s + W_c·c)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .encoder import AnnotationGrid
from .tensor import (
    DTYPE,
    Parameter,
    ShapeError,
    Tensor,
    add,
    affine,
    concat,
    embed,
    matmul,
    mul,
    reshape,
    sigmoid,
    sub,
    tanh,
    transpose,
)


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 256
    hidden_dim: int = 256
    attn_dim: int = 512
    coverage_channels: int = 256
    coverage_kernel_low: int = 11
    coverage_kernel_high: int = 7
    share_query: bool = True

    def __post_init__(self):
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even (maxout halves it)")
        for k in (self.coverage_kernel_low, self.coverage_kernel_high):
            if k % 2 == 0:
                raise ValueError(f"coverage kernel extents must be odd, got {k}")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _register(params: dict, *ps: Parameter):
    for p in ps:
        if p.name in params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        params[p.name] = p


class GruCell:
    def __init__(self, params: dict, name: str, in_dim: int, hidden: int, rng):
        def w(suffix, fan_in, shape):
            return Parameter(_uniform(rng, shape, fan_in), f"{name}.{suffix}")

        self.W_xz = w("W_xz", in_dim, (hidden, in_dim))
        self.W_xr = w("W_xr", in_dim, (hidden, in_dim))
        self.W_xh = w("W_xh", in_dim, (hidden, in_dim))
        self.U_hz = w("U_hz", hidden, (hidden, hidden))
        self.U_hr = w("U_hr", hidden, (hidden, hidden))
        self.U_rh = w("U_rh", hidden, (hidden, hidden))
        self.b_z = Parameter(np.zeros(hidden), f"{name}.b_z")
        self.b_r = Parameter(np.zeros(hidden), f"{name}.b_r")
        self.b_h = Parameter(np.zeros(hidden), f"{name}.b_h")
        _register(params, self.W_xz, self.W_xr, self.W_xh, self.U_hz, self.U_hr, self.U_rh,
                  self.b_z, self.b_r, self.b_h)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        z = sigmoid(add(affine(x, self.W_xz, self.b_z), affine(h, self.U_hz)))
        r = sigmoid(add(affine(x, self.W_xr, self.b_r), affine(h, self.U_hr)))
        cand = tanh(add(affine(x, self.W_xh, self.b_h), affine(mul(r, h), self.U_rh)))
        # (1 - z) * h + z * cand
        return add(h, mul(z, sub(cand, h)))


class AttentionHead:
    def __init__(self, params: dict, name: str, ann_dim: int, hidden: int, attn_dim: int,
                 q: int, kernel: int, U_s: Parameter, b_s: Parameter, rng):
        self.kernel_size = kernel
        self.U_s = U_s
        self.b_s = b_s
        self.U_a = Parameter(_uniform(rng, (attn_dim, ann_dim), ann_dim), f"{name}.U_a")
        self.b_a = Parameter(np.zeros(attn_dim), f"{name}.b_a")
        self.U_f = Parameter(_uniform(rng, (attn_dim, q), q), f"{name}.U_f")
        self.Q = Parameter(_uniform(rng, (q, 1, kernel, kernel), kernel * kernel), f"{name}.Q")
        self.nu = Parameter(_uniform(rng, (1, attn_dim), attn_dim), f"{name}.nu")
        _register(params, self.U_a, self.b_a, self.U_f, self.Q, self.nu)

    def prepare(self, grid: Tensor, mask: np.ndarray) -> "AttentionMemory":
        n, c, h, w = grid.shape
        ann = transpose(reshape(grid, (n, c, h * w)), (0, 2, 1))
        return AttentionMemory(ann, affine(ann, self.U_a, self.b_a),
                               np.asarray(mask, dtype=DTYPE).reshape(n, h * w), (h, w))

    def energies(self, mem: "AttentionMemory", s_hat: Tensor, hist: Tensor) -> Tensor:
        n = s_hat.shape[0]
        h, w = mem.hw
        cov = nn.conv2d(reshape(hist, (n, 1, h, w)), self.Q, 1, self.kernel_size // 2)
        cov = transpose(reshape(cov, (n, cov.shape[1], h * w)), (0, 2, 1))
        query = reshape(affine(s_hat, self.U_s, self.b_s), (n, 1, -1))
        pre = add(add(mem.proj, query), affine(cov, self.U_f))
        return reshape(affine(tanh(pre), self.nu), (n, h * w))

    def __call__(self, mem: "AttentionMemory", s_hat: Tensor, hist: Tensor):
        """Return ``(context [N,C], alpha [N,H,W])``."""
        alpha = nn.masked_softmax(self.energies(mem, s_hat, hist), mem.mask, axis=-1)
        n = alpha.shape[0]
        ctx = reshape(matmul(reshape(alpha, (n, 1, -1)), mem.ann), (n, -1))
        return ctx, reshape(alpha, (n,) + mem.hw)


@dataclass
class AttentionMemory:
    ann: Tensor          # N, L, C
    proj: Tensor         # N, L, attn_dim
    mask: np.ndarray     # N, L
    hw: tuple

    def take(self, index) -> "AttentionMemory":
        return AttentionMemory(Tensor(self.ann.data[index]), Tensor(self.proj.data[index]),
                               self.mask[index], self.hw)


@dataclass
class DecoderState:
    s: Tensor
    hist_a: Tensor
    hist_b: Optional[Tensor] = None
    alpha_a: Optional[Tensor] = None
    alpha_b: Optional[Tensor] = None
    context: Optional[Tensor] = None

    def take(self, index) -> "DecoderState":
        """Select batch rows (inference only; gradients are not tracked)."""
        def pick(t):
            return None if t is None else Tensor(t.data[index])
        return DecoderState(pick(self.s), pick(self.hist_a), pick(self.hist_b),
                            pick(self.alpha_a), pick(self.alpha_b), pick(self.context))


@dataclass
class Memory:
    a: AttentionMemory
    b: Optional[AttentionMemory] = None

    @property
    def batch(self) -> int:
        return self.a.mask.shape[0]

    def take(self, index) -> "Memory":
        return Memory(self.a.take(index), None if self.b is None else self.b.take(index))


class MSADecoder:
    def __init__(self, cfg: DecoderConfig, vocab_size: int, channels_a: int,
                 channels_b: Optional[int], params: dict, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab_size = vocab_size
        m, n, na, q = cfg.embed_dim, cfg.hidden_dim, cfg.attn_dim, cfg.coverage_channels
        self.E = Parameter(rng.normal(0.0, 0.1, (vocab_size, m)), "dec.E")
        _register(params, self.E)
        self.gru1 = GruCell(params, "dec.gru1", m, n, rng)
        U_s = Parameter(_uniform(rng, (na, n), n), "dec.att.U_s")
        b_s = Parameter(np.zeros(na), "dec.att.b_s")
        _register(params, U_s, b_s)
        self.head_a = AttentionHead(params, "dec.att_a", channels_a, n, na, q,
                                    cfg.coverage_kernel_low, U_s, b_s, rng)
        self.head_b = None
        ctx_dim = channels_a
        if channels_b is not None:
            if not cfg.share_query:
                U_s = Parameter(_uniform(rng, (na, n), n), "dec.att_b.U_s")
                b_s = Parameter(np.zeros(na), "dec.att_b.b_s")
                _register(params, U_s, b_s)
            self.head_b = AttentionHead(params, "dec.att_b", channels_b, n, na, q,
                                        cfg.coverage_kernel_high, U_s, b_s, rng)
            ctx_dim += channels_b
        self.context_dim = ctx_dim
        self.gru2 = GruCell(params, "dec.gru2", ctx_dim, n, rng)
        self.W_s = Parameter(_uniform(rng, (m, n), n), "dec.out.W_s")
        self.b_out = Parameter(np.zeros(m), "dec.out.b")
        self.W_c = Parameter(_uniform(rng, (m, ctx_dim), ctx_dim), "dec.out.W_c")
        self.W_o = Parameter(_uniform(rng, (vocab_size, m // 2), m // 2), "dec.out.W_o")
        self.b_o = Parameter(np.zeros(vocab_size), "dec.out.b_o")
        _register(params, self.W_s, self.b_out, self.W_c, self.W_o, self.b_o)

    def prepare(self, grids: AnnotationGrid) -> Memory:
        mem = Memory(self.head_a.prepare(grids.A, grids.mask_a))
        if self.head_b is not None:
            if grids.B is None:
                raise ShapeError("decoder has a high-resolution head but the grid has no B annotations")
            mem.b = self.head_b.prepare(grids.B, grids.mask_b)
        return mem

    def init_state(self, mem: Memory) -> DecoderState:
        n = mem.batch
        state = DecoderState(Tensor(np.zeros((n, self.cfg.hidden_dim))),
                             Tensor(np.zeros((n,) + mem.a.hw)))
        if mem.b is not None:
            state.hist_b = Tensor(np.zeros((n,) + mem.b.hw))
        return state

    def decode_step(self, y_prev, state: DecoderState, mem) -> tuple[Tensor, DecoderState]:
        """One decoding step; ``y_prev`` holds one token id per batch row."""
        if isinstance(mem, AnnotationGrid):
            mem = self.prepare(mem)
        y_prev = np.asarray(y_prev, dtype=np.int64).reshape(-1)
        if y_prev.min() < 0 or y_prev.max() >= self.vocab_size:
            raise ValueError(f"token id out of range [0, {self.vocab_size}): {y_prev.tolist()}")
        emb = embed(self.E, y_prev)
        s_hat = self.gru1(emb, state.s)
        ctx_a, alpha_a = self.head_a(mem.a, s_hat, state.hist_a)
        new = DecoderState(s=s_hat, hist_a=add(state.hist_a, alpha_a), alpha_a=alpha_a)
        if self.head_b is not None:
            ctx_b, alpha_b = self.head_b(mem.b, s_hat, state.hist_b)
            new.hist_b = add(state.hist_b, alpha_b)
            new.alpha_b = alpha_b
            ctx = concat([ctx_a, ctx_b], axis=-1)
        else:
            ctx = ctx_a
        s = self.gru2(ctx, s_hat)
        new.s = s
        new.context = ctx
        pre = add(add(emb, affine(s, self.W_s, self.b_out)), affine(ctx, self.W_c))
        logits = affine(nn.maxout2(pre, axis=-1), self.W_o, self.b_o)
        return logits, new

    def step_probs(self, y_prev, state: DecoderState, mem: Memory):
        logits, new = self.decode_step(y_prev, state, mem)
        return nn.softmax(logits, axis=-1), new

    def decode_teacher_forced(self, grids, targets: np.ndarray, bos: int,
                              collect_attention: bool = False):
        """Run the decoder on ground-truth prefixes.

        ``targets`` is ``[N, T]`` (or ``[T]``) of token ids ending with the end
        sentinel; returns a list of ``T`` probability tensors ``[N, K]`` and,
        optionally, the per-step states.
        """
        targets = np.asarray(targets, dtype=np.int64)
        if targets.ndim == 1:
            targets = targets[None, :]
        if targets.shape[1] == 0:
            raise ValueError("empty target sequence")
        mem = self.prepare(grids) if isinstance(grids, AnnotationGrid) else grids
        state = self.init_state(mem)
        y_prev = np.full(targets.shape[0], bos, dtype=np.int64)
        rows, states = [], []
        for t in range(targets.shape[1]):
            probs, state = self.step_probs(y_prev, state, mem)
            rows.append(probs)
            if collect_attention:
                states.append(state)
            y_prev = targets[:, t]
        return (rows, states) if collect_attention else rows
