"""Central finite-difference checks of taped gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .tensor import Parameter, Tape, Tensor, affine, backward, concat, embed, exp, gather_last, log, matmul, mul, tsum

PERTURBATION = 1e-3
RTOL = 1e-3
ATOL = 1e-6
# The encoder is piecewise linear (ReLU, max pooling); a 1e-3 step on a whole
# model routinely crosses kinks, so the end-to-end check uses a finer step.
MODEL_PERTURBATION = 1e-5
MODEL_ATOL = 1e-8


@dataclass
class CheckResult:
    name: str
    checked: int
    max_rel_err: float
    failures: int

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} checked={self.checked:<4d} max_rel_err={self.max_rel_err:.2e}"


def check_gradients(name: str, loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                    n_samples: int, rng: np.random.Generator, h: float = PERTURBATION,
                    rtol: float = RTOL, atol: float = ATOL) -> CheckResult:
    """Compare taped gradients with central differences on sampled scalar entries.

    ``loss_fn`` must be deterministic (reseed any dropout inside it).
    """
    params = list(params)
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape, params)
    analytic = {id(p): p.grad.copy() for p in params}
    picks = []
    order = list(range(len(params)))
    while len(picks) < n_samples:
        rng.shuffle(order)
        for i in order:
            if len(picks) == n_samples:
                break
            p = params[i]
            picks.append((p, tuple(int(rng.integers(0, s)) for s in p.shape)))
    worst, failures = 0.0, 0
    for p, idx in picks:
        orig = p.data[idx]
        p.data[idx] = orig + h
        up = float(loss_fn().data)
        p.data[idx] = orig - h
        down = float(loss_fn().data)
        p.data[idx] = orig
        num = (up - down) / (2 * h)
        ana = float(analytic[id(p)][idx])
        err = abs(ana - num)
        scale = max(abs(ana), abs(num))
        rel = err / scale if scale > 0 else 0.0
        if err > rtol * scale + atol:
            failures += 1
            worst = max(worst, rel)
        elif scale > atol:
            worst = max(worst, rel)
    return CheckResult(name, len(picks), worst, failures)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return tsum(mul(out, weights))


def primitive_checks(seed: int = 0, per_primitive: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng(seed)

    def P(*shape, scale=1.0, name="x"):
        return Parameter(rng.normal(0, scale, shape), name)

    results = []

    def run(name, build, params):
        probe = build()
        weights = rng.normal(size=probe.shape)
        results.append(check_gradients(name, lambda: _weighted_sum(build(), weights), params,
                                       per_primitive, rng))

    x, k = P(2, 3, 7, 6), P(4, 3, 3, 3, name="k")
    run("conv2d 3x3 pad1", lambda: nn.conv2d(x, k, 1, 1), [x, k])
    x2, k2 = P(1, 2, 9, 8), P(3, 2, 7, 7, name="k")
    run("conv2d 7x7 stride2 pad3", lambda: nn.conv2d(x2, k2, 2, 3), [x2, k2])
    x3, k3 = P(2, 5, 4, 4), P(3, 5, 1, 1, name="k")
    run("conv2d 1x1", lambda: nn.conv2d(x3, k3), [x3, k3])
    xp = P(2, 3, 6, 8)
    run("max_pool2d", lambda: nn.max_pool2d(xp, 2), [xp])
    run("avg_pool2d", lambda: nn.avg_pool2d(xp, 2), [xp])
    xb, g, b = P(3, 4, 3, 5), Parameter(rng.uniform(0.5, 1.5, 4), "g"), P(4, name="b")
    rm, rv = np.zeros(4), np.ones(4)
    run("batch_norm train", lambda: nn.batch_norm(xb, g, b, rm.copy(), rv.copy(), True), [xb, g, b])
    rm2, rv2 = rng.normal(size=4), rng.uniform(0.5, 2.0, 4)
    run("batch_norm infer", lambda: nn.batch_norm(xb, g, b, rm2, rv2, False), [xb, g, b])
    xa = P(4, 6)
    for kind in ("relu", "sigmoid", "tanh", "softmax", "maxout2"):
        run(kind, lambda kind=kind: nn.activation(xa, kind), [xa])
    mask = np.array([[1, 1, 0, 1, 0, 1]] * 4)
    run("masked_softmax", lambda: nn.masked_softmax(xa, mask), [xa])
    w, bias = P(5, 6, name="w"), P(5, name="b")
    run("affine", lambda: affine(xa, w, bias), [xa, w, bias])
    ma, mb = P(3, 2, 4), P(3, 4, 5, name="y")
    run("matmul batched", lambda: matmul(ma, mb), [ma, mb])
    run("dropout", lambda: nn.dropout(xa, 0.5, True, np.random.default_rng(7)), [xa])
    table = P(7, 4, name="E")
    run("embed", lambda: embed(table, [3, 0, 3, 6]), [table])
    run("concat", lambda: concat([xa, ma.reshape(4, 6)], axis=1), [xa, ma])
    run("exp", lambda: exp(xa), [xa])
    pos = Parameter(rng.uniform(0.5, 2.0, (4, 6)), "p")
    run("log", lambda: log(pos, 1e-12), [pos])
    run("gather_last", lambda: gather_last(xa, [0, 5, 2, 2]), [xa])
    return results


def model_check(seed: int = 0, n_samples: int = 200) -> CheckResult:
    """One end-to-end training-mode loss of the width-reduced model."""
    from .data import collate
    from .model import Model, ModelConfig
    from .synth import builtin_vocab, synth_corpus

    vocab = builtin_vocab()
    model = Model(ModelConfig.tiny(), vocab, seed=seed)
    batch = collate(synth_corpus(2, seed=seed, tier=1), vocab)

    def loss_fn():
        return model.loss(batch, training=True, rng=np.random.default_rng(seed + 1))

    return check_gradients("end-to-end tiny model", loss_fn, model.parameters(), n_samples,
                           np.random.default_rng(seed + 2), h=MODEL_PERTURBATION, atol=MODEL_ATOL)


def run_all(seed: int = 0, per_primitive: int = 20, model_samples: int = 200) -> list[CheckResult]:
    return primitive_checks(seed, per_primitive) + [model_check(seed, model_samples)]
