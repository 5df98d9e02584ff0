"""Finite-difference audit of every differentiable primitive and of the
training loss, as run by ``veinmatch gradcheck``."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .model import BlockSpec, ModelSpec, build_model, forward
from .training import TrainConfig, multitask_loss

TOLERANCE = 1e-4


def _weighted(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    # contract with fixed random weights so every output element matters
    return ad.tsum(out * w)


def _cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    def r(*shape, lo=-1.0, hi=1.0):
        return rng.uniform(lo, hi, size=shape)

    n, m = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    a, b = r(n, m), r(n, m)
    w_nm = r(n, m)
    w_n2 = r(n, 2)
    c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    side = int(rng.integers(4, 7))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    ho = ad.conv_output_size(side, 3, stride, pad)
    labels = rng.integers(0, m, size=n)
    drop_seed = int(rng.integers(0, 2**31))
    pool_w = r(2, side // 2, side // 2)
    w_dense = r(n, 3)
    w_conv = r(c_out, ho, ho)
    return {
        "add": (lambda x, y: _weighted(x + y, w_nm), [a, b]),
        "sub": (lambda x, y: _weighted(x - y, w_nm), [a, b]),
        "mul": (lambda x, y: _weighted(x * y, w_nm), [a, b]),
        "div": (lambda x, y: _weighted(x / y, w_nm), [a, r(n, m, lo=0.5, hi=2.0)]),
        "matmul": (lambda x, y: _weighted(ad.matmul(x, y), w_n2), [a, r(m, 2)]),
        "transpose": (lambda x: _weighted(ad.transpose(x), w_nm.T), [a]),
        "reshape": (lambda x: _weighted(ad.reshape(x, (m, n)), w_nm.reshape(m, n)), [a]),
        "sum": (lambda x: _weighted(ad.tsum(x, axis=1), w_nm[:, 0]), [a]),
        "mean": (lambda x: _weighted(ad.tmean(x, axis=0), w_nm[0]), [a]),
        "amax": (lambda x: _weighted(ad.amax(x, axis=1), w_nm[:, 0]), [a]),
        "sqrt": (lambda x: _weighted(ad.sqrt(x), w_nm), [r(n, m, lo=0.5, hi=2.0)]),
        "log": (lambda x: _weighted(ad.log(x, 1e-12), w_nm), [r(n, m, lo=0.5, hi=2.0)]),
        "concat": (lambda x, y: _weighted(ad.concat([x, y], axis=0), np.concatenate([w_nm, w_nm])), [a, b]),
        "l2norm": (lambda x: ad.l2norm(x), [a]),
        "relu": (lambda x: _weighted(ad.relu(x), w_nm), [a]),
        "sigmoid": (lambda x: _weighted(ad.sigmoid(x), w_nm), [r(n, m, lo=-4, hi=4)]),
        "softmax": (lambda x: _weighted(ad.softmax(x), w_nm), [r(n, m, lo=-3, hi=3)]),
        "pick": (lambda x: _weighted(ad.pick(ad.softmax(x), labels), w_nm[:, 0]), [a]),
        "dropout": (lambda x: _weighted(ad.dropout(x, 0.5, drop_seed, True), w_nm), [a]),
        "dense": (lambda x, wt, bs: _weighted(ad.dense(x, wt, bs), w_dense),
                  [a, r(3, m), r(3)]),
        "conv2d": (lambda x, k, bs: _weighted(ad.conv2d(x, k, bs, stride=stride, pad=pad), w_conv),
                   [r(c_in, side, side), r(c_out, c_in, 3, 3), r(c_out)]),
        "maxpool2d": (lambda x: _weighted(ad.maxpool2d(x, 2, 2), pool_w), [r(2, side, side)]),
    }


TINY_SPEC = ModelSpec(input_height=8, input_width=8,
                      blocks=(BlockSpec(1, 2, True), BlockSpec(1, 3, True)),
                      head_hidden=(5,), num_classes=2, reduction=2)


def loss_case(theta: float, seed: int) -> tuple[Callable, list[np.ndarray]]:
    """The combined loss of a tiny network on a random 4-sample batch, as a
    function of every parameter tensor."""
    rng = np.random.default_rng(seed)
    params = build_model(TINY_SPEC, seed)
    names = list(params.tensors)
    x = rng.uniform(0.05, 1.0, size=(4, 1, 8, 8))
    labels = np.array([0, 0, 1, 1])
    ids = ["a", "a", "b", "b"]
    cfg = TrainConfig(theta=theta, lam=0.001)
    step_seed = int(rng.integers(0, 2**31))

    def f(*tensors):
        leaves = dict(zip(names, tensors))
        out = forward(params, x, training=True, seed=step_seed, leaves=leaves)
        return multitask_loss(out.logits, labels, out.embedding, ids, params, cfg, leaves)

    return f, [params.tensors[k] for k in names]


def run(trials: int = 1, seed: int = 0, thetas=(0.0, 0.3, 1.0), eps: float = 1e-4,
        loss_coords: int | None = 24) -> dict[str, ad.GradCheckResult]:
    """Worst relative error per primitive and per loss weighting over ``trials``
    random draws. Loss checks probe ``loss_coords`` random parameter
    coordinates per draw (all of them when None)."""
    results: dict[str, ad.GradCheckResult] = {}

    def merge(key, res):
        old = results.get(key)
        if old is None:
            results[key] = res
        else:
            results[key] = ad.GradCheckResult(max(old.max_error, res.max_error),
                                              old.checked + res.checked, old.kinks + res.kinks)

    with ad.precision(np.float64):
        for t in range(trials):
            rng = np.random.default_rng([seed, t])
            for name, (f, point) in _cases(rng).items():
                merge(name, ad.gradient_report(f, point, eps))
            for theta in thetas:
                case_seed = int(rng.integers(0, 2**31))
                f, point = loss_case(theta, case_seed)
                merge(f"multitask_loss(theta={theta:g})",
                      ad.gradient_report(f, point, eps, max_coords=loss_coords, seed=case_seed))
    return results
