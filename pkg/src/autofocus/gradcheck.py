"""Finite-difference checks for every differentiable op and layer."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, grad_check
from .layers import (AttentionParams, AutofocusConfig, ConvSpec, RunningStats, aspp_forward,
                     attention_net, autofocus_forward, batchnorm, conv3d, residual_add)
from .loss_metrics import soft_dice_loss

Case = Callable[[np.random.Generator], tuple[Callable, dict]]
CASES: dict[str, Case] = {}


def case(name: str):
    def register(fn):
        CASES[name] = fn
        return fn
    return register


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


@case("add")
def _(rng):
    return (lambda a, b: ad.add(a, b)), {"a": rng.standard_normal((2, 3, 2, 2, 2)),
                                         "b": rng.standard_normal((2, 1, 2, 2, 2))}


@case("sub")
def _(rng):
    return (lambda a, b: ad.sub(a, b)), {"a": rng.standard_normal((1, 3, 2, 2, 2)),
                                         "b": rng.standard_normal((1, 3, 1, 1, 1))}


@case("mul_broadcast")
def _(rng):
    return (lambda lam, f: ad.mul(f, lam)), {"lam": rng.standard_normal((2, 1, 3, 3, 3)),
                                             "f": rng.standard_normal((2, 3, 3, 3, 3))}


@case("relu")
def _(rng):
    return (lambda x: ad.relu(x)), {"x": _away_from_zero(rng, (2, 3, 3, 3))}


@case("softmax")
def _(rng):
    return (lambda x: ad.softmax(x, axis=1)), {"x": 2 * rng.standard_normal((2, 4, 3, 3, 3))}


@case("sum_mean")
def _(rng):
    return (lambda x: ad.add(ad.sum_all(ad.mul(x, x)), ad.mean_all(x))), {"x": rng.standard_normal((3, 4))}


@case("pad_crop")
def _(rng):
    def fn(x):
        padded = ad.pad_crop(x, [(1, 2), (0, 1), (2, 0)], "pad")
        return ad.pad_crop(padded, [(2, 1), (1, 0), (0, 1)], "crop")
    return fn, {"x": rng.standard_normal((2, 4, 4, 4))}


@case("take_concat")
def _(rng):
    def fn(x, y):
        return ad.concat([ad.take_channel(x, 1), y, ad.take_channel(x, 0)], axis=1)
    return fn, {"x": rng.standard_normal((1, 3, 2, 2, 2)), "y": rng.standard_normal((1, 2, 2, 2, 2))}


def _conv_case(rate, padding="same", stride=1):
    def build(rng):
        spec = ConvSpec(2, 3, 3, rate, stride, padding)
        n = 4 if padding == "same" else 2 * rate + 3
        return (lambda x, w, b: conv3d(x, spec, w, b)), {
            "x": rng.standard_normal((1, 2, n, n + 1, n)),
            "w": rng.standard_normal(spec.kernel_shape) * 0.5,
            "b": rng.standard_normal(3)}
    return build


for _r in (1, 2, 6):
    CASES[f"conv3d_r{_r}"] = _conv_case(_r)
CASES["conv3d_r2_valid"] = _conv_case(2, "valid")
CASES["conv3d_r1_stride2"] = _conv_case(1, "same", (2, 1, 2))


def _attention_inputs(rng, cin, K):
    cfg = AutofocusConfig(cin, 3, tuple(range(1, 2 * K, 2)))
    mid = cfg.attention_mid_channels
    return cfg, {
        "w1": rng.standard_normal((mid, cin, 3, 3, 3)) * 0.4,
        "b1": rng.standard_normal(mid) * 0.1,
        "w2": rng.standard_normal((K, mid, 1, 1, 1)),
        "b2": rng.standard_normal(K) * 0.1,
    }


@case("attention_net")
def _(rng):
    cfg, inputs = _attention_inputs(rng, 4, 4)
    inputs["x"] = rng.standard_normal((1, 4, 3, 4, 3))

    def fn(x, w1, b1, w2, b2):
        return attention_net(x, cfg, AttentionParams(w1, b1, w2, b2))
    return fn, inputs


def _autofocus_case(K):
    def build(rng):
        cfg, inputs = _attention_inputs(rng, 4, K)
        inputs["x"] = rng.standard_normal((1, 4, 4, 3, 4))
        inputs["w"] = rng.standard_normal((3, 4, 3, 3, 3)) * 0.3
        inputs["b"] = rng.standard_normal(3) * 0.1

        def fn(x, w, b, w1, b1, w2, b2):
            out, _ = autofocus_forward(x, cfg, w, AttentionParams(w1, b1, w2, b2), b)
            return out
        return fn, inputs
    return build


for _k in (1, 2, 4):
    CASES[f"autofocus_K{_k}"] = _autofocus_case(_k)


def _aspp_case(fusion):
    def build(rng):
        rates = (1, 2, 3)
        inputs = {"x": rng.standard_normal((1, 2, 4, 4, 3))}
        for k in range(3):
            inputs[f"w{k}"] = rng.standard_normal((3, 2, 3, 3, 3)) * 0.3
            inputs[f"b{k}"] = rng.standard_normal(3) * 0.1
        if fusion == "concat":
            inputs["pw"] = rng.standard_normal((3, 9, 1, 1, 1))
            inputs["pb"] = rng.standard_normal(3)

        def fn(x, w0, w1, w2, b0, b1, b2, pw=None, pb=None):
            return aspp_forward(x, rates, [w0, w1, w2], [b0, b1, b2], fusion, pw, pb)
        return fn, inputs
    return build


CASES["aspp_sum"] = _aspp_case("sum")
CASES["aspp_concat"] = _aspp_case("concat")


def _bn_case(mode):
    def build(rng):
        stats = RunningStats(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3), updates=1)

        def fn(x, gamma, beta):
            # a throwaway copy keeps the running statistics fixed across evaluations
            local = RunningStats(stats.mean.copy(), stats.var.copy(), updates=stats.updates)
            return batchnorm(x, gamma, beta, local, mode)
        return fn, {"x": rng.standard_normal((2, 3, 3, 2, 3)) * 2 + 1,
                    "gamma": rng.standard_normal(3), "beta": rng.standard_normal(3)}
    return build


CASES["batchnorm_train"] = _bn_case("train")
CASES["batchnorm_eval"] = _bn_case("eval")


@case("residual_add")
def _(rng):
    return (lambda a, b: residual_add(a, b)), {"a": rng.standard_normal((1, 4, 3, 3, 3)),
                                               "b": rng.standard_normal((1, 2, 5, 5, 5))}


@case("soft_dice")
def _(rng):
    target = rng.integers(0, 3, size=(2, 3, 4, 3))

    def fn(logits):
        return soft_dice_loss(ad.softmax(logits, axis=1), target)
    return fn, {"logits": rng.standard_normal((2, 3, 3, 4, 3))}


def run_case(name: str, seed: int, tolerance: float = 1e-4,
             max_elements: int | None = 48) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    fn, inputs = CASES[name](rng)
    return grad_check(fn, inputs, tolerance=tolerance, seed=seed, name=f"{name}[seed={seed}]",
                      max_elements=max_elements)


def run_all(seeds=range(3), tolerance: float = 1e-4, max_elements: int | None = 48,
            names=None) -> Iterator[GradCheckReport]:
    for name in names or CASES:
        for seed in seeds:
            yield run_case(name, seed, tolerance, max_elements)
