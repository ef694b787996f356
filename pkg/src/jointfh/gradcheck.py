"""Finite-difference suites over every layer type, every loss term and the
full joint network."""
from __future__ import annotations

from dataclasses import replace
from typing import Callable

import numpy as np

from .layers import (Conv2d, GlobalAvgPool, GradCheckResult, Linear, MaxPool2d, ReLU, Residual,
                     check_arrays, gradient_check)
from .losses import CenterBank, LossWeights, SoftmaxParams, center_loss, combined_loss, hallucination_loss, softmax_loss
from .networks import JointNetwork, NetConfig
from .tensor import make_rng

TOLERANCE = 1e-4
LAYER_KINDS = ("conv", "conv_nopad", "relu", "maxpool", "residual", "fc", "gap")
LOSS_KINDS = ("hallucination", "softmax", "center")

# Small enough for exhaustive-ish checks, but every layer type is present.
MICRO_NET = NetConfig(height=16, width=16, channels=(2, 3, 4, 4), blocks=(1, 1, 1, 1), feature_dim=6,
                      num_classes=3, srnet_kernels=(3, 1, 1), srnet_channels=(4, 3), srnet_init="he")


def quadratic_probe(shape, seed):
    """sum(c * y + 0.5 * y**2) with random c; its gradient is c + y."""
    c = make_rng(seed, 99).normal(size=shape)

    def loss(y):
        return float(np.sum(c * y + 0.5 * y * y)), c + y
    return loss


def make_layer(kind: str, rng):
    if kind == "conv":
        return Conv2d(2, 3, 3, pad=1, rng=rng), (2, 2, 5, 4)
    if kind == "conv_nopad":
        return Conv2d(3, 2, 3, pad=0, rng=rng), (2, 3, 6, 5)
    if kind == "relu":
        return ReLU(), (2, 3, 4, 4)
    if kind == "maxpool":
        return MaxPool2d(2, 2), (2, 2, 5, 6)
    if kind == "residual":
        return Residual(2, rng=rng), (2, 2, 4, 5)
    if kind == "fc":
        return Linear(6, 4, rng=rng), (3, 6)
    if kind == "gap":
        return GlobalAvgPool(), (2, 3, 3, 4)
    raise KeyError(f"unknown layer kind {kind!r}")


def check_layer(kind: str, seed: int, h: float = 1e-3) -> GradCheckResult:
    rng = make_rng(seed, 7)
    layer, shape = make_layer(kind, rng)
    x = rng.normal(size=shape)
    return gradient_check(layer, x, quadratic_probe(layer.output_shape(shape), seed), h=h)


def check_loss(kind: str, seed: int, h: float = 1e-3) -> GradCheckResult:
    rng = make_rng(seed, 8)
    if kind == "hallucination":
        pred, gt = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
        return check_arrays(lambda: hallucination_loss(pred, gt)[0], {"pred": pred},
                            {"pred": hallucination_loss(pred, gt)[1]}, h)
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, 5)
    if kind == "softmax":
        params = SoftmaxParams(rng.normal(scale=0.3, size=(3, 4)), rng.normal(scale=0.3, size=3))
        _, gx, gW, gb = softmax_loss(x, y, params)
        return check_arrays(lambda: softmax_loss(x, y, params)[0], {"x": x, "W": params.W, "b": params.b},
                            {"x": gx, "W": gW, "b": gb}, h)
    if kind == "center":
        bank = CenterBank(rng.normal(size=(3, 4)))
        # The center gradient is x - m, i.e. half the derivative of the squared distance.
        return check_arrays(lambda: 0.5 * center_loss(x, y, bank)[0], {"x": x}, {"x": center_loss(x, y, bank)[1]}, h)
    raise KeyError(f"unknown loss kind {kind!r}")


def check_joint(seed: int, h: float = 1e-3, cfg: NetConfig = MICRO_NET, weights: LossWeights | None = None,
                batch: int = 4, max_per_array: int | None = 8,
                corrupt: Callable[[dict], None] | None = None) -> GradCheckResult:
    """Gradient of the weighted joint loss through SRNET and FRNET.

    The numeric side differentiates alpha*L_h + beta1*L_c + (beta2/2)*L_d, which
    is the objective whose exact gradient the training step applies. ``corrupt``
    may mutate the analytic gradient dict before comparison (test hook).
    """
    weights = weights or LossWeights()
    net = JointNetwork.build(cfg, seed)
    rng = make_rng(seed, 9)
    for _, arr in net.parameters().items():
        if arr.ndim == 1:
            arr[...] = rng.normal(scale=0.01, size=arr.shape)
    net.centers.M[...] = rng.normal(size=net.centers.M.shape)
    x = rng.normal(scale=0.1, size=(batch, *cfg.image_shape))
    gt = rng.normal(scale=0.5, size=x.shape)
    labels = rng.integers(0, cfg.num_classes, batch)

    pred, feats = net.forward(x)
    res = combined_loss(pred, gt, feats, labels, net.softmax, net.centers, weights)
    analytic = {k: v.copy() for k, v in net.backward(res.grad_x, res.grad_pred_hr).items()}
    analytic["softmax.W"] = res.grad_W
    analytic["softmax.b"] = res.grad_b
    if corrupt is not None:
        corrupt(analytic)
    numeric_weights = replace(weights, beta2=weights.beta2 / 2)

    def evaluate():
        p, f = net.forward(x)
        return combined_loss(p, gt, f, labels, net.softmax, net.centers, numeric_weights).loss

    def pattern():
        return b"|".join([*net.srnet.patterns(), *net.frnet.patterns()])

    return check_arrays(evaluate, net.parameters(), analytic, h, pattern, max_per_array, make_rng(seed, 10))


def run_suite(seeds: int = 20, h: float = 1e-3, joint_seeds: int | None = None,
              corrupt: Callable[[dict], None] | None = None) -> list[tuple[str, GradCheckResult]]:
    """Every layer and loss kind over ``seeds`` seeds, then the joint network."""
    out = []
    for kind in LAYER_KINDS:
        out += [(f"layer:{kind}", check_layer(kind, s, h)) for s in range(seeds)]
    for kind in LOSS_KINDS:
        out += [(f"loss:{kind}", check_loss(kind, s, h)) for s in range(seeds)]
    n_joint = seeds if joint_seeds is None else joint_seeds
    out += [("joint", check_joint(s, h, corrupt=corrupt)) for s in range(n_joint)]
    return out


def summarize(results: list[tuple[str, GradCheckResult]]) -> dict[str, GradCheckResult]:
    """Worst result per check name."""
    worst: dict[str, GradCheckResult] = {}
    for name, res in results:
        if name not in worst or res.max_rel_error > worst[name].max_rel_error:
            worst[name] = res
    return worst
