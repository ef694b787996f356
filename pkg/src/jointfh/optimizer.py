"""Plain SGD with per-sub-network learning rates and the joint training loop.

One training step follows the joint optimization order: softmax gradient and
update, feature gradient, FRNET backprop, injection of the image-loss gradient
at the splice, SRNET backprop, network update, then the class-center update.
All gradients of a step are taken at the same forward pass.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._schema import from_mapping
from .data import Dataset, hflip
from .losses import LossWeights, center_update, combined_loss
from .networks import JointNetwork
from .tensor import make_rng

log = logging.getLogger(__name__)

MODES = ("joint", "frnet-hr", "frnet-lr", "srnet-only", "frnet-hallucinated")
METRICS_HEADER = ["step", "loss_total", "loss_h", "loss_c", "loss_d", "lr_sr", "lr_fr"]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "joint"
    batch_size: int = 32
    lr_srnet: float = 1e-5
    lr_frnet: float = 1e-3
    gamma: float = 0.5
    decay_steps: tuple[int, ...] = (300, 350)
    total_steps: int = 400
    alpha: float = 0.01
    beta1: float = 1.0
    beta2: float = 0.008
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")
        # A zero rate freezes that sub-network, which the term-isolation checks rely on.
        if min(self.lr_srnet, self.lr_frnet, self.gamma) < 0:
            raise ValueError("learning rates and gamma must be >= 0")
        d = self.decay_steps
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("decay_steps must be strictly increasing")
        if d and self.total_steps and d[-1] >= self.total_steps:
            raise ValueError("decay_steps must lie below total_steps")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=128, lr_srnet=1e-5, lr_frnet=0.1, decay_steps=(16000, 24000),
                    total_steps=28000, alpha=0.01, beta1=1.0, beta2=0.008)
        return cls(**{**base, **overrides})

    @classmethod
    def from_dict(cls, data) -> "TrainConfig":
        return from_mapping(cls, data, "train")

    @property
    def weights(self) -> LossWeights:
        if self.mode == "srnet-only":
            return LossWeights(self.alpha, 0.0, 0.0)
        if self.mode != "joint":
            return LossWeights(0.0, self.beta1, self.beta2)
        return LossWeights(self.alpha, self.beta1, self.beta2)

    @property
    def routes(self) -> tuple[bool, bool]:
        """(SRNET in the graph, FRNET in the graph) for this mode."""
        return {"joint": (True, True), "srnet-only": (True, False)}.get(self.mode, (False, True))


@dataclass
class TrainState:
    step: int = 0
    lr_sr: float = 0.0
    lr_fr: float = 0.0
    running: dict = field(default_factory=lambda: {"loss_h": 0.0, "loss_c": 0.0, "loss_d": 0.0})
    rng: np.random.Generator | None = None


def lr_at(cfg: TrainConfig, step: int) -> tuple[float, float]:
    """Learning rates after dividing by 10 at every decay step already reached."""
    if step < 0:
        raise ValueError("step must be >= 0")
    passed = sum(step >= d for d in cfg.decay_steps)
    return cfg.lr_srnet / 10**passed, cfg.lr_frnet / 10**passed


Hook = Callable[[str, JointNetwork], None]


def train_step(net: JointNetwork, x: np.ndarray, hr: np.ndarray | None, labels: np.ndarray,
               cfg: TrainConfig, state: TrainState, hook: Hook | None = None) -> dict[str, float]:
    """One mini-batch of joint optimization; returns the scalar losses."""
    if len(x) == 0:
        raise ValueError("empty batch")
    emit = hook or (lambda event, net: None)
    lr_sr, lr_fr = lr_at(cfg, state.step)
    use_srnet, use_frnet = cfg.routes
    weights = cfg.weights

    hallucinated, features = net.forward(x, use_srnet=use_srnet, use_frnet=use_frnet)
    res = combined_loss(hallucinated, hr if use_srnet else None, features, labels,
                        net.softmax, net.centers, weights)
    for name in ("loss_h", "loss_c", "loss_d"):
        if not np.isfinite(getattr(res, name)):
            raise TrainingDiverged(f"step {state.step}: {name} is not finite")

    if use_frnet:
        net.softmax.W -= lr_fr * res.grad_W
        net.softmax.b -= lr_fr * res.grad_b
        emit("softmax_update", net)
    grads = net.backward(res.grad_x, res.grad_pred_hr)
    params = net.parameters()
    for name, g in grads.items():
        lr = lr_sr if name.startswith("srnet.") else lr_fr
        params[name] -= lr * g
    emit("param_update", net)
    if use_frnet:
        net.centers.gamma = cfg.gamma
        net.centers = center_update(net.centers, features, labels)
        emit("center_update", net)

    state.step += 1
    net.step += 1
    state.lr_sr, state.lr_fr = lr_sr, lr_fr
    out = {"loss_total": res.loss, "loss_h": res.loss_h, "loss_c": res.loss_c, "loss_d": res.loss_d}
    for k in state.running:
        state.running[k] = 0.9 * state.running[k] + 0.1 * out[k]
    return out


def training_inputs(net: JointNetwork, ds: Dataset, mode: str) -> np.ndarray:
    if mode == "frnet-hr":
        return ds.hr
    if mode == "frnet-hallucinated":
        return net.hallucinate(ds.lr)
    return ds.lr


def train(net: JointNetwork, ds: Dataset, cfg: TrainConfig, hook: Hook | None = None,
          progress: Callable[[int, dict], None] | None = None) -> tuple[JointNetwork, list[list]]:
    """Run ``cfg.total_steps`` SGD steps; returns the net and metrics rows.

    Mini-batches come from a fresh seeded permutation each epoch (the last
    partial batch is dropped) and each sample is mirrored with ``flip_prob``.
    For ``frnet-hallucinated`` the network's SRNET must already be trained; it
    is applied once to the whole set and kept frozen.
    """
    if ds.num_classes > net.cfg.num_classes:
        raise ValueError("dataset has more classes than the network")
    rng = make_rng(cfg.seed, 10)
    state = TrainState(step=0, rng=rng)
    x_all = training_inputs(net, ds, cfg.mode)
    n = len(ds)
    bs = min(cfg.batch_size, n)
    rows: list[list] = []
    order = np.empty(0, dtype=np.int64)
    pos = 0
    while state.step < cfg.total_steps:
        if pos + bs > len(order):
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + bs]
        pos += bs
        flip = rng.random(bs) < cfg.flip_prob
        xb, hb = x_all[idx], ds.hr[idx]
        xb = np.where(flip[:, None, None, None], hflip(xb), xb)
        hb = np.where(flip[:, None, None, None], hflip(hb), hb)
        step = state.step
        losses = train_step(net, xb, hb, ds.labels[idx], cfg, state, hook)
        rows.append([step, losses["loss_total"], losses["loss_h"], losses["loss_c"], losses["loss_d"],
                     state.lr_sr, state.lr_fr])
        if progress is not None:
            progress(step, losses)
    return net, rows


def metrics_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])
    return buf.getvalue()
