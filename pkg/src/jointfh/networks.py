"""SRNET / FRNET builders, the cascaded joint network and checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._schema import canonical_json, from_mapping, to_mapping
from .layers import (Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2d, ReLU,
                     Residual, Sequential, ShapeError, StaleCacheError)
from .losses import CenterBank, SoftmaxParams
from .tensor import TensorFormatError, make_rng, read_tensor, rng_normal, write_tensor

SCALE = 4
CKPT_MAGIC = b"JCKP"
CKPT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    height: int = 32
    width: int = 28
    image_channels: int = 3
    channels: tuple[int, ...] = (8, 16, 32, 64)
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    stage_pad: int = 1
    feature_dim: int = 64
    num_classes: int = 10
    srnet_kernels: tuple[int, ...] = (9, 1, 1)
    srnet_channels: tuple[int, ...] = (64, 32)
    srnet_init: str = "identity"
    softmax_std: float = 0.01

    def __post_init__(self):
        if self.height % SCALE or self.width % SCALE:
            raise ValueError(f"input {self.height}x{self.width} is not divisible by {SCALE}")
        if len(self.channels) != len(self.blocks) or not self.channels:
            raise ValueError("channels and blocks need one entry per stage")
        counts = (*self.channels, *self.blocks, *self.srnet_channels, self.feature_dim, self.num_classes)
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        if len(self.srnet_kernels) != len(self.srnet_channels) + 1:
            raise ValueError("srnet_kernels needs one more entry than srnet_channels")
        if any(k % 2 == 0 for k in self.srnet_kernels):
            raise ValueError("srnet kernels must be odd to preserve spatial size")
        if self.srnet_init not in ("identity", "he"):
            raise ValueError("srnet_init must be 'identity' or 'he'")
        if self.srnet_init == "identity" and min(self.srnet_channels) < 2 * self.image_channels:
            raise ValueError(f"identity init needs >= {2 * self.image_channels} SRNET channels in every "
                             "hidden layer (or srnet_init='he')")

    @classmethod
    def paper(cls, num_classes: int = 10, height: int = 124, width: int = 108) -> "NetConfig":
        return cls(height=height, width=width, channels=(64, 128, 256, 512), blocks=(1, 2, 5, 3),
                   stage_pad=0, feature_dim=512, num_classes=num_classes, srnet_init="he")

    @classmethod
    def from_dict(cls, data) -> "NetConfig":
        return from_mapping(cls, data, "net")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_channels, self.height, self.width)


def build_srnet(cfg: NetConfig, rng=None) -> Sequential:
    """Conv stack with "same" padding and ReLU after all but the last conv."""
    chans = (cfg.image_channels, *cfg.srnet_channels, cfg.image_channels)
    layers: list[Layer] = []
    convs = []
    for i, k in enumerate(cfg.srnet_kernels):
        conv = Conv2d(chans[i], chans[i + 1], k, pad=k // 2, rng=rng)
        convs.append(conv)
        layers.append(conv)
        if i < len(cfg.srnet_kernels) - 1:
            layers.append(ReLU())
    if cfg.srnet_init == "identity":
        _identity_init(convs, cfg.image_channels)
    convs[0].input_grad = False
    return Sequential(layers)


def _identity_init(convs: list[Conv2d], c: int) -> None:
    # Route +x and -x through the ReLU stack on 2c reserved channels and
    # recombine them at the output; other weights feeding the output are zeroed.
    if min(conv.out_ch for conv in convs[:-1]) < 2 * c:
        raise ValueError(f"identity init needs >= {2 * c} channels in every hidden layer")
    first, *mid, last = convs
    k = first.kernel // 2
    w = first.params["weight"]
    w[: 2 * c] = 0.0
    for ch in range(c):
        w[ch, ch, k, k] = 1.0
        w[c + ch, ch, k, k] = -1.0
    first.params["bias"][: 2 * c] = 0.0
    for conv in mid:
        w = conv.params["weight"]
        w[: 2 * c] = 0.0
        m = conv.kernel // 2
        for ch in range(2 * c):
            w[ch, ch, m, m] = 1.0
        conv.params["bias"][: 2 * c] = 0.0
    w = last.params["weight"]
    w[:] = 0.0
    m = last.kernel // 2
    for ch in range(c):
        w[ch, ch, m, m] = 1.0
        w[ch, c + ch, m, m] = -1.0
    last.params["bias"][:] = 0.0


def build_frnet(cfg: NetConfig, rng=None) -> Sequential:
    """Conv/pool/residual stages, global average pooling, then the feature layer."""
    layers: list[Layer] = []
    shape = (1, *cfg.image_shape)
    prev = cfg.image_channels
    for stage, (ch, nb) in enumerate(zip(cfg.channels, cfg.blocks), start=1):
        stage_layers: list[Layer] = [Conv2d(prev, ch, 3, pad=cfg.stage_pad, rng=rng), ReLU(), MaxPool2d(2, 2)]
        stage_layers += [Residual(ch, rng=rng) for _ in range(nb)]
        try:
            for layer in stage_layers:
                shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ShapeError(f"FRNET stage {stage} ({ch} channels): {exc}") from exc
        layers += stage_layers
        prev = ch
    layers += [GlobalAvgPool(), Linear(prev, cfg.feature_dim, rng=rng)]
    return Sequential(layers)


class JointNetwork:
    """SRNET followed by FRNET, plus softmax parameters and class centers."""

    def __init__(self, cfg: NetConfig, srnet: Sequential, frnet: Sequential,
                 softmax: SoftmaxParams, centers: CenterBank, step: int = 0):
        self.cfg = cfg
        self.srnet = srnet
        self.frnet = frnet
        self.softmax = softmax
        self.centers = centers
        self.step = step
        self._route: tuple[bool, bool] | None = None

    @classmethod
    def build(cls, cfg: NetConfig, seed: int = 0) -> "JointNetwork":
        srnet = build_srnet(cfg, make_rng(seed, 1))
        frnet = build_frnet(cfg, make_rng(seed, 2))
        rng = make_rng(seed, 3)
        softmax = SoftmaxParams(rng_normal(rng, (cfg.num_classes, cfg.feature_dim), 0.0, cfg.softmax_std),
                                np.zeros(cfg.num_classes))
        centers = CenterBank(np.zeros((cfg.num_classes, cfg.feature_dim)))
        return cls(cfg, srnet, frnet, softmax, centers)

    # -- forward / backward --------------------------------------------------

    def forward(self, x: np.ndarray, use_srnet: bool = True, use_frnet: bool = True):
        """Return ``(hallucinated, features)``; skipped branches give ``None``."""
        if x.ndim != 4 or x.shape[1:] != self.cfg.image_shape:
            raise ShapeError(f"expected input [N, {', '.join(map(str, self.cfg.image_shape))}], got {list(x.shape)}")
        hallucinated = self.srnet.forward(x) if use_srnet else None
        if hallucinated is not None and hallucinated.shape != x.shape:
            raise ShapeError(f"SRNET output {list(hallucinated.shape)} does not match input {list(x.shape)}")
        features = None
        if use_frnet:
            features = self.frnet.forward(hallucinated if use_srnet else x)
        self._route = (use_srnet, use_frnet)
        return hallucinated, features

    def backward(self, grad_features: np.ndarray | None, grad_injection: np.ndarray | None) -> dict[str, np.ndarray]:
        """Backprop features through FRNET, add the image-loss gradient at the
        splice, continue through SRNET. Returns gradients keyed like
        ``parameters()`` (softmax gradients come from the loss, not from here)."""
        if self._route is None:
            raise StaleCacheError("JointNetwork.backward without a fresh forward")
        use_srnet, use_frnet = self._route
        self._route = None
        grads: dict[str, np.ndarray] = {}
        g_img = None
        if use_frnet:
            if grad_features is None:
                raise ValueError("recognition branch was run; grad_features is required")
            g_img = self.frnet.backward(grad_features)
            grads.update((f"frnet.{k}", v) for k, v in self.frnet.named_grads())
        if use_srnet:
            if grad_injection is not None:
                g_img = grad_injection if g_img is None else g_img + grad_injection
            if g_img is None:
                raise ValueError("no gradient reaches SRNET")
            self.srnet.backward(g_img)
            grads.update((f"srnet.{k}", v) for k, v in self.srnet.named_grads())
        return grads

    def hallucinate(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        return np.concatenate([self.srnet.forward(x[i:i + batch]) for i in range(0, len(x), batch)])

    def features(self, x: np.ndarray, use_srnet: bool, batch: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch):
            xb = x[i:i + batch]
            if use_srnet:
                xb = self.srnet.forward(xb)
            out.append(self.frnet.forward(xb))
        return np.concatenate(out)

    # -- parameters ------------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"srnet.{k}": v for k, v in self.srnet.named_parameters()}
        params.update((f"frnet.{k}", v) for k, v in self.frnet.named_parameters())
        params["softmax.W"] = self.softmax.W
        params["softmax.b"] = self.softmax.b
        return params

    def state_tensors(self) -> dict[str, np.ndarray]:
        state = self.parameters()
        state["centers.M"] = self.centers.M
        return state

    def copy(self) -> "JointNetwork":
        other = JointNetwork.build(self.cfg)
        for name, arr in other.state_tensors().items():
            arr[...] = self.state_tensors()[name]
        other.centers.gamma = self.centers.gamma
        other.step = self.step
        return other


# -- checkpoints ---------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(net: JointNetwork, path, meta: dict | None = None) -> None:
    """Write ``JCKP`` header, a canonical JSON manifest, then JTNS tensor records."""
    tensors = net.state_tensors()
    manifest = {
        "config": to_mapping(net.cfg),
        "gamma": net.centers.gamma,
        "meta": meta or {},
        "step": net.step,
        "tensors": list(tensors),
    }
    raw = canonical_json(manifest).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(raw)))
        fh.write(raw)
        for arr in tensors.values():
            write_tensor(fh, arr)
    tmp.replace(path)


def read_checkpoint_meta(path) -> dict:
    with open(path, "rb") as fh:
        return _read_manifest(fh, path)


def _read_manifest(fh, path) -> dict:
    head = fh.read(16)
    if len(head) != 16 or head[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, size = struct.unpack("<IQ", head[4:])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    raw = fh.read(size)
    if len(raw) != size:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc


def load_checkpoint(path) -> JointNetwork:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    with open(path, "rb") as fh:
        manifest = _read_manifest(fh, path)
        net = JointNetwork.build(NetConfig.from_dict(manifest["config"]))
        state = net.state_tensors()
        if list(state) != manifest["tensors"]:
            raise CheckpointError(f"{path}: tensor list does not match the configured architecture")
        loaded = {}
        try:
            for name in manifest["tensors"]:
                arr = read_tensor(fh)
                if arr.shape != state[name].shape:
                    raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {state[name].shape}")
                loaded[name] = arr
        except TensorFormatError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    for name, arr in loaded.items():
        state[name][...] = arr
    net.centers.gamma = manifest["gamma"]
    net.step = manifest["step"]
    return net
