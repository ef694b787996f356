"""Synthetic identities, bicubic resampling, normalization and dataset files."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from ._schema import from_mapping
from .tensor import make_rng, read_tensor, write_tensor

SCALE = 4
DS_MAGIC = b"JFDS"
DS_VERSION = 1
PAIR_HEADER = ["index_a", "index_b", "same"]
BASE_BACKGROUND = np.array([180.0, 140.0, 120.0])
BASE_BLOB = np.array([90.0, 70.0, 60.0])


# -- pixels ----------------------------------------------------------------------

def normalize(p):
    return (np.asarray(p, dtype=np.float64) - 127.5) / 128.0


def denormalize(x):
    return np.asarray(x, dtype=np.float64) * 128.0 + 127.5


def to_pixels(x: np.ndarray) -> np.ndarray:
    """Normalized image -> clipped [0, 255] floats."""
    return np.clip(denormalize(x), 0.0, 255.0)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[..., ::-1])


# -- bicubic ---------------------------------------------------------------------

def cubic_kernel(t, a: float = -0.5):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resize_weights(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """``[n_out, n_in]`` interpolation matrix with edge clamping.

    Sample positions follow the pixel-center convention. When shrinking with
    ``antialias`` the kernel is stretched by the inverse scale; rows are
    normalized to sum to one.
    """
    scale = n_out / n_in
    stretch = scale if (antialias and scale < 1) else 1.0
    support = 2.0 / stretch
    out = np.arange(n_out)
    centers = (out + 0.5) / scale - 0.5
    lo = np.floor(centers - support).astype(int) + 1
    taps = int(np.ceil(2 * support)) + 1
    idx = lo[:, None] + np.arange(taps)[None, :]
    w = stretch * cubic_kernel(stretch * (centers[:, None] - idx))
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(out, taps), np.clip(idx, 0, n_in - 1).ravel()), w.ravel())
    return mat


def bicubic_resize(img: np.ndarray, factor=None, size: tuple[int, int] | None = None,
                   antialias: bool = True) -> np.ndarray:
    """Separable Catmull-Rom resize of ``[..., H, W]`` by ``factor`` or to ``size``."""
    h, w = img.shape[-2:]
    if size is None:
        f = Fraction(factor).limit_denominator(1000)
        size = (round(h * f), round(w * f))
    if min(size) < 1:
        raise ValueError(f"resize to {size} leaves no pixels")
    wy = resize_weights(h, size[0], antialias)
    wx = resize_weights(w, size[1], antialias)
    return np.ascontiguousarray(np.einsum("ph,...hw,qw->...pq", wy, img, wx, optimize=True))


def make_lr_pair(hr_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(lr_upscaled, hr)`` normalized, from a ``[C, H, W]`` image in [0, 255]."""
    h, w = hr_raw.shape[-2:]
    if h % SCALE or w % SCALE:
        raise ValueError(f"image {h}x{w} is not divisible by {SCALE}")
    lr = np.clip(bicubic_resize(hr_raw, size=(h // SCALE, w // SCALE)), 0, 255)
    up = np.clip(bicubic_resize(lr, size=(h, w)), 0, 255)
    return normalize(up), normalize(hr_raw)


# -- synthetic identities --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticIdentitySpec:
    num_classes: int = 10
    samples_per_class: int = 50
    height: int = 32
    width: int = 28
    train_fraction: float = 0.8
    min_blobs: int = 4
    max_blobs: int = 5
    radius_range: tuple[float, float] = (0.8, 2.5)
    color_spread: float = 60.0
    position_jitter: float = 0.10
    brightness_jitter: float = 0.05
    noise_sigma: float = 4.0
    disjoint: bool = False
    num_pairs: int = 600

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("verification needs at least 2 identities")
        if self.samples_per_class < 2:
            raise ValueError("need at least 2 samples per identity")
        if self.height % SCALE or self.width % SCALE:
            raise ValueError(f"image {self.height}x{self.width} is not divisible by {SCALE}")
        if not 1 <= self.min_blobs <= self.max_blobs:
            raise ValueError("blob counts must satisfy 1 <= min_blobs <= max_blobs")

    @classmethod
    def from_dict(cls, data) -> "SyntheticIdentitySpec":
        return from_mapping(cls, data, "data")


@dataclass
class Identity:
    background: np.ndarray       # [3]
    kinds: np.ndarray            # 0 ellipse, 1 rectangle
    centers: np.ndarray          # [B, 2] (row, col)
    radii: np.ndarray            # [B, 2]
    colors: np.ndarray           # [B, 3]


def _draw_identity(spec: SyntheticIdentitySpec, rng) -> Identity:
    b = int(rng.integers(spec.min_blobs, spec.max_blobs + 1))
    h, w = spec.height, spec.width
    half = spec.color_spread / 2
    return Identity(
        background=np.clip(BASE_BACKGROUND + rng.uniform(-half, half, 3), 0, 255),
        kinds=rng.integers(0, 2, b),
        centers=np.stack([rng.uniform(0.15 * h, 0.85 * h, b), rng.uniform(0.15 * w, 0.85 * w, b)], axis=1),
        radii=rng.uniform(*spec.radius_range, (b, 2)),
        colors=np.clip(BASE_BLOB + rng.uniform(-half, half, (b, 3)), 0, 255),
    )


def _too_close(a: Identity, b: Identity, tol: float = 2.0) -> bool:
    if len(a.centers) != len(b.centers):
        return False
    d = np.abs(a.centers[:, None, :] - b.centers[None, :, :]).max(axis=2)
    return bool((d.min(axis=1) <= tol).all())


def make_identities(spec: SyntheticIdentitySpec, seed: int) -> list[Identity]:
    rng = make_rng(seed, 100)
    ids: list[Identity] = []
    while len(ids) < spec.num_classes:
        cand = _draw_identity(spec, rng)
        if not any(_too_close(cand, other) for other in ids):
            ids.append(cand)
    return ids


def render(identity: Identity, spec: SyntheticIdentitySpec, rng) -> np.ndarray:
    """One jittered ``[3, H, W]`` image in [0, 255]."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    img = np.broadcast_to(identity.background[:, None, None], (3, h, w)).copy()
    jitter = rng.uniform(-1, 1, identity.centers.shape) * spec.position_jitter * np.array([h, w])
    for kind, (cy, cx), (ry, rx), color in zip(identity.kinds, identity.centers + jitter,
                                                identity.radii, identity.colors):
        dy, dx = (yy - cy) / ry, (xx - cx) / rx
        mask = (dy * dy + dx * dx <= 1) if kind == 0 else (np.abs(dy) <= 1) & (np.abs(dx) <= 1)
        img[:, mask] = color[:, None]
    img *= 1 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
    img += rng.normal(0, spec.noise_sigma, img.shape)
    return np.clip(img, 0, 255)


@dataclass
class Dataset:
    hr: np.ndarray        # [N, 3, H, W] normalized
    lr: np.ndarray        # [N, 3, H, W] normalized, bicubic down/up
    labels: np.ndarray    # [N] int64
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.hr[idx], self.lr[idx], self.labels[idx], self.num_classes)


@dataclass
class SyntheticData:
    train: Dataset
    test: Dataset
    pairs: np.ndarray     # [P, 3] int: index_a, index_b, same (into test)


def generate_synthetic_dataset(spec: SyntheticIdentitySpec, seed: int) -> SyntheticData:
    identities = make_identities(spec, seed)
    k, n = spec.num_classes, spec.samples_per_class
    hr = np.empty((k * n, 3, spec.height, spec.width))
    lr = np.empty_like(hr)
    labels = np.repeat(np.arange(k), n)
    for c, ident in enumerate(identities):
        for s in range(n):
            i = c * n + s
            lr[i], hr[i] = make_lr_pair(render(ident, spec, make_rng(seed, 200, c, s)))
    full = Dataset(hr, lr, labels, k)
    if spec.disjoint:
        # the test side keeps >= 2 identities (or >= 2 samples each) so both pair kinds exist
        n_train_ids = max(0, min(k - 2, round(k * spec.train_fraction)))
        is_train = labels < n_train_ids
    else:
        n_train = max(0, min(n - 2, round(n * spec.train_fraction)))
        is_train = np.tile(np.arange(n) < n_train, k)
    train, test = full.subset(np.flatnonzero(is_train)), full.subset(np.flatnonzero(~is_train))
    return SyntheticData(train, test, make_pairs(test.labels, spec.num_pairs, make_rng(seed, 300)))


def make_pairs(labels: np.ndarray, num_pairs: int, rng) -> np.ndarray:
    """Balanced same/different pairs, interleaved so contiguous folds stay balanced."""
    a, b = np.triu_indices(len(labels), k=1)
    same = labels[a] == labels[b]
    pos = np.flatnonzero(same)
    neg = np.flatnonzero(~same)
    m = min(num_pairs // 2, len(pos), len(neg))
    if m < 1:
        raise ValueError("cannot form both positive and negative pairs")
    pos = np.sort(rng.choice(pos, m, replace=False))
    neg = np.sort(rng.choice(neg, m, replace=False))
    rng.shuffle(pos)
    rng.shuffle(neg)
    order = np.empty(2 * m, dtype=np.int64)
    order[0::2], order[1::2] = pos, neg
    return np.stack([a[order], b[order], same[order].astype(np.int64)], axis=1)


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    xtr = train.hr.reshape(len(train), -1)
    xte = test.hr.reshape(len(test), -1)
    cents = np.stack([xtr[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    d = ((xte[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == test.labels))


# -- files -----------------------------------------------------------------------

class DatasetFormatError(ValueError):
    pass


def save_dataset(ds: Dataset, path) -> None:
    n, c, h, w = ds.hr.shape
    with open(path, "wb") as fh:
        fh.write(DS_MAGIC)
        fh.write(struct.pack("<IIIIII", DS_VERSION, n, ds.num_classes, c, h, w))
        for i in range(n):
            fh.write(struct.pack("<I", int(ds.labels[i])))
            write_tensor(fh, ds.hr[i])
            write_tensor(fh, ds.lr[i])


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        head = fh.read(28)
        if len(head) != 28 or head[:4] != DS_MAGIC:
            raise DatasetFormatError(f"{path}: not a dataset file")
        version, n, k, c, h, w = struct.unpack("<IIIIII", head[4:])
        if version != DS_VERSION:
            raise DatasetFormatError(f"{path}: dataset version {version}, expected {DS_VERSION}")
        hr = np.empty((n, c, h, w))
        lr = np.empty_like(hr)
        labels = np.empty(n, dtype=np.int64)
        try:
            for i in range(n):
                raw = fh.read(4)
                if len(raw) != 4:
                    raise DatasetFormatError(f"{path}: truncated at record {i}")
                labels[i] = struct.unpack("<I", raw)[0]
                hr[i] = read_tensor(fh)
                lr[i] = read_tensor(fh)
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: {exc}") from exc
    return Dataset(hr, lr, labels, k)


def save_pairs(pairs: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PAIR_HEADER)
        writer.writerows(pairs.tolist())


def load_pairs(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != PAIR_HEADER:
            raise DatasetFormatError(f"{path}: expected header {','.join(PAIR_HEADER)}")
        rows = [[int(v) for v in row] for row in reader if row]
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def read_ppm(path) -> np.ndarray:
    """Binary P6 image -> ``[3, H, W]`` float pixels."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: only binary P6 PPM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    data = raw[pos + 1:pos + 1 + 3 * w * h]
    if len(data) != 3 * w * h:
        raise ValueError(f"{path}: truncated PPM pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64)


def write_ppm(path, img: np.ndarray, comment: str | None = None) -> None:
    px = np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = px.shape[:2]
    note = b"# %s\n" % comment.encode() if comment else b""
    Path(path).write_bytes(b"P6\n" + note + b"%d %d\n255\n" % (w, h) + px.tobytes())
