"""Layers with hand-written forward and backward passes.

Every layer caches what its backward pass needs during ``forward`` and marks
itself fresh; ``backward`` consumes that cache and raises ``StaleCacheError``
if no matching forward preceded it. Parameters live in ``layer.params`` and
their gradients in ``layer.grads`` under the same keys.

Images are laid out ``[N, C, H, W]``. Convolutions are stride-1
cross-correlations with symmetric zero padding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import as_tensor, rng_normal


class StaleCacheError(RuntimeError):
    """backward() called without a matching forward()."""


class ShapeError(ValueError):
    pass


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._fresh = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            yield prefix + k, self.grads[k]
        for name, child in self.children():
            yield from child.named_grads(f"{prefix}{name}.")

    def patterns(self) -> Iterator[bytes]:
        """Activation patterns (ReLU gates, pooling winners) of the last forward."""
        for _, child in self.children():
            yield from child.patterns()

    def _mark(self):
        self._fresh = True

    def _consume(self):
        if not self._fresh:
            raise StaleCacheError(f"{type(self).__name__}.backward without a fresh forward")
        self._fresh = False


def _correlate(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    # xp [N,C,Hp,Wp] already padded, w [O,C,kh,kw] -> [N,O,H',W']
    kh, kw = w.shape[2:]
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


class Conv2d(Layer):
    """Stride-1 convolution; ``input_grad=False`` skips the input gradient
    (``backward`` then returns ``None``) for layers that sit on raw data."""

    stride = 1
    input_grad = True

    def __init__(self, in_ch: int, out_ch: int, kernel: int, pad: int = 0, rng=None):
        super().__init__()
        if kernel < 1 or pad < 0:
            raise ValueError("kernel must be >= 1 and pad >= 0")
        self.in_ch, self.out_ch, self.kernel, self.pad = in_ch, out_ch, kernel, pad
        fan_in = in_ch * kernel * kernel
        shape = (out_ch, in_ch, kernel, kernel)
        self.params["weight"] = (
            rng_normal(rng, shape, 0.0, np.sqrt(2.0 / fan_in)) if rng is not None else np.zeros(shape)
        )
        self.params["bias"] = np.zeros(out_ch)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def output_shape(self, shape):
        n, c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} input channels, got {c}")
        ho = h + 2 * self.pad - self.kernel + 1
        wo = w + 2 * self.pad - self.kernel + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv {self.kernel}x{self.kernel} pad {self.pad} collapses {h}x{w}")
        return (n, self.out_ch, ho, wo)

    def forward(self, x):
        self.output_shape(x.shape)
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        self._xp = xp
        self._mark()
        out = _correlate(xp, self.params["weight"])
        out += self.params["bias"][None, :, None, None]
        return out

    def backward(self, grad_out):
        self._consume()
        w, k, p = self.params["weight"], self.kernel, self.pad
        xp = self._xp
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))
        if grad_out.shape[:2] != (xp.shape[0], self.out_ch) or grad_out.shape[2:] != cols.shape[2:4]:
            raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output")
        self.grads["weight"] = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))
        self.grads["bias"] = grad_out.sum(axis=(0, 2, 3))
        if not self.input_grad:
            return None
        # scatter each kernel tap back in NHWC layout, then drop the padding
        n, _, hp, wp = xp.shape
        ho, wo = grad_out.shape[2:]
        g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1))
        gxp = np.zeros((n, hp, wp, self.in_ch))
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + ho, j:j + wo, :] += g @ w[:, :, i, j]
        gx = gxp.transpose(0, 3, 1, 2)
        if p:
            gx = gx[:, :, p:-p, p:-p]
        return np.ascontiguousarray(gx)


class ReLU(Layer):
    def output_shape(self, shape):
        return shape

    def forward(self, x):
        self._mask = x > 0
        self._mark()
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out):
        self._consume()
        return np.where(self._mask, grad_out, 0.0)

    def patterns(self):
        yield np.packbits(self._mask).tobytes()


class MaxPool2d(Layer):
    """Max pooling; floor rule for trailing rows/cols, ties go to the lowest index."""

    def __init__(self, window: int = 2, stride: int = 2):
        super().__init__()
        self.window, self.stride = window, stride

    def output_shape(self, shape):
        n, c, h, w = shape
        ho = (h - self.window) // self.stride + 1
        wo = (w - self.window) // self.stride + 1
        if h < self.window or w < self.window:
            raise ShapeError(f"max-pool {self.window}x{self.window} collapses {h}x{w}")
        return (n, c, ho, wo)

    def forward(self, x):
        _, _, ho, wo = self.output_shape(x.shape)
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        flat = win.reshape(*win.shape[:4], k * k)
        idx = np.argmax(flat, axis=-1)
        self._idx, self._in_shape = idx, x.shape
        self._mark()
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad_out):
        self._consume()
        k, s = self.window, self.stride
        n, c, h, w = self._in_shape
        ho, wo = self._idx.shape[2:]
        if grad_out.shape != self._idx.shape:
            raise ShapeError(f"grad_out shape {grad_out.shape} does not match pooled output")
        grad_in = np.zeros(self._in_shape)
        if k == s:
            blocks = np.zeros((n, c, ho, wo, k * k))
            np.put_along_axis(blocks, self._idx[..., None], grad_out[..., None], axis=-1)
            blocks = blocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
            grad_in[:, :, : ho * k, : wo * k] = blocks.reshape(n, c, ho * k, wo * k)
        else:
            di, dj = np.divmod(self._idx, k)
            rows = np.arange(ho)[None, None, :, None] * s + di
            cols = np.arange(wo)[None, None, None, :] * s + dj
            nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
            np.add.at(grad_in, (nn_[..., None, None], cc[..., None, None], rows, cols), grad_out)
        return grad_in

    def patterns(self):
        yield self._idx.astype(np.int8).tobytes()


class GlobalAvgPool(Layer):
    def output_shape(self, shape):
        return shape[:2]

    def forward(self, x):
        self._in_shape = x.shape
        self._mark()
        return x.mean(axis=(2, 3))

    def backward(self, grad_out):
        self._consume()
        n, c, h, w = self._in_shape
        return np.broadcast_to(grad_out[:, :, None, None] / (h * w), self._in_shape).copy()


class Linear(Layer):
    """Fully connected layer, weight ``[out_dim, in_dim]``."""

    def __init__(self, in_dim: int, out_dim: int, rng=None):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        shape = (out_dim, in_dim)
        self.params["weight"] = (
            rng_normal(rng, shape, 0.0, np.sqrt(2.0 / in_dim)) if rng is not None else np.zeros(shape)
        )
        self.params["bias"] = np.zeros(out_dim)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def output_shape(self, shape):
        if len(shape) != 2 or shape[1] != self.in_dim:
            raise ShapeError(f"linear expects [N, {self.in_dim}], got {list(shape)}")
        return (shape[0], self.out_dim)

    def forward(self, x):
        self.output_shape(x.shape)
        self._x = x
        self._mark()
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad_out):
        self._consume()
        self.grads["weight"] = grad_out.T @ self._x
        self.grads["bias"] = grad_out.sum(axis=0)
        return grad_out @ self.params["weight"]


class Sequential(Layer):
    def __init__(self, layers: list[Layer] | None = None):
        super().__init__()
        self.layers = list(layers or [])

    def children(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def shape_chain(self, shape) -> list[tuple[str, tuple[int, ...]]]:
        chain = [("input", tuple(shape))]
        for i, layer in enumerate(self.layers):
            shape = layer.output_shape(shape)
            chain.append((f"{i}:{type(layer).__name__}", tuple(shape)))
        return chain

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
            if grad_out is None:
                break
        return grad_out


class Residual(Layer):
    """``x + conv2(relu(conv1(x)))`` with 3x3 pad-1 convolutions; no activation after the sum."""

    def __init__(self, channels: int, rng=None):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, pad=1, rng=rng)
        self.relu = ReLU()
        self.conv2 = Conv2d(channels, channels, 3, pad=1, rng=rng)

    def children(self):
        return [("conv1", self.conv1), ("relu", self.relu), ("conv2", self.conv2)]

    def output_shape(self, shape):
        return self.conv2.output_shape(self.conv1.output_shape(shape))

    def forward(self, x):
        return x + self.conv2.forward(self.relu.forward(self.conv1.forward(x)))

    def backward(self, grad_out):
        g = self.conv1.backward(self.relu.backward(self.conv2.backward(grad_out)))
        return g + grad_out


def parameter_count(layer: Layer) -> int:
    return sum(p.size for _, p in layer.named_parameters())


# -- finite-difference checking ---------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    n_checked: int
    n_step_reduced: int = 0
    n_skipped_at_kink: int = 0

    def __float__(self):
        return self.max_rel_error


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def check_arrays(
    evaluate: Callable[[], float],
    arrays: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    h: float = 1e-3,
    pattern: Callable[[], bytes] | None = None,
    max_per_array: int | None = None,
    rng: np.random.Generator | None = None,
    min_h: float = 1e-7,
) -> GradCheckResult:
    """Compare ``analytic`` gradients against central differences of ``evaluate``.

    ``arrays`` are perturbed in place. When ``pattern`` is given, a perturbation
    that changes the activation pattern has crossed a kink of a piecewise-linear
    layer; the step is divided by 10 for that coordinate until the pattern holds
    (down to ``min_h``, past which the coordinate is counted and skipped).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = pattern() if pattern is not None else None
    f0 = evaluate()
    if not np.isfinite(f0):
        raise FloatingPointError("loss is not finite")
    worst, worst_name, n_checked, n_reduced, n_skipped = 0.0, "", 0, 0, 0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        grad = analytic[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_per_array is not None and flat.size > max_per_array:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_per_array, replace=False))
        for i in idx:
            orig = flat[i]
            step = h
            while True:
                flat[i] = orig + step
                fp = evaluate()
                crossed = pattern is not None and pattern() != base
                flat[i] = orig - step
                fm = evaluate()
                crossed = crossed or (pattern is not None and pattern() != base)
                flat[i] = orig
                if not crossed or step / 10 < min_h:
                    break
                step /= 10
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{i}]")
            if crossed:
                n_skipped += 1
                continue
            n_reduced += step != h
            err = rel_error(float(grad[i]), (fp - fm) / (2 * step))
            n_checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    if pattern is not None:
        evaluate()
    return GradCheckResult(worst, worst_name, n_checked, n_reduced, n_skipped)


def gradient_check(
    layer: Layer,
    x: np.ndarray,
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
    h: float = 1e-3,
    check_input: bool = True,
    max_per_array: int | None = None,
    rng=None,
) -> GradCheckResult:
    """Check ``layer``'s parameter and input gradients under a scalar ``loss``.

    ``loss(out)`` returns ``(value, d value / d out)``.
    """
    x = as_tensor(x).copy()
    out = layer.forward(x)
    value, g = loss(out)
    if not np.isfinite(value):
        raise FloatingPointError("loss is not finite")
    gx = layer.backward(g)
    arrays = dict(layer.named_parameters())
    analytic = {k: v.copy() for k, v in layer.named_grads()}
    if check_input:
        arrays["input"] = x
        analytic["input"] = gx

    def evaluate():
        return loss(layer.forward(x))[0]

    def pattern():
        return b"|".join(layer.patterns())

    return check_arrays(evaluate, arrays, analytic, h, pattern, max_per_array, rng)
