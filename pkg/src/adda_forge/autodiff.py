"""Dense-tensor layers with hand-written reverse-mode gradients.

Only the fixed layer vocabulary needed by the encoders and discriminators is
supported: affine, ReLU, 2-d convolution, max pooling, flatten, dropout and
softmax. A :class:`LayerStack` runs them in sequence; :func:`forward` records a
:class:`Trace` that :func:`backward` consumes.

All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NonDeterministicError, ShapeError, StaleTraceError

Shape = tuple[int, ...]


def _he_uniform(rng: np.random.Generator, shape: Shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base layer. Subclasses hold their parameters in ``self.params``."""

    tag = 0

    def __init__(self) -> None:
        self.params: list[np.ndarray] = []

    def output_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x, train, rng):
        raise NotImplementedError

    def backward(self, grad, cache):
        raise NotImplementedError

    def config(self) -> list[float]:
        """Numbers that fully describe the layer (used by checkpoints)."""
        return []

    def param_shapes(self) -> list[Shape]:
        return []

    def __repr__(self) -> str:
        args = ", ".join(str(c) for c in self.config())
        return f"{type(self).__name__}({args})"


class Affine(Layer):
    tag = 1

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ConfigError(f"Affine needs positive widths, got {n_in}->{n_out}")
        self.n_in, self.n_out = n_in, n_out
        self.params = [np.zeros((n_out, n_in)), np.zeros(n_out)]

    def output_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise ShapeError(f"Affine({self.n_in},{self.n_out}) got input shape {in_shape}")
        return (self.n_out,)

    def init_params(self, rng):
        self.params[0][...] = _he_uniform(rng, (self.n_out, self.n_in), self.n_in)
        self.params[1][...] = 0.0

    def forward(self, x, train, rng):
        W, b = self.params
        return x @ W.T + b, x

    def backward(self, grad, x):
        W, _ = self.params
        return grad @ W, [grad.T @ x, grad.sum(axis=0)]

    def config(self):
        return [self.n_in, self.n_out]

    def param_shapes(self):
        return [(self.n_out, self.n_in), (self.n_out,)]


class ReLU(Layer):
    tag = 2

    def forward(self, x, train, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, grad, mask):
        return grad * mask, []


def _pad_amount(kernel: int, padding) -> int:
    if padding == "same":
        return (kernel - 1) // 2
    if padding == "valid":
        return 0
    return int(padding)


class Conv2D(Layer):
    """Cross-correlation over NCHW input with square kernels."""

    tag = 3

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding="same"):
        super().__init__()
        if min(in_channels, out_channels, kernel, stride) < 1:
            raise ConfigError("Conv2D sizes must be positive")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = kernel, stride
        self.pad = _pad_amount(kernel, padding)
        self.params = [np.zeros((out_channels, in_channels, kernel, kernel)),
                       np.zeros(out_channels)]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"{self!r} got input shape {in_shape}")
        _, h, w = in_shape
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self!r} produces empty output from {in_shape}")
        return (self.out_channels, ho, wo)

    def init_params(self, rng):
        fan_in = self.in_channels * self.kernel ** 2
        self.params[0][...] = _he_uniform(rng, self.params[0].shape, fan_in)
        self.params[1][...] = 0.0

    def _columns(self, x):
        p, k, s = self.pad, self.kernel, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        return cols, (n, ho, wo), x.shape

    def forward(self, x, train, rng):
        W, b = self.params
        cols, (n, ho, wo), padded_shape = self._columns(x)
        out = cols @ W.reshape(self.out_channels, -1).T + b
        out = out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return out, (cols, (n, ho, wo), padded_shape)

    def backward(self, grad, cache):
        W, _ = self.params
        cols, (n, ho, wo), padded_shape = cache
        k, s, p = self.kernel, self.stride, self.pad
        g = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_channels)
        dW = (g.T @ cols).reshape(W.shape)
        db = g.sum(axis=0)
        dcols = (g @ W.reshape(self.out_channels, -1)).reshape(n, ho, wo, self.in_channels, k, k)
        dx = np.zeros(padded_shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return dx, [dW, db]

    def config(self):
        return [self.in_channels, self.out_channels, self.kernel, self.stride, self.pad]

    def param_shapes(self):
        return [self.params[0].shape, (self.out_channels,)]


class MaxPool(Layer):
    tag = 4

    def __init__(self, window: int, stride: int):
        super().__init__()
        if window < 1 or stride < 1:
            raise ConfigError("MaxPool window and stride must be positive")
        self.window, self.stride = window, stride

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self!r} expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        ho = (h - self.window) // self.stride + 1
        wo = (w - self.window) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self!r} produces empty output from {in_shape}")
        return (c, ho, wo)

    def forward(self, x, train, rng):
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        flat = win.reshape(n, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, grad, cache):
        arg, in_shape = cache
        k, s = self.window, self.stride
        _, _, ho, wo = grad.shape
        dx = np.zeros(in_shape)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += grad * (arg == idx)
        return dx, []

    def config(self):
        return [self.window, self.stride]


class Flatten(Layer):
    tag = 7

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, shape):
        return grad.reshape(shape), []


def dropout_mask(shape, z: float, rng: np.random.Generator, scaled: bool = True) -> np.ndarray:
    """Bernoulli keep-mask with keep probability ``z``.

    Kept entries equal ``1/z`` when ``scaled`` (inverted dropout) and 1 otherwise.
    """
    if not 0.0 < z <= 1.0:
        raise ConfigError(f"dropout keep probability must lie in (0, 1], got {z}")
    if z == 1.0:
        return np.ones(shape)
    keep = rng.random(shape) < z
    return keep * (1.0 / z if scaled else 1.0)


class DropoutSite(Layer):
    tag = 5

    def __init__(self, keep: float, scaled: bool = True):
        super().__init__()
        if not 0.0 < keep <= 1.0:
            raise ConfigError(f"dropout keep probability must lie in (0, 1], got {keep}")
        self.keep, self.scaled = keep, scaled

    def forward(self, x, train, rng):
        if not train:
            return x, None
        mask = dropout_mask(x.shape, self.keep, rng, self.scaled)
        return x * mask, mask

    def backward(self, grad, mask):
        return (grad if mask is None else grad * mask), []

    def config(self):
        return [self.keep, float(self.scaled)]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, overflow-safe."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given softmax output ``p`` and dL/dp."""
    return p * (grad_p - (grad_p * p).sum(axis=-1, keepdims=True))


class Softmax(Layer):
    tag = 6

    def forward(self, x, train, rng):
        p = softmax(x)
        return p, p

    def backward(self, grad, p):
        return softmax_backward(p, grad), []


LAYER_TYPES = {cls.tag: cls for cls in (Affine, ReLU, Conv2D, MaxPool, DropoutSite, Softmax, Flatten)}


class LayerStack:
    """An ordered list of layers whose shapes are checked at construction."""

    def __init__(self, layers: Sequence[Layer], input_shape: Shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(layer.output_shape(self.shapes[-1]))
        self.version = 0

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def init_params(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            layer.init_params(rng)
        self.version += 1

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def __repr__(self) -> str:
        return " -> ".join(repr(layer) for layer in self.layers)


@dataclass
class Trace:
    """Everything recorded by one forward pass."""

    activations: list[np.ndarray]
    caches: list
    stack_id: int
    version: int

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


@dataclass
class GradTape:
    grads: list[np.ndarray]
    input_grad: np.ndarray | None = None


def forward(stack: LayerStack, x: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None) -> Trace:
    """Run ``x`` (batch-first) through the stack, keeping every activation."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != stack.input_shape:
        raise ShapeError(f"stack expects inputs of shape (n, {', '.join(map(str, stack.input_shape))}),"
                         f" got {x.shape}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and rng is None:
        rng = np.random.default_rng(0)
    acts, caches = [x], []
    for layer in stack.layers:
        x, cache = layer.forward(x, train, rng)
        acts.append(x)
        caches.append(cache)
    return Trace(acts, caches, id(stack), stack.version)


def backward(stack: LayerStack, trace: Trace, output_grad: np.ndarray,
             start: int | None = None) -> GradTape:
    """Reverse-mode pass; returns gradients for every parameter and the input.

    By default ``output_grad`` is dL/d(output). With ``start`` it is dL/d of
    ``trace.activations[start]`` instead, and layers after it get zero gradients.
    """
    if trace is None or len(trace.caches) != len(stack.layers):
        raise StaleTraceError("missing activations: run forward() on this stack first")
    if trace.stack_id != id(stack) or trace.version != stack.version:
        raise StaleTraceError("activations were recorded before the parameters changed")
    n_layers = len(stack.layers)
    start = n_layers if start is None else start
    if not 0 <= start <= n_layers:
        raise ShapeError(f"start index {start} outside 0..{n_layers}")
    grad = np.asarray(output_grad, dtype=np.float64)
    if grad.shape != trace.activations[start].shape:
        raise ShapeError(f"gradient shape {grad.shape} != activation shape {trace.activations[start].shape}")
    per_layer = [[np.zeros_like(p) for p in layer.params] for layer in stack.layers[start:]]
    per_layer.reverse()
    for layer, cache in zip(reversed(stack.layers[:start]), reversed(trace.caches[:start])):
        grad, pgrads = layer.backward(grad, cache)
        per_layer.append(pgrads)
    flat = [g for pgrads in reversed(per_layer) for g in pgrads]
    return GradTape(flat, grad)


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class GradCheckReport:
    rel_errors: list[float]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return 0.0 if scale == 0 else float(diff / scale)


def numerical_gradient(loss_fn: Callable[[], float], param: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + h
        f_plus = loss_fn()
        param[idx] = orig - h
        f_minus = loss_fn()
        param[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad


def finite_diff_check(closure: Callable[[], tuple[float, list[np.ndarray]]],
                      params: list[np.ndarray], h: float = 1e-5,
                      tolerance: float = 1e-4) -> GradCheckReport:
    """Compare the analytic gradients returned by ``closure`` with central differences.

    ``closure()`` must return ``(loss, grads)`` with ``grads`` aligned to ``params``
    and must be deterministic; parameters are perturbed in place and restored.
    """
    loss0, analytic = closure()
    loss1, _ = closure()
    if loss0 != loss1:
        raise NonDeterministicError(f"closure is not deterministic ({loss0!r} != {loss1!r})")
    if len(analytic) != len(params):
        raise ShapeError(f"closure returned {len(analytic)} gradients for {len(params)} parameters")
    errors = []
    for p, g in zip(params, analytic):
        numeric = numerical_gradient(lambda: closure()[0], p, h)
        errors.append(relative_error(g, numeric))
    return GradCheckReport(errors, tolerance)
