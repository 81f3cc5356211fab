"""Encoders, discriminators and the operations that move weights between them."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Affine, Conv2D, Flatten, LayerStack, MaxPool, ReLU
from .errors import ConfigError, DomainError, FrozenModelError, ShapeError

PRESETS = ("mlp-synthetic", "digits-small")
HEADS = ("joint", "domain", "multi")


@dataclass
class ArchSpec:
    """Architecture preset plus its free sizes.

    ``mlp-synthetic`` builds ``input_dim -> hidden... -> K`` with ReLUs between
    affine layers. ``digits-small`` is the small-digits conv encoder on
    ``1 x image_size x image_size`` inputs. ``disc_hidden`` sizes the
    discriminator trunk for either preset.
    """

    preset: str = "mlp-synthetic"
    input_dim: int = 2
    hidden: tuple[int, ...] = (32, 32)
    disc_hidden: tuple[int, ...] = (64, 64)
    image_size: int = 28

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown architecture preset {self.preset!r}; choose from {PRESETS}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.disc_hidden = tuple(int(h) for h in self.disc_hidden)
        if self.preset == "digits-small" and self.image_size < 8:
            raise ConfigError("digits-small needs images of at least 8x8")

    @classmethod
    def digits_small(cls) -> "ArchSpec":
        return cls(preset="digits-small", disc_hidden=(500, 500))

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.preset == "digits-small":
            return (1, self.image_size, self.image_size)
        return (self.input_dim,)


def _mlp(widths) -> list[ad.Layer]:
    layers: list[ad.Layer] = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(Affine(a, b))
        if i < len(widths) - 2:
            layers.append(ReLU())
    return layers


def encoder_layers(arch: ArchSpec, K: int) -> list[ad.Layer]:
    if arch.preset == "mlp-synthetic":
        return _mlp([arch.input_dim, *arch.hidden, K])
    # Conv(5,32) -> Pool(2,2) -> Conv(5,48) -> FC(100) -> FC(K)
    half = (arch.image_size - 2) // 2 + 1
    return [
        Conv2D(1, 32, 5), ReLU(), MaxPool(2, 2),
        Conv2D(32, 48, 5), ReLU(), Flatten(),
        Affine(48 * half * half, 100), ReLU(),
        Affine(100, K),
    ]


class EncoderModel:
    """Maps inputs to K task logits."""

    def __init__(self, stack: LayerStack, K: int, arch: ArchSpec | None = None, seed: int | None = None):
        if stack.output_shape != (K,):
            raise ShapeError(f"encoder output {stack.output_shape} != ({K},)")
        self.stack = stack
        self.K = K
        self.arch = arch
        self.seed = seed
        self.frozen = False

    def params(self) -> list[np.ndarray]:
        return self.stack.params()

    def logits(self, x) -> np.ndarray:
        return ad.forward(self.stack, x).output

    def posteriors(self, x) -> np.ndarray:
        return ad.softmax(self.logits(x))

    def freeze(self) -> "EncoderModel":
        self.frozen = True
        for p in self.params():
            p.flags.writeable = False
        return self

    def apply_update(self, grads, state: ad.AdamState) -> None:
        if self.frozen:
            raise FrozenModelError("encoder is frozen; parameter updates are rejected")
        ad.adam_step(self.params(), grads, state)
        self.stack.version += 1


def build_encoder(arch: ArchSpec, K: int, seed: int) -> EncoderModel:
    if K < 2:
        raise ConfigError(f"need at least two classes, got K={K}")
    stack = LayerStack(encoder_layers(arch, K), arch.input_shape)
    stack.init_params(np.random.default_rng(seed))
    return EncoderModel(stack, K, arch, seed)


def clone_into_target(source: EncoderModel) -> EncoderModel:
    """Deep copy of ``source`` with writable parameters."""
    stack = copy.deepcopy(source.stack)
    for p in stack.params():
        p.flags.writeable = True
    stack.version = 0
    return EncoderModel(stack, source.K, source.arch, source.seed)


def zero_concat(p) -> np.ndarray:
    """Append a zero 'target domain' probability to each posterior row."""
    p = np.asarray(p, dtype=np.float64)
    rows = np.atleast_2d(p)
    if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-9):
        raise DomainError("zero_concat expects normalized probability rows")
    out = np.concatenate([rows, np.zeros((rows.shape[0], 1))], axis=1)
    return out[0] if p.ndim == 1 else out


def argmax_lowest(x: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the first maximal index."""
    return np.argmax(x, axis=-1)


def predict(model: EncoderModel, batch) -> np.ndarray:
    return argmax_lowest(model.logits(batch))


class DiscriminatorModel:
    """Discriminator over encoder logits.

    ``head`` selects the output layout of the final affine layer:

    - ``joint``: K+1 logits, softmax over all (K task-and-source classes + target).
    - ``domain``: 2 logits, softmax gives [p(source), p(target)].
    - ``multi``: K task logits followed by 2 domain logits, each softmaxed separately.
    """

    def __init__(self, stack: LayerStack, K: int, head: str = "joint", l1_lambda: float = 0.0):
        if head not in HEADS:
            raise ConfigError(f"unknown discriminator head {head!r}")
        width = {"joint": K + 1, "domain": 2, "multi": K + 2}[head]
        if stack.input_shape != (K,) or stack.output_shape != (width,):
            raise ShapeError(f"{head} discriminator must map ({K},) -> ({width},), "
                             f"got {stack.input_shape} -> {stack.output_shape}")
        if l1_lambda < 0:
            raise ConfigError("l1_lambda must be nonnegative")
        self.stack = stack
        self.K = K
        self.head = head
        self.l1_lambda = l1_lambda
        # post-activation output of the last hidden layer
        relus = [i for i, layer in enumerate(stack.layers) if isinstance(layer, ReLU)]
        self.feature_index = relus[-1] + 1 if relus else 0

    def params(self) -> list[np.ndarray]:
        return self.stack.params()

    def weight_mask(self) -> list[bool]:
        """True for weight matrices, False for biases."""
        return [p.ndim >= 2 for p in self.params()]

    def apply_update(self, grads, state: ad.AdamState) -> None:
        ad.adam_step(self.params(), grads, state)
        self.stack.version += 1


def build_discriminator(K: int, hidden=(64, 64), head: str = "joint", seed: int = 0,
                        l1_lambda: float = 0.0) -> DiscriminatorModel:
    width = {"joint": K + 1, "domain": 2, "multi": K + 2}.get(head)
    if width is None:
        raise ConfigError(f"unknown discriminator head {head!r}")
    stack = LayerStack(_mlp([K, *hidden, width]), (K,))
    stack.init_params(np.random.default_rng(seed))
    return DiscriminatorModel(stack, K, head, l1_lambda)


@dataclass
class DiscOutput:
    """Discriminator outputs for one batch, plus what is needed to backpropagate."""

    q: np.ndarray
    h_d: np.ndarray
    f: np.ndarray
    mask: np.ndarray
    trace: ad.Trace = field(repr=False)


def discriminator_posteriors(disc: DiscriminatorModel, logits, z: float = 1.0,
                             seed=None, scaled: bool = True) -> DiscOutput:
    """Corrupt ``logits`` with dropout (keep probability ``z``) and run the discriminator.

    ``seed`` may be an int or a ``numpy.random.Generator``. ``q`` is the softmax of
    the raw outputs for a joint head; for other heads see :func:`head_posteriors`.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != disc.K:
        raise ShapeError(f"expected logits of width {disc.K}, got shape {logits.shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = ad.dropout_mask(logits.shape, z, rng, scaled)
    trace = ad.forward(disc.stack, logits * mask)
    h_d = trace.output
    return DiscOutput(head_posteriors(disc, h_d), h_d, trace.activations[disc.feature_index], mask, trace)


def head_posteriors(disc: DiscriminatorModel, h_d: np.ndarray) -> np.ndarray:
    if disc.head == "multi":
        K = disc.K
        return np.concatenate([ad.softmax(h_d[:, :K]), ad.softmax(h_d[:, K:])], axis=1)
    return ad.softmax(h_d)


def head_posteriors_backward(disc: DiscriminatorModel, q: np.ndarray, grad_q: np.ndarray) -> np.ndarray:
    if disc.head == "multi":
        K = disc.K
        return np.concatenate([ad.softmax_backward(q[:, :K], grad_q[:, :K]),
                               ad.softmax_backward(q[:, K:], grad_q[:, K:])], axis=1)
    return ad.softmax_backward(q, grad_q)
