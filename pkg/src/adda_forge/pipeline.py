"""Source pretraining, adversarial target adaptation, inference and bagging."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from .datasets import LabeledSet, validation_split
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .kernels import KernelSpec
from .models import (ArchSpec, DiscriminatorModel, EncoderModel, argmax_lowest,
                     build_discriminator, build_encoder, clone_into_target,
                     discriminator_posteriors, head_posteriors_backward, zero_concat)

log = logging.getLogger(__name__)

HEAD_FOR_VARIANT = {"ADDA": "domain", "MULTI": "multi", "JOINT": "joint", "REC": "joint"}

# encoder losses each discriminator variant supports
VALID_PAIRINGS = {
    "ADDA": ("INV", "MAX"),
    "MULTI": ("INV", "MAX"),
    "JOINT": ("MAX", "FEAT", "PSEUDO", "MMD_PQ", "MMD_QQ"),
    "REC": ("MMD_QQ", "MMD_PQ"),
}


def is_valid_pairing(disc_variant: str, enc_variant: str) -> bool:
    return enc_variant in VALID_PAIRINGS.get(disc_variant, ())


@dataclass
class AdaptConfig:
    step1_lr: float = 0.001
    step1_iters: int = 10000
    step1_batch: int = 128
    step2_lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    step2_iters: int = 10000
    step2_batch: int = 128
    z: float = 0.7
    l1_lambda: float = 0.001
    kernel: KernelSpec = field(default_factory=KernelSpec)
    disc_variant: str = "REC"
    enc_variant: str = "MMD_PQ"
    target_reg: bool = False
    seed: int = 0
    val_fraction: float = 0.05
    val_every: int = 100
    disc_steps: int = 1
    enc_steps: int = 1
    scaled_dropout: bool = True
    # None: corrupt logits only for REC
    corrupt: bool | None = None

    def __post_init__(self):
        if self.disc_variant not in L.DISC_VARIANTS:
            raise ConfigError(f"unknown discriminator loss {self.disc_variant!r}")
        if self.enc_variant not in L.ENC_VARIANTS:
            raise ConfigError(f"unknown encoder loss {self.enc_variant!r}")
        if not 0.0 < self.z <= 1.0:
            raise ConfigError(f"z must lie in (0, 1], got {self.z}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.l1_lambda < 0:
            raise ConfigError("l1_lambda must be nonnegative")
        if min(self.step1_batch, self.step2_batch, self.disc_steps, self.enc_steps) < 1:
            raise ConfigError("batch sizes and update counts must be positive")
        if self.step1_iters < 0 or self.step2_iters < 0:
            raise ConfigError("iteration counts must be nonnegative")

    @property
    def head(self) -> str:
        return HEAD_FOR_VARIANT[self.disc_variant]

    @property
    def corrupt_z(self) -> float:
        corrupt = self.disc_variant == "REC" if self.corrupt is None else self.corrupt
        return self.z if corrupt else 1.0

    def seeds(self) -> dict[str, np.random.SeedSequence]:
        names = ("init", "step1", "split", "step2", "disc_init")
        return dict(zip(names, np.random.SeedSequence(self.seed).spawn(len(names))))


def _rng(seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.default_rng(seq)


def _draw(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n, size=size, replace=size > n)


# -- objectives ------------------------------------------------------------

def _source_prob(disc: DiscriminatorModel, q: np.ndarray):
    """Probability of the source domain and a function mapping d/d(prob) back onto q."""
    K = disc.K
    if disc.head == "joint":
        def back(g):
            out = np.zeros_like(q)
            out[:, K] = -g
            return out
        return 1.0 - q[:, K], back
    col = 0 if disc.head == "domain" else K

    def back(g):
        out = np.zeros_like(q)
        out[:, col] = g
        return out
    return q[:, col], back


def _l1_terms(disc: DiscriminatorModel, lam: float):
    mask = disc.weight_mask()
    weights = [p for p, is_w in zip(disc.params(), mask) if is_w]
    value, g = L.l1_penalty(weights, lam)
    it = iter(g["weights"])
    return value, [next(it) if is_w else np.zeros_like(p) for p, is_w in zip(disc.params(), mask)]


def discriminator_objective(disc: DiscriminatorModel, h_s, p_s, y_s, h_t,
                            cfg: AdaptConfig, rng: np.random.Generator):
    """Discriminator loss and its gradients w.r.t. the discriminator parameters.

    Source logits ``h_s`` (with posteriors ``p_s`` and labels ``y_s``) and target
    logits ``h_t`` are constants here.
    """
    z = cfg.corrupt_z
    out_s = discriminator_posteriors(disc, h_s, z, rng, cfg.scaled_dropout)
    out_t = discriminator_posteriors(disc, h_t, z, rng, cfg.scaled_dropout)
    variant = cfg.disc_variant
    if variant == "REC":
        value, g = L.disc_rec(zero_concat(p_s), out_s.q, out_t.q)
        gq_s, gq_t = g["q_s"], g["q_t"]
    elif variant == "JOINT":
        value, g = L.disc_joint(out_s.q, y_s, out_t.q)
        gq_s, gq_t = g["q_s"], g["q_t"]
    else:
        q1_s, back_s = _source_prob(disc, out_s.q)
        q1_t, back_t = _source_prob(disc, out_t.q)
        if variant == "ADDA":
            value, g = L.disc_adda(q1_s, q1_t)
            gq_s = back_s(g["q1_s"])
        else:
            K = disc.K
            value, g = L.disc_multi(out_s.q[:, :K], y_s, q1_s, q1_t)
            gq_s = back_s(g["q1_s"])
            gq_s[:, :K] += g["p_task"]
        gq_t = back_t(g["q1_t"])
    tape_s = ad.backward(disc.stack, out_s.trace, head_posteriors_backward(disc, out_s.q, gq_s))
    tape_t = ad.backward(disc.stack, out_t.trace, head_posteriors_backward(disc, out_t.q, gq_t))
    reg, g_reg = _l1_terms(disc, cfg.l1_lambda)
    grads = [a + b + c for a, b, c in zip(tape_s.grads, tape_t.grads, g_reg)]
    return value + reg, grads


def encoder_objective(disc: DiscriminatorModel, target_enc: EncoderModel, x_enc,
                      h_s, p_s, cfg: AdaptConfig, rng: np.random.Generator):
    """Target-encoder loss and its gradients w.r.t. the target-encoder parameters.

    ``x_enc`` is the encoder input batch; ``h_s``/``p_s`` are source logits and
    posteriors from the frozen source encoder, used as the fixed reference.
    Source-side discriminator outputs (MMD_QQ, FEAT) are treated as constants.
    """
    z = cfg.corrupt_z
    trace = ad.forward(target_enc.stack, x_enc)
    out_t = discriminator_posteriors(disc, trace.output, z, rng, cfg.scaled_dropout)
    variant = cfg.enc_variant
    start = None
    if variant in ("INV", "MAX"):
        q1_t, back = _source_prob(disc, out_t.q)
        value, g = L.tgt_domain(variant, q1_t)
        g_out = back(g["q1_t"])
    elif variant == "MMD_PQ":
        value, g = L.tgt_mmd(variant, cfg.kernel, out_t.q, p_s=p_s)
        g_out = g["q_t"]
    elif variant == "MMD_QQ":
        out_s = discriminator_posteriors(disc, h_s, z, rng, cfg.scaled_dropout)
        value, g = L.tgt_mmd(variant, cfg.kernel, out_t.q, q_s=out_s.q)
        g_out = g["q_t"]
    elif variant == "FEAT":
        out_s = discriminator_posteriors(disc, h_s, z, rng, cfg.scaled_dropout)
        value, g = L.tgt_feat(out_s.f, out_t.f)
        g_out, start = g["f_t"], disc.feature_index
    else:
        value, g = L.tgt_pseudo(out_t.h_d, out_t.q)
        g_out = g["q_t"]
    if start is None:
        g_out = head_posteriors_backward(disc, out_t.q, g_out)
    disc_tape = ad.backward(disc.stack, out_t.trace, g_out, start=start)
    enc_tape = ad.backward(target_enc.stack, trace, disc_tape.input_grad * out_t.mask)
    return value, enc_tape.grads


# -- step 1 -----------------------------------------------------------------

def source_loss_and_grads(encoder: EncoderModel, x, y):
    trace = ad.forward(encoder.stack, x)
    p = ad.softmax(trace.output)
    value, g = L.source_ce(p, y)
    tape = ad.backward(encoder.stack, trace, ad.softmax_backward(p, g["p"]))
    return value, tape.grads


def pretrain_source(cfg: AdaptConfig, source: LabeledSet, arch: ArchSpec, K: int | None = None,
                    history: list | None = None) -> EncoderModel:
    """Supervised training on the labeled source set; the returned encoder is frozen."""
    if len(source) == 0:
        raise ConfigError("empty source dataset")
    K = K or source.num_classes
    seeds = cfg.seeds()
    encoder = build_encoder(arch, K, int(seeds["init"].generate_state(1)[0]))
    state = ad.AdamState(lr=cfg.step1_lr)
    rng = _rng(seeds["step1"])
    for _ in range(cfg.step1_iters):
        idx = _draw(len(source), cfg.step1_batch, rng)
        value, grads = source_loss_and_grads(encoder, source.x[idx], source.y[idx])
        if not np.isfinite(value):
            raise TrainingDivergedError(f"source loss became {value}")
        encoder.apply_update(grads, state)
        if history is not None:
            history.append(value)
    return encoder.freeze()


# -- step 2 -----------------------------------------------------------------

def compose_encoder_batch(source_x, target_x, target_reg: bool) -> np.ndarray:
    """Encoder input batch: the target batch, or half source / half target.

    With an odd batch size the source half gets ``n // 2`` rows.
    """
    target_x = np.asarray(target_x)
    if not target_reg:
        return target_x
    source_x = np.asarray(source_x)
    if len(source_x) != len(target_x):
        raise ShapeError(f"target regularization needs equal batches, got {len(source_x)} and {len(target_x)}")
    n_src = len(target_x) // 2
    return np.concatenate([source_x[:n_src], target_x[:len(target_x) - n_src]])


def accuracy(predictions, labels) -> float:
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


@dataclass
class AdaptResult:
    target_encoder: EncoderModel
    discriminator: DiscriminatorModel
    metrics: list[dict]


def adapt_target(cfg: AdaptConfig, source_enc: EncoderModel, source: LabeledSet,
                 target: LabeledSet, val: LabeledSet | None = None,
                 disc_hidden=(64, 64), callback=None) -> AdaptResult:
    """Adversarial alignment of a target encoder initialised from ``source_enc``.

    Each iteration runs ``cfg.disc_steps`` discriminator updates then
    ``cfg.enc_steps`` target-encoder updates, each on freshly drawn batches.
    ``target.y`` is never read; ``val`` labels are only used for metrics.
    """
    if not source_enc.frozen:
        raise ConfigError("the source encoder must be frozen before adaptation")
    seeds = cfg.seeds()
    target_enc = clone_into_target(source_enc)
    disc = build_discriminator(source_enc.K, disc_hidden, cfg.head,
                               int(seeds["disc_init"].generate_state(1)[0]), cfg.l1_lambda)
    disc_state = ad.AdamState(lr=cfg.step2_lr, beta1=cfg.beta1, beta2=cfg.beta2)
    enc_state = ad.AdamState(lr=cfg.step2_lr, beta1=cfg.beta1, beta2=cfg.beta2)
    batch_rng, noise_rng = (_rng(s) for s in seeds["step2"].spawn(2))
    B = cfg.step2_batch
    metrics = []

    def source_batch():
        idx = _draw(len(source), B, batch_rng)
        h = source_enc.logits(source.x[idx])
        return source.x[idx], source.y[idx], h, ad.softmax(h)

    for it in range(1, cfg.step2_iters + 1):
        t0 = time.perf_counter()
        for _ in range(cfg.disc_steps):
            _, ys, hs, ps = source_batch()
            xt = target.x[_draw(len(target), B, batch_rng)]
            d_loss, grads = discriminator_objective(disc, hs, ps, ys, target_enc.logits(xt), cfg, noise_rng)
            _check_finite(d_loss, "discriminator", cfg, it)
            disc.apply_update(grads, disc_state)
        for _ in range(cfg.enc_steps):
            xs_mix = source.x[_draw(len(source), B, batch_rng)]
            xt = target.x[_draw(len(target), B, batch_rng)]
            _, _, hs, ps = source_batch()
            x_enc = compose_encoder_batch(xs_mix, xt, cfg.target_reg)
            e_loss, grads = encoder_objective(disc, target_enc, x_enc, hs, ps, cfg, noise_rng)
            _check_finite(e_loss, "encoder", cfg, it)
            target_enc.apply_update(grads, enc_state)
        row = {"iteration": it, "disc_loss": d_loss, "enc_loss": e_loss, "val_accuracy": None,
               "wall_ms": (time.perf_counter() - t0) * 1e3}
        if val is not None and cfg.val_every and it % cfg.val_every == 0:
            row["val_accuracy"] = infer(target_enc, val)[1]
        metrics.append(row)
        if callback is not None:
            callback(row)
    return AdaptResult(target_enc, disc, metrics)


def _check_finite(value, which, cfg, it):
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"{which} loss is {value} at iteration {it} (seed={cfg.seed}, "
            f"disc={cfg.disc_variant}, enc={cfg.enc_variant}); rerun with this seed to reproduce the batch")


# -- step 3 -----------------------------------------------------------------

def infer(encoder: EncoderModel, eval_set) -> tuple[np.ndarray, float | None]:
    """Argmax predictions on encoder logits, plus accuracy when labels exist."""
    if isinstance(eval_set, LabeledSet):
        preds = argmax_lowest(encoder.logits(eval_set.x))
        return preds, accuracy(preds, eval_set.y)
    return argmax_lowest(encoder.logits(eval_set)), None


def infer_discriminator(disc: DiscriminatorModel, encoder: EncoderModel, eval_set: LabeledSet):
    """Alternative prediction from the first K discriminator posteriors on clean logits."""
    out = discriminator_posteriors(disc, encoder.logits(eval_set.x), 1.0)
    preds = argmax_lowest(out.q[:, :disc.K])
    return preds, accuracy(preds, eval_set.y)


@dataclass
class BaggedModel:
    model_reg: EncoderModel
    model_noreg: EncoderModel

    def __post_init__(self):
        if self.model_reg.K != self.model_noreg.K:
            raise ConfigError("bagged models must share K")


def bag_weights(logits_reg, logits_noreg) -> tuple[np.ndarray, np.ndarray]:
    """Per-example weights proportional to each model's max softmax confidence."""
    c_reg = ad.softmax(np.asarray(logits_reg, dtype=np.float64)).max(axis=-1)
    c_noreg = ad.softmax(np.asarray(logits_noreg, dtype=np.float64)).max(axis=-1)
    total = c_reg + c_noreg
    return c_reg / total, c_noreg / total


def bagged_logits(bag: BaggedModel, x) -> np.ndarray:
    h_reg = bag.model_reg.logits(x)
    h_noreg = bag.model_noreg.logits(x)
    w_reg, w_noreg = bag_weights(h_reg, h_noreg)
    return w_reg[:, None] * h_reg + w_noreg[:, None] * h_noreg


def bagged_infer(bag: BaggedModel, eval_set) -> np.ndarray:
    x = eval_set.x if isinstance(eval_set, LabeledSet) else eval_set
    return argmax_lowest(bagged_logits(bag, x))


# -- whole procedure ----------------------------------------------------------

@dataclass
class ExperimentResult:
    source_encoder: EncoderModel
    target_encoder: EncoderModel
    discriminator: DiscriminatorModel
    source_only_accuracy: float
    final_accuracy: float
    val_accuracy: float | None
    metrics: list[dict]

    def summary(self) -> dict:
        return {"source_only_accuracy": self.source_only_accuracy,
                "final_accuracy": self.final_accuracy,
                "val_accuracy": self.val_accuracy}


def run_experiment(cfg: AdaptConfig, arch: ArchSpec, source: LabeledSet, target: LabeledSet,
                   eval_set: LabeledSet, source_enc: EncoderModel | None = None,
                   callback=None) -> ExperimentResult:
    """Pretrain (unless ``source_enc`` is given), adapt on a 95/5 target split, evaluate."""
    if source_enc is None:
        source_enc = pretrain_source(cfg, source, arch)
    split_seed = int(cfg.seeds()["split"].generate_state(1)[0])
    adapt_set, val_set = validation_split(target, cfg.val_fraction, split_seed)
    result = adapt_target(cfg, source_enc, source, adapt_set, val_set, arch.disc_hidden, callback)
    _, src_acc = infer(source_enc, eval_set)
    _, final = infer(result.target_encoder, eval_set)
    _, val_acc = infer(result.target_encoder, val_set)
    return ExperimentResult(source_enc, result.target_encoder, result.discriminator,
                            src_acc, final, val_acc, result.metrics)


def with_overrides(cfg: AdaptConfig, **kw) -> AdaptConfig:
    return replace(cfg, **kw)
