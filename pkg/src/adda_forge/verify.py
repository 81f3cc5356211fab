"""Invariant battery behind ``adda-forge verify``.

Each check returns a :class:`CheckResult`; :func:`run_all` runs them in order.
The gradient checks push every loss through a tiny 4 -> 8 -> K encoder and a
K -> 16 -> head discriminator with dropout masks frozen by reseeding.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .checkpoint import load_checkpoint, save_checkpoint
from .kernels import FAMILIES, KernelSpec, mmd2_biased, mmd2_oracle
from .models import (ArchSpec, build_discriminator, build_encoder, clone_into_target,
                     zero_concat)
from .pipeline import (AdaptConfig, compose_encoder_batch, discriminator_objective,
                       encoder_objective, source_loss_and_grads)

GRAD_TOLERANCE = 1e-4

# one representative pairing per loss; the discriminator variant only matters for the head
DISC_LOSS_CASES = {"REC": "MMD_PQ", "ADDA": "INV", "MULTI": "MAX", "JOINT": "MAX"}
ENC_LOSS_CASES = {"MMD_PQ": "REC", "MMD_QQ": "REC", "INV": "ADDA", "MAX": "JOINT",
                  "FEAT": "JOINT", "PSEUDO": "JOINT"}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} {self.detail} ({self.seconds:.2f}s)"


def _timed(name, fn) -> CheckResult:
    t0 = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # report, keep going
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


def check_mmd_oracle(pairs: int = 200, seed: int = 0, tol: float = 1e-12):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for family in FAMILIES:
        spec = KernelSpec(family)
        for _ in range(pairs):
            n, m, d = rng.integers(1, 65), rng.integers(1, 65), rng.integers(1, 12)
            A = rng.dirichlet(np.ones(d), n)
            B = rng.dirichlet(np.ones(d), m)
            worst = max(worst, abs(mmd2_biased(spec, A, B) - mmd2_oracle(spec, A, B)))
    return worst < tol, f"max |diff| = {worst:.2e} over {pairs} pairs x {len(FAMILIES)} families"


def check_marginalization(rows: int = 1000, seed: int = 0, tol: float = 1e-12):
    rng = np.random.default_rng(seed)
    K = 5
    q_s = rng.dirichlet(np.ones(K + 1), rows)
    q_t = rng.dirichlet(np.ones(K + 1), rows)
    # source term with the task label summed out, plus the joint target term
    marginal = -np.log(q_s[:, :K].sum(axis=1)).mean() - np.log(q_t[:, K]).mean()
    adda, _ = L.disc_adda(q_s[:, :K].sum(axis=1), 1.0 - q_t[:, K])
    diff = abs(marginal - adda)
    return diff < tol, f"|joint marginal - binary| = {diff:.2e}"


def check_softmax_zero_concat(seed: int = 0):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((200, 6)) * 20
    p = ad.softmax(logits)
    sums = np.abs(p.sum(axis=1) - 1).max()
    shift = np.abs(ad.softmax(logits + rng.standard_normal((200, 1)) * 50) - p).max()
    zc = zero_concat(p)
    ok = (sums < 1e-12 and shift < 1e-12 and np.all(zc[:, -1] == 0)
          and np.array_equal(zc[:, :-1], p) and np.array_equal(zc.sum(axis=1), p.sum(axis=1)))
    return ok, f"row-sum err {sums:.1e}, shift err {shift:.1e}"


def check_checkpoint_round_trip():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        models = [build_encoder(ArchSpec(hidden=(8,)), 3, seed=1),
                  build_encoder(ArchSpec.digits_small(), 10, seed=2),
                  build_discriminator(3, (16,), "joint", seed=3)]
        for model in models:
            save_checkpoint(path, model)
            back, _ = load_checkpoint(path)
            if any(a.tobytes() != b.tobytes() for a, b in zip(model.params(), back.params())):
                return False, f"parameters changed for {model.stack!r}"
    return True, "encoders (mlp, digits-small) and discriminator bit-identical"


class _GradFixture:
    """Tiny frozen source encoder, target encoder and batches shared by the gradient checks."""

    def __init__(self, K: int = 3, batch: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        arch = ArchSpec(input_dim=4, hidden=(8,))
        self.K = K
        self.source_enc = build_encoder(arch, K, seed=seed + 1).freeze()
        self.target_enc = clone_into_target(self.source_enc)
        # move the target away from the source so gradients are not degenerate
        for p in self.target_enc.params():
            p += 0.3 * rng.standard_normal(p.shape)
        self.x_s = rng.standard_normal((batch, 4))
        self.x_t = rng.standard_normal((batch, 4)) * 1.5
        self.y_s = rng.integers(0, K, batch)
        self.h_s = self.source_enc.logits(self.x_s)
        self.p_s = ad.softmax(self.h_s)

    def cfg(self, disc_variant, enc_variant):
        # corruption on for every variant so frozen masks are exercised
        return AdaptConfig(disc_variant=disc_variant, enc_variant=enc_variant, z=0.7,
                           corrupt=True, l1_lambda=0.001, kernel=KernelSpec())

    def disc(self, cfg, seed=7):
        return build_discriminator(self.K, (16,), cfg.head, seed=seed, l1_lambda=cfg.l1_lambda)


def grad_check_source_ce(fixture: _GradFixture | None = None, h: float = 1e-5):
    """Finite-difference check of the supervised source loss w.r.t. encoder params."""
    fx = fixture or _GradFixture()
    enc = clone_into_target(fx.source_enc)
    return ad.finite_diff_check(lambda: source_loss_and_grads(enc, fx.x_s, fx.y_s), enc.params(), h)


def grad_check_disc_loss(variant: str, fixture: _GradFixture | None = None, h: float = 1e-5):
    """Finite-difference check of one discriminator loss w.r.t. discriminator params."""
    fx = fixture or _GradFixture()
    cfg = fx.cfg(variant, DISC_LOSS_CASES[variant])
    disc = fx.disc(cfg)
    h_t = fx.target_enc.logits(fx.x_t)

    def closure():
        return discriminator_objective(disc, fx.h_s, fx.p_s, fx.y_s, h_t, cfg, np.random.default_rng(11))
    return ad.finite_diff_check(closure, disc.params(), h)


def grad_check_enc_loss(variant: str, fixture: _GradFixture | None = None, h: float = 1e-5,
                        target_reg: bool = False):
    """Finite-difference check of one target-encoder loss w.r.t. target-encoder params."""
    fx = fixture or _GradFixture()
    cfg = fx.cfg(ENC_LOSS_CASES[variant], variant)
    disc = fx.disc(cfg)
    x_enc = compose_encoder_batch(fx.x_s, fx.x_t, target_reg)

    def closure():
        return encoder_objective(disc, fx.target_enc, x_enc, fx.h_s, fx.p_s, cfg, np.random.default_rng(13))
    return ad.finite_diff_check(closure, fx.target_enc.params(), h)


def gradient_checks(tolerance: float = GRAD_TOLERANCE) -> list[CheckResult]:
    fx = _GradFixture()
    out = [_timed("grad source-ce", lambda: _report(grad_check_source_ce(fx), tolerance))]
    for name in DISC_LOSS_CASES:
        out.append(_timed(f"grad disc-loss {name}", lambda n=name: _report(grad_check_disc_loss(n, fx), tolerance)))
    for name in ENC_LOSS_CASES:
        out.append(_timed(f"grad enc-loss {name}", lambda n=name: _report(grad_check_enc_loss(n, fx), tolerance)))
    return out


def _report(report: ad.GradCheckReport, tolerance: float):
    return report.max_rel_error < tolerance, f"max rel err {report.max_rel_error:.2e}"


def run_all() -> list[CheckResult]:
    results = [
        _timed("mmd oracle equivalence", check_mmd_oracle),
        _timed("marginalization identity", check_marginalization),
        _timed("softmax / zero-concat", check_softmax_zero_concat),
        _timed("checkpoint round-trip", check_checkpoint_round_trip),
    ]
    results.extend(gradient_checks())
    return results
