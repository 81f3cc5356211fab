"""Discriminator and target-encoder losses.

Every function returns ``(value, grads)`` where ``grads`` maps the name of each
differentiable argument to dL/d(argument). Posteriors are clamped below at
``LOG_FLOOR`` before taking logs; clamped entries receive zero gradient.

Discriminator side: ``disc_rec`` (denoising reconstruction), ``disc_adda``,
``disc_multi``, ``disc_joint``. Target-encoder side: ``tgt_domain`` (INV/MAX),
``tgt_mmd`` (P_S->Q_T and Q_S->Q_T), ``tgt_feat``, ``tgt_pseudo``.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .kernels import KernelSpec, mmd2_value_and_grad
from .models import argmax_lowest, zero_concat

LOG_FLOOR = 1e-12

DISC_VARIANTS = ("ADDA", "MULTI", "JOINT", "REC")
ENC_VARIANTS = ("INV", "MAX", "FEAT", "PSEUDO", "MMD_QQ", "MMD_PQ")


def _log(q):
    q = np.asarray(q, dtype=np.float64)
    return np.log(np.maximum(q, LOG_FLOOR))


def _dlog(q):
    q = np.asarray(q, dtype=np.float64)
    return np.where(q > LOG_FLOOR, 1.0 / np.maximum(q, LOG_FLOOR), 0.0)


def _labels(y, K):
    y = np.asarray(y)
    if y.ndim != 1 or np.any(y < 0) or np.any(y >= K):
        raise DomainError(f"labels must be integers in [0, {K})")
    return y.astype(np.intp)


def nll(q: np.ndarray, idx: np.ndarray):
    """Mean of -log q[i, idx[i]] and its gradient w.r.t. ``q``."""
    n = len(q)
    rows = np.arange(n)
    picked = q[rows, idx]
    grad = np.zeros_like(q, dtype=np.float64)
    grad[rows, idx] = -_dlog(picked) / n
    return float(-_log(picked).mean()), grad


def source_ce(p, y):
    """Cross-entropy of encoder posteriors ``p`` against labels ``y``."""
    p = np.asarray(p, dtype=np.float64)
    value, grad = nll(p, _labels(y, p.shape[1]))
    return value, {"p": grad}


def l1_penalty(weights, lam: float):
    if lam == 0:
        return 0.0, {"weights": [np.zeros_like(w) for w in weights]}
    value = lam * sum(np.abs(w).sum() for w in weights)
    return float(value), {"weights": [lam * np.sign(w) for w in weights]}


def disc_rec(p_hat_s, q_s, q_t, weights=(), lam: float = 0.0):
    """Reconstruction loss on corrupted source logits plus target-class loss.

    ``p_hat_s`` are zero-concatenated source encoder posteriors (constant).
    """
    p_hat_s = np.asarray(p_hat_s, dtype=np.float64)
    q_s = np.asarray(q_s, dtype=np.float64)
    q_t = np.asarray(q_t, dtype=np.float64)
    if p_hat_s.shape != q_s.shape or q_s.shape[1] != q_t.shape[1]:
        raise ShapeError(f"shape mismatch: p_hat_s {p_hat_s.shape}, q_s {q_s.shape}, q_t {q_t.shape}")
    K = q_s.shape[1] - 1
    src = float(-(p_hat_s[:, :K] * _log(q_s[:, :K])).sum(axis=1).mean())
    g_s = np.zeros_like(q_s)
    g_s[:, :K] = -p_hat_s[:, :K] * _dlog(q_s[:, :K]) / len(q_s)
    tgt, g_t = nll(q_t, np.full(len(q_t), K))
    reg, g_w = l1_penalty(list(weights), lam)
    return src + tgt + reg, {"q_s": g_s, "q_t": g_t, "weights": g_w["weights"]}


def tgt_mmd(variant: str, kernel: KernelSpec, q_t, p_s=None, q_s=None):
    """Squared MMD aligning target discriminator posteriors ``q_t`` to a fixed reference.

    ``MMD_PQ`` uses zero-concatenated source encoder posteriors ``p_s``; ``MMD_QQ``
    uses source discriminator posteriors ``q_s``. The reference set carries no gradient.
    """
    if variant == "MMD_PQ":
        if p_s is None:
            raise ConfigError("MMD_PQ needs source encoder posteriors p_s")
        A = zero_concat(p_s)
    elif variant == "MMD_QQ":
        if q_s is None:
            raise ConfigError("MMD_QQ needs source discriminator posteriors q_s")
        A = np.asarray(q_s, dtype=np.float64)
    else:
        raise ConfigError(f"not an MMD variant: {variant!r}")
    A = np.atleast_2d(A)
    B = np.atleast_2d(np.asarray(q_t, dtype=np.float64))
    value, grad = mmd2_value_and_grad(kernel, A, B)
    return value, {"q_t": grad}


def disc_adda(q1_s, q1_t):
    """Binary domain loss; ``q1`` is the probability of the source domain."""
    q1_s = np.asarray(q1_s, dtype=np.float64)
    q1_t = np.asarray(q1_t, dtype=np.float64)
    value = -_log(q1_s).mean() - _log(1.0 - q1_t).mean()
    return float(value), {"q1_s": -_dlog(q1_s) / q1_s.size,
                          "q1_t": _dlog(1.0 - q1_t) / q1_t.size}


def tgt_domain(variant: str, q1_t):
    """Inverted-label (INV) or minimax (MAX) encoder loss on source probabilities ``q1_t``."""
    q1_t = np.asarray(q1_t, dtype=np.float64)
    n = q1_t.size
    if variant == "INV":
        return float(-_log(q1_t).mean()), {"q1_t": -_dlog(q1_t) / n}
    if variant == "MAX":
        return float(_log(1.0 - q1_t).mean()), {"q1_t": -_dlog(1.0 - q1_t) / n}
    raise ConfigError(f"not a domain-probability encoder loss: {variant!r}")


def disc_multi(p_task, y_s, q1_s, q1_t):
    """Task cross-entropy on source rows plus the binary domain loss."""
    p_task = np.asarray(p_task, dtype=np.float64)
    task, g_task = nll(p_task, _labels(y_s, p_task.shape[1]))
    dom, g = disc_adda(q1_s, q1_t)
    return task + dom, {"p_task": g_task, **g}


def disc_joint(q_s, y_s, q_t):
    """Single (K+1)-way head: source rows labelled by task, target rows by class K+1."""
    q_s = np.asarray(q_s, dtype=np.float64)
    q_t = np.asarray(q_t, dtype=np.float64)
    K = q_s.shape[1] - 1
    src, g_s = nll(q_s, _labels(y_s, K))
    tgt, g_t = nll(q_t, np.full(len(q_t), K))
    return src + tgt, {"q_s": g_s, "q_t": g_t}


def tgt_feat(f_s, f_t):
    """Squared distance between mean discriminator features of the two batches."""
    f_s = np.asarray(f_s, dtype=np.float64)
    f_t = np.asarray(f_t, dtype=np.float64)
    if f_s.shape[1:] != f_t.shape[1:]:
        raise ShapeError(f"feature widths differ: {f_s.shape} vs {f_t.shape}")
    diff = f_s.mean(axis=0) - f_t.mean(axis=0)
    value = float(diff @ diff)
    g_s = np.broadcast_to(2.0 * diff / len(f_s), f_s.shape).copy()
    g_t = np.broadcast_to(-2.0 * diff / len(f_t), f_t.shape).copy()
    return value, {"f_s": g_s, "f_t": g_t}


def pseudo_labels(h_d) -> np.ndarray:
    """Argmax over the first K discriminator logits (lowest index on ties)."""
    h_d = np.asarray(h_d)
    return argmax_lowest(h_d[:, :-1])


def tgt_pseudo(h_d, q_t):
    q_t = np.asarray(q_t, dtype=np.float64)
    value, grad = nll(q_t, pseudo_labels(h_d))
    return value, {"q_t": grad}
