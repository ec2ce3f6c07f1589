"""Classification and distillation losses with exact analytic gradients.

Every loss returns ``(loss, grad_wrt_its_trainable_logits_or_features)``
where the loss is a mean over rows.  All softmax paths subtract the row
max before exponentiation.
"""
from __future__ import annotations

import numpy as np

from ..errors import DataError, NumericalError, ParameterError, ShapeError


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    return tau


def log_softmax(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_temperature(v, tau: float) -> np.ndarray:
    """Temperature softmax ``exp(v_i/tau) / sum_k exp(v_k/tau)`` (rows for 2-D input)."""
    tau = _check_tau(tau)
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericalError("softmax input must be finite")
    return np.exp(log_softmax(v, tau))


def _as_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n_rows,):
        raise ShapeError(f"labels must be shape ({n_rows},), got {y.shape}")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes}), got range "
                        f"[{y.min()}, {y.max()}]")
    return y


def cross_entropy_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean ``-log softmax(logits)[label]`` and its gradient wrt logits."""
    logits = np.asarray(logits, dtype=np.float64)
    n, k = logits.shape
    y = _as_labels(labels, n, k)
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return float(loss), grad / n


def kl_distill_loss(teacher_logits, student_logits, tau: float) -> tuple[float, np.ndarray]:
    """Tempered distillation loss ``tau^2 * mean KL(s_tau(t) || s_tau(s))``.

    The gradient flows only to the student; the classic ``tau^2`` factor
    keeps its magnitude comparable to a cross-entropy gradient.
    """
    tau = _check_tau(tau)
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeError(f"teacher {t.shape} and student {s.shape} logits differ")
    n = t.shape[0]
    logp = log_softmax(t, tau)
    logq = log_softmax(s, tau)
    p = np.exp(logp)
    loss = tau * tau * (p * (logp - logq)).sum(axis=1).mean()
    grad = tau * (np.exp(logq) - p) / n
    return float(loss), grad


def ce_kl_distill_loss(teacher_logits, student_logits, labels, alpha: float,
                       tau: float) -> tuple[float, np.ndarray]:
    """Convex blend ``(1-alpha)*CE(student, labels) + alpha*tau^2*KL``."""
    alpha = float(alpha)
    if not (0.0 <= alpha <= 1.0):
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    kl_loss, kl_grad = kl_distill_loss(teacher_logits, student_logits, tau)
    if alpha == 1.0:
        return kl_loss, kl_grad
    ce_loss, ce_grad = cross_entropy_loss(student_logits, labels)
    loss = (1.0 - alpha) * ce_loss + alpha * kl_loss
    grad = (1.0 - alpha) * ce_grad + alpha * kl_grad
    return float(loss), grad


def cosine_distill_loss(teacher_feat, student_feat) -> tuple[float, np.ndarray]:
    """Mean over rows of ``1 - cos(teacher_row, student_row)``; grad wrt student."""
    t = np.asarray(teacher_feat, dtype=np.float64)
    s = np.asarray(student_feat, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeError(f"teacher {t.shape} and student {s.shape} features differ")
    n = t.shape[0]
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    sn = np.linalg.norm(s, axis=1, keepdims=True)
    if not (np.all(tn > 0) and np.all(sn > 0)):
        raise NumericalError("cosine distillation saw a zero-norm feature row")
    cos = (t * s).sum(axis=1, keepdims=True) / (tn * sn)
    loss = float((1.0 - cos).mean())
    grad = -(t / (tn * sn) - cos * s / (sn * sn)) / n
    return loss, grad
