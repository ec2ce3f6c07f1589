"""Convex linear probing and the information relations built on it.

A probe is a multinomial-logistic classifier trained on frozen features
by full-batch gradient descent with Armijo backtracking (trial step 1.0,
shrink 0.5, sufficient-decrease constant 1e-4; the next trial step warms
up to twice the last accepted step, capped at 1.0).  The objective is

    mean softmax cross-entropy + (l2/2) * ||W||^2

with the bias unpenalized, so the achieved value is the reported probing
cost.  Because the objective is convex, the optimum is unique up to
solver slack, which is what the information relations lean on.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core_nn.layers import as_feature_matrix
from .core_nn.losses import log_softmax
from .errors import DataError, FormatError, ParameterError, ShapeError
from .rng import SplitMix64

RRFM_MAGIC = b"RRFM"


@dataclass(frozen=True)
class ProbeConfig:
    l2: float = 0.0
    max_iters: int = 5000
    grad_tol: float = 1e-6
    standardize: bool = False

    def __post_init__(self):
        if self.l2 < 0:
            raise ParameterError(f"l2 must be nonnegative, got {self.l2}")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be positive")
        if self.grad_tol <= 0:
            raise ParameterError("grad_tol must be positive")


@dataclass
class ProbeResult:
    weights: np.ndarray        # (n_classes, n_features), applies to raw features
    bias: np.ndarray           # (n_classes,)
    cost: float                # achieved regularized objective
    train_accuracy: float
    eval_accuracy: float
    converged: bool

    def logits(self, features) -> np.ndarray:
        features = as_feature_matrix(features)
        return features @ self.weights.T + self.bias

    def predict(self, features) -> np.ndarray:
        return self.logits(features).argmax(axis=1)


@dataclass(frozen=True)
class InfoVerdict:
    relation: str              # contains_new_info | contains_all_info | equivalent
    cost_phi1: float
    cost_phi2: float
    cost_union: float
    margin: float


def _labels_and_classes(labels, n_rows: int, n_classes: int | None) -> tuple[np.ndarray, int]:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n_rows,):
        raise ShapeError(f"labels must be shape ({n_rows},), got {y.shape}")
    if y.min() < 0:
        raise DataError("labels must be nonnegative")
    k = int(y.max()) + 1 if n_classes is None else int(n_classes)
    if y.max() >= k:
        raise DataError(f"label {y.max()} outside [0, {k})")
    return y, k


def _objective(W, b, X, Y_onehot, y, l2):
    logits = X @ W.T + b
    logp = log_softmax(logits)
    n = X.shape[0]
    data = -logp[np.arange(n), y].mean()
    reg = 0.5 * l2 * float((W * W).sum())
    # gradient
    P = np.exp(logp)
    D = (P - Y_onehot) / n
    gW = D.T @ X + l2 * W
    gb = D.sum(axis=0)
    return data + reg, gW, gb


def fit_probe(
    features,
    labels,
    config: ProbeConfig,
    rng: SplitMix64 | None = None,
    eval_features=None,
    eval_labels=None,
    n_classes: int | None = None,
) -> ProbeResult:
    """Fit the optimal linear probe on frozen features.

    ``rng`` seeds a small random initialization (used by the convexity
    restart checks); without it the solver starts from zero, which keeps
    the fit fully deterministic.  ``eval_*`` give held-out accuracy; when
    absent the training set is scored.  With ``standardize`` the solver
    works on per-feature standardized columns (std floor 1e-8) and the
    returned weights/bias are folded back to raw feature space.
    """
    X = as_feature_matrix(features, "features")
    n, d = X.shape
    y, k = _labels_and_classes(labels, n, n_classes)

    if config.standardize:
        mu = X.mean(axis=0)
        sd = np.maximum(X.std(axis=0), 1e-8)
        Xs = (X - mu) / sd
    else:
        mu = np.zeros(d)
        sd = np.ones(d)
        Xs = X

    Y = np.zeros((n, k))
    Y[np.arange(n), y] = 1.0

    if rng is None:
        W = np.zeros((k, d))
        b = np.zeros(k)
    else:
        W = 0.01 * rng.normal(k * d).reshape(k, d)
        b = np.zeros(k)

    f, gW, gb = _objective(W, b, Xs, Y, y, config.l2)
    step = 1.0
    converged = False
    for _ in range(config.max_iters):
        gnorm2 = float((gW * gW).sum() + (gb * gb).sum())
        if np.sqrt(gnorm2) <= config.grad_tol:
            converged = True
            break
        t = step
        while True:
            W_new = W - t * gW
            b_new = b - t * gb
            f_new, gW_new, gb_new = _objective(W_new, b_new, Xs, Y, y, config.l2)
            if f_new <= f - 1e-4 * t * gnorm2:
                break
            t *= 0.5
            if t < 1e-20:
                break
        if t < 1e-20:
            break
        W, b, f, gW, gb = W_new, b_new, f_new, gW_new, gb_new
        step = min(1.0, 2.0 * t)
    else:
        gnorm2 = float((gW * gW).sum() + (gb * gb).sum())
        converged = np.sqrt(gnorm2) <= config.grad_tol

    # fold standardization back into raw-space parameters
    W_raw = W / sd
    b_raw = b - W_raw @ mu

    train_pred = (Xs @ W.T + b).argmax(axis=1)
    train_acc = float((train_pred == y).mean())
    if eval_features is not None:
        Xe = as_feature_matrix(eval_features, "eval_features")
        ye, _ = _labels_and_classes(eval_labels, Xe.shape[0], k)
        eval_acc = float(((Xe @ W_raw.T + b_raw).argmax(axis=1) == ye).mean())
    else:
        eval_acc = train_acc
    return ProbeResult(W_raw, b_raw, float(f), train_acc, eval_acc, converged)


def optimal_cost(features, labels, config: ProbeConfig, n_classes: int | None = None) -> float:
    """Achieved probing cost of the optimal linear classifier (deterministic)."""
    return fit_probe(features, labels, config, n_classes=n_classes).cost


def union_cost(phi1, phi2, labels, config: ProbeConfig) -> tuple[float, float, float]:
    """Probing costs ``(c1, c2, c_union)`` with the union as column concatenation."""
    X1 = as_feature_matrix(phi1, "phi1")
    X2 = as_feature_matrix(phi2, "phi2")
    if X1.shape[0] != X2.shape[0]:
        raise ShapeError(f"row counts differ: {X1.shape[0]} vs {X2.shape[0]}")
    c1 = optimal_cost(X1, labels, config)
    c2 = optimal_cost(X2, labels, config)
    c_union = optimal_cost(np.hstack([X1, X2]), labels, config)
    return c1, c2, c_union


def classify_information(phi1, phi2, labels, config: ProbeConfig,
                         margin: float = 0.01) -> InfoVerdict:
    """Decide how much linearly exploitable label information phi1 adds to phi2.

    The margin absorbs finite-sample solver noise: the union beating phi2
    by more than the margin reads as new information, agreement within
    the margin as phi2 already containing everything, and three-way
    agreement as equivalent information.
    """
    if margin < 0:
        raise ParameterError("margin must be nonnegative")
    c1, c2, c_union = union_cost(phi1, phi2, labels, config)
    if abs(c_union - c2) <= margin:
        relation = "equivalent" if abs(c_union - c1) <= margin else "contains_all_info"
    elif c_union < c2 - margin:
        relation = "contains_new_info"
    else:
        # union worse than phi2 beyond the margin: solver slack, treat as no new info
        relation = "contains_all_info"
    return InfoVerdict(relation, c1, c2, c_union, margin)


def mixture_cost(probe1: ProbeResult, probe2: ProbeResult, lam: float,
                 phi1, phi2, labels) -> float:
    """Unregularized expected loss of ``lam*f1 + (1-lam)*f2``."""
    if not (0.0 <= lam <= 1.0):
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    X1 = as_feature_matrix(phi1, "phi1")
    X2 = as_feature_matrix(phi2, "phi2")
    if X1.shape[0] != X2.shape[0]:
        raise ShapeError("phi1 and phi2 must have equal row counts")
    logits = lam * probe1.logits(X1) + (1.0 - lam) * probe2.logits(X2)
    n = logits.shape[0]
    y, k = _labels_and_classes(labels, n, logits.shape[1])
    logp = log_softmax(logits)
    return float(-logp[np.arange(n), y].mean())


# ---------------------------------------------------------------------------
# RRFM on-disk format: magic "RRFM", u32 rows, u32 cols, row-major f64
# entries, u32 label count, i32 labels.  Little-endian.

def feature_matrix_to_bytes(X: np.ndarray, labels) -> bytes:
    X = as_feature_matrix(X)
    y = np.asarray(labels, dtype=np.int32)
    out = [RRFM_MAGIC, struct.pack("<II", X.shape[0], X.shape[1])]
    out.append(np.ascontiguousarray(X, dtype="<f8").tobytes())
    out.append(struct.pack("<I", y.size))
    out.append(np.ascontiguousarray(y, dtype="<i4").tobytes())
    return b"".join(out)


def feature_matrix_from_bytes(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if buf[:4] != RRFM_MAGIC:
        raise FormatError("bad magic: not a feature-matrix file")
    if len(buf) < 12:
        raise FormatError("truncated feature-matrix header")
    rows, cols = struct.unpack_from("<II", buf, 4)
    off = 12
    need = 8 * rows * cols
    if off + need + 4 > len(buf):
        raise FormatError("truncated feature payload")
    X = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
    off += need
    (n_labels,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + 4 * n_labels > len(buf):
        raise FormatError("truncated label payload")
    y = np.frombuffer(buf, dtype="<i4", count=n_labels, offset=off)
    return X.copy(), y.astype(np.int64)


def save_feature_matrix(path, X, labels) -> None:
    with open(path, "wb") as f:
        f.write(feature_matrix_to_bytes(X, labels))


def load_feature_matrix(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        return feature_matrix_from_bytes(f.read())
