"""Similarity losses, batch soft-target propagation and the distillation loss."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0
    tau: float = 4.0
    omega: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")
        _check_omega(self.omega)


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    normalized: bool = False


@dataclass
class SoftTargets:
    values: np.ndarray
    omega: float
    mode: str


def _check_omega(omega):
    if not 0.0 <= omega < 1.0:
        raise ContractError(f"omega must satisfy 0 <= omega < 1, got {omega}")


def _values(x):
    if isinstance(x, (SimilarityMatrix, SoftTargets)):
        return x.values
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def cosine_loss(a, b):
    """Batch mean of ``2 - 2 cos(a_i, b_i)``; lies in [0, 4]."""
    cos = T.tsum(T.elementwise_mul(T.l2_normalize(a), T.l2_normalize(b)), axis=-1)
    return T.mean(T.scalar_mul(T.sub(Tensor(np.ones(1, dtype=cos.dtype)), cos), 2.0))


def similarity_matrix(y):
    """Cosine affinities between detached features with the diagonal zeroed."""
    y = np.asarray(_values(y), dtype=np.float64)
    n = y.shape[0]
    if y.ndim != 2 or n < 2:
        raise ContractError(f"similarity needs at least 2 feature rows, got shape {y.shape}")
    y_hat = T.l2_normalize(Tensor(y, dtype=np.float64)).data
    s = y_hat @ y_hat.T
    np.fill_diagonal(s, 0.0)
    return SimilarityMatrix(s, normalized=False)


def normalize_similarity(s):
    """Row softmax over off-diagonal entries; the diagonal stays exactly 0."""
    v = np.asarray(_values(s), dtype=np.float64)
    n = v.shape[0]
    off = ~np.eye(n, dtype=bool)
    shifted = np.where(off, v, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(off, np.exp(shifted), 0.0)
    return SimilarityMatrix(e / e.sum(axis=1, keepdims=True), normalized=True)


def temperature_softmax(m, tau):
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    return T.softmax_last_dim(T.scalar_mul(m, 1.0 / tau))


def propagate_iterative(s_hat, a, omega, t):
    """``B_t = omega * S_hat @ B_{t-1} + (1 - omega) * A`` with ``B_0 = A``."""
    _check_omega(omega)
    if t < 1:
        raise ContractError(f"need at least one propagation step, got {t}")
    s = np.asarray(_values(s_hat), dtype=np.float64)
    a = np.asarray(_values(a), dtype=np.float64)
    b = a
    for _ in range(t):
        b = omega * (s @ b) + (1.0 - omega) * a
    return SoftTargets(b, omega, f"iterative({t})")


def propagate_closed_form(s_hat, a, omega):
    """Solve ``(I - omega * S_hat) B = (1 - omega) A``."""
    _check_omega(omega)
    s = np.asarray(_values(s_hat), dtype=np.float64)
    a = np.asarray(_values(a), dtype=np.float64)
    system = np.eye(s.shape[0]) - omega * s
    rhs = (1.0 - omega) * a
    try:
        b = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"soft-target solve failed: {exc}") from exc
    residual = np.abs(system @ b - rhs).max()
    if not np.all(np.isfinite(b)) or residual > 1e-8:
        raise NumericError(f"soft-target solve residual {residual:.3g} exceeds tolerance")
    return SoftTargets(b, omega, "closed_form")


def soft_targets(features, probs, omega, mode="closed_form", steps=1):
    s_hat = normalize_similarity(similarity_matrix(features))
    if mode == "closed_form":
        return propagate_closed_form(s_hat, probs, omega)
    if mode == "iterative":
        return propagate_iterative(s_hat, probs, omega, steps)
    raise ContractError(f"unknown propagation mode {mode!r}")


def kl_divergence(b, a):
    """Batch mean of ``KL(B_i || A_i)``, differentiable in ``a`` only.

    ``0 * ln 0`` counts as 0.
    """
    bv = np.asarray(_values(b), dtype=np.float64)
    rows = bv.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-6) or np.any(bv < -1e-12):
        raise ContractError("soft targets must be nonnegative rows summing to 1")
    bv = np.clip(bv, 0.0, None)
    a = a if isinstance(a, Tensor) else Tensor(a)
    n = bv.shape[0]
    positive = bv > 0
    entropy_term = np.where(positive, bv * np.log(np.where(positive, bv, 1.0)), 0.0).sum() / n
    cross = T.tsum(T.elementwise_mul(Tensor(bv.astype(a.dtype)), T.log(a)))
    return T.add(Tensor(np.asarray(entropy_term, dtype=a.dtype)), T.scalar_mul(cross, -1.0 / n))


def total_loss(l_cv, l_cm, l_skd, w):
    return T.add(T.add(l_cv, l_cm), T.scalar_mul(l_skd, w.lam * w.tau ** 2))
