"""Adaptive-margin contrastive loss for sequences of embeddings.

Adjacent timesteps ``(t, t+1)`` are positives; every other step of the same
sequence is a negative. The eMargin variant first labels each pair of raw
input vectors as similar (0) or dissimilar (1) by thresholding their cosine
similarity, then reshapes the embedding similarity matrix ``M`` with

    M_margin = 0.5 * (1 - Y) * M**2 + 0.5 * Y * max(0, margin - M)**2

before the softmax. The denominator of each term runs over ``k != t, t+1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, DomainError

ADJACENT_ONLY = "adjacent_only"
PAIRWISE = "pairwise"


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    threshold: float = 0.4
    margin: float = 5.0
    pseudo_label_scope: str = PAIRWISE
    cosine_epsilon: float = 1e-12
    # debug switch: False passes M through untouched (plain InfoNCE)
    transform: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if not self.margin > 0:
            raise ContractError(f"margin must be positive, got {self.margin}")
        if not self.cosine_epsilon > 0:
            raise ContractError(f"cosine_epsilon must be positive, got {self.cosine_epsilon}")
        if self.pseudo_label_scope not in (ADJACENT_ONLY, PAIRWISE):
            raise ContractError(f"unknown pseudo_label_scope {self.pseudo_label_scope!r}")


@dataclass(frozen=True)
class PseudoLabelMatrix:
    """Binary T x T labels; ``defined`` is False where raw M passes through."""

    values: np.ndarray
    defined: np.ndarray
    scope: str


def cosine_sim(u, v, epsilon: float = 1e-12) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"cosine_sim: shapes {u.shape} and {v.shape} differ")
    nu = max(float(np.linalg.norm(u)), epsilon)
    nv = max(float(np.linalg.norm(v)), epsilon)
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def data_cosine_matrix(X: np.ndarray, epsilon: float = 1e-12) -> np.ndarray:
    """Non-differentiable T x T cosine matrix of raw data rows."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(X, axis=1), epsilon)
    return np.clip((X @ X.T) / np.outer(norms, norms), -1.0, 1.0)


def pseudo_labels(X: np.ndarray, cfg: LossConfig) -> PseudoLabelMatrix:
    """Threshold data-space cosine similarity: 0 if sim > threshold else 1."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DomainError(f"pseudo_labels: need a T x D array with T >= 2, got {X.shape}")
    T = X.shape[0]
    sim = data_cosine_matrix(X, cfg.cosine_epsilon)
    labels = np.where(sim > cfg.threshold, 0.0, 1.0)
    if cfg.pseudo_label_scope == PAIRWISE:
        defined = np.ones((T, T), dtype=bool)
    else:
        defined = np.zeros((T, T), dtype=bool)
        t = np.arange(T - 1)
        defined[t, t + 1] = True
        defined[t + 1, t] = True
        labels = np.where(defined, labels, 0.0)
    return PseudoLabelMatrix(labels, defined, cfg.pseudo_label_scope)


def pairwise_cosine_matrix(Z: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Differentiable T x T cosine similarity of embedding rows."""
    Z = Z if isinstance(Z, Tensor) else Tensor(Z)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise DomainError(f"pairwise_cosine_matrix: need T x d with T >= 2, got {Z.shape}")
    T = Z.shape[0]
    dots = ad.matmul(Z, Z.T)
    norms = ad.clamp_min(ad.sqrt(ad.sum_(Z * Z, axis=1)), epsilon)
    col = ad.reshape(norms, (T, 1))
    scale = ad.matmul(col, col.T)
    return ad.clip(dots / scale, -1.0, 1.0)


def margin_transform(M: Tensor, Y: PseudoLabelMatrix | np.ndarray, margin: float) -> Tensor:
    """Apply the two-branch margin transform elementwise.

    Entries where the labels are undefined keep their raw value.
    """
    M = M if isinstance(M, Tensor) else Tensor(M)
    if isinstance(Y, PseudoLabelMatrix):
        labels, defined = Y.values, Y.defined
    else:
        labels = np.asarray(Y, dtype=np.float64)
        defined = np.ones(labels.shape, dtype=bool)
    if labels.shape != M.shape:
        raise DimensionError(f"margin_transform: labels {labels.shape} vs M {M.shape}")
    similar = Tensor(np.where(defined, 1.0 - labels, 0.0))
    dissimilar = Tensor(np.where(defined, labels, 0.0))
    hinge = ad.clamp_floor_zero(margin - M)
    out = 0.5 * (similar * (M * M)) + 0.5 * (dissimilar * (hinge * hinge))
    if not defined.all():
        out = out + Tensor((~defined).astype(np.float64)) * M
    return out


def _positive_and_mask(T: int) -> tuple[tuple[np.ndarray, np.ndarray], np.ndarray]:
    rows = np.arange(T - 1)
    mask = np.ones((T - 1, T), dtype=bool)
    mask[rows, rows] = False
    mask[rows, rows + 1] = False
    return (rows, rows + 1), mask


def infonce_terms(S: Tensor, temperature: float) -> Tensor:
    """Per-anchor losses ``-log(exp(S[t,t+1]/tau) / sum_{k != t,t+1} exp(S[t,k]/tau))``.

    Returns a vector of length T - 1.
    """
    S = S if isinstance(S, Tensor) else Tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"infonce_terms: expected a square matrix, got {S.shape}")
    T = S.shape[0]
    if T < 3:
        raise DomainError(f"infonce needs T >= 3 so the denominator is non-empty, got T={T}")
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    logits = S / temperature
    pos_idx, mask = _positive_and_mask(T)
    positive = ad.index(logits, pos_idx)
    denom = ad.log_sum_exp(ad.index(logits, slice(0, T - 1)), axis=1, mask=mask)
    return denom - positive


def infonce(row, positive_index: int, temperature: float) -> Tensor:
    """Single loss term for anchor row ``t = positive_index - 1``."""
    row = row if isinstance(row, Tensor) else Tensor(row)
    T = row.shape[0]
    if T < 3:
        raise DomainError(f"infonce needs T >= 3 so the denominator is non-empty, got T={T}")
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    t = positive_index - 1
    if not 0 <= t < T - 1:
        raise ContractError(f"positive_index {positive_index} out of range for length {T}")
    logits = row / temperature
    mask = np.ones(T, dtype=bool)
    mask[[t, t + 1]] = False
    return ad.log_sum_exp(logits, axis=0, mask=mask) - ad.index(logits, t + 1)


def _check_batch(Z: Tensor) -> tuple[int, int]:
    if Z.ndim != 3:
        raise DimensionError(f"expected embeddings of shape B x T x d, got {Z.shape}")
    B, T = Z.shape[0], Z.shape[1]
    if B < 1:
        raise DomainError("empty batch")
    if T < 3:
        raise DomainError(f"infonce needs T >= 3 so the denominator is non-empty, got T={T}")
    return B, T


def emargin_loss(X: np.ndarray, Z: Tensor, cfg: LossConfig) -> Tensor:
    """Mean adaptive-margin contrastive loss over anchors and sequences.

    ``X`` holds the raw inputs (B x T x D) used for pseudo-labels and ``Z`` the
    embeddings (B x T x d). Negatives come from the same sequence only.
    """
    Z = Z if isinstance(Z, Tensor) else Tensor(Z)
    X = np.asarray(X, dtype=np.float64)
    B, T = _check_batch(Z)
    if X.ndim != 3 or X.shape[:2] != (B, T):
        raise DimensionError(f"emargin_loss: X {X.shape} does not match Z {Z.shape}")
    total = None
    for b in range(B):
        M = pairwise_cosine_matrix(ad.index(Z, b), cfg.cosine_epsilon)
        if cfg.transform:
            M = margin_transform(M, pseudo_labels(X[b], cfg), cfg.margin)
        part = ad.sum_(infonce_terms(M, cfg.temperature))
        total = part if total is None else total + part
    return total / float(B * (T - 1))


def plain_infonce_loss(Z: Tensor, temperature: float, cosine_epsilon: float = 1e-12) -> Tensor:
    """The untransformed baseline: InfoNCE directly on cosine similarities."""
    Z = Z if isinstance(Z, Tensor) else Tensor(Z)
    B, T = _check_batch(Z)
    total = None
    for b in range(B):
        M = pairwise_cosine_matrix(ad.index(Z, b), cosine_epsilon)
        part = ad.sum_(infonce_terms(M, temperature))
        total = part if total is None else total + part
    return total / float(B * (T - 1))

