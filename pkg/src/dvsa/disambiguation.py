"""Soft-label disambiguation and the adaptive cross-entropy losses."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .diff_core import DegenerateInputError, ShapeError, Tensor, as_tensor, cosine_matrix, softmax_rows


@dataclass(frozen=True)
class SoftLabelState:
    U: np.ndarray  # (N, Q) EMA of visual predictions
    l_tilde: np.ndarray  # (N, Q) soft labels, supported on candidates
    epoch: int = 0
    alpha: float = 0.5

    @classmethod
    def init(cls, candidates, alpha: float = 0.5) -> "SoftLabelState":
        """Uniform over each candidate set."""
        c = np.asarray(candidates, dtype=np.float64)
        sizes = c.sum(axis=1, keepdims=True)
        empty = np.flatnonzero(sizes[:, 0] == 0)
        if empty.size:
            raise DegenerateInputError(f"instance {int(empty[0])} has an empty candidate set")
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        U = c / sizes
        return cls(U=U, l_tilde=U.copy(), epoch=0, alpha=alpha)


@dataclass
class PredictionMatrices:
    M: Tensor
    M_sem: Tensor | None
    omega: np.ndarray | Tensor | None
    tau: float


def visual_predictions(v, prototypes, tau: float) -> Tensor:
    """Row-wise softmax of tau-scaled cosine similarity to every class prototype."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return softmax_rows(cosine_matrix(v, prototypes) * tau)


def update_soft_labels(state: SoftLabelState, M, candidates) -> SoftLabelState:
    """One EMA step of the accumulator, then renormalise over each candidate set."""
    M = np.asarray(getattr(M, "data", M), dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    if M.shape != state.U.shape or c.shape != M.shape:
        raise ShapeError(f"shape mismatch: U {state.U.shape}, M {M.shape}, candidates {c.shape}")
    U = (1.0 - state.alpha) * state.U + state.alpha * M
    masked = U * c
    mass = masked.sum(axis=1, keepdims=True)
    bad = np.flatnonzero(~(mass[:, 0] > 0))
    if bad.size:
        raise DegenerateInputError(f"instance {int(bad[0])}: accumulator has no mass on its candidates")
    return replace(state, U=U, l_tilde=masked / mass, epoch=state.epoch + 1)


def correction_factor(v_hat_pooled, prototypes) -> Tensor:
    """Softmax over classes of plain cosine similarity (no temperature)."""
    return softmax_rows(cosine_matrix(v_hat_pooled, prototypes))


def _reduce(per_instance: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return per_instance.sum()
    if reduction == "mean":
        return per_instance.mean()
    raise ValueError(f"unknown loss reduction {reduction!r}")


def visual_loss(M, l_tilde, omega, reduction: str = "sum") -> Tensor:
    """-sum (1 + omega) * l_tilde * log M over instances and classes."""
    M, l_tilde, omega = as_tensor(M), as_tensor(l_tilde), as_tensor(omega)
    if not (M.shape == l_tilde.shape == omega.shape):
        raise ShapeError(f"visual_loss shapes differ: {M.shape}, {l_tilde.shape}, {omega.shape}")
    weight = (omega + 1.0) * l_tilde
    return _reduce(-(weight * M.log()).sum(axis=-1), reduction)


def semantic_confidence(a_hat, prototypes, tau: float) -> Tensor:
    """Class confidences from refined attributes, mean-pooled over the attribute axis."""
    a_hat = as_tensor(a_hat)
    pooled = a_hat.mean(axis=-2) if a_hat.ndim == 3 else a_hat
    return softmax_rows(cosine_matrix(pooled, prototypes) * tau)


def semantic_loss(M_sem, l_tilde, reduction: str = "sum") -> Tensor:
    """-sum l_tilde * log M_sem."""
    M_sem, l_tilde = as_tensor(M_sem), as_tensor(l_tilde)
    if M_sem.shape != l_tilde.shape:
        raise ShapeError(f"semantic_loss shapes differ: {M_sem.shape}, {l_tilde.shape}")
    return _reduce(-(l_tilde * M_sem.log()).sum(axis=-1), reduction)


def disambiguation_accuracy(l_tilde: np.ndarray, true_labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(l_tilde, axis=1) == np.asarray(true_labels)))
