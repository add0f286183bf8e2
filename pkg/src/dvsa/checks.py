"""Finite-difference check of the full joint loss on a micro-batch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diff_core import GradCheckReport, Tensor, grad_check
from .disambiguation import SoftLabelState
from .mi_estimation import PairIndex
from .semantic_space import SemanticSpace
from .trainer import DVSAModel, TrainConfig


@dataclass
class MicroProblem:
    model: DVSAModel
    features: np.ndarray
    l_tilde: np.ndarray
    omega: np.ndarray | None  # None: recomputed (and differentiated when cfg.omega_grad) on every call
    pairs: PairIndex

    def loss(self, store=None) -> Tensor:
        return self.model.forward(self.features, self.l_tilde, self.pairs, omega=self.omega).total


def micro_problem(
    seed: int = 0, N: int = 4, Q: int = 6, K: int = 8, D: int = 4, d_v: int = 16, d: int = 8, d_w2v: int = 5,
    freeze_omega: bool = True, **cfg_overrides,
) -> MicroProblem:
    """Random micro-batch with l_tilde and MI pairs (and by default omega) frozen at the initial parameters."""
    rng = np.random.default_rng(seed)
    semantic = SemanticSpace(S=rng.uniform(0.05, 1.0, (Q, K)), attr_embed=rng.standard_normal((K, d_w2v)))
    cfg = TrainConfig(seed=seed, d=d, batch_size=N, mi_hidden_width=16, **cfg_overrides)
    model = DVSAModel(semantic, np.arange(Q), d_v, cfg)
    features = rng.standard_normal((N, D, d_v))
    labels = rng.integers(0, Q, N)
    cands = (rng.random((N, Q)) < 0.4).astype(float)
    cands[np.arange(N), labels] = 1.0
    # a non-uniform soft-label state supported on the candidates
    l_tilde = cands * rng.uniform(0.1, 1.0, (N, Q))
    l_tilde /= l_tilde.sum(axis=1, keepdims=True)
    SoftLabelState.init(cands)  # validates the candidate sets

    a_hat, _ = model.attend(Tensor(features))
    pairs = model.sample_pairs(a_hat, rng)
    omega = model.forward(features, l_tilde, pairs).omega if freeze_omega else None
    return MicroProblem(model, features, l_tilde, omega, pairs)


def joint_loss_grad_check(
    seed: int = 0, tol: float = 1e-4, eps: float = 1e-6, omega_grad: bool = False
) -> GradCheckReport:
    """With ``omega_grad`` the correction factor stays live, so the attribute-to-visual block is checked too."""
    prob = micro_problem(seed, freeze_omega=not omega_grad, omega_grad=omega_grad)
    return grad_check(prob.loss, prob.model.store, eps=eps, tol=tol)
