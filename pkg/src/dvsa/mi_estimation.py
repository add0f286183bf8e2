"""Attribute-level mutual information: pair sampling, critic, JS training loss, NWJ value."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .diff_core import (
    DegenerateInputError,
    OptimState,
    ParamStore,
    Tensor,
    as_tensor,
    concat,
    matmul,
    sgd_step,
)
from .semantic_space import AttributeSelection

log = logging.getLogger(__name__)

CRITIC_NAMES = ("V_W1", "V_b1", "V_W2", "V_b2")


class CriticParams:
    """Two-layer perceptron on the concatenated pair, stored under ``V_*`` slots."""

    def __init__(self, store: ParamStore):
        self.store = store
        missing = [n for n in CRITIC_NAMES if n not in store]
        if missing:
            raise KeyError(f"critic parameters missing from store: {missing}")

    @classmethod
    def init(cls, d_v: int, hidden: int, rng: np.random.Generator, store: ParamStore | None = None) -> "CriticParams":
        store = ParamStore() if store is None else store
        b_in, b_hid = 1.0 / math.sqrt(2 * d_v), 1.0 / math.sqrt(hidden)
        store.add("V_W1", rng.uniform(-b_in, b_in, size=(2 * d_v, hidden)))
        store.add("V_b1", rng.uniform(-b_in, b_in, size=(hidden,)))
        store.add("V_W2", rng.uniform(-b_hid, b_hid, size=(hidden, 1)))
        store.add("V_b2", rng.uniform(-b_hid, b_hid, size=(1,)))
        return cls(store)

    @staticmethod
    def names() -> tuple[str, ...]:
        return CRITIC_NAMES

    @property
    def hidden(self) -> int:
        return self.store["V_b1"].shape[0]


@dataclass
class PairBatch:
    pos_x: Tensor  # (P, d)
    pos_y: Tensor
    neg_x: Tensor  # (M, d)
    neg_y: Tensor

    def __post_init__(self):
        if self.pos_x.shape[0] == 0 or self.neg_x.shape[0] == 0:
            raise DegenerateInputError("pair batch needs at least one positive and one negative")


@dataclass(frozen=True)
class PairIndex:
    """Which (instance, attribute) rows form each pair; rematerialised after updates."""

    pos_anchor: np.ndarray  # (P, 2) rows of (instance, attribute)
    pos_other: np.ndarray
    neg_anchor: np.ndarray  # (M, 2)
    neg_other: np.ndarray

    def materialize(self, a_hat) -> PairBatch:
        a_hat = as_tensor(a_hat)

        def take(ix):
            return a_hat[ix[:, 0], ix[:, 1]]

        return PairBatch(take(self.pos_anchor), take(self.pos_other), take(self.neg_anchor), take(self.neg_other))


def build_pairs(
    batch_a_hat,
    selection: AttributeSelection,
    rng: np.random.Generator,
    neg_per_pos: int = 5,
) -> tuple[PairBatch, PairIndex]:
    """Same-attribute cross-instance positives and other-attribute negatives.

    For every selected attribute k and instance i the anchor is ``a_hat[i, k]``;
    its positive is ``a_hat[j, k]`` for a uniformly drawn j != i, and each of the
    ``neg_per_pos`` negatives is ``a_hat[j', k']`` with k' != k and j' anywhere
    in the batch.
    """
    B, K = as_tensor(batch_a_hat).shape[:2]
    if B < 2:
        raise DegenerateInputError("pair building needs a batch of at least 2 instances")
    sel = np.asarray(selection.selected, dtype=np.int64)
    if sel.size == 0:
        raise DegenerateInputError("attribute selection is empty")
    inst = np.repeat(np.arange(B), sel.size)
    attr = np.tile(sel, B)
    # uniform over the B-1 other instances
    other = rng.integers(0, B - 1, size=inst.size)
    other = other + (other >= inst)
    anchor = np.stack([inst, attr], axis=1)
    pos_other = np.stack([other, attr], axis=1)

    neg_anchor = np.repeat(anchor, neg_per_pos, axis=0)
    neg_inst = rng.integers(0, B, size=neg_anchor.shape[0])
    # uniform over the K-1 attributes other than the anchor's
    shift = rng.integers(0, K - 1, size=neg_anchor.shape[0])
    neg_attr = shift + (shift >= neg_anchor[:, 1])
    neg_other = np.stack([neg_inst, neg_attr], axis=1)

    index = PairIndex(anchor, pos_other, neg_anchor, neg_other)
    return index.materialize(batch_a_hat), index


def critic_value(x, y, params: CriticParams) -> Tensor:
    """Critic score for each row pair of x and y (vectors give a 0-d result)."""
    x, y = as_tensor(x), as_tensor(y)
    single = x.ndim == 1
    if single:
        x, y = x.reshape(1, -1), y.reshape(1, -1)
    s = params.store
    h = (matmul(concat([x, y], axis=-1), s["V_W1"]) + s["V_b1"]).relu()
    out = (matmul(h, s["V_W2"]) + s["V_b2"]).reshape(-1)
    return out.reshape(()) if single else out


def js_critic_loss(pairs: PairBatch, params: CriticParams) -> Tensor:
    """Negated Jensen-Shannon lower bound: mean softplus(-V+) + mean softplus(V-)."""
    v_pos = critic_value(pairs.pos_x, pairs.pos_y, params)
    v_neg = critic_value(pairs.neg_x, pairs.neg_y, params)
    return (-v_pos).softplus().mean() + v_neg.softplus().mean()


def nwj_mi_value(pairs: PairBatch, params: CriticParams, exp_clamp: float = 20.0) -> Tensor:
    """mean V(pos) - mean exp(V(neg)) + 1.

    Past ``exp_clamp`` the exponential continues as its tangent line, so the
    value stays finite while large negative scores are still penalised.
    """
    v_pos = critic_value(pairs.pos_x, pairs.pos_y, params)
    v_neg = critic_value(pairs.neg_x, pairs.neg_y, params)
    hits = int((v_neg.data > exp_clamp).sum())
    if hits:
        log.warning("NWJ exponent clamped at %g for %d negative pairs", exp_clamp, hits)
    tail = (v_neg - exp_clamp).relu() * math.exp(exp_clamp)
    return v_pos.mean() - (v_neg.clip_max(exp_clamp).exp() + tail).mean() + 1.0


def shuffled_pairs(x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> PairBatch:
    """Joint samples as positives, y permuted against x as negatives."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    perm = rng.permutation(len(y))
    return PairBatch(Tensor(x), Tensor(y), Tensor(x), Tensor(y[perm]))


def fit_critic(
    x: np.ndarray,
    y: np.ndarray,
    params: CriticParams,
    rng: np.random.Generator,
    steps: int = 2000,
    batch_size: int = 256,
    lr: float = 0.05,
    momentum: float = 0.9,
) -> list[float]:
    """Train a critic on samples of (x, y) with the JS objective; returns the loss trace."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    optim = OptimState(lr=lr, momentum=momentum)
    trace = []
    for _ in range(steps):
        idx = rng.choice(len(x), size=min(batch_size, len(x)), replace=False)
        pairs = shuffled_pairs(x[idx], y[idx], rng)
        loss = js_critic_loss(pairs, params)
        loss.backward()
        sgd_step(params.store, optim, CRITIC_NAMES)
        trace.append(loss.item())
    return trace
