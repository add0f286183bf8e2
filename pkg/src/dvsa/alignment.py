"""Bidirectional visual/attribute attention and class prototype embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diff_core import ParamStore, ShapeError, Tensor, as_tensor, matmul, softmax_rows

VTA_NAMES = ("W_Q1", "W_K1", "W_V1")
ATV_NAMES = ("W_Q2", "W_K2", "W_V2")


def _uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class AlignmentParams:
    """View over the alignment slots of a ParamStore.

    With a shared output projection both blocks read ``W_O``; otherwise the
    attribute-to-visual block uses its own ``W_O2``.
    """

    def __init__(self, store: ParamStore, share_output_projection: bool = True):
        self.store = store
        self.share_output_projection = share_output_projection
        missing = [n for n in self.names() if n not in store]
        if missing:
            raise KeyError(f"alignment parameters missing from store: {missing}")

    @classmethod
    def init(
        cls,
        d_w2v: int,
        d_v: int,
        d: int,
        K: int,
        rng: np.random.Generator,
        store: ParamStore | None = None,
        share_output_projection: bool = True,
    ) -> "AlignmentParams":
        if d < 1:
            raise ValueError(f"attention width must be >= 1, got {d}")
        store = ParamStore() if store is None else store
        shapes = {
            "W_Q1": (d_w2v, d),
            "W_K1": (d_v, d),
            "W_V1": (d_v, d),
            "W_Q2": (d_v, d),
            "W_K2": (d_v, d),
            "W_V2": (d_v, d),
            "W_O": (d, d_v),
            "W_p": (K, d_v),
        }
        if not share_output_projection:
            shapes["W_O2"] = (d, d_v)
        for name, shape in shapes.items():
            store.add(name, _uniform_init(rng, shape[0], shape))
        return cls(store, share_output_projection)

    def names(self) -> tuple[str, ...]:
        extra = () if self.share_output_projection else ("W_O2",)
        return VTA_NAMES + ATV_NAMES + ("W_O", "W_p") + extra

    def __getattr__(self, name: str) -> Tensor:
        if name.startswith("W_"):
            return self.store[name]
        raise AttributeError(name)

    @property
    def W_O_atv(self) -> Tensor:
        return self.store["W_O"] if self.share_output_projection else self.store["W_O2"]

    @property
    def d(self) -> int:
        return self.store["W_Q1"].shape[1]


@dataclass
class AlignedInstance:
    a_hat: Tensor  # (..., K, d_v)
    v_hat: Tensor  # (..., D, d_v)
    vta_attn: np.ndarray  # (..., K, D)
    atv_attn: np.ndarray  # (..., D, K)


def _check_last(x: Tensor, width: int, what: str) -> None:
    if x.ndim < 2 or x.shape[-1] != width:
        raise ShapeError(f"{what}: expected last dimension {width}, got shape {x.shape}")


def vta_forward(a, f, params: AlignmentParams) -> tuple[Tensor, np.ndarray]:
    """Attributes attend over regions: returns refined attributes and the (K, D) map.

    ``f`` may carry leading batch axes; ``a`` is shared across them.
    """
    a, f = as_tensor(a), as_tensor(f)
    _check_last(a, params.W_Q1.shape[0], "attribute embeddings")
    _check_last(f, params.W_K1.shape[0], "regional features")
    q = matmul(a, params.W_Q1)
    k = matmul(f, params.W_K1)
    v = matmul(f, params.W_V1)
    attn = softmax_rows(matmul(q, k.mT) * (1.0 / math.sqrt(params.d)))
    a_mid = matmul(attn, v) + q
    return matmul(a_mid, params.W_O), attn.data


def atv_forward(f, a_hat, params: AlignmentParams) -> tuple[Tensor, np.ndarray]:
    """Regions attend over refined attributes: returns refined regions and the (D, K) map."""
    f, a_hat = as_tensor(f), as_tensor(a_hat)
    _check_last(f, params.W_Q2.shape[0], "regional features")
    _check_last(a_hat, params.W_K2.shape[0], "refined attributes")
    q = matmul(f, params.W_Q2)
    k = matmul(a_hat, params.W_K2)
    v = matmul(a_hat, params.W_V2)
    attn = softmax_rows(matmul(q, k.mT) * (1.0 / math.sqrt(params.d)))
    return matmul(matmul(attn, v) + q, params.W_O_atv), attn.data


def align(a, f, params: AlignmentParams) -> AlignedInstance:
    a_hat, vta_attn = vta_forward(a, f, params)
    v_hat, atv_attn = atv_forward(f, a_hat, params)
    return AlignedInstance(a_hat=a_hat, v_hat=v_hat, vta_attn=vta_attn, atv_attn=atv_attn)


def class_prototypes(S, params: AlignmentParams) -> Tensor:
    """Embed class semantic vectors into visual space: one prototype row per class."""
    S = as_tensor(S)
    if S.shape[-1] != params.W_p.shape[0]:
        raise ShapeError(f"semantic matrix {S.shape} does not match W_p {params.W_p.shape}")
    return matmul(S, params.W_p)
