"""Class semantics, attribute embeddings and entropy-based attribute selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diff_core import DegenerateInputError, ShapeError


class SemanticFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SemanticSpace:
    S: np.ndarray  # (Q, K) class-attribute strengths
    attr_embed: np.ndarray  # (K, d_w2v)
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        S = np.asarray(self.S, dtype=np.float64)
        A = np.asarray(self.attr_embed, dtype=np.float64)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "attr_embed", A)
        if S.ndim != 2 or A.ndim != 2:
            raise ShapeError(f"S and attr_embed must be 2-D, got {S.shape} and {A.shape}")
        Q, K = S.shape
        if Q < 2 or K < 2:
            raise ShapeError(f"need Q >= 2 and K >= 2, got Q={Q}, K={K}")
        if A.shape[0] != K:
            raise ShapeError(f"attr_embed has {A.shape[0]} rows, S has {K} attributes")
        if np.any(S < 0) or not np.all(np.isfinite(S)):
            raise ValueError("S must be finite and non-negative")
        dead = np.flatnonzero(~(S > 0).any(axis=0))
        if dead.size:
            raise DegenerateInputError(f"attribute column {int(dead[0])} has no positive entry")
        zero_rows = np.flatnonzero(~A.any(axis=1))
        if zero_rows.size:
            raise DegenerateInputError(f"attribute embedding row {int(zero_rows[0])} is all zero")
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(f"class_{c}" for c in range(Q)))
        elif len(self.class_names) != Q:
            raise ShapeError(f"{len(self.class_names)} class names for {Q} classes")
        S.setflags(write=False)
        A.setflags(write=False)

    @property
    def Q(self) -> int:
        return self.S.shape[0]

    @property
    def K(self) -> int:
        return self.S.shape[1]

    @property
    def d_w2v(self) -> int:
        return self.attr_embed.shape[1]


@dataclass(frozen=True)
class AttributeSelection:
    entropies: np.ndarray
    threshold: float
    selected: tuple[int, ...]


def attribute_entropy(space: SemanticSpace | np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each attribute column after column normalisation."""
    S = np.asarray(space.S if isinstance(space, SemanticSpace) else space, dtype=np.float64)
    totals = S.sum(axis=0)
    for k in np.flatnonzero(totals <= 0):
        raise DegenerateInputError(f"attribute column {int(k)} sums to zero")
    p = S / totals
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=0)


def select_attributes(entropies) -> AttributeSelection:
    """Keep attributes whose entropy is strictly below the median.

    If nothing is strictly below (all equal), the first floor(K/2) indices are kept.
    """
    H = np.asarray(entropies, dtype=np.float64).ravel()
    if H.size < 2:
        raise ShapeError(f"need at least 2 entropies, got {H.size}")
    mu = float(np.median(H))
    selected = tuple(int(k) for k in np.flatnonzero(H < mu))
    if not selected:
        selected = tuple(range(H.size // 2))
    return AttributeSelection(entropies=H, threshold=mu, selected=selected)


def load_semantic(path) -> SemanticSpace:
    """Read the whitespace text format: `Q K d_w2v`, Q rows of S, K rows of embeddings."""
    path = Path(path)
    lines = [(i + 1, ln.split()) for i, ln in enumerate(path.read_text().splitlines())]
    lines = [(n, toks) for n, toks in lines if toks]
    if not lines:
        raise SemanticFormatError(f"{path}: empty file")
    n, header = lines[0]
    if len(header) != 3:
        raise SemanticFormatError(f"{path}:{n}: header must be 'Q K d_w2v'")
    try:
        Q, K, dw = (int(t) for t in header)
    except ValueError as exc:
        raise SemanticFormatError(f"{path}:{n}: non-integer header") from exc
    body = lines[1:]
    if len(body) != Q + K:
        raise SemanticFormatError(f"{path}: expected {Q + K} data lines after header, found {len(body)}")

    def parse(rows, width):
        out = []
        for n, toks in rows:
            if len(toks) != width:
                raise SemanticFormatError(f"{path}:{n}: expected {width} values, found {len(toks)}")
            try:
                out.append([float(t) for t in toks])
            except ValueError as exc:
                raise SemanticFormatError(f"{path}:{n}: {exc}") from exc
        return np.array(out, dtype=np.float64)

    return SemanticSpace(S=parse(body[:Q], K), attr_embed=parse(body[Q:], dw))


def save_semantic(space: SemanticSpace, path) -> None:
    rows = [f"{space.Q} {space.K} {space.d_w2v}"]
    rows += [" ".join(repr(float(x)) for x in r) for r in space.S]
    rows += [" ".join(repr(float(x)) for x in r) for r in space.attr_embed]
    Path(path).write_text("\n".join(rows) + "\n")
