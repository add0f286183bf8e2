"""Partial-label datasets: candidate synthesis, synthetic worlds, binary feature files."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .diff_core import ShapeError
from .inference_metrics import EvalSplit, Mode
from .semantic_space import SemanticSpace

MAGIC = b"DVSA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class DatasetError(ValueError):
    pass


class FeatureFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def split_seen_unseen(Q: int) -> tuple[np.ndarray, np.ndarray]:
    """The last ceil(Q/5) classes are unseen."""
    n_unseen = math.ceil(Q / 5)
    return np.arange(Q - n_unseen), np.arange(Q - n_unseen, Q)


@dataclass
class PartialDataset:
    features: np.ndarray  # (N, D, d_v)
    candidates: np.ndarray  # (N, Q) in {0, 1}
    true_labels: np.ndarray  # (N,) evaluation only
    semantic: SemanticSpace | None = None
    seen_classes: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.candidates = np.asarray(self.candidates, dtype=np.uint8)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        if self.seen_classes is None:
            self.seen_classes = np.flatnonzero(self.candidates.any(axis=0))
        self.seen_classes = np.asarray(self.seen_classes, dtype=np.int64)
        self.validate()

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def Q(self) -> int:
        return self.candidates.shape[1]

    def validate(self) -> None:
        F, C, y = self.features, self.candidates, self.true_labels
        if F.ndim != 3:
            raise ShapeError(f"features must be (N, D, d_v), got {F.shape}")
        if C.ndim != 2 or C.shape[0] != F.shape[0] or y.shape != (F.shape[0],):
            raise ShapeError(f"inconsistent sizes: features {F.shape}, candidates {C.shape}, labels {y.shape}")
        if not np.all(np.isfinite(F)):
            raise DatasetError("features contain non-finite values")
        if np.any(C > 1):
            raise DatasetError("candidate indicators must be 0 or 1")
        if np.any((y < 0) | (y >= C.shape[1])):
            i = int(np.flatnonzero((y < 0) | (y >= C.shape[1]))[0])
            raise DatasetError(f"instance {i}: true label {y[i]} out of range")
        empty = np.flatnonzero(C.sum(axis=1) == 0)
        if empty.size:
            raise DatasetError(f"instance {int(empty[0])}: empty candidate set")
        missing = np.flatnonzero(C[np.arange(len(y)), y] == 0)
        if missing.size:
            raise DatasetError(f"instance {int(missing[0])}: true label {y[missing[0]]} not in its candidate set")
        outside = np.ones(C.shape[1], dtype=bool)
        outside[self.seen_classes] = False
        if C[:, outside].any():
            i = int(np.flatnonzero(C[:, outside].any(axis=1))[0])
            raise DatasetError(f"instance {i}: candidate outside the seen classes")
        if self.semantic is not None and self.semantic.Q != C.shape[1]:
            raise ShapeError(f"semantic space has {self.semantic.Q} classes, candidates have {C.shape[1]}")

    def with_candidates(self, candidates) -> "PartialDataset":
        return replace(self, candidates=np.asarray(candidates, dtype=np.uint8))


class Protocol(str, Enum):
    Q_BERNOULLI = "q"
    R_COUNT = "r"


@dataclass(frozen=True)
class NoiseSpec:
    protocol: Protocol
    q: float | None = None
    r: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        if self.protocol == Protocol.Q_BERNOULLI:
            if self.q is None or self.r is not None or not 0.0 <= self.q <= 1.0:
                raise ValueError(f"Bernoulli protocol needs q in [0, 1] and no r, got q={self.q}, r={self.r}")
        else:
            if self.r is None or self.q is not None or self.r < 0:
                raise ValueError(f"count protocol needs r >= 0 and no q, got q={self.q}, r={self.r}")


def synthesize_candidates(true_labels, Q: int, spec: NoiseSpec, classes=None) -> np.ndarray:
    """Add random false-positive labels drawn from ``classes`` (default: all Q)."""
    y = np.asarray(true_labels, dtype=np.int64)
    classes = np.arange(Q) if classes is None else np.asarray(classes, dtype=np.int64)
    if Q < 2:
        raise ValueError(f"need Q >= 2, got {Q}")
    if not np.isin(y, classes).all():
        raise ValueError("true labels must lie in the candidate class pool")
    n_other = classes.size - 1
    rng = np.random.default_rng(spec.seed)
    C = np.zeros((y.size, Q), dtype=np.uint8)
    C[np.arange(y.size), y] = 1
    if spec.protocol == Protocol.Q_BERNOULLI:
        draws = rng.random((y.size, classes.size)) < spec.q
        C[:, classes] |= draws.astype(np.uint8)
        C[np.arange(y.size), y] = 1
    else:
        if spec.r > n_other:
            raise ValueError(f"r={spec.r} exceeds the {n_other} available false labels")
        for i, label in enumerate(y):
            pool = classes[classes != label]
            C[i, rng.choice(pool, size=spec.r, replace=False)] = 1
    return C


@dataclass
class SyntheticData:
    train: PartialDataset
    semantic: SemanticSpace
    val: EvalSplit
    test: EvalSplit


def _class_patterns(Q: int, K: int, margin: float, rng: np.random.Generator, retries: int = 200) -> np.ndarray:
    need = margin * K
    for _ in range(retries):
        B = (rng.random((Q, K)) < 0.5).astype(np.int64)
        # every attribute must be active somewhere and absent somewhere
        if not (B.any(axis=0).all() and (1 - B).any(axis=0).all()):
            continue
        ham = (B[:, None, :] != B[None, :, :]).sum(-1)
        np.fill_diagonal(ham, K)
        if ham.min() >= need:
            return B
    raise ValueError(
        f"could not reach pairwise Hamming separation {need:.1f} for Q={Q}, K={K}; "
        "use fewer classes, more attributes, or a smaller margin"
    )


def generate_synthetic(
    Q: int = 20,
    K: int = 32,
    d_v: int = 64,
    D: int = 9,
    n_per_class: int = 30,
    margin: float = 0.25,
    seed: int = 0,
    *,
    d_w2v: int = 16,
    noise: float = 3.0,
    n_eval_per_class: int = 20,
    noise_spec: NoiseSpec | None = None,
) -> SyntheticData:
    """Build a seeded toy world whose region features are linear images of class attributes.

    Each attribute is drawn into one region; an instance's region is the sum of
    its attributes' appearance vectors plus Gaussian clutter, so the pooled
    feature is a linear function of the (jittered) semantic vector.
    ``noise`` scales both the attribute jitter and the region clutter.
    """
    if Q < 4:
        raise ValueError(f"need Q >= 4 for a seen/unseen split, got {Q}")
    if not margin > 0:
        raise ValueError(f"margin must be positive, got {margin}")
    rng = np.random.default_rng(seed)
    B = _class_patterns(Q, K, margin, rng)
    S = np.where(B == 1, rng.uniform(0.7, 1.0, (Q, K)), rng.uniform(0.0, 0.1, (Q, K)))
    attr_embed = rng.standard_normal((K, d_w2v))
    attr_embed /= np.linalg.norm(attr_embed, axis=1, keepdims=True)
    semantic = SemanticSpace(S=S, attr_embed=attr_embed)

    appearance = rng.standard_normal((K, d_v)) / math.sqrt(K)
    region_of = rng.integers(0, D, size=K)
    placement = np.zeros((K, D))
    placement[np.arange(K), region_of] = D  # pooled over D regions gives unit weight

    def draw(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        s = S[labels] + 0.1 * noise * rng.standard_normal((labels.size, K))
        regions = np.einsum("nk,kr,kd->nrd", s, placement, appearance)
        return regions + 0.3 * noise * rng.standard_normal(regions.shape)

    seen, unseen = split_seen_unseen(Q)
    train_rng, val_rng, test_rng = (np.random.default_rng(s) for s in rng.integers(0, 2**63, size=3))
    y_train = np.repeat(seen, n_per_class)
    f_train = draw(y_train, train_rng)
    if noise_spec is None:
        C = np.zeros((y_train.size, Q), dtype=np.uint8)
        C[np.arange(y_train.size), y_train] = 1
    else:
        C = synthesize_candidates(y_train, Q, noise_spec, classes=seen)
    train = PartialDataset(f_train, C, y_train, semantic=semantic, seen_classes=seen)

    y_eval = np.repeat(np.arange(Q), n_eval_per_class)
    val = EvalSplit(draw(y_eval, val_rng), y_eval, seen, unseen, Mode.GZSL)
    test = EvalSplit(draw(y_eval, test_rng), y_eval, seen, unseen, Mode.GZSL)
    return SyntheticData(train=train, semantic=semantic, val=val, test=test)


# -- binary feature files ----------------------------------------------------


def save_features(ds: PartialDataset, path) -> None:
    N, D, d_v = ds.features.shape
    Q = ds.Q
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, N, D, d_v, Q))
        fh.write(ds.features.astype("<f8").tobytes())
        fh.write(np.packbits(ds.candidates.reshape(-1), bitorder="little").tobytes())
        fh.write(ds.true_labels.astype("<u4").tobytes())


def load_features(path, seen_classes=None, semantic: SemanticSpace | None = None) -> PartialDataset:
    """Parse and validate a binary feature file."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError("truncated header", len(raw))
    magic, version, N, D, d_v, Q = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    n_feat = N * D * d_v * 8
    n_bits = (N * Q + 7) // 8
    n_lab = N * 4
    sections = [("features", n_feat), ("candidates", n_bits), ("true labels", n_lab)]
    pos = off
    for name, size in sections:
        if len(raw) < pos + size:
            raise FeatureFormatError(f"truncated {name} section: need {size} bytes, have {len(raw) - pos}", len(raw))
        pos += size
    if len(raw) != pos:
        raise FeatureFormatError(f"{len(raw) - pos} trailing bytes", pos)
    feats = np.frombuffer(raw, dtype="<f8", count=N * D * d_v, offset=off).reshape(N, D, d_v)
    off += n_feat
    bits = np.frombuffer(raw, dtype=np.uint8, count=n_bits, offset=off)
    cands = np.unpackbits(bits, count=N * Q, bitorder="little").reshape(N, Q)
    cand_off = off
    off += n_bits
    labels = np.frombuffer(raw, dtype="<u4", count=N, offset=off).astype(np.int64)
    try:
        return PartialDataset(feats.astype(np.float64), cands, labels, semantic=semantic, seen_classes=seen_classes)
    except DatasetError as exc:
        raise FeatureFormatError(f"invariant violated: {exc}", cand_off) from exc


def split_to_dataset(split: EvalSplit, Q: int) -> PartialDataset:
    """Evaluation instances as a file-ready dataset (singleton candidates)."""
    C = np.zeros((len(split.labels), Q), dtype=np.uint8)
    C[np.arange(len(split.labels)), split.labels] = 1
    return PartialDataset(split.features, C, split.labels, seen_classes=np.arange(Q))


def dataset_to_split(ds: PartialDataset, seen, unseen, mode: Mode = Mode.GZSL) -> EvalSplit:
    return EvalSplit(ds.features, ds.true_labels, seen, unseen, mode)
