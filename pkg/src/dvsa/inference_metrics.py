"""Nearest-prototype inference with calibrated stacking, and ZSL/GZSL metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .diff_core import DegenerateInputError, ShapeError


class Mode(str, Enum):
    CZSL = "CZSL"
    GZSL = "GZSL"


@dataclass
class EvalSplit:
    features: np.ndarray  # (N, D, d_v)
    labels: np.ndarray  # (N,)
    seen_classes: np.ndarray
    unseen_classes: np.ndarray
    mode: Mode = Mode.GZSL

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.seen_classes = np.asarray(self.seen_classes, dtype=np.int64)
        self.unseen_classes = np.asarray(self.unseen_classes, dtype=np.int64)
        if np.intersect1d(self.seen_classes, self.unseen_classes).size:
            raise ValueError("seen and unseen class sets overlap")
        if self.mode == Mode.CZSL and not np.isin(self.labels, self.unseen_classes).all():
            raise ValueError("CZSL split contains labels outside the unseen classes")
        if len(self.features) != len(self.labels):
            raise ShapeError(f"{len(self.features)} feature grids for {len(self.labels)} labels")

    def pooled(self) -> np.ndarray:
        return self.features.mean(axis=-2)


@dataclass
class GzslReport:
    T1: float
    U: float
    S: float
    H: float
    gamma: float
    seen_predictions: int = 0


def _scores(V: np.ndarray, P: np.ndarray, score: str) -> np.ndarray:
    if score == "dot":
        return V @ P.T
    if score != "cosine":
        raise ValueError(f"unknown score {score!r}")
    nv = np.linalg.norm(V, axis=1, keepdims=True)
    npr = np.linalg.norm(P, axis=1, keepdims=True)
    if np.any(nv == 0) or np.any(npr == 0):
        raise DegenerateInputError("zero-norm feature or prototype in cosine scoring")
    return np.clip((V / nv) @ (P / npr).T, -1.0, 1.0)


def predict_batch(
    V,
    prototypes,
    seen_mask,
    gamma: float,
    mode: Mode | str = Mode.GZSL,
    score: str = "cosine",
) -> np.ndarray:
    """Calibrated-stacking argmax for each row of V; ties go to the smallest class index."""
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    P = np.asarray(prototypes, dtype=np.float64)
    seen = np.asarray(seen_mask, dtype=bool)
    if seen.shape != (P.shape[0],):
        raise ShapeError(f"seen mask {seen.shape} does not match {P.shape[0]} prototypes")
    mode = Mode(mode)
    allowed = ~seen if mode == Mode.CZSL else np.ones_like(seen)
    if mode == Mode.CZSL:
        gamma = 0.0
    if not allowed.any():
        raise ValueError("no candidate classes to predict over")
    s = _scores(V, P, score) - gamma * seen
    s = np.where(allowed, s, -np.inf)
    return np.argmax(s, axis=1)


def predict(v, prototypes, seen_mask, gamma: float, mode: Mode | str = Mode.GZSL, score: str = "cosine") -> int:
    return int(predict_batch(np.asarray(v).reshape(1, -1), prototypes, seen_mask, gamma, mode, score)[0])


def per_class_top1(predictions, truths, class_set) -> float:
    """Mean over classes of within-class accuracy, in percent; empty classes are skipped."""
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    classes = np.asarray(class_set)
    if not np.isin(true, classes).all():
        raise ValueError("a ground-truth label lies outside the class set")
    accs = [np.mean(pred[true == c] == c) for c in classes if np.any(true == c)]
    if not accs:
        raise ValueError("no class in the class set has test instances")
    return 100.0 * float(np.mean(accs))


def harmonic_mean(S: float, U: float) -> float:
    if S < 0 or U < 0:
        raise ValueError(f"accuracies must be non-negative, got S={S}, U={U}")
    return 0.0 if S + U == 0 else 2.0 * S * U / (S + U)


def evaluate(split: EvalSplit, prototypes, gamma: float, score: str = "cosine") -> GzslReport:
    P = np.asarray(prototypes, dtype=np.float64)
    seen_mask = np.zeros(P.shape[0], dtype=bool)
    seen_mask[split.seen_classes] = True
    V = split.pooled()
    labels = split.labels
    on_unseen = np.isin(labels, split.unseen_classes)
    on_seen = np.isin(labels, split.seen_classes)

    T1 = U = S = 0.0
    seen_preds = 0
    if on_unseen.any():
        czsl = predict_batch(V[on_unseen], P, seen_mask, 0.0, Mode.CZSL, score)
        T1 = per_class_top1(czsl, labels[on_unseen], split.unseen_classes)
    if split.mode == Mode.GZSL:
        gz = predict_batch(V, P, seen_mask, gamma, Mode.GZSL, score)
        seen_preds = int(seen_mask[gz].sum())
        if on_unseen.any():
            U = per_class_top1(gz[on_unseen], labels[on_unseen], split.unseen_classes)
        if on_seen.any():
            S = per_class_top1(gz[on_seen], labels[on_seen], split.seen_classes)
    return GzslReport(T1=T1, U=U, S=S, H=harmonic_mean(S, U), gamma=float(gamma), seen_predictions=seen_preds)


def sweep_gamma(split: EvalSplit, prototypes, grid, score: str = "cosine") -> list[GzslReport]:
    return [evaluate(split, prototypes, g, score) for g in grid]


def best_gamma(reports: list[GzslReport]) -> GzslReport:
    """H-maximising report; earliest grid point wins ties."""
    return max(reports, key=lambda r: (r.H, -reports.index(r)))


def default_gamma_grid() -> list[float]:
    return [round(0.1 * i, 1) for i in range(11)]


def reports_to_csv(reports: list[GzslReport], mode: str, seed: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T1", "U", "S", "H", "gamma", "mode", "seed"])
    for r in reports:
        w.writerow([f"{r.T1:.4f}", f"{r.U:.4f}", f"{r.S:.4f}", f"{r.H:.4f}", f"{r.gamma:g}", mode, seed])
    return buf.getvalue()


def reports_to_table(reports: list[GzslReport], labels: list[str] | None = None, show_seen: bool = False) -> str:
    labels = labels or [f"gamma={r.gamma:g}" for r in reports]
    width = max(len(s) for s in labels)
    head = f"{'':<{width}}  {'T1':>6} {'U':>6} {'S':>6} {'H':>6}"
    lines = [head + (f" {'seen':>6}" if show_seen else "")]
    for name, r in zip(labels, reports):
        d = asdict(r)
        row = f"{name:<{width}}  " + " ".join(f"{d[k]:6.1f}" for k in ("T1", "U", "S", "H"))
        lines.append(row + (f" {r.seen_predictions:6d}" if show_seen else ""))
    return "\n".join(lines)
