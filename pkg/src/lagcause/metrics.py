"""Graph and score evaluation: precision/recall/F1, structural Hamming
distance, AUROC/AUPRC over edge scores, and regime-aware reporting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .attribution import AttributionTensor
from .graphs import LaggedGraph, dumps_canonical
from .sim import RegimeSchedule


class EvaluationError(ValueError):
    pass


class DegenerateTruthError(EvaluationError):
    pass


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    shd: float
    n_true_edges: int
    n_pred_edges: int
    auroc: float | None = None
    auprc: float | None = None
    regime_mode: str = "pooled"  # "pooled" | "per_regime"
    per_regime: list["MetricsReport"] | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "shd": self.shd,
            "n_true_edges": self.n_true_edges,
            "n_pred_edges": self.n_pred_edges,
            "auroc": self.auroc,
            "auprc": self.auprc,
            "regime_mode": self.regime_mode,
            "meta": self.meta,
        }
        if self.per_regime is not None:
            d["per_regime"] = [r.to_dict() for r in self.per_regime]
        return d

    def save(self, path: str | Path):
        Path(path).write_text(dumps_canonical(self.to_dict()))

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        sub = d.get("per_regime")
        return cls(
            precision=d["precision"], recall=d["recall"], f1=d["f1"], shd=d["shd"],
            n_true_edges=d["n_true_edges"], n_pred_edges=d["n_pred_edges"],
            auroc=d.get("auroc"), auprc=d.get("auprc"),
            regime_mode=d.get("regime_mode", "pooled"),
            per_regime=[cls.from_dict(x) for x in sub] if sub else None,
            meta=d.get("meta", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _collapse(edges: set, keep_lags: bool) -> set:
    return edges if keep_lags else {(i, j) for i, j, _ in edges}


def structural_metrics(pred: LaggedGraph, truth: LaggedGraph,
                       lag_resolved: bool = True, meta: dict | None = None) -> MetricsReport:
    """Exact (target, source, lag) comparison; SHD counts insertions + deletions.

    Zero-division conventions: precision is 0 with no predictions, recall is 0
    with no true edges, F1 is 0 when P + R is 0.
    """
    if pred.p != truth.p or pred.L != truth.L:
        raise EvaluationError(
            f"dimension mismatch: pred ({pred.p},{pred.L}) vs truth ({truth.p},{truth.L})")
    pe = _collapse(pred.edges, lag_resolved)
    te = _collapse(truth.edges, lag_resolved)
    tp = len(pe & te)
    precision = tp / len(pe) if pe else 0.0
    recall = tp / len(te) if te else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    shd = len(pe - te) + len(te - pe)
    return MetricsReport(precision=precision, recall=recall, f1=f1, shd=float(shd),
                         n_true_edges=len(te), n_pred_edges=len(pe),
                         meta=meta or {})


def _score_instances(scores, truth: LaggedGraph, lag_resolved: bool):
    arr = scores.scores if isinstance(scores, AttributionTensor) else np.asarray(scores)
    if arr.shape != (truth.p, truth.p, truth.L):
        raise EvaluationError(
            f"score tensor {arr.shape} does not match truth ({truth.p},{truth.p},{truth.L})")
    labels = truth.to_adjacency()
    if not lag_resolved:
        arr = arr.max(axis=2)
        labels = labels.any(axis=2)
    y = labels.ravel()
    s = arr.ravel()
    if y.all() or not y.any():
        raise DegenerateTruthError("truth needs at least one edge and one non-edge")
    return s, y


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUROC with tie averaging."""
    ranks = rankdata(scores, method="average")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Precision-recall step integration; tied scores are processed as blocks."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(float)
    n_pos = y.sum()
    # Block boundaries where the score value changes.
    boundary = np.nonzero(np.diff(s))[0]
    cut = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(y)[cut]
    count = cut + 1.0
    precision = tp / count
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def score_metrics(scores, truth: LaggedGraph, lag_resolved: bool = True) -> tuple[float, float]:
    """AUROC and AUPRC treating each (target, source, lag) cell as an instance."""
    s, y = _score_instances(scores, truth, lag_resolved)
    return auroc(s, y), auprc(s, y)


def regime_metrics(pred, schedule: RegimeSchedule, mode: str = "per_regime",
                   meta: dict | None = None) -> MetricsReport:
    """Score predictions against a regime schedule.

    per_regime: one predicted graph per segment, scored against that segment's
    truth; the report carries the across-regime means. pooled: one predicted
    graph scored against the union of the segment graphs.
    """
    if mode == "pooled":
        if not isinstance(pred, LaggedGraph):
            raise EvaluationError("pooled mode expects a single predicted graph")
        rep = structural_metrics(pred, schedule.union_graph(), meta=meta)
        rep.regime_mode = "pooled"
        return rep
    if mode != "per_regime":
        raise EvaluationError(f"unknown regime mode {mode!r}")
    preds = [pred] if isinstance(pred, LaggedGraph) else list(pred)
    if len(preds) != len(schedule.segments):
        raise EvaluationError(
            f"{len(preds)} predicted graphs for {len(schedule.segments)} regimes")
    subs = [structural_metrics(g, seg.graph)
            for g, seg in zip(preds, schedule.segments)]
    rep = MetricsReport(
        precision=float(np.mean([r.precision for r in subs])),
        recall=float(np.mean([r.recall for r in subs])),
        f1=float(np.mean([r.f1 for r in subs])),
        shd=float(np.mean([r.shd for r in subs])),
        n_true_edges=sum(r.n_true_edges for r in subs),
        n_pred_edges=sum(r.n_pred_edges for r in subs),
        regime_mode="per_regime",
        per_regime=subs,
        meta=meta or {},
    )
    return rep
