"""Edge scores from a trained predictor: per-sample relevance, population
aggregation, rank-based uncertainty, binarization rules, intervention
cross-checks, and a raw-attention comparison readout.

Scores live in (target, source, lag) tensors; lag 1 is the step immediately
before the prediction target, so window row r carries lag L - r.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BackwardMode, EXACT, Tape, Tensor
from .graphs import LaggedGraph, dumps_canonical
from .model import ConfigError, NetworkPredictor
from .sim import TimeSeriesDataset
from .timeouts import check_deadline

AGGREGATIONS = ("mean_abs_relevance", "mean_sq_gradient", "mean_attention")
RANK_STD_FLOOR = 1e-6
DEFAULT_SAMPLE_BUDGET = 2000


class BinarizationError(ValueError):
    pass


@dataclass
class AttributionTensor:
    """Population edge scores indexed [target, source, lag-1]."""

    scores: np.ndarray
    aggregation: str
    n_samples: int
    per_edge_stats: dict[str, np.ndarray] | None = None
    meta: dict | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 3 or self.scores.shape[0] != self.scores.shape[1]:
            raise ValueError(f"scores must be (p, p, L), got {self.scores.shape}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if np.any(self.scores < 0):
            raise ValueError("aggregated scores must be non-negative")

    @property
    def p(self) -> int:
        return self.scores.shape[0]

    @property
    def L(self) -> int:
        return self.scores.shape[2]

    def to_dict(self) -> dict:
        d = {
            "dims": list(self.scores.shape),
            "aggregation": self.aggregation,
            "n_samples": self.n_samples,
            "data": [float(x) for x in self.scores.ravel()],
        }
        if self.per_edge_stats is not None:
            d["per_edge_stats"] = {k: [float(x) for x in v.ravel()]
                                   for k, v in self.per_edge_stats.items()}
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttributionTensor":
        dims = tuple(d["dims"])
        stats = None
        if "per_edge_stats" in d:
            stats = {k: np.array(v).reshape(dims) for k, v in d["per_edge_stats"].items()}
        return cls(
            scores=np.array(d["data"]).reshape(dims),
            aggregation=d["aggregation"],
            n_samples=int(d["n_samples"]),
            per_edge_stats=stats,
            meta=d.get("meta"),
        )

    def save(self, path: str | Path):
        Path(path).write_text(dumps_canonical(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "AttributionTensor":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Binarization rules


@dataclass(frozen=True)
class TopKRow:
    k: int


@dataclass(frozen=True)
class TopKGlobal:
    k: int


@dataclass(frozen=True)
class UniformThreshold:
    pass


def parse_rule(text: str):
    """Parse CLI rule strings like 'topk_row=3', 'topk_global=15', 'uniform_threshold'."""
    name, _, arg = text.partition("=")
    if name == "topk_row":
        return TopKRow(int(arg))
    if name == "topk_global":
        return TopKGlobal(int(arg))
    if name == "uniform_threshold":
        return UniformThreshold()
    raise BinarizationError(f"unknown binarization rule {text!r}")


def _ranked_flat(scores: np.ndarray, lags: np.ndarray, sources: np.ndarray,
                 targets: np.ndarray | None = None) -> np.ndarray:
    # Descending score; ties broken by smaller lag, then source (then target).
    keys = [sources, lags, -scores] if targets is None else [targets, sources, lags, -scores]
    return np.lexsort(tuple(keys))


def binarize(scores, rule) -> LaggedGraph:
    """Threshold or top-k selection of a score tensor into a lagged graph."""
    arr = scores.scores if isinstance(scores, AttributionTensor) else np.asarray(scores)
    if arr.ndim != 3 or arr.shape[0] != arr.shape[1]:
        raise BinarizationError(f"score tensor must be (p, p, L), got {arr.shape}")
    p, _, L = arr.shape
    edges: set[tuple[int, int, int]] = set()
    if isinstance(rule, TopKRow):
        if not (1 <= rule.k <= p * L):
            raise BinarizationError(f"topk_row k={rule.k} outside [1, {p * L}]")
        jj, ll = np.meshgrid(np.arange(p), np.arange(L), indexing="ij")
        jf, lf = jj.ravel(), ll.ravel()
        for i in range(p):
            flat = arr[i].ravel()
            order = _ranked_flat(flat, lf, jf)
            for n in order[:rule.k]:
                edges.add((i, int(jf[n]), int(lf[n]) + 1))
    elif isinstance(rule, TopKGlobal):
        if not (1 <= rule.k <= p * p * L):
            raise BinarizationError(f"topk_global k={rule.k} outside [1, {p * p * L}]")
        ii, jj, ll = np.meshgrid(np.arange(p), np.arange(p), np.arange(L), indexing="ij")
        i_f, j_f, l_f = ii.ravel(), jj.ravel(), ll.ravel()
        order = _ranked_flat(arr.ravel(), l_f, j_f, i_f)
        for n in order[:rule.k]:
            edges.add((int(i_f[n]), int(j_f[n]), int(l_f[n]) + 1))
    elif isinstance(rule, UniformThreshold):
        thresh = 1.0 / (L * p)
        row_sums = arr.reshape(p, -1).sum(axis=1)
        for i in range(p):
            if row_sums[i] <= 0:
                continue
            normalized = arr[i] / row_sums[i]
            for j, l in zip(*np.nonzero(normalized > thresh)):
                edges.add((i, int(j), int(l) + 1))
    else:
        raise BinarizationError(f"unknown rule object {rule!r}")
    return LaggedGraph(p, L, edges)


# ---------------------------------------------------------------------------
# Per-sample relevance


def _rows_to_lags(mat: np.ndarray) -> np.ndarray:
    """(…, L, p) window-row layout -> (…, p, L) lag layout (row L-l is lag l)."""
    return np.swapaxes(mat[..., ::-1, :], -1, -2)


def window_gradients(predictor, windows: np.ndarray, target: int,
                     mode: BackwardMode = EXACT,
                     domain_index: np.ndarray | None = None) -> np.ndarray:
    """Gradient of each sample's target prediction w.r.t. its own window."""
    windows = np.asarray(windows, dtype=np.float64)
    B, L, p = windows.shape
    if not 0 <= target < predictor.p:
        raise IndexError(f"target variable {target} outside [0, {predictor.p})")
    with Tape() as tape:
        win = Tensor(windows, requires_grad=True)
        preds = predictor.predict_next(win, domain_index=domain_index)
        seed = np.zeros((1, predictor.p))
        seed[0, target] = 1.0
        grads = tape.backward(preds, seed=seed, mode=mode)
    return grads[win.node_id]


def attribute_sample(predictor, window: np.ndarray, target: int,
                     mode: BackwardMode = EXACT,
                     domain_index: int | None = None) -> np.ndarray:
    """Input-times-gradient relevance of one window, as a (p_source, L) matrix."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (predictor.L, predictor.p):
        raise ad.DimensionError(
            f"window shape {window.shape}, expected {(predictor.L, predictor.p)}")
    dom = None if domain_index is None else np.array([domain_index])
    g = window_gradients(predictor, window[None], target, mode, dom)[0]
    return _rows_to_lags(ad.input_times_gradient(window, g))


def _all_windows(data: np.ndarray, L: int) -> np.ndarray:
    T, p = data.shape
    N = T - L
    out = np.empty((N, L, p))
    for r in range(L):
        out[:, r, :] = data[r:r + N]
    return out


def _eligible_starts(dataset, L: int, regime: int | None) -> np.ndarray:
    if isinstance(dataset, TimeSeriesDataset):
        data = dataset.data
    else:
        data = np.asarray(dataset)
    N = data.shape[0] - L
    if regime is None:
        return np.arange(N)
    if not isinstance(dataset, TimeSeriesDataset):
        raise ValueError("regime restriction needs a dataset with a schedule")
    a, b = dataset.schedule.segment_bounds()[regime]
    # Keep windows fully inside the segment, prediction target included.
    starts = np.arange(max(a, 0), b - L)
    if starts.size == 0:
        raise ValueError(f"regime {regime} too short for windows of length {L}")
    return starts


def _dataset_array(dataset) -> np.ndarray:
    return dataset.data if isinstance(dataset, TimeSeriesDataset) else np.asarray(dataset)


def _domains_for(predictor, dataset, starts: np.ndarray) -> np.ndarray | None:
    if not isinstance(predictor, NetworkPredictor):
        return None
    if not predictor.model.config.use_domain_embedding:
        return None
    if not isinstance(dataset, TimeSeriesDataset):
        raise ValueError("domain-conditioned model needs a dataset with a schedule")
    L = predictor.L
    # A window starting at s predicts emitted step s + L.
    return np.array([dataset.schedule.segment_of(int(s) + L) for s in starts], dtype=int)


def _sampled_windows(predictor, dataset, sample_budget: int, seed: int,
                     regime: int | None):
    data = _dataset_array(dataset)
    L = predictor.L
    starts = _eligible_starts(dataset, L, regime)
    rng = np.random.default_rng(seed)
    if sample_budget < 1:
        raise ValueError("sample_budget must be >= 1")
    if sample_budget < starts.size:
        starts = np.sort(rng.choice(starts, size=sample_budget, replace=False))
    windows = np.stack([data[s:s + L] for s in starts])
    domains = _domains_for(predictor, dataset, starts)
    return windows, domains


def aggregate(predictor, dataset, mode: BackwardMode = EXACT,
              aggregation: str = "mean_abs_relevance",
              sample_budget: int = DEFAULT_SAMPLE_BUDGET,
              seed: int = 0, regime: int | None = None,
              chunk: int = 256, deadline: float | None = None) -> AttributionTensor:
    """Population edge scores: E[|relevance|] or E[gradient^2] over sampled windows."""
    if aggregation not in ("mean_abs_relevance", "mean_sq_gradient"):
        raise ValueError(f"unsupported aggregation {aggregation!r}")
    windows, domains = _sampled_windows(predictor, dataset, sample_budget, seed, regime)
    n = windows.shape[0]
    p, L = predictor.p, predictor.L
    acc = np.zeros((p, p, L))
    for i in range(p):
        for lo in range(0, n, chunk):
            check_deadline(deadline, "attribution")
            wchunk = windows[lo:lo + chunk]
            dchunk = domains[lo:lo + chunk] if domains is not None else None
            g = window_gradients(predictor, wchunk, i, mode, dchunk)
            if aggregation == "mean_abs_relevance":
                per = np.abs(wchunk * g)
            else:
                per = g * g
            acc[i] += _rows_to_lags(per).sum(axis=0)
    acc /= n
    return AttributionTensor(acc, aggregation, n_samples=n,
                             meta={"mode": "lrp" if mode.lrp else "exact", "seed": seed,
                                   "regime": regime})


def _ranks_last_axis(flat: np.ndarray) -> np.ndarray:
    """Ranks 1..n along the last axis, 1 = smallest; stable under ties."""
    order = np.argsort(flat, axis=-1, kind="stable")
    ranks = np.empty_like(flat)
    np.put_along_axis(ranks, order,
                      np.broadcast_to(np.arange(1, flat.shape[-1] + 1, dtype=np.float64),
                                      flat.shape).copy(), axis=-1)
    return ranks


def rank_stats(predictor, dataset, sample_budget: int = DEFAULT_SAMPLE_BUDGET,
               seed: int = 0, mode: BackwardMode = EXACT,
               regime: int | None = None, chunk: int = 256) -> dict[str, np.ndarray]:
    """Per-edge rank statistics of |relevance| within each sample and target.

    Larger rank = stronger candidate. Returns mean_rank, std_rank, and
    mean_over_std (std floored to avoid division by zero), each (p, p, L).
    """
    windows, domains = _sampled_windows(predictor, dataset, sample_budget, seed, regime)
    n = windows.shape[0]
    p, L = predictor.p, predictor.L
    sum_r = np.zeros((p, p * L))
    sum_r2 = np.zeros((p, p * L))
    for i in range(p):
        for lo in range(0, n, chunk):
            wchunk = windows[lo:lo + chunk]
            dchunk = domains[lo:lo + chunk] if domains is not None else None
            g = window_gradients(predictor, wchunk, i, mode, dchunk)
            rel = np.abs(_rows_to_lags(wchunk * g))  # (B, p, L)
            ranks = _ranks_last_axis(rel.reshape(rel.shape[0], -1))
            sum_r[i] += ranks.sum(axis=0)
            sum_r2[i] += (ranks * ranks).sum(axis=0)
    mean = sum_r / n
    var = np.maximum(sum_r2 / n - mean**2, 0.0)
    std = np.sqrt(var)
    shape = (p, p, L)
    mean, std = mean.reshape(shape), std.reshape(shape)
    return {
        "mean_rank": mean,
        "std_rank": std,
        "mean_over_std": mean / np.maximum(std, RANK_STD_FLOOR),
    }


def intervention_effect(predictor, dataset, delta: float = 1.0,
                        sample_budget: int = DEFAULT_SAMPLE_BUDGET,
                        seed: int = 0, chunk: int = 512) -> np.ndarray:
    """Mean absolute prediction shift when nudging one input coordinate by delta."""
    windows, domains = _sampled_windows(predictor, dataset, sample_budget, seed, None)
    n = windows.shape[0]
    p, L = predictor.p, predictor.L
    effect = np.zeros((p, p, L))
    for lo in range(0, n, chunk):
        wchunk = windows[lo:lo + chunk]
        dchunk = domains[lo:lo + chunk] if domains is not None else None
        base = predictor.predict_next(Tensor(wchunk), domain_index=dchunk).values
        for r in range(L):
            for j in range(p):
                bumped = wchunk.copy()
                bumped[:, r, j] += delta
                out = predictor.predict_next(Tensor(bumped), domain_index=dchunk).values
                effect[:, j, L - r - 1] += np.abs(out - base).sum(axis=0)
    return effect / n


def raw_attention_scores(predictor, dataset,
                         sample_budget: int = DEFAULT_SAMPLE_BUDGET,
                         seed: int = 0, chunk: int = 256) -> AttributionTensor:
    """Last-layer attention mass from each prediction-step token to source tokens.

    A comparison readout only; averages over heads and samples.
    """
    if getattr(predictor, "backbone", None) != "transformer":
        raise ConfigError("attention readout requires the transformer backbone")
    windows, domains = _sampled_windows(predictor, dataset, sample_budget, seed, None)
    n = windows.shape[0]
    p, L = predictor.p, predictor.L
    acc = np.zeros((p, p, L))
    for lo in range(0, n, chunk):
        wchunk = windows[lo:lo + chunk]
        dchunk = domains[lo:lo + chunk] if domains is not None else None
        collected: list[np.ndarray] = []
        predictor.predict_next(Tensor(wchunk), domain_index=dchunk,
                               collect_attention=collected)
        last = collected[-1]  # (B, H, T, T)
        for i in range(p):
            q = (L - 1) * p + i
            w = last[:, :, q, :].mean(axis=1)  # (B, T) averaged over heads
            acc[i] += _rows_to_lags(w.reshape(-1, L, p)).sum(axis=0)
    acc /= n
    return AttributionTensor(acc, "mean_attention", n_samples=n,
                             meta={"seed": seed, "layer": "last"})


def edge_strength_histogram(scores: AttributionTensor | np.ndarray, bins: int = 20):
    """Histogram of row-normalized edge strengths, overall and split by lag."""
    arr = scores.scores if isinstance(scores, AttributionTensor) else np.asarray(scores)
    p, _, L = arr.shape
    row_sums = arr.reshape(p, -1).sum(axis=1, keepdims=True)
    safe = np.where(row_sums > 0, row_sums, 1.0)
    norm = arr / safe.reshape(p, 1, 1)
    edges = np.linspace(0.0, 1.0, bins + 1)
    overall, _ = np.histogram(norm.ravel(), bins=edges)
    lag1, _ = np.histogram(norm[:, :, 0].ravel(), bins=edges)
    later, _ = np.histogram(norm[:, :, 1:].ravel(), bins=edges) if L > 1 else (np.zeros(bins, dtype=int), None)
    return edges, overall, lag1, later
