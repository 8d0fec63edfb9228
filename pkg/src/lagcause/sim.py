"""Synthetic multivariate time series from sampled lagged structural models.

Supports linear, monotonic (sums of sigmoids), mixed piecewise-linear, and MLP
mechanisms (additive or concatenated noise), four noise families plus per-node
mixtures, piecewise-constant regime schedules for non-stationarity, and latent
confounder series that drive the observations but are excluded from the
emitted data and the ground-truth graph.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .graphs import GraphError, LaggedGraph, dumps_canonical, from_adjacency

MECHANISM_FORMS = ("linear", "monotonic", "pl_mix", "mlp_add", "mlp_cat")
NOISE_FAMILIES = ("gaussian", "uniform", "laplace", "student_t", "mixed")

SPECTRAL_RADIUS_CAP = 0.95
COEF_LO, COEF_HI = 0.3, 0.9
VARIANCE_FLOOR = 0.05
LATENT_AR_COEF = 0.5
MLP_HIDDEN = 16
BLOWUP_LIMIT = 1e8


class PreconditionError(ValueError):
    pass


class DensityError(ValueError):
    pass


class UnstableSystemError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Specs


@dataclass
class NoiseSpec:
    """Exogenous noise configuration shared by all segments of a run."""

    family: str = "gaussian"
    variance_mode: str = "equal"  # "equal" | "hetero"
    sigma2: float = 1.0           # equal-mode variance
    var_range: tuple[float, float] = (0.5, 5.0)  # hetero-mode [lo, hi)
    student_dof: float = 5.0

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise PreconditionError(f"unknown noise family {self.family!r}")
        if self.variance_mode not in ("equal", "hetero"):
            raise PreconditionError(f"unknown variance mode {self.variance_mode!r}")
        lo, hi = self.var_range
        if not (0 <= lo < hi):
            raise PreconditionError(f"hetero range must satisfy 0 <= lo < hi, got {self.var_range}")
        if not self.student_dof > 2:
            raise PreconditionError("student_t dof must exceed 2 for finite variance")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "variance_mode": self.variance_mode,
            "sigma2": self.sigma2,
            "var_range": list(self.var_range),
            "student_dof": self.student_dof,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(
            family=d["family"],
            variance_mode=d["variance_mode"],
            sigma2=float(d["sigma2"]),
            var_range=tuple(d["var_range"]),
            student_dof=float(d["student_dof"]),
        )


@dataclass
class MechanismSpec:
    """One structural mechanism per node, aligned with the node's sorted parents."""

    form: str
    nodes: list[dict]

    def __post_init__(self):
        if self.form not in MECHANISM_FORMS:
            raise PreconditionError(f"unknown mechanism form {self.form!r}")

    def validate_against(self, graph: LaggedGraph):
        if len(self.nodes) != graph.p:
            raise PreconditionError(f"{len(self.nodes)} node mechanisms for p={graph.p}")
        for i, params in enumerate(self.nodes):
            deg = len(graph.parents(i))
            if self.form == "linear" and len(params["coefs"]) != deg:
                raise PreconditionError(f"node {i}: {len(params['coefs'])} coefficients for in-degree {deg}")
            if self.form == "mlp_cat" and deg >= 0:
                width = len(params["w1"])
                if width != deg + 1:
                    raise PreconditionError(f"node {i}: mlp_cat input width {width} != in-degree+1 ({deg + 1})")

    def to_dict(self) -> dict:
        return {"form": self.form, "nodes": self.nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "MechanismSpec":
        return cls(form=d["form"], nodes=d["nodes"])


@dataclass
class Segment:
    length: int
    graph: LaggedGraph
    mechanisms: MechanismSpec

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "graph": self.graph.to_dict(),
            "mechanisms": self.mechanisms.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        return cls(int(d["length"]), LaggedGraph.from_dict(d["graph"]),
                   MechanismSpec.from_dict(d["mechanisms"]))


@dataclass
class LatentSpec:
    """Autonomous AR(1) confounder series feeding observed nodes linearly."""

    n: int
    ar_coef: float
    edges: list[tuple[int, int, int, float]]  # (observed target, latent index, lag, weight)

    def to_dict(self) -> dict:
        return {"n": self.n, "ar_coef": self.ar_coef,
                "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentSpec":
        return cls(int(d["n"]), float(d["ar_coef"]),
                   [(int(a), int(b), int(c), float(w)) for a, b, c, w in d["edges"]])


@dataclass
class RegimeSchedule:
    segments: list[Segment]
    drift_mode: str = "resample"  # "resample" | "minimal_change"
    rewire_fraction: float = 0.2
    transition_prob: float = 0.3
    latent: LatentSpec | None = None

    def __post_init__(self):
        if not self.segments:
            raise PreconditionError("schedule needs at least one segment")
        p = self.segments[0].graph.p
        if any(s.graph.p != p for s in self.segments):
            raise PreconditionError("all segments must share p")

    @property
    def p(self) -> int:
        return self.segments[0].graph.p

    @property
    def L(self) -> int:
        return max(s.graph.L for s in self.segments)

    @property
    def T(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def n_latent(self) -> int:
        return self.latent.n if self.latent is not None else 0

    def segment_of(self, t: int) -> int:
        """Index of the segment governing emitted step t."""
        acc = 0
        for k, seg in enumerate(self.segments):
            acc += seg.length
            if t < acc:
                return k
        raise IndexError(f"step {t} beyond schedule horizon {acc}")

    def segment_bounds(self) -> list[tuple[int, int]]:
        bounds, acc = [], 0
        for seg in self.segments:
            bounds.append((acc, acc + seg.length))
            acc += seg.length
        return bounds

    def union_graph(self) -> LaggedGraph:
        edges = set()
        for s in self.segments:
            edges |= s.graph.edges
        return LaggedGraph(self.p, self.L, edges)

    def to_dict(self) -> dict:
        return {
            "segments": [s.to_dict() for s in self.segments],
            "drift_mode": self.drift_mode,
            "rewire_fraction": self.rewire_fraction,
            "transition_prob": self.transition_prob,
            "latent": self.latent.to_dict() if self.latent else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegimeSchedule":
        return cls(
            segments=[Segment.from_dict(s) for s in d["segments"]],
            drift_mode=d["drift_mode"],
            rewire_fraction=float(d["rewire_fraction"]),
            transition_prob=float(d["transition_prob"]),
            latent=LatentSpec.from_dict(d["latent"]) if d.get("latent") else None,
        )


@dataclass
class TimeSeriesDataset:
    data: np.ndarray  # (T, p), standardized per variable
    schedule: RegimeSchedule
    noise: NoiseSpec
    norm_stats: list[tuple[float, float]]  # per-variable (mean, std) removed by z-scoring
    latent_count: int
    seed: int | None
    burn_in: int

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def p(self) -> int:
        return self.data.shape[1]

    @property
    def L(self) -> int:
        return self.schedule.L


# ---------------------------------------------------------------------------
# Sampling


def sample_graph(p: int, L: int, expected_in_degree: float, rng: np.random.Generator) -> LaggedGraph:
    """Bernoulli parent selection at density expected_in_degree / (p*L)."""
    if p < 1 or L < 1:
        raise PreconditionError(f"need p >= 1 and L >= 1, got p={p}, L={L}")
    if expected_in_degree < 0 or expected_in_degree > p * L:
        raise DensityError(
            f"expected in-degree {expected_in_degree} outside [0, p*L={p * L}]")
    prob = expected_in_degree / (p * L)
    adj = rng.random((p, p, L)) < prob
    return from_adjacency(adj)


def sample_graph_exact(p: int, L: int, in_degree: float, rng: np.random.Generator) -> LaggedGraph:
    """Every node draws a fixed number of distinct lagged parents uniformly.

    Non-integer in-degree is met in expectation by randomizing the remainder.
    Matched-degree graphs make per-target top-k binarization exactly decodable,
    which Bernoulli in-degrees (variance around the mean) cannot be.
    """
    if p < 1 or L < 1:
        raise PreconditionError(f"need p >= 1 and L >= 1, got p={p}, L={L}")
    if in_degree < 0 or in_degree > p * L:
        raise DensityError(f"in-degree {in_degree} outside [0, p*L={p * L}]")
    edges = set()
    for i in range(p):
        edges |= {(i, j, l) for j, l in _exact_node_row(p, L, in_degree, rng)}
    return LaggedGraph(p, L, edges)


def _exact_node_row(p: int, lag_cap: int, in_degree: float,
                    rng: np.random.Generator) -> set:
    k = int(math.floor(in_degree))
    frac = in_degree - k
    if frac > 0 and rng.random() < frac:
        k += 1
    k = min(k, p * lag_cap)
    chosen = rng.choice(p * lag_cap, size=k, replace=False)
    return {(int(c) % p, int(c) // p + 1) for c in chosen}


def _sample_coef(rng: np.random.Generator, size=None) -> np.ndarray:
    mag = rng.uniform(COEF_LO, COEF_HI, size=size)
    sign = np.where(rng.random(size=size) < 0.5, -1.0, 1.0)
    return mag * sign


def _companion_radius(max_slope: np.ndarray) -> float:
    """Spectral radius of the companion matrix built from per-(i,j,lag) slopes."""
    p, _, L = max_slope.shape
    comp = np.zeros((p * L, p * L))
    for lag in range(L):
        comp[:p, lag * p:(lag + 1) * p] = max_slope[:, :, lag]
    if L > 1:
        comp[p:, :p * (L - 1)] = np.eye(p * (L - 1))
    if not comp.any():
        return 0.0
    return float(np.abs(np.linalg.eigvals(comp)).max())


def _stabilize(slopes: np.ndarray) -> float:
    """Global shrink factor bringing the companion spectral radius under the cap."""
    factor = 1.0
    cur = slopes.copy()
    for _ in range(100):
        radius = _companion_radius(np.abs(cur))
        if radius <= SPECTRAL_RADIUS_CAP:
            break
        shrink = SPECTRAL_RADIUS_CAP / radius
        cur *= shrink
        factor *= shrink
    return factor


def build_mechanisms(graph: LaggedGraph, form: str, rng: np.random.Generator) -> MechanismSpec:
    """Sample one mechanism per node consuming exactly its parents."""
    if form not in MECHANISM_FORMS:
        raise PreconditionError(f"unknown mechanism form {form!r}")
    nodes: list[dict] = []
    for i in range(graph.p):
        parents = graph.parents(i)
        d = len(parents)
        if form == "linear":
            nodes.append({"coefs": _sample_coef(rng, d).tolist()})
        elif form == "monotonic":
            amps, slopes, offsets = [], [], []
            for _ in range(d):
                total = rng.uniform(0.8, 2.4) * (1.0 if rng.random() < 0.5 else -1.0)
                split = rng.uniform(0.3, 0.7)
                amps.append([total * split, total * (1 - split)])
                slopes.append(rng.uniform(0.8, 2.0, 2).tolist())
                offsets.append(rng.uniform(-1.0, 1.0, 2).tolist())
            nodes.append({"amps": amps, "slopes": slopes, "offsets": offsets})
        elif form == "pl_mix":
            kinds = (rng.random(d) < 0.5)
            w1 = _sample_coef(rng, d)
            w2 = _sample_coef(rng, d)
            kink = rng.uniform(-0.5, 0.5, d)
            nodes.append({"kinds": ["linear" if k else "pl" for k in kinds],
                          "w1": w1.tolist(), "w2": w2.tolist(), "kink": kink.tolist()})
        else:  # mlp_add / mlp_cat
            width = d if form == "mlp_add" else d + 1
            if form == "mlp_add" and d == 0:
                nodes.append({"w1": [], "b1": [], "w2": [], "bias": 0.0, "scale": 1.0})
                continue
            w1 = rng.standard_normal((width, MLP_HIDDEN)) / math.sqrt(max(width, 1))
            b1 = rng.standard_normal(MLP_HIDDEN) * 0.5
            w2 = rng.standard_normal(MLP_HIDDEN) / math.sqrt(MLP_HIDDEN)
            probe = rng.standard_normal((256, width))
            out = np.tanh(probe @ w1 + b1) @ w2
            target_std = rng.uniform(0.6, 1.0)
            scale = target_std / max(float(out.std()), 1e-6)
            bias = -float(out.mean()) * scale
            nodes.append({"w1": w1.tolist(), "b1": b1.tolist(),
                          "w2": (w2 * scale).tolist(), "bias": bias, "scale": scale})
    spec = MechanismSpec(form=form, nodes=nodes)

    # Stability control for unbounded (piecewise-)linear forms.
    if form in ("linear", "pl_mix"):
        slopes = np.zeros((graph.p, graph.p, graph.L))
        for i in range(graph.p):
            for e_idx, (j, lag) in enumerate(graph.parents(i)):
                if form == "linear":
                    s = abs(nodes[i]["coefs"][e_idx])
                else:
                    s = max(abs(nodes[i]["w1"][e_idx]), abs(nodes[i]["w2"][e_idx]))
                slopes[i, j, lag - 1] = s
        factor = _stabilize(slopes)
        if factor < 1.0:
            for i in range(graph.p):
                if form == "linear":
                    nodes[i]["coefs"] = [c * factor for c in nodes[i]["coefs"]]
                else:
                    nodes[i]["w1"] = [c * factor for c in nodes[i]["w1"]]
                    nodes[i]["w2"] = [c * factor for c in nodes[i]["w2"]]
    spec.validate_against(graph)
    return spec


def linear_weight_graph(graph: LaggedGraph, mech: MechanismSpec) -> LaggedGraph:
    """Attach linear coefficients as edge weights (linear form only)."""
    if mech.form != "linear":
        raise PreconditionError("weights only defined for the linear form")
    weights = {}
    for i in range(graph.p):
        for e_idx, (j, lag) in enumerate(graph.parents(i)):
            weights[(i, j, lag)] = float(mech.nodes[i]["coefs"][e_idx])
    return LaggedGraph(graph.p, graph.L, set(graph.edges), weights)


def _resample_node_row(p: int, lag_cap: int, in_degree: float, sampling: str,
                       rng: np.random.Generator) -> set:
    if sampling == "exact_in_degree":
        return _exact_node_row(p, lag_cap, in_degree, rng)
    prob = min(in_degree / (p * lag_cap), 1.0)
    mask = rng.random((p, lag_cap)) < prob
    return {(int(j), int(l) + 1) for j, l in zip(*np.nonzero(mask))}


def sample_schedule(
    p: int,
    L: int,
    expected_in_degree: float,
    form: str,
    lengths: list[int],
    rng: np.random.Generator,
    drift_mode: str = "resample",
    rewire_fraction: float = 0.2,
    transition_prob: float = 0.3,
    variable_lag: bool = False,
    sampling: str = "exact_in_degree",
) -> RegimeSchedule:
    """Piecewise-constant regime schedule over the given segment lengths."""
    if drift_mode not in ("resample", "minimal_change"):
        raise PreconditionError(f"unknown drift mode {drift_mode!r}")
    if sampling not in ("exact_in_degree", "bernoulli"):
        raise PreconditionError(f"unknown graph sampling {sampling!r}")
    if expected_in_degree < 0 or expected_in_degree > p * L:
        raise DensityError(f"expected in-degree {expected_in_degree} outside [0, p*L={p * L}]")
    segments: list[Segment] = []
    for k, length in enumerate(lengths):
        if k == 0 or variable_lag:
            lag_cap = int(rng.integers(1, L + 1)) if variable_lag else L
            edges = set()
            for i in range(p):
                edges |= {(i, j, l) for j, l in
                          _resample_node_row(p, lag_cap, expected_in_degree, sampling, rng)}
            graph = LaggedGraph(p, L, edges)
            mech = build_mechanisms(graph, form, rng)
        elif drift_mode == "resample":
            prev_graph, prev_mech = segments[-1].graph, segments[-1].mechanisms
            edges = set(prev_graph.edges)
            changed = [i for i in range(p) if rng.random() < transition_prob]
            for i in changed:
                edges = {e for e in edges if e[0] != i}
                edges |= {(i, j, l) for j, l in
                          _resample_node_row(p, L, expected_in_degree, sampling, rng)}
            graph = LaggedGraph(p, L, edges)
            mech = build_mechanisms(graph, form, rng)
            for i in range(p):
                if i not in changed:
                    mech.nodes[i] = prev_mech.nodes[i]
            mech.validate_against(graph)
        else:  # minimal_change
            prev_graph, prev_mech = segments[-1].graph, segments[-1].mechanisms
            edges = set(prev_graph.edges)
            n_rewire = math.ceil(rewire_fraction * len(edges)) if edges else 0
            ordered = sorted(edges)
            drop_idx = rng.choice(len(ordered), size=min(n_rewire, len(ordered)), replace=False)
            dropped = {ordered[int(i)] for i in drop_idx}
            edges -= dropped
            guard = 0
            while dropped and len(edges) < len(prev_graph.edges) and guard < 100 * p * p * L:
                cand = (int(rng.integers(p)), int(rng.integers(p)), int(rng.integers(1, L + 1)))
                edges.add(cand)
                guard += 1
            graph = LaggedGraph(p, L, edges)
            affected = {e[0] for e in dropped} | {e[0] for e in edges - prev_graph.edges}
            mech = build_mechanisms(graph, form, rng)
            for i in range(p):
                if i not in affected:
                    mech.nodes[i] = prev_mech.nodes[i]
            mech.validate_against(graph)
        segments.append(Segment(length, graph, mech))
    return RegimeSchedule(segments, drift_mode=drift_mode, rewire_fraction=rewire_fraction,
                          transition_prob=transition_prob)


def single_regime(graph: LaggedGraph, mech: MechanismSpec, T: int) -> RegimeSchedule:
    return RegimeSchedule([Segment(T, graph, mech)])


def add_latents(schedule: RegimeSchedule, n_latent: int, rng: np.random.Generator) -> RegimeSchedule:
    """Attach autonomous AR(1) confounders, each feeding >= 2 observed variables."""
    if n_latent < 0:
        raise PreconditionError("n_latent must be >= 0")
    if n_latent == 0:
        return schedule
    p, L = schedule.p, schedule.L
    edges: list[tuple[int, int, int, float]] = []
    for k in range(n_latent):
        n_fed = int(rng.integers(2, 4))
        targets = rng.choice(p, size=min(n_fed, p), replace=False)
        for t in sorted(int(x) for x in targets):
            lag = int(rng.integers(1, L + 1))
            edges.append((t, k, lag, float(_sample_coef(rng))))
    return RegimeSchedule(
        segments=schedule.segments,
        drift_mode=schedule.drift_mode,
        rewire_fraction=schedule.rewire_fraction,
        transition_prob=schedule.transition_prob,
        latent=LatentSpec(n=n_latent, ar_coef=LATENT_AR_COEF, edges=edges),
    )


# ---------------------------------------------------------------------------
# Simulation


def _draw_noise(noise: NoiseSpec, rows: int, p: int, rng: np.random.Generator) -> np.ndarray:
    families = [noise.family] * p
    if noise.family == "mixed":
        base = [f for f in NOISE_FAMILIES if f != "mixed"]
        families = [base[int(k)] for k in rng.integers(0, len(base), size=p)]
    if noise.variance_mode == "equal":
        sigma2 = np.full(p, noise.sigma2)
    else:
        lo, hi = noise.var_range
        sigma2 = np.maximum(rng.uniform(lo, hi, size=p), VARIANCE_FLOOR)
    out = np.empty((rows, p))
    for v in range(p):
        fam = families[v]
        if fam == "gaussian":
            unit = rng.standard_normal(rows)
        elif fam == "uniform":
            unit = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=rows)
        elif fam == "laplace":
            unit = rng.laplace(0.0, 1.0 / math.sqrt(2.0), size=rows)
        else:  # student_t, rescaled to unit variance
            dof = noise.student_dof
            unit = rng.standard_t(dof, size=rows) / math.sqrt(dof / (dof - 2.0))
        out[:, v] = unit * math.sqrt(sigma2[v])
    return out


class _SegmentEvaluator:
    """Vectorized per-step evaluation of one segment's structural equations."""

    def __init__(self, seg: Segment, latent: LatentSpec | None, p: int):
        self.p = p
        self.form = seg.mechanisms.form
        g, mech = seg.graph, seg.mechanisms
        tgt, src, lag = [], [], []
        params: dict[str, list] = {}
        self.mlp_nodes: list[tuple[int, np.ndarray, np.ndarray, np.ndarray, float, np.ndarray, np.ndarray]] = []
        for i in range(p):
            parents = g.parents(i)
            node = mech.nodes[i]
            if self.form in ("mlp_add", "mlp_cat"):
                if self.form == "mlp_add" and not parents:
                    continue
                srcs = np.array([pj for pj, _ in parents], dtype=int)
                lags = np.array([pl for _, pl in parents], dtype=int)
                self.mlp_nodes.append((
                    i, np.array(node["w1"]), np.array(node["b1"]),
                    np.array(node["w2"]), float(node["bias"]), srcs, lags))
                continue
            for e_idx, (j, l) in enumerate(parents):
                tgt.append(i)
                src.append(j)
                lag.append(l)
                if self.form == "linear":
                    params.setdefault("coef", []).append(node["coefs"][e_idx])
                elif self.form == "monotonic":
                    params.setdefault("amps", []).append(node["amps"][e_idx])
                    params.setdefault("slopes", []).append(node["slopes"][e_idx])
                    params.setdefault("offsets", []).append(node["offsets"][e_idx])
                else:  # pl_mix
                    params.setdefault("kind", []).append(node["kinds"][e_idx] == "pl")
                    params.setdefault("w1", []).append(node["w1"][e_idx])
                    params.setdefault("w2", []).append(node["w2"][e_idx])
                    params.setdefault("kink", []).append(node["kink"][e_idx])
        self.tgt = np.array(tgt, dtype=int)
        self.src = np.array(src, dtype=int)
        self.lag = np.array(lag, dtype=int)
        self.params = {k: np.array(v) for k, v in params.items()}
        if self.form == "monotonic" and len(self.tgt):
            # offset term keeps each sigmoid-sum zero at the origin
            a, s, o = self.params["amps"], self.params["slopes"], self.params["offsets"]
            self.params["at_zero"] = (a * expit(-s * o)).sum(axis=1)

        self.lat_tgt = self.lat_idx = self.lat_lag = self.lat_w = None
        self.n_latent = latent.n if latent else 0
        self.latent_ar = latent.ar_coef if latent else 0.0
        if latent and latent.edges:
            self.lat_tgt = np.array([e[0] for e in latent.edges], dtype=int)
            self.lat_idx = np.array([e[1] for e in latent.edges], dtype=int)
            self.lat_lag = np.array([e[2] for e in latent.edges], dtype=int)
            self.lat_w = np.array([e[3] for e in latent.edges])

    def edge_contribs(self, vals: np.ndarray) -> np.ndarray:
        if self.form == "linear":
            return self.params["coef"] * vals
        if self.form == "monotonic":
            a, s, o = self.params["amps"], self.params["slopes"], self.params["offsets"]
            return (a * expit(s * (vals[:, None] - o))).sum(axis=1) - self.params["at_zero"]
        # pl_mix
        w1, w2, kink = self.params["w1"], self.params["w2"], self.params["kink"]
        pl = w1 * np.minimum(vals, kink) + w2 * np.maximum(vals - kink, 0.0)
        pl -= w1 * np.minimum(0.0, kink) + w2 * np.maximum(-kink, 0.0)
        return np.where(self.params["kind"], pl, w1 * vals)

    def step(self, buf: np.ndarray, t: int, noise_row: np.ndarray,
             lat_noise_row: np.ndarray | None, reads: list | None) -> None:
        p = self.p
        row = np.zeros(buf.shape[1])
        if self.form == "mlp_cat":
            row[:p] = 0.0
        else:
            row[:p] = noise_row
        if len(self.tgt):
            vals = buf[t - self.lag, self.src]
            if reads is not None:
                reads.extend((t - self.lag).tolist())
            np.add.at(row, self.tgt, self.edge_contribs(vals))
        for i, w1, b1, w2, bias, srcs, lags in self.mlp_nodes:
            x = buf[t - lags, srcs] if len(srcs) else np.empty(0)
            if reads is not None and len(srcs):
                reads.extend((t - lags).tolist())
            if self.form == "mlp_cat":
                x = np.concatenate([x, [noise_row[i]]])
            row[i] += float(np.tanh(x @ w1 + b1) @ w2 + bias)
        if self.n_latent:
            zcols = slice(p, p + self.n_latent)
            row[zcols] = self.latent_ar * buf[t - 1, zcols] + lat_noise_row
            if reads is not None:
                reads.append(t - 1)
            if self.lat_tgt is not None:
                lvals = buf[t - self.lat_lag, p + self.lat_idx]
                if reads is not None:
                    reads.extend((t - self.lat_lag).tolist())
                np.add.at(row, self.lat_tgt, self.lat_w * lvals)
        buf[t] = row


def simulate(
    schedule: RegimeSchedule,
    noise: NoiseSpec,
    T: int,
    burn_in: int = 200,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
    instrument: bool = False,
):
    """Run the recurrence, drop burn-in, and return a standardized dataset.

    Each step is computed only from strictly earlier rows of the state buffer.
    Raises UnstableSystemError naming the active segment if any value exceeds
    the blow-up limit before standardization.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    p, L = schedule.p, schedule.L
    if T < L + 1:
        raise PreconditionError(f"T={T} must be at least L+1={L + 1}")
    if burn_in < 0:
        raise PreconditionError("burn_in must be >= 0")
    if schedule.T != T:
        raise PreconditionError(f"schedule covers {schedule.T} steps, requested T={T}")

    n_lat = schedule.n_latent
    width = p + n_lat
    total = L + burn_in + T  # L history rows + burn-in + emitted horizon
    obs_noise = _draw_noise(noise, total, p, rng)
    lat_noise = rng.standard_normal((total, n_lat)) if n_lat else None

    evaluators = [_SegmentEvaluator(seg, schedule.latent, p) for seg in schedule.segments]
    seg_of = np.zeros(T, dtype=int)
    for k, (a, b) in enumerate(schedule.segment_bounds()):
        seg_of[a:b] = k

    buf = np.zeros((total, width))
    buf[:L, :p] = obs_noise[:L]
    if n_lat:
        buf[:L, p:] = lat_noise[:L]

    access_log: list[tuple[int, int]] = []
    for t in range(L, total):
        emit_idx = t - L - burn_in
        k = int(seg_of[emit_idx]) if emit_idx >= 0 else 0
        reads: list | None = [] if instrument else None
        evaluators[k].step(buf, t, obs_noise[t], lat_noise[t] if n_lat else None, reads)
        if instrument and reads:
            access_log.append((t, max(reads)))
        if np.abs(buf[t]).max() > BLOWUP_LIMIT:
            raise UnstableSystemError(
                f"values exceeded {BLOWUP_LIMIT:g} in segment {k} at step {t - L - burn_in}")

    raw = buf[L + burn_in:, :p]
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    if np.any(std == 0):
        raise UnstableSystemError("degenerate constant series; cannot standardize")
    data = (raw - mean) / std
    if not np.all(np.isfinite(data)):
        raise UnstableSystemError("non-finite values after standardization")
    ds = TimeSeriesDataset(
        data=data,
        schedule=schedule,
        noise=noise,
        norm_stats=[(float(m), float(s)) for m, s in zip(mean, std)],
        latent_count=n_lat,
        seed=seed,
        burn_in=burn_in,
    )
    if instrument:
        return ds, access_log
    return ds


# ---------------------------------------------------------------------------
# File formats


def save_dataset(ds: TimeSeriesDataset, path: str | Path) -> tuple[Path, Path]:
    """Write `<name>.bin` (little-endian float64, column-major) and `<name>.meta.json`."""
    path = Path(path)
    if path.suffix != ".bin":
        path = path.with_suffix(".bin")
    meta_path = path.with_suffix("").parent / (path.with_suffix("").name + ".meta.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.asarray(ds.data, dtype="<f8").tobytes(order="F"))
    meta = {
        "format": "lagcause-timeseries-v1",
        "T": ds.T,
        "p": ds.p,
        "L": ds.L,
        "layout": "column_major_float64_le",
        "schedule": ds.schedule.to_dict(),
        "noise": ds.noise.to_dict(),
        "norm_stats": [[m, s] for m, s in ds.norm_stats],
        "latent_count": ds.latent_count,
        "seed": ds.seed,
        "burn_in": ds.burn_in,
    }
    meta_path.write_text(dumps_canonical(meta))
    return path, meta_path


def load_dataset(path: str | Path) -> TimeSeriesDataset:
    path = Path(path)
    meta_path = path.with_suffix("").parent / (path.with_suffix("").name + ".meta.json")
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    if not meta_path.exists():
        raise FileNotFoundError(f"dataset sidecar not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    T, p = int(meta["T"]), int(meta["p"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if raw.size != T * p:
        raise GraphError(f"dataset {path} holds {raw.size} values, expected {T * p}")
    data = raw.reshape((T, p), order="F").copy()
    return TimeSeriesDataset(
        data=data,
        schedule=RegimeSchedule.from_dict(meta["schedule"]),
        noise=NoiseSpec.from_dict(meta["noise"]),
        norm_stats=[(float(m), float(s)) for m, s in meta["norm_stats"]],
        latent_count=int(meta["latent_count"]),
        seed=meta["seed"],
        burn_in=int(meta["burn_in"]),
    )
