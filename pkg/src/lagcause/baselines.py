"""Classical reference methods: pairwise and multivariate Granger tests, a
squared-VAR-coefficient oracle tensor, and density-matched random guessing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg import qr, solve_triangular

from .attribution import AttributionTensor
from .graphs import LaggedGraph
from .sim import DensityError, TimeSeriesDataset
from .timeouts import check_deadline


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


@dataclass
class GrangerConfig:
    max_lag: int
    alpha: float = 0.05
    test: str = "f_test"  # "f_test" (pairwise) | "t_test" (multivariate)
    bonferroni: bool = False

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.max_lag < 1:
            raise ValueError("max_lag must be >= 1")
        if self.test not in ("f_test", "t_test"):
            raise ValueError(f"unknown test {self.test!r}")


def _as_array(dataset) -> np.ndarray:
    return dataset.data if isinstance(dataset, TimeSeriesDataset) else np.asarray(dataset)


def lagged_design(data: np.ndarray, L: int):
    """Responses Y[t] with regressors [X[t-1], ..., X[t-L], 1].

    Column (l-1)*p + j holds variable j at lag l; the intercept is last.
    """
    T, p = data.shape
    if T <= L:
        raise ValueError(f"need T > L, got T={T}, L={L}")
    n = T - L
    X = np.empty((n, p * L + 1))
    for lag in range(1, L + 1):
        X[:, (lag - 1) * p:lag * p] = data[L - lag:T - lag]
    X[:, -1] = 1.0
    return X, data[L:]


class _OLSFit:
    """QR-based least squares with per-coefficient t statistics."""

    def __init__(self, X: np.ndarray, Y: np.ndarray):
        n, k = X.shape
        if n <= k:
            raise RankDeficiencyError(f"{n} rows for {k} regressors")
        Q, R, piv = qr(X, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        if diag.min() <= max(n, k) * np.finfo(float).eps * diag.max() or diag.max() == 0:
            raise RankDeficiencyError("design matrix is rank deficient")
        Y2 = Y if Y.ndim == 2 else Y[:, None]
        beta_piv = solve_triangular(R, Q.T @ Y2)
        self.beta = np.empty_like(beta_piv)
        self.beta[piv] = beta_piv
        resid = Y2 - X @ self.beta
        self.n, self.k = n, k
        self.dof = n - k
        self.rss = (resid * resid).sum(axis=0)
        sigma2 = self.rss / self.dof
        Rinv = solve_triangular(R, np.eye(k))
        xtx_diag = np.empty(k)
        xtx_diag[piv] = (Rinv * Rinv).sum(axis=1)
        self.se = np.sqrt(np.outer(xtx_diag, sigma2))

    @property
    def tstats(self) -> np.ndarray:
        return self.beta / self.se


def fit_var(data: np.ndarray, L: int) -> _OLSFit:
    X, Y = lagged_design(np.asarray(data), L)
    return _OLSFit(X, Y)


def multivariate_granger(dataset, config: GrangerConfig) -> LaggedGraph:
    """Full VAR(L) least squares; an edge per coefficient significant at alpha."""
    data = _as_array(dataset)
    T, p = data.shape
    L = config.max_lag
    if T < 10 * p * L:
        raise ValueError(f"need T >= 10*p*L = {10 * p * L} samples, got {T}")
    fit = fit_var(data, L)
    t = fit.tstats[:-1]  # drop intercept row
    pvals = 2.0 * stats.t.sf(np.abs(t), fit.dof)
    level = config.alpha / (p * p * L) if config.bonferroni else config.alpha
    edges = set()
    for col, i in zip(*np.nonzero(pvals < level)):
        lag, j = divmod(int(col), p)
        edges.add((int(i), j, lag + 1))
    return LaggedGraph(p, L, edges)


def pairwise_granger(dataset, config: GrangerConfig,
                     deadline: float | None = None) -> LaggedGraph:
    """Per ordered pair (j -> i): F-test of adding j's lags to an AR(L) of i,
    then per-lag t tests locate the significant lags."""
    data = _as_array(dataset)
    T, p = data.shape
    L = config.max_lag
    if T < 10 * L:
        raise ValueError(f"need T >= 10*L = {10 * L} samples, got {T}")
    n = T - L
    n_pairs = p * (p - 1)
    f_level = config.alpha / n_pairs if config.bonferroni else config.alpha
    lags = {lag: data[L - lag:T - lag] for lag in range(1, L + 1)}
    ones = np.ones((n, 1))
    edges = set()
    for i in range(p):
        check_deadline(deadline, "pairwise granger")
        y = data[L:, i]
        own = np.column_stack([lags[lag][:, i] for lag in range(1, L + 1)])
        restricted = _OLSFit(np.hstack([own, ones]), y)
        for j in range(p):
            if j == i:
                continue
            other = np.column_stack([lags[lag][:, j] for lag in range(1, L + 1)])
            full = _OLSFit(np.hstack([own, other, ones]), y)
            num = (restricted.rss[0] - full.rss[0]) / L
            den = full.rss[0] / full.dof
            fstat = num / den if den > 0 else np.inf
            if stats.f.sf(fstat, L, full.dof) >= f_level:
                continue
            tcrit = stats.t.ppf(1.0 - config.alpha / 2.0, full.dof)
            tvals = full.tstats[L:2 * L, 0]
            for lag_idx in np.nonzero(np.abs(tvals) > tcrit)[0]:
                edges.add((i, j, int(lag_idx) + 1))
    return LaggedGraph(p, L, edges)


def var_coefficient_oracle(dataset, L: int) -> AttributionTensor:
    """Squared OLS VAR coefficients as a (target, source, lag) score tensor.

    Serves as the independent linear-system oracle for attribution checks.
    """
    data = _as_array(dataset)
    p = data.shape[1]
    fit = fit_var(data, L)
    beta = fit.beta[:-1]  # (p*L, p)
    scores = np.empty((p, p, L))
    for lag in range(1, L + 1):
        scores[:, :, lag - 1] = (beta[(lag - 1) * p:lag * p].T) ** 2
    return AttributionTensor(scores, "mean_sq_gradient", n_samples=fit.n,
                             meta={"estimator": "ols_var"})


def var_weight_tensor(dataset, L: int) -> np.ndarray:
    """Signed OLS VAR coefficients, indexed [target, source, lag-1]."""
    data = _as_array(dataset)
    p = data.shape[1]
    beta = fit_var(data, L).beta[:-1]
    out = np.empty((p, p, L))
    for lag in range(1, L + 1):
        out[:, :, lag - 1] = beta[(lag - 1) * p:lag * p].T
    return out


def random_guess(p: int, L: int, expected_in_degree: float,
                 rng: np.random.Generator) -> LaggedGraph:
    """I.i.d. Bernoulli edges matched to the ground-truth density."""
    if expected_in_degree < 0 or expected_in_degree > p * L:
        raise DensityError(f"expected in-degree {expected_in_degree} outside [0, {p * L}]")
    mask = rng.random((p, p, L)) < expected_in_degree / (p * L)
    edges = {(int(i), int(j), int(l) + 1) for i, j, l in zip(*np.nonzero(mask))}
    return LaggedGraph(p, L, edges)
