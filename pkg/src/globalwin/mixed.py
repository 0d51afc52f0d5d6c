"""Random-intercept linear mixed model fitted by REML.

The model is ``y_icj = b0 + b1 * arm_i + a_ic + e_icj`` with
``a_ic ~ N(0, s2_alpha)`` and ``e_icj ~ N(0, s2_eps)``. Because the only
fixed-effect covariate is constant within clusters, every quantity the
restricted likelihood needs reduces to cluster sums, so a fit costs
``O(C)`` per likelihood evaluation after one pass over the data.

The restricted likelihood is profiled over the total variance and
maximised over the intracluster correlation ``rho`` in ``[0, 1 - 1e-8]``.
Brent's bounded method locates the optimum; the analytic score is then
solved with a bracketing root finder, which gives the optimum to machine
precision rather than the ``sqrt(eps)`` attainable from function values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import ConvergenceError, DataError
from .ranks import GlobalWinFractionTable

RHO_MAX = 1.0 - 1e-8
RHO_XTOL = 1e-10
MAX_ITER = 200


@dataclass(frozen=True)
class VarianceComponents:
    sigma2_alpha: float
    sigma2_eps: float

    @property
    def total(self) -> float:
        return self.sigma2_alpha + self.sigma2_eps

    @property
    def rho(self) -> float:
        tot = self.total
        return self.sigma2_alpha / tot if tot > 0 else float("nan")


@dataclass(frozen=True)
class LmmFit:
    beta0: float
    beta1: float
    se_beta1: float
    components: VarianceComponents
    df: int
    n_clusters: int
    C0: int
    C1: int
    arm_means: tuple[float, float]
    arm_variances: tuple[float, float]
    iterations: int
    reml_criterion: float  # -2 log restricted likelihood at the optimum
    boundary: bool

    @property
    def rho(self) -> float:
        return self.components.rho


@dataclass
class _ClusterSums:
    n: np.ndarray
    s: np.ndarray
    ss: np.ndarray
    arm: np.ndarray
    N: int

    @classmethod
    def from_table(cls, g: GlobalWinFractionTable) -> "_ClusterSums":
        _, codes = np.unique(g.cluster_codes, return_inverse=True)
        n = np.bincount(codes).astype(float)
        s = np.bincount(codes, weights=g.y)
        ss = np.bincount(codes, weights=g.y * g.y)
        arm = np.zeros(n.shape[0], dtype=np.int64)
        arm[codes] = g.arm
        return cls(n, s, ss, arm, int(g.y.shape[0]))

    @property
    def C(self) -> int:
        return int(self.n.shape[0])

    def arm_count(self, i: int) -> int:
        return int(np.sum(self.arm == i))


class _Profile:
    """Profiled restricted likelihood in the variance ratio
    ``gamma = s2_alpha / s2_eps`` (``rho = gamma / (1 + gamma)``)."""

    def __init__(self, cs: _ClusterSums):
        self.cs = cs
        self.p = 2

    def _pieces(self, gamma: float):
        cs = self.cs
        d = 1.0 + gamma * cs.n
        a = cs.n / d
        W = np.array([a[cs.arm == 0].sum(), a[cs.arm == 1].sum()])
        ybar = cs.s / cs.n
        m = np.array(
            [np.sum(a[cs.arm == i] * ybar[cs.arm == i]) / W[i] for i in (0, 1)]
        )
        mc = m[cs.arm]
        t = cs.s - cs.n * mc  # sum of residuals per cluster
        sr2 = cs.ss - 2.0 * mc * cs.s + cs.n * mc * mc
        Q = float(np.sum(sr2 - gamma / d * t * t))
        return d, a, W, m, t, Q

    def loglik(self, gamma: float) -> float:
        d, _, W, _, _, Q = self._pieces(gamma)
        if Q <= 0:
            return -math.inf
        return -0.5 * (
            (self.cs.N - self.p) * math.log(Q) + np.log(d).sum() + np.log(W).sum()
        )

    def score(self, gamma: float) -> float:
        d, a, W, _, t, Q = self._pieces(gamma)
        u = t / d
        trace = a.sum() - np.sum(a * a / W[self.cs.arm])
        return 0.5 * ((self.cs.N - self.p) * np.sum(u * u) / Q - trace)


def _gamma(rho: float) -> float:
    return rho / (1.0 - rho)


def _solve_gamma(prof: _Profile) -> tuple[float, int, bool]:
    def objective(rho):
        return -prof.loglik(_gamma(rho))

    res = optimize.minimize_scalar(
        objective,
        bounds=(0.0, RHO_MAX),
        method="bounded",
        options={"xatol": RHO_XTOL, "maxiter": MAX_ITER},
    )
    if not res.success:
        raise ConvergenceError(f"REML optimiser did not converge: {res.message}")
    iterations = int(res.nfev)
    rho_b = float(res.x)
    if rho_b > RHO_MAX - 1e-6:
        raise ConvergenceError(
            "REML optimum at rho -> 1: within-cluster variance is zero"
        )

    s0 = prof.score(0.0)
    l0 = prof.loglik(0.0)
    if s0 <= 0 and l0 >= prof.loglik(_gamma(rho_b)):
        return 0.0, iterations, True

    g_b = _gamma(rho_b)
    lo, hi = g_b * (1 - 1e-4), g_b * (1 + 1e-4) + 1e-12
    for _ in range(MAX_ITER):
        iterations += 2
        s_lo, s_hi = prof.score(lo), prof.score(hi)
        if s_lo > 0 and s_hi < 0:
            break
        if s_lo <= 0:
            lo = lo / 4 if lo > 1e-300 else 0.0
            if lo == 0.0 and s0 <= 0:
                return 0.0, iterations, True
        if s_hi >= 0:
            hi = hi * 4
    else:
        raise ConvergenceError("could not bracket the REML score root")
    root, info = optimize.brentq(
        prof.score, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
        maxiter=MAX_ITER, full_output=True,
    )
    iterations += info.iterations
    # keep the better of interior root and boundary
    if prof.loglik(root) < l0:
        return 0.0, iterations, True
    return float(root), iterations, False


def fit_reml(g: GlobalWinFractionTable, df: int | None = None) -> LmmFit:
    """Fit the random-intercept model to (global) win fractions by REML.

    ``df`` overrides the default ``C - 2`` degrees of freedom.
    """
    cs = _ClusterSums.from_table(g)
    C0, C1 = cs.arm_count(0), cs.arm_count(1)
    if C0 < 1 or C1 < 1:
        raise DataError("each arm needs at least one cluster")
    if cs.N <= 2:
        raise DataError("at least three observations are needed")
    prof = _Profile(cs)
    if prof._pieces(0.0)[-1] <= 1e-300:
        raise ConvergenceError("zero residual variance: all fractions equal within arms")

    if cs.C == 2:
        # one cluster per arm: cluster effects are confounded with the arm
        # effect and the restricted likelihood is flat, so report the
        # boundary fit and let the zero df stop t-based inference
        gamma, iterations, boundary = 0.0, 0, True
    else:
        gamma, iterations, boundary = _solve_gamma(prof)
    d, a, W, m, _, Q = prof._pieces(gamma)
    s2_eps = Q / (cs.N - 2)
    s2_alpha = gamma * s2_eps
    var = s2_eps / W
    N, p = cs.N, 2
    crit = (N - p) * (math.log(2 * math.pi) + 1.0 + math.log(s2_eps))
    crit += float(np.log(d).sum() + np.log(W).sum())
    return LmmFit(
        beta0=float(m[0]),
        beta1=float(m[1] - m[0]),
        se_beta1=float(math.sqrt(var[0] + var[1])),
        components=VarianceComponents(float(s2_alpha), float(s2_eps)),
        df=int(cs.C - 2 if df is None else df),
        n_clusters=cs.C,
        C0=C0,
        C1=C1,
        arm_means=(float(m[0]), float(m[1])),
        arm_variances=(float(var[0]), float(var[1])),
        iterations=iterations,
        reml_criterion=float(crit),
        boundary=boundary,
    )


def reml_loglik(g: GlobalWinFractionTable, rho: float) -> float:
    """Profiled restricted log-likelihood at ``rho`` (up to a constant)."""
    return _Profile(_ClusterSums.from_table(g)).loglik(_gamma(rho))


def balanced_anova_components(g: GlobalWinFractionTable) -> VarianceComponents:
    """Method-of-moments components for equal cluster sizes.

    Uses the pooled within-cluster mean square and the between-cluster
    mean square about the arm means (``C - 2`` df).
    """
    cs = _ClusterSums.from_table(g)
    if not np.all(cs.n == cs.n[0]):
        raise DataError("balanced ANOVA estimator needs equal cluster sizes")
    n, C, N = cs.n[0], cs.C, cs.N
    if C - 2 < 1 or N - C < 1:
        raise DataError("too few clusters or observations for ANOVA components")
    ybar = cs.s / n
    arm_mean = np.array([ybar[cs.arm == i].mean() for i in (0, 1)])
    msw = float(np.sum(cs.ss - n * ybar * ybar)) / (N - C)
    msb = float(n * np.sum((ybar - arm_mean[cs.arm]) ** 2)) / (C - 2)
    msw = max(msw, 0.0)
    return VarianceComponents(max(0.0, (msb - msw) / n), msw)


def gls_arm_means(g: GlobalWinFractionTable, vc: VarianceComponents) -> dict:
    """Weighted cluster-mean estimator of each arm mean and its variance."""
    cs = _ClusterSums.from_table(g)
    sigma2 = vc.total
    rho = vc.rho if sigma2 > 0 else 0.0
    scale = sigma2 if sigma2 > 0 else 1.0
    w = 1.0 / (scale / cs.n * (1.0 + (cs.n - 1.0) * rho))
    ybar = cs.s / cs.n
    out = {}
    for i in (0, 1):
        m = cs.arm == i
        out[f"mean{i}"] = float(np.sum(w[m] * ybar[m]) / np.sum(w[m]))
        out[f"var{i}"] = float(1.0 / np.sum(w[m])) if sigma2 > 0 else 0.0
    return out
