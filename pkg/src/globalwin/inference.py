"""Point, interval and test inference for the global win probability.

The variance of the estimate is taken to be the variance of the fitted arm
effect, ``Var(theta_hat) = Var(beta1_hat)``, even though
``theta_hat = (beta1_hat + 1) / 2``. This is deliberate: it is the
two-term variance ``Var(Y1) + Var(Y0)`` of the mean treatment win fraction
(``theta_hat = Y1`` and ``1 - theta_hat = Y0`` are estimated separately),
and it is the convention the published case-study numbers follow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special, stats

from .data import TrialDataset
from .errors import DegreesOfFreedomError
from .mixed import LmmFit
from .ranks import GlobalWinFractionTable, RankTable, win_loss_tie_proportions


@dataclass(frozen=True)
class GwpEstimate:
    theta_hat: float
    se: float
    df: int
    icc_hat: float
    beta1: float
    weights: tuple[float, ...] = ()
    K: int = 1


@dataclass(frozen=True)
class IntervalEstimate:
    scale: str
    level: float
    lower: float
    upper: float
    critical: str
    estimate: float

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class TestResult:
    statistic: float
    reference: str
    df: int | None
    p_value: float
    null_value: float
    alternative: str = "two-sided"


@dataclass(frozen=True)
class WinDifference:
    delta_hat: float
    se: float
    interval: IntervalEstimate


@dataclass(frozen=True)
class WinOdds:
    lambda_hat: float
    se_log_lambda: float
    interval: IntervalEstimate


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def expit(x: float) -> float:
    return float(special.expit(x))


def estimate_gwp(
    fit: LmmFit, weights: Sequence[float] = (), K: int | None = None
) -> GwpEstimate:
    weights = tuple(float(w) for w in weights)
    if K is None:
        K = max(len(weights), 1)
    return GwpEstimate(
        theta_hat=0.5 * (fit.beta1 + 1.0),
        se=fit.se_beta1,
        df=fit.df,
        icc_hat=fit.components.rho,
        beta1=fit.beta1,
        weights=weights,
        K=K,
    )


def critical_value(level: float, critical: str = "t", df: int | None = None) -> float:
    """Upper ``(1 - level) / 2`` quantile of N(0, 1) or Student t(df)."""
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    q = 1.0 - (1.0 - level) / 2.0
    if critical == "z":
        return float(special.ndtri(q))
    if critical == "t":
        if df is None or df < 1:
            raise DegreesOfFreedomError(
                f"t critical value needs df >= 1 (got df={df}); "
                "use more clusters, a df override, or normal critical values"
            )
        return float(stats.t.ppf(q, df))
    raise ValueError(f"critical must be 't' or 'z', not {critical!r}")


def confidence_interval(
    e: GwpEstimate, level: float = 0.95, scale: str = "logit", critical: str = "t"
) -> IntervalEstimate:
    c = critical_value(level, critical, e.df)
    th, se = e.theta_hat, e.se
    if scale == "identity":
        lo, hi = th - c * se, th + c * se
    elif scale == "logit":
        if not 0 < th < 1:
            raise ValueError("logit interval needs 0 < theta_hat < 1")
        half = c * se / (th * (1.0 - th))
        lo, hi = expit(logit(th) - half), expit(logit(th) + half)
    else:
        raise ValueError(f"scale must be 'identity' or 'logit', not {scale!r}")
    return IntervalEstimate(scale, level, lo, hi, critical, th)


def _p_value(stat: float, reference: str, df: int | None, alternative: str) -> float:
    if reference == "t":
        if df is None or df < 1:
            raise DegreesOfFreedomError(f"t reference needs df >= 1 (got df={df})")
        sf, cdf = stats.t.sf(stat, df), stats.t.cdf(stat, df)
        two = 2.0 * stats.t.sf(abs(stat), df)
    else:
        sf, cdf = special.ndtr(-stat), special.ndtr(stat)
        two = 2.0 * special.ndtr(-abs(stat))
    if alternative == "two-sided":
        return float(min(1.0, two))
    if alternative == "greater":
        return float(sf)
    if alternative == "less":
        return float(cdf)
    raise ValueError(f"unknown alternative {alternative!r}")


def hypothesis_test(
    e: GwpEstimate,
    scale: str = "identity",
    reference: str | None = None,
    alternative: str = "two-sided",
) -> TestResult:
    """Test ``H0: theta = 0.5``.

    The identity statistic defaults to a t(df) reference, the logit one to
    N(0, 1). The logit statistic divides ``logit(theta_hat)`` by its delta
    method standard error ``se / (theta_hat (1 - theta_hat))``, the same
    scale used by the logit interval.
    """
    th, se = e.theta_hat, e.se
    if scale == "identity":
        reference = reference or "t"
        stat = (th - 0.5) / se if se > 0 else (0.0 if th == 0.5 else math.copysign(math.inf, th - 0.5))
    elif scale == "logit":
        reference = reference or "z"
        lg = logit(th)
        se_lg = se / (th * (1.0 - th))
        stat = lg / se_lg if se_lg > 0 else (0.0 if lg == 0 else math.copysign(math.inf, lg))
    else:
        raise ValueError(f"scale must be 'identity' or 'logit', not {scale!r}")
    if reference not in ("t", "z"):
        raise ValueError("reference must be 't' or 'z'")
    df = e.df if reference == "t" else None
    return TestResult(float(stat), reference, df, _p_value(stat, reference, df, alternative),
                      0.5, alternative)


def to_win_difference(
    e: GwpEstimate, level: float = 0.95, critical: str = "t"
) -> WinDifference:
    delta = 2.0 * e.theta_hat - 1.0
    se = 2.0 * e.se
    c = critical_value(level, critical, e.df)
    ci = IntervalEstimate("identity", level, delta - c * se, delta + c * se, critical, delta)
    return WinDifference(delta, se, ci)


def to_win_odds(e: GwpEstimate, level: float = 0.95, critical: str = "t") -> WinOdds:
    """Win odds with an interval built symmetric on the log scale."""
    th = e.theta_hat
    if not 0 < th < 1:
        raise ValueError("win odds need 0 < theta_hat < 1")
    lam = th / (1.0 - th)
    se_log = e.se / (th * (1.0 - th))
    c = critical_value(level, critical, e.df)
    log_lam = math.log(lam)
    ci = IntervalEstimate("log", level, math.exp(log_lam - c * se_log),
                          math.exp(log_lam + c * se_log), critical, lam)
    return WinOdds(lam, se_log, ci)


@dataclass(frozen=True)
class RankSumCheck:
    lhs: float
    rhs: float
    abs_diff: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.abs_diff < self.tolerance


def rank_sum_equivalence(
    g: GlobalWinFractionTable, tables: Sequence[RankTable], theta_unweighted: float
) -> RankSumCheck:
    """Compare the mean rank-sum difference with ``N K (theta - 0.5)``."""
    w = np.asarray(g.weights, dtype=float)
    if not np.allclose(w, w[0], rtol=0, atol=0):
        raise ValueError("rank-sum equivalence holds for equal endpoint weights only")
    K = len(tables)
    N = g.N
    rank_sum = np.sum([t.overall for t in tables], axis=0)
    lhs = float(rank_sum[g.arm == 1].mean() - rank_sum[g.arm == 0].mean())
    rhs = N * K * (theta_unweighted - 0.5)
    return RankSumCheck(lhs, rhs, abs(lhs - rhs), 1e-8 * N * K)


def u_statistic_theta(d: TrialDataset, weights: Sequence[float] | None = None) -> float:
    """Weighted mean over endpoints of the two-sample U statistic
    ``(wins + ties / 2) / (N_1 N_0)``, computed from pair counts."""
    w = d.weights if weights is None else np.asarray(weights, dtype=float)
    thetas = []
    for k in range(d.K):
        pc = win_loss_tie_proportions(d, k)
        thetas.append((pc.wins + 0.5 * pc.ties) / pc.pairs)
    return float(np.dot(w, thetas) / np.sum(w))


def cohen_to_theta(delta: float) -> float:
    return float(special.ndtr(delta / math.sqrt(2.0)))


def theta_to_cohen(theta: float) -> float:
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    return float(math.sqrt(2.0) * special.ndtri(theta))
