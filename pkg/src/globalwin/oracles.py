"""Randomised self-checks pairing each fast path with an independent route.

Each suite draws seeded fixtures and returns a :class:`SuiteResult`; a
failing case carries the fixture seed so it can be replayed with
:func:`random_fixture`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import EndpointSpec, TrialDataset
from .inference import (
    estimate_gwp,
    rank_sum_equivalence,
    to_win_difference,
    to_win_odds,
    u_statistic_theta,
)
from .mixed import balanced_anova_components, fit_reml
from .ranks import (
    global_win_fractions,
    rank_tables,
    win_fractions,
    win_fractions_bruteforce,
)


def random_fixture(
    seed: int,
    clusters: tuple[int, int] = (4, 10),
    sizes: tuple[int, int] = (2, 8),
    K: int | None = None,
    balanced: bool = False,
    cluster_sd: float = 0.0,
) -> TrialDataset:
    """Small clustered dataset with tied ordinal values.

    ``cluster_sd`` adds a latent cluster shift before rounding, which makes
    interior variance-component solutions likely.
    """
    rng = np.random.default_rng(seed)
    C = int(rng.integers(clusters[0], clusters[1] + 1))
    K = int(rng.integers(1, 4)) if K is None else K
    arm_of = np.arange(C) % 2
    rng.shuffle(arm_of)
    if balanced:
        n = np.full(C, int(rng.integers(sizes[0], sizes[1] + 1)))
    else:
        n = rng.integers(sizes[0], sizes[1] + 1, size=C)
    codes = np.repeat(np.arange(C), n)
    arm = arm_of[codes]
    levels = rng.integers(2, 8, size=K)
    shift = rng.normal(0, cluster_sd, size=(C, K))[codes]
    latent = rng.normal(0, 1, size=(codes.size, K)) + shift + 0.3 * arm[:, None]
    values = np.clip(np.round(latent * levels / 3 + levels / 2), 0, levels)
    eps = tuple(EndpointSpec(f"e{k}") for k in range(K))
    ids = np.concatenate([np.arange(m) for m in n]).astype(str)
    return TrialDataset(eps, arm, np.char.add("c", codes.astype(str)), ids, values)


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    worst: float = 0.0
    tolerance: float = 0.0
    failures: list[tuple[int, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.cases > 0 and not self.failures

    def record(self, seed: int, error: float) -> None:
        self.cases += 1
        if not error <= self.worst:
            self.worst = error
        if not error <= self.tolerance:
            self.failures.append((seed, error))


def rank_vs_bruteforce(seed: int, count: int = 200, fault: float = 0.0) -> SuiteResult:
    res = SuiteResult("rank form vs pairwise win fractions", tolerance=1e-12)
    for i in range(count):
        s = seed + i
        d = random_fixture(s)
        err = 0.0
        for k in range(d.K):
            fast = win_fractions(d, k).y + fault
            slow = win_fractions_bruteforce(d, k).y
            err = max(err, float(np.max(np.abs(fast - slow))))
        res.record(s, err)
    return res


def _balanced(seed: int) -> TrialDataset:
    return random_fixture(seed, balanced=True, cluster_sd=0.7)


def u_statistic_identity(seed: int, count: int = 100, fault: float = 0.0) -> SuiteResult:
    res = SuiteResult("REML estimate vs mean of U statistics (equal sizes)", tolerance=1e-10)
    for i in range(count):
        s = seed + i
        d = _balanced(s)
        g = global_win_fractions([win_fractions(d, k) for k in range(d.K)], d.weights)
        theta = estimate_gwp(fit_reml(g), d.weights).theta_hat + fault
        res.record(s, abs(theta - u_statistic_theta(d)))
    return res


def rank_sum_identity(seed: int, count: int = 100, fault: float = 0.0) -> SuiteResult:
    res = SuiteResult("mean rank-sum difference vs N K (theta - 0.5)", tolerance=1e-8)
    for i in range(count):
        s = seed + i
        d = _balanced(s)
        tables = [rank_tables(d, k) for k in range(d.K)]
        g = global_win_fractions([win_fractions(d, k) for k in range(d.K)], d.weights)
        theta = float(g.y[g.arm == 1].mean()) + fault
        chk = rank_sum_equivalence(g, tables, theta)
        res.record(s, chk.abs_diff / (d.N * d.K))
    return res


def reml_vs_anova(seed: int, count: int = 100, fault: float = 0.0) -> SuiteResult:
    """Relative agreement on balanced fixtures whose moment solution is
    interior; boundary fixtures are skipped until ``count`` are checked."""
    res = SuiteResult("REML vs balanced ANOVA variance components", tolerance=1e-8)
    s = seed
    while res.cases < count:
        d = _balanced(s)
        g = global_win_fractions([win_fractions(d, k) for k in range(d.K)], d.weights)
        anova = balanced_anova_components(g)
        if anova.sigma2_alpha > 1e-6 * anova.sigma2_eps:
            fit = fit_reml(g)
            rel = max(
                abs(fit.components.sigma2_alpha * (1 + fault) - anova.sigma2_alpha) / anova.sigma2_alpha,
                abs(fit.components.sigma2_eps - anova.sigma2_eps) / anova.sigma2_eps,
            )
            res.record(s, rel)
        s += 1
    return res


def transform_consistency(seed: int, count: int = 100, fault: float = 0.0) -> SuiteResult:
    """Win difference and odds identities plus arm-swap symmetry."""
    res = SuiteResult("transform identities and arm-swap symmetry", tolerance=1e-12)
    for i in range(count):
        s = seed + i
        d = random_fixture(s, clusters=(6, 10))
        fit = fit_reml(_global(d))
        fit_m = fit_reml(_global(d.mirrored()))
        e, em = estimate_gwp(fit, d.weights), estimate_gwp(fit_m, d.weights)
        wd, wdm = to_win_difference(e), to_win_difference(em)
        wo, wom = to_win_odds(e), to_win_odds(em)
        th = e.theta_hat + fault
        err = max(
            abs(wd.delta_hat - (2 * th - 1)),
            abs(wo.lambda_hat - th / (1 - th)),
            abs(em.theta_hat - (1 - e.theta_hat)),
            abs(wdm.delta_hat + wd.delta_hat),
            abs(wom.lambda_hat * wo.lambda_hat - 1),
            abs(em.se - e.se),
        )
        res.record(s, err)
    return res


def _global(d: TrialDataset):
    return global_win_fractions([win_fractions(d, k) for k in range(d.K)], d.weights)


SUITES = {
    "rank_form": rank_vs_bruteforce,
    "u_statistic": u_statistic_identity,
    "rank_sum": rank_sum_identity,
    "reml_anova": reml_vs_anova,
    "transforms": transform_consistency,
}


def run_all(seed: int = 12345, fault: str | None = None, scale: float = 1.0) -> list[SuiteResult]:
    """Run every suite; ``fault`` names a suite to perturb (test hook)."""
    out = []
    for name, suite in SUITES.items():
        count = 200 if name == "rank_form" else 100
        count = max(1, int(math.ceil(count * scale)))
        out.append(suite(seed, count, fault=1e-3 if name == fault else 0.0))
    return out
