"""Correlated clustered ordinal trial data and replicated coverage studies.

Two ordinal endpoints per individual are produced by discretising latent
standard normals at the quantiles of the target marginals (Gaussian copula,
"mean mapping"). The latent vector of a cluster has block correlation
``I (x) (Om - Ph) + J (x) Ph``, generated as a shared cluster draw from
``N(0, Ph)`` plus an independent individual draw from ``N(0, Om - Ph)``.
The latent ``Om`` and ``Ph`` are chosen so the *discretised* variables hit
the requested Pearson correlations; they are solved separately per arm
because the two arms have different marginals.

Replicate ``b`` of a scenario draws from its own Philox stream keyed by
``(seed, b)``, so results do not depend on execution order or worker count.
"""

from __future__ import annotations

import itertools
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtri
from scipy.stats import binom

from .bvn import bvnu
from .data import EndpointSpec, TrialDataset
from .errors import ConfigError, ConvergenceError, DataError, InputError, UnattainableTargetError
from .inference import confidence_interval, estimate_gwp
from .mixed import fit_reml
from .ranks import global_win_fractions, win_fractions

R_LIMIT = 0.9999
CORR_TOL = 1e-6
THETA_TOL = 1e-10
MAX_FAIL_FRACTION = 0.01


@dataclass(frozen=True, eq=False)
class OrdinalMarginal:
    support: np.ndarray
    pmf: np.ndarray
    label: str = ""

    def __post_init__(self):
        support = np.asarray(self.support, dtype=float)
        pmf = np.asarray(self.pmf, dtype=float)
        if support.shape != pmf.shape or support.ndim != 1 or support.size < 1:
            raise ConfigError("support and pmf must be 1-d of equal length")
        if np.any(np.diff(support) <= 0):
            raise ConfigError("support must be strictly increasing")
        if np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-12:
            raise ConfigError("pmf must be nonnegative and sum to 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "pmf", pmf)

    @classmethod
    def binomial(cls, n: int, p: float) -> "OrdinalMarginal":
        if not (n >= 1 and 0 <= p <= 1):
            raise ConfigError(f"invalid binomial({n}, {p})")
        k = np.arange(n + 1)
        pmf = binom.pmf(k, n, p)
        pmf = pmf / pmf.sum()
        return cls(k.astype(float), pmf, f"binomial({n}, {p!r})")

    @property
    def thresholds(self) -> np.ndarray:
        """Latent cut points ``Phi^-1(P(X <= x_m))`` for all but the top category."""
        return ndtri(np.clip(np.cumsum(self.pmf)[:-1], 0.0, 1.0))

    @property
    def mean(self) -> float:
        return float(self.support @ self.pmf)

    @property
    def var(self) -> float:
        return float((self.support - self.mean) ** 2 @ self.pmf)

    def sample_from_latent(self, z: np.ndarray) -> np.ndarray:
        return self.support[np.searchsorted(self.thresholds, z, side="left")]


def win_probability(trt: OrdinalMarginal, ctl: OrdinalMarginal) -> float:
    """Exact ``P(X1 > X0) + P(X1 = X0) / 2`` for independent draws."""
    h = 0.5 * (np.sign(trt.support[:, None] - ctl.support[None, :]) + 1.0)
    return float(trt.pmf @ h @ ctl.pmf)


def binomial_win_probability(trt: tuple[int, float], ctl: tuple[int, float]) -> float:
    return win_probability(OrdinalMarginal.binomial(*trt), OrdinalMarginal.binomial(*ctl))


def solve_treatment_p(n: int, control: tuple[int, float], target: float) -> float:
    """Treatment success probability giving the target win probability
    against the control binomial, by bisection."""
    ctl = OrdinalMarginal.binomial(*control)

    def theta(p):
        return win_probability(OrdinalMarginal.binomial(n, p), ctl)

    lo, hi = 1e-12, 1.0 - 1e-12
    t_lo, t_hi = theta(lo), theta(hi)
    if not t_lo <= target <= t_hi:
        raise UnattainableTargetError(
            f"win probability {target} outside achievable range "
            f"[{t_lo:.6f}, {t_hi:.6f}] for binomial({n}, p) vs {ctl.label}"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        t_mid = theta(mid)
        if abs(t_mid - target) < THETA_TOL:
            return mid
        if t_mid < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def joint_pmf(a: OrdinalMarginal, b: OrdinalMarginal, r_latent: float) -> np.ndarray:
    """Cell probabilities of the discretised latent pair."""
    ta = np.concatenate([[-np.inf], a.thresholds, [np.inf]])
    tb = np.concatenate([[-np.inf], b.thresholds, [np.inf]])
    cdf = np.array([[bvnu(-h, -k, r_latent) for k in tb] for h in ta])
    cells = cdf[1:, 1:] - cdf[:-1, 1:] - cdf[1:, :-1] + cdf[:-1, :-1]
    return np.clip(cells, 0.0, None)


def discretized_correlation(a: OrdinalMarginal, b: OrdinalMarginal, r_latent: float) -> float:
    if r_latent == 0:
        return 0.0
    p = joint_pmf(a, b, r_latent)
    cov = a.support @ p @ b.support - a.mean * b.mean
    return float(cov / math.sqrt(a.var * b.var))


def solve_intermediate_correlation(
    a: OrdinalMarginal, b: OrdinalMarginal, target: float
) -> float:
    """Latent correlation whose discretisation has the target Pearson
    correlation, by bisection on the monotone map."""
    if target == 0:
        return 0.0
    lo, hi = -R_LIMIT, R_LIMIT
    c_lo, c_hi = discretized_correlation(a, b, lo), discretized_correlation(a, b, hi)
    if not c_lo <= target <= c_hi:
        raise UnattainableTargetError(
            f"correlation {target} outside achievable range [{c_lo:.4f}, {c_hi:.4f}]"
        )
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        c = discretized_correlation(a, b, mid)
        if abs(c - target) < CORR_TOL:
            return mid
        if c < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class CorrelationTargets:
    omega12: float
    phi11: float
    phi22: float
    phi12: float

    @property
    def omega(self) -> np.ndarray:
        return np.array([[1.0, self.omega12], [self.omega12, 1.0]])

    @property
    def phi(self) -> np.ndarray:
        return np.array([[self.phi11, self.phi12], [self.phi12, self.phi22]])

    def check_psd(self, max_cluster_size: int) -> None:
        """Raise unless ``I (x) (Om - Ph) + J (x) Ph`` is PSD up to the
        given cluster size (eigenvalues are those of ``Om - Ph`` and
        ``Om + (n - 1) Ph``)."""
        om, ph = self.omega, self.phi
        for mat, what in ((om - ph, "Omega - Phi"),
                          (om + (max_cluster_size - 1) * ph, "Omega + (n-1) Phi")):
            if np.linalg.eigvalsh(mat).min() < -1e-12:
                raise ConfigError(f"{what} is not positive semi-definite")


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    if vals.min() < -1e-10:
        raise ConfigError(f"latent {what} is not positive semi-definite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class ScenarioConfig:
    clusters: int = 20
    cluster_size: int = 30
    deletion_prob: float = 0.0
    control: tuple[tuple[int, float], ...] = ((4, 0.5), (6, 0.5))
    theta_targets: tuple[float, ...] = (0.5, 0.5)
    correlations: CorrelationTargets = field(
        default_factory=lambda: CorrelationTargets(0.5, 0.1, 0.05, 0.025)
    )
    level: float = 0.95
    scales: tuple[str, ...] = ("identity", "logit")
    critical: str = "t"
    reps: int = 1000
    seed: int = 20240101

    def __post_init__(self):
        if self.clusters < 4 or self.clusters % 2:
            raise ConfigError("clusters must be even and at least 4")
        if self.cluster_size < 1:
            raise ConfigError("cluster_size must be positive")
        if not 0 <= self.deletion_prob < 1:
            raise ConfigError("deletion_prob must lie in [0, 1)")
        if len(self.control) != len(self.theta_targets):
            raise ConfigError("need one theta target per control marginal")
        if any(not 0 < t < 1 for t in self.theta_targets):
            raise ConfigError("theta targets must lie in (0, 1)")
        if self.reps < 1:
            raise ConfigError("reps must be positive")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        for s in self.scales:
            if s not in ("identity", "logit"):
                raise ConfigError(f"unknown scale {s!r}")
        if self.critical not in ("t", "z"):
            raise ConfigError("critical must be 't' or 'z'")

    @property
    def mode(self) -> str:
        return "deletion" if self.deletion_prob > 0 else "equal"

    @property
    def theta(self) -> float:
        return float(np.mean(self.theta_targets))


@dataclass(frozen=True, eq=False)
class ArmDesign:
    marginals: tuple[OrdinalMarginal, ...]
    latent_omega12: float
    latent_phi: np.ndarray
    cluster_root: np.ndarray
    individual_root: np.ndarray
    thresholds: tuple[np.ndarray, ...]


@dataclass(frozen=True, eq=False)
class Design:
    config: ScenarioConfig
    arms: tuple[ArmDesign, ArmDesign]
    treatment_p: tuple[float, ...]
    true_thetas: tuple[float, ...]

    @property
    def true_theta(self) -> float:
        return float(np.mean(self.true_thetas))


def _arm_design(marginals: Sequence[OrdinalMarginal], ct: CorrelationTargets) -> ArmDesign:
    if len(marginals) != 2:
        raise ConfigError("the simulation design uses exactly two endpoints")
    a, b = marginals
    om = solve_intermediate_correlation(a, b, ct.omega12)
    p11 = solve_intermediate_correlation(a, a, ct.phi11)
    p22 = solve_intermediate_correlation(b, b, ct.phi22)
    p12 = solve_intermediate_correlation(a, b, ct.phi12)
    phi = np.array([[p11, p12], [p12, p22]])
    omega = np.array([[1.0, om], [om, 1.0]])
    return ArmDesign(
        tuple(marginals), om, phi,
        _psd_sqrt(phi, "Phi"), _psd_sqrt(omega - phi, "Omega - Phi"),
        tuple(m.thresholds for m in marginals),
    )


def prepare_design(cfg: ScenarioConfig) -> Design:
    """Solve treatment marginals and latent correlations for a scenario."""
    cfg.correlations.check_psd(cfg.cluster_size)
    ctl = tuple(OrdinalMarginal.binomial(n, p) for n, p in cfg.control)
    ps = tuple(solve_treatment_p(n, (n, p), t) for (n, p), t in zip(cfg.control, cfg.theta_targets))
    trt = tuple(OrdinalMarginal.binomial(n, p1) for (n, _), p1 in zip(cfg.control, ps))
    thetas = tuple(win_probability(t, c) for t, c in zip(trt, ctl))
    return Design(cfg, (_arm_design(ctl, cfg.correlations), _arm_design(trt, cfg.correlations)),
                  ps, thetas)


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def _keep_masks(cfg: ScenarioConfig, rng: np.random.Generator, n_clusters: int) -> np.ndarray:
    """``(clusters, n)`` kept-member mask; an emptied cluster is redrawn."""
    n = cfg.cluster_size
    if cfg.mode == "equal":
        return np.ones((n_clusters, n), dtype=bool)
    keep = rng.random((n_clusters, n)) >= cfg.deletion_prob
    empty = np.flatnonzero(~keep.any(axis=1))
    while empty.size:
        keep[empty] = rng.random((empty.size, n)) >= cfg.deletion_prob
        empty = empty[~keep[empty].any(axis=1)]
    return keep


def generate_trial(design: Design | ScenarioConfig, rng: np.random.Generator | int) -> TrialDataset:
    """One simulated two-arm trial with two ordinal endpoints."""
    if isinstance(design, ScenarioConfig):
        design = prepare_design(design)
    if not isinstance(rng, np.random.Generator):
        rng = replicate_rng(int(rng), 0)
    cfg = design.config
    per_arm = cfg.clusters // 2
    n = cfg.cluster_size
    arms, clusters, ids, values = [], [], [], []
    member = np.broadcast_to(np.arange(n), (per_arm, n))
    cluster_no = np.broadcast_to(np.arange(per_arm)[:, None], (per_arm, n))
    for i, ad in enumerate(design.arms):
        shared = rng.standard_normal((per_arm, 2)) @ ad.cluster_root.T
        own = rng.standard_normal((per_arm, n, 2)) @ ad.individual_root.T
        latent = own + shared[:, None, :]
        keep = _keep_masks(cfg, rng, per_arm)
        z = latent[keep]
        values.append(np.column_stack(
            [m.sample_from_latent(z[:, k]) for k, m in enumerate(ad.marginals)]))
        arms.append(np.full(z.shape[0], i))
        clusters.append(np.char.add(f"a{i}c", cluster_no[keep].astype(str)))
        ids.append(member[keep].astype(str))
    eps = tuple(EndpointSpec(f"y{k + 1}") for k in range(len(design.arms[0].marginals)))
    return TrialDataset(eps, np.concatenate(arms), np.concatenate(clusters),
                        np.concatenate(ids), np.vstack(values))


@dataclass(frozen=True)
class ScenarioMetrics:
    scale: str
    ecp: float
    left_tail: float
    right_tail: float
    ter: float
    err: float
    mean_theta_hat: float
    mean_icc_hat: float
    replications: int
    counts: tuple[int, int, int, int]  # covered, left miss, right miss, rejections


@dataclass(frozen=True)
class ScenarioResult:
    config: ScenarioConfig
    true_theta: float
    true_thetas: tuple[float, ...]
    metrics: dict
    failures: int


def _replicate(design: Design, index: int):
    """Analyse replicate ``index``; returns None on a fit failure."""
    cfg = design.config
    rng = replicate_rng(cfg.seed, index)
    try:
        d = generate_trial(design, rng)
        tables = [win_fractions(d, k) for k in range(d.K)]
        g = global_win_fractions(tables, d.weights)
        est = estimate_gwp(fit_reml(g), d.weights)
        bounds = []
        for s in cfg.scales:
            ci = confidence_interval(est, cfg.level, s, cfg.critical)
            bounds.append((ci.lower, ci.upper))
    except (ConvergenceError, DataError, ValueError):
        return None
    return est.theta_hat, est.icc_hat, tuple(bounds)


def _run_chunk(args):
    design, indices = args
    return [_replicate(design, b) for b in indices]


def run_scenario(cfg: ScenarioConfig, jobs: int = 1, design: Design | None = None) -> ScenarioResult:
    design = design or prepare_design(cfg)
    indices = list(range(cfg.reps))
    if jobs > 1 and cfg.reps > 1:
        chunks = [indices[j::jobs] for j in range(jobs)]
        out = [None] * cfg.reps
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for chunk, res in zip(chunks, ex.map(_run_chunk, [(design, c) for c in chunks])):
                for b, r in zip(chunk, res):
                    out[b] = r
    else:
        out = _run_chunk((design, indices))

    ok = [r for r in out if r is not None]
    failures = cfg.reps - len(ok)
    if failures > MAX_FAIL_FRACTION * cfg.reps:
        raise ConvergenceError(f"{failures} of {cfg.reps} replicates failed to fit")
    theta = design.true_theta
    used = len(ok)
    mean_theta = math.fsum(r[0] for r in ok) / used if used else float("nan")
    mean_icc = math.fsum(r[1] for r in ok) / used if used else float("nan")
    metrics = {}
    for j, s in enumerate(cfg.scales):
        lo = np.array([r[2][j][0] for r in ok])
        hi = np.array([r[2][j][1] for r in ok])
        left = int(np.sum(lo > theta))
        right = int(np.sum(hi < theta))
        covered = used - left - right
        reject = int(np.sum((lo > 0.5) | (hi < 0.5)))
        pct = (lambda c: 100.0 * c / used) if used else (lambda c: float("nan"))
        metrics[s] = ScenarioMetrics(
            scale=s,
            ecp=pct(covered),
            left_tail=pct(left),
            right_tail=pct(right),
            ter=left / right if right else float("nan"),
            err=pct(reject),
            mean_theta_hat=mean_theta,
            mean_icc_hat=mean_icc,
            replications=used,
            counts=(covered, left, right, reject),
        )
    return ScenarioResult(cfg, theta, design.true_thetas, metrics, failures)


# --- configuration files -------------------------------------------------

_BINOM = re.compile(r"^\s*binomial\s*\(\s*(\d+)\s*,\s*([0-9.eE+-]+)\s*\)\s*$", re.I)


def parse_binomial(text: str) -> tuple[int, float]:
    m = _BINOM.match(text)
    if not m:
        raise ConfigError(f"expected binomial(n, p), got {text!r}")
    return int(m.group(1)), float(m.group(2))


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in re.split(r"[,\s]+", text.strip()) if t]
    except ValueError:
        raise ConfigError(f"expected number list, got {text!r}") from None


def read_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


KNOWN_KEYS = {
    "clusters", "allocation", "cluster_size", "deletion_prob",
    "marginals.control.k1", "marginals.control.k2", "theta_targets", "theta",
    "theta_spread", "omega12", "phi11", "phi22", "phi12", "level", "scale",
    "critical", "reps", "seed",
}


def config_from_mapping(kv: dict[str, str]) -> ScenarioConfig:
    unknown = set(kv) - KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    base = ScenarioConfig.__dataclass_fields__
    try:
        if kv.get("allocation", "1:1").replace(" ", "") != "1:1":
            raise ConfigError("only 1:1 cluster allocation is supported")
        control = (
            parse_binomial(kv.get("marginals.control.k1", "binomial(4, 0.5)")),
            parse_binomial(kv.get("marginals.control.k2", "binomial(6, 0.5)")),
        )
        if "theta_targets" in kv:
            targets = _floats(kv["theta_targets"])
            if len(targets) == 1:
                targets = targets * len(control)
        else:
            theta = float(kv.get("theta", "0.5"))
            spread = float(kv.get("theta_spread", "0"))
            targets = [theta - spread, theta + spread]
        default_ct = base["correlations"].default_factory()
        ct = CorrelationTargets(
            float(kv.get("omega12", default_ct.omega12)),
            float(kv.get("phi11", default_ct.phi11)),
            float(kv.get("phi22", default_ct.phi22)),
            float(kv.get("phi12", default_ct.phi12)),
        )
        scale = kv.get("scale", "both")
        scales = ("identity", "logit") if scale == "both" else (scale,)
        return ScenarioConfig(
            clusters=int(kv.get("clusters", base["clusters"].default)),
            cluster_size=int(kv.get("cluster_size", base["cluster_size"].default)),
            deletion_prob=float(kv.get("deletion_prob", 0.0)),
            control=control,
            theta_targets=tuple(targets),
            correlations=ct,
            level=float(kv.get("level", base["level"].default)),
            scales=scales,
            critical=kv.get("critical", "t"),
            reps=int(kv.get("reps", base["reps"].default)),
            seed=int(kv.get("seed", base["seed"].default)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return read_config_text(fh.read())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc


GRID_KEYS = ("clusters", "omega12", "theta")


def expand_grid(kv: dict[str, str], grid: dict[str, list[str]]) -> list[dict[str, str]]:
    """Factorial expansion over clusters, omega12 and theta, in that nesting
    order (last key varies fastest)."""
    for key in grid:
        if key not in GRID_KEYS:
            raise ConfigError(f"grid key must be one of {GRID_KEYS}, not {key!r}")
    axes = [grid.get(k) for k in GRID_KEYS]
    out = []
    for combo in itertools.product(*[a if a else [None] for a in axes]):
        item = dict(kv)
        for key, val in zip(GRID_KEYS, combo):
            if val is not None:
                item[key] = val
                if key == "theta":
                    item.pop("theta_targets", None)
        out.append(item)
    return out


# --- output ---------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        return "NA" if math.isnan(x) else repr(x)
    return str(x)


def result_record(res: ScenarioResult) -> dict[str, str]:
    cfg = res.config
    rec = {
        "clusters": cfg.clusters,
        "mode": cfg.mode,
        "cluster_size": cfg.cluster_size,
        "deletion_prob": cfg.deletion_prob,
        "omega12": cfg.correlations.omega12,
        "phi11": cfg.correlations.phi11,
        "phi22": cfg.correlations.phi22,
        "phi12": cfg.correlations.phi12,
        "theta": res.true_theta,
        "theta1": res.true_thetas[0],
        "theta2": res.true_thetas[1],
        "level": cfg.level,
        "critical": cfg.critical,
        "reps": cfg.reps,
        "seed": cfg.seed,
        "failures": res.failures,
    }
    first = next(iter(res.metrics.values()))
    rec["used"] = first.replications
    rec["mean_theta_hat"] = first.mean_theta_hat
    rec["mean_icc_hat"] = first.mean_icc_hat
    for s, m in res.metrics.items():
        rec[f"{s}.ecp"] = m.ecp
        rec[f"{s}.left_tail"] = m.left_tail
        rec[f"{s}.right_tail"] = m.right_tail
        rec[f"{s}.ter"] = m.ter
        rec[f"{s}.err"] = m.err
    return {k: _fmt(v) for k, v in rec.items()}


def format_rows(results: Iterable[ScenarioResult]) -> str:
    recs = [result_record(r) for r in results]
    if not recs:
        return ""
    header = list(recs[0])
    lines = ["\t".join(header)]
    lines += ["\t".join(r.get(h, "NA") for h in header) for r in recs]
    return "\n".join(lines) + "\n"


def format_report(res: ScenarioResult) -> str:
    return "".join(f"{k} = {v}\n" for k, v in result_record(res).items())
