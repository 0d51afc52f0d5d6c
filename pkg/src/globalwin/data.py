"""Trial data model, tab-delimited ingestion and descriptive summaries."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, InputError

MISSING_TOKENS = frozenset({"", "NA", "N/A", "NaN", "nan", ".", "NULL", "null"})


class Direction(str, Enum):
    HIGHER_IS_BETTER = "higher_is_better"
    LOWER_IS_BETTER = "lower_is_better"

    @classmethod
    def parse(cls, text: str) -> "Direction":
        key = text.strip().lower()
        aliases = {
            "higher": cls.HIGHER_IS_BETTER,
            "high": cls.HIGHER_IS_BETTER,
            "+": cls.HIGHER_IS_BETTER,
            "lower": cls.LOWER_IS_BETTER,
            "low": cls.LOWER_IS_BETTER,
            "-": cls.LOWER_IS_BETTER,
        }
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise DataError(f"unknown endpoint direction {text!r}") from None


@dataclass(frozen=True)
class EndpointSpec:
    name: str
    direction: Direction = Direction.HIGHER_IS_BETTER
    weight: float = 1.0

    def __post_init__(self):
        if not isinstance(self.direction, Direction):
            object.__setattr__(self, "direction", Direction.parse(str(self.direction)))
        if not (self.weight >= 0 and math.isfinite(self.weight)):
            raise DataError(f"endpoint {self.name!r}: weight must be finite and >= 0")


@dataclass(frozen=True)
class Schema:
    """Column names of the input file. ``endpoints`` is aligned with the
    endpoint specs passed to :func:`load_trial_tsv`."""

    arm: str
    cluster: str
    individual: str
    endpoints: tuple[str, ...]
    arm_labels: Mapping[str, int] | None = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Clustered individual-level responses for ``K`` endpoints.

    ``arm`` holds 0 (control) or 1 (treatment); ``values`` is ``(N, K)``.
    Construction validates every invariant of the data model and freezes
    the arrays.
    """

    endpoints: tuple[EndpointSpec, ...]
    arm: np.ndarray
    cluster: np.ndarray
    individual: np.ndarray
    values: np.ndarray
    cluster_codes: np.ndarray = field(init=False, repr=False)
    cluster_labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        endpoints = tuple(self.endpoints)
        arm = np.asarray(self.arm).astype(np.int64)
        cluster = np.asarray(self.cluster).astype(str)
        individual = np.asarray(self.individual).astype(str)
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]

        n = arm.shape[0]
        if len(endpoints) < 1:
            raise DataError("at least one endpoint is required")
        if values.shape != (n, len(endpoints)):
            raise DataError(
                f"values shape {values.shape} does not match N={n}, K={len(endpoints)}"
            )
        if cluster.shape != (n,) or individual.shape != (n,):
            raise DataError("arm, cluster and individual must have equal length")
        if not np.all(np.isin(arm, (0, 1))):
            raise DataError("arm values must be 0 (control) or 1 (treatment)")
        if not np.all(np.isfinite(values)):
            raise DataError("all endpoint values must be present and finite")
        if not any(e.weight > 0 for e in endpoints):
            raise DataError("at least one endpoint must have a positive weight")

        labels, codes = np.unique(cluster, return_inverse=True)
        sizes = np.bincount(codes, minlength=labels.shape[0])
        treated = np.bincount(codes, weights=arm, minlength=labels.shape[0])
        mixed = (treated > 0) & (treated < sizes)
        if mixed.any():
            raise DataError(f"cluster {labels[np.argmax(mixed)]!r} appears in both arms")
        cluster_arm = (treated > 0).astype(np.int64)
        for a, name in ((0, "control"), (1, "treatment")):
            if not np.any(cluster_arm == a):
                raise DataError(f"the {name} arm has no clusters")

        keys = np.char.add(np.char.add(cluster, "\x1f"), individual)
        uniq, counts = np.unique(keys, return_counts=True)
        if np.any(counts > 1):
            dup = uniq[counts > 1][0].split("\x1f")
            raise DataError(f"duplicate (cluster, individual) pair {tuple(dup)}")

        object.__setattr__(self, "endpoints", endpoints)
        object.__setattr__(self, "arm", _readonly(arm))
        object.__setattr__(self, "cluster", _readonly(cluster))
        object.__setattr__(self, "individual", _readonly(individual))
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "cluster_codes", _readonly(codes.astype(np.int64)))
        object.__setattr__(self, "cluster_labels", _readonly(labels))

    @property
    def N(self) -> int:
        return int(self.arm.shape[0])

    @property
    def K(self) -> int:
        return len(self.endpoints)

    def arm_size(self, i: int) -> int:
        return int(np.sum(self.arm == i))

    @property
    def cluster_arm(self) -> np.ndarray:
        out = np.empty(self.cluster_labels.shape[0], dtype=np.int64)
        out[self.cluster_codes] = self.arm
        return out

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_codes, minlength=self.cluster_labels.shape[0])

    def n_clusters(self, i: int | None = None) -> int:
        if i is None:
            return int(self.cluster_labels.shape[0])
        return int(np.sum(self.cluster_arm == i))

    @property
    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.endpoints], dtype=float)

    def with_weights(self, weights: Sequence[float]) -> "TrialDataset":
        if len(weights) != self.K:
            raise DataError(f"expected {self.K} weights, got {len(weights)}")
        eps = tuple(replace(e, weight=float(w)) for e, w in zip(self.endpoints, weights))
        return TrialDataset(eps, self.arm, self.cluster, self.individual, self.values)

    def mirrored(self) -> "TrialDataset":
        """Swap the arm labels (treatment becomes control)."""
        return TrialDataset(
            self.endpoints, 1 - self.arm, self.cluster, self.individual, self.values
        )


@dataclass
class ValidationReport:
    row_count_total: int
    row_count_kept: int
    row_count_dropped: int
    cluster_summary: dict[str, int]
    arm_totals: dict[int, int]
    issues: list[tuple[int, str]]

    def __post_init__(self):
        assert self.row_count_kept + self.row_count_dropped == self.row_count_total


def _parse_number(token: str) -> float | None:
    token = token.strip()
    if token in MISSING_TOKENS:
        return None
    return float(token)


def _parse_arm(token: str, labels: Mapping[str, int] | None, line: int) -> int:
    token = token.strip()
    if labels is not None:
        if token not in labels:
            raise DataError(f"line {line}: arm label {token!r} not in the arm mapping")
        value = labels[token]
    else:
        try:
            value = float(token)
        except ValueError:
            raise DataError(f"line {line}: arm value {token!r} is not 0 or 1") from None
    if value not in (0, 1):
        raise DataError(f"line {line}: arm value {token!r} is not 0 or 1")
    return int(value)


def load_trial_tsv(
    path: str | Path, schema: Schema, endpoints: Sequence[EndpointSpec]
) -> tuple[TrialDataset, ValidationReport]:
    """Read a tab-delimited trial file with a header row.

    Rows with a missing endpoint, arm or cluster value are dropped
    (listwise deletion) and listed in the returned report. Line numbers in
    the report are 1-based file lines, so the header is line 1.
    """
    if len(schema.endpoints) != len(endpoints):
        raise DataError("schema endpoint columns and endpoint specs differ in length")
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc

    with fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        wanted = [schema.arm, schema.cluster, schema.individual, *schema.endpoints]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"column(s) {missing} not found in header of {path}")
        idx = [header.index(c) for c in wanted]

        arms, clusters, ids, rows = [], [], [], []
        issues: list[tuple[int, str]] = []
        total = 0
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            total += 1
            if len(rec) < len(header):
                rec = rec + [""] * (len(header) - len(rec))
            a_tok, c_tok, i_tok, *e_toks = (rec[j] for j in idx)
            if a_tok.strip() in MISSING_TOKENS or c_tok.strip() in MISSING_TOKENS:
                issues.append((lineno, "missing arm or cluster"))
                continue
            try:
                vals = [_parse_number(t) for t in e_toks]
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric endpoint value") from None
            absent = [schema.endpoints[k] for k, v in enumerate(vals) if v is None]
            if absent:
                issues.append((lineno, "missing " + ", ".join(absent)))
                continue
            if not all(math.isfinite(v) for v in vals):
                issues.append((lineno, "non-finite endpoint value"))
                continue
            arms.append(_parse_arm(a_tok, schema.arm_labels, lineno))
            clusters.append(c_tok.strip())
            ids.append(i_tok.strip() if i_tok.strip() else f"row{lineno}")
            rows.append(vals)

    if not rows:
        raise DataError(f"no complete rows in {path}")
    ds = TrialDataset(
        tuple(endpoints),
        np.array(arms),
        np.array(clusters),
        np.array(ids),
        np.array(rows, dtype=float),
    )
    sizes = ds.cluster_sizes
    report = ValidationReport(
        row_count_total=total,
        row_count_kept=ds.N,
        row_count_dropped=total - ds.N,
        cluster_summary={str(l): int(s) for l, s in zip(ds.cluster_labels, sizes)},
        arm_totals={0: ds.arm_size(0), 1: ds.arm_size(1)},
        issues=issues,
    )
    return ds, report


def apply_directions(d: TrialDataset) -> TrialDataset:
    """Negate lower-is-better endpoints so that larger always means better."""
    flip = np.array(
        [e.direction is Direction.LOWER_IS_BETTER for e in d.endpoints], dtype=bool
    )
    if not flip.any():
        return d
    values = np.where(flip, -d.values, d.values)
    # -0.0 and 0.0 compare equal, but keep printed output clean
    values = values + 0.0
    eps = tuple(replace(e, direction=Direction.HIGHER_IS_BETTER) for e in d.endpoints)
    return TrialDataset(eps, d.arm, d.cluster, d.individual, values)


@dataclass
class Descriptives:
    endpoint_names: list[str]
    mean: np.ndarray  # (2, K): arm x endpoint
    sd: np.ndarray  # (2, K)
    correlation: np.ndarray  # (K, K)
    icc: np.ndarray  # (K,), nan when undefined

    def rows(self) -> Iterable[tuple[str, float, float, float, float, float]]:
        for k, name in enumerate(self.endpoint_names):
            yield (name, self.mean[0, k], self.sd[0, k], self.mean[1, k], self.sd[1, k],
                   self.icc[k])


def anova_icc(y: np.ndarray, arm: np.ndarray, codes: np.ndarray) -> float:
    """One-way ANOVA ICC of ``y`` after removing arm means.

    Uses the unbalanced moment estimator with the within-arm average
    cluster size ``n0``. Returns nan for a degenerate endpoint.
    """
    y = np.asarray(y, dtype=float)
    n_cl = int(codes.max()) + 1
    n_c = np.bincount(codes, minlength=n_cl).astype(float)
    cl_arm = np.zeros(n_cl, dtype=np.int64)
    cl_arm[codes] = arm
    n_arm = np.array([np.sum(n_c[cl_arm == i]) for i in (0, 1)])
    arm_mean = np.array([y[arm == i].mean() for i in (0, 1)])
    resid = y - arm_mean[arm]
    cl_mean = np.bincount(codes, weights=resid, minlength=n_cl) / n_c
    N, C = y.shape[0], n_cl
    if N - C <= 0 or C - 2 <= 0:
        return float("nan")
    ssw = float(np.sum((resid - cl_mean[codes]) ** 2))
    ssb = float(np.sum(n_c * cl_mean**2))
    msw = ssw / (N - C)
    msb = ssb / (C - 2)
    n0 = (N - np.sum(n_c**2 / n_arm[cl_arm])) / (C - 2)
    denom = msb + (n0 - 1.0) * msw
    if denom <= 0 or not np.isfinite(denom):
        return float("nan")
    return float((msb - msw) / denom)


def summarize(d: TrialDataset) -> Descriptives:
    """Per-arm mean and SD, pooled Pearson correlations and observed ICCs."""
    K = d.K
    mean = np.empty((2, K))
    sd = np.empty((2, K))
    for i in (0, 1):
        x = d.values[d.arm == i]
        mean[i] = x.mean(axis=0)
        sd[i] = x.std(axis=0, ddof=1) if x.shape[0] > 1 else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.atleast_2d(np.corrcoef(d.values, rowvar=False)) if d.N > 1 else np.eye(K)
    icc = np.array([anova_icc(d.values[:, k], d.arm, d.cluster_codes) for k in range(K)])
    return Descriptives([e.name for e in d.endpoints], mean, sd, corr, icc)
