"""Midranks, win fractions and global win fractions.

A win fraction is the share of opposite-arm responses an individual beats,
with ties counted one half. It is computed from two sets of midranks
(overall and within-arm) rather than from all ``N_1 * N_0`` pairs.
Ties use exact equality; round continuous data beforehand if a tolerance
is wanted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import TrialDataset
from .errors import DataError


def midranks(values) -> np.ndarray:
    """Ranks 1..n with tied values sharing the average of their positions.

    >>> midranks([1, 1, 2]).tolist()
    [1.5, 1.5, 3.0]
    """
    x = np.asarray(values, dtype=float).ravel()
    n = x.shape[0]
    if n == 0:
        raise ValueError("midranks of an empty sequence")
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # start index of each run of equal values
    new_run = np.empty(n, dtype=bool)
    new_run[0] = True
    np.not_equal(xs[1:], xs[:-1], out=new_run[1:])
    starts = np.flatnonzero(new_run)
    ends = np.append(starts[1:], n)
    run_rank = 0.5 * (starts + 1 + ends)  # mean of positions start+1..end
    run_id = np.cumsum(new_run) - 1
    out = np.empty(n)
    out[order] = run_rank[run_id]
    return out


@dataclass(frozen=True, eq=False)
class RankTable:
    endpoint: int
    arm: np.ndarray
    cluster_codes: np.ndarray
    individual: np.ndarray
    overall: np.ndarray
    group: np.ndarray

    @property
    def arm_sizes(self) -> tuple[int, int]:
        return int(np.sum(self.arm == 0)), int(np.sum(self.arm == 1))


@dataclass(frozen=True, eq=False)
class WinFractionTable:
    endpoint: int
    y: np.ndarray
    arm: np.ndarray
    cluster_codes: np.ndarray
    individual: np.ndarray

    def arm_mean(self, i: int) -> float:
        return float(self.y[self.arm == i].mean())

    def on_grid(self) -> bool:
        """Check every value is a multiple of ``1 / (2 (N - N_i))``."""
        N = self.y.shape[0]
        n_i = np.where(self.arm == 1, np.sum(self.arm == 1), np.sum(self.arm == 0))
        scaled = self.y * 2 * (N - n_i)
        return bool(np.all(np.abs(scaled - np.round(scaled)) < 1e-9))


@dataclass(frozen=True, eq=False)
class GlobalWinFractionTable:
    y: np.ndarray
    arm: np.ndarray
    cluster_codes: np.ndarray
    individual: np.ndarray
    weights: np.ndarray

    @property
    def N(self) -> int:
        return int(self.y.shape[0])

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_codes)

    def scaled(self, a: float) -> "GlobalWinFractionTable":
        return GlobalWinFractionTable(
            self.y * a, self.arm, self.cluster_codes, self.individual, self.weights
        )


def rank_tables(d: TrialDataset, k: int) -> RankTable:
    x = d.values[:, k]
    overall = midranks(x)
    group = np.empty_like(overall)
    for i in (0, 1):
        m = d.arm == i
        group[m] = midranks(x[m])
    return RankTable(k, d.arm, d.cluster_codes, d.individual, overall, group)


def win_fractions_rank_form(rt: RankTable, N0: int, N1: int) -> WinFractionTable:
    """``Y = (R - G) / (N - N_i)`` for each row."""
    if N0 <= 0 or N1 <= 0:
        raise DataError("both arms must be non-empty")
    other = np.where(rt.arm == 1, N0, N1)
    y = (rt.overall - rt.group) / other
    return WinFractionTable(rt.endpoint, y, rt.arm, rt.cluster_codes, rt.individual)


def win_fractions(d: TrialDataset, k: int) -> WinFractionTable:
    return win_fractions_rank_form(rank_tables(d, k), d.arm_size(0), d.arm_size(1))


def win_fractions_bruteforce(d: TrialDataset, k: int) -> WinFractionTable:
    """Direct average of the Heaviside comparisons against the other arm.

    Costs ``O(N_1 N_0)`` time and memory; intended for test-scale data.
    """
    x = d.values[:, k]
    y = np.empty(d.N)
    for i in (0, 1):
        mine = x[d.arm == i]
        theirs = x[d.arm != i]
        h = 0.5 * (np.sign(mine[:, None] - theirs[None, :]) + 1.0)
        y[d.arm == i] = h.mean(axis=1)
    return WinFractionTable(k, y, d.arm, d.cluster_codes, d.individual)


def global_win_fractions(
    tables: Sequence[WinFractionTable], weights: Sequence[float]
) -> GlobalWinFractionTable:
    w = np.asarray(weights, dtype=float)
    if len(tables) == 0 or w.shape != (len(tables),):
        raise DataError("need one weight per win fraction table")
    if np.any(w < 0) or not w.sum() > 0:
        raise DataError("weights must be nonnegative with a positive sum")
    first = tables[0]
    for t in tables[1:]:
        if not (
            np.array_equal(t.arm, first.arm)
            and np.array_equal(t.cluster_codes, first.cluster_codes)
            and np.array_equal(t.individual, first.individual)
        ):
            raise DataError("win fraction tables cover different individuals")
    Y = np.column_stack([t.y for t in tables])
    g = Y @ w / w.sum()
    # guard against rounding outside [min_k Y, max_k Y]
    g = np.clip(g, Y.min(axis=1), Y.max(axis=1))
    return GlobalWinFractionTable(g, first.arm, first.cluster_codes, first.individual, w)


def dataset_global_win_fractions(
    d: TrialDataset, weights: Sequence[float] | None = None
) -> tuple[list[WinFractionTable], GlobalWinFractionTable]:
    tables = [win_fractions(d, k) for k in range(d.K)]
    w = d.weights if weights is None else weights
    return tables, global_win_fractions(tables, w)


@dataclass(frozen=True)
class PairCounts:
    wins: int
    losses: int
    ties: int

    @property
    def pairs(self) -> int:
        return self.wins + self.losses + self.ties

    @property
    def win(self) -> float:
        return self.wins / self.pairs

    @property
    def loss(self) -> float:
        return self.losses / self.pairs

    @property
    def tie(self) -> float:
        return self.ties / self.pairs


def win_loss_tie_proportions(d: TrialDataset, k: int) -> PairCounts:
    """Treatment win/loss/tie counts over all treatment-control pairs."""
    x = d.values[:, k]
    trt = x[d.arm == 1]
    ctl = np.sort(x[d.arm == 0])
    below = np.searchsorted(ctl, trt, side="left")
    at_or_below = np.searchsorted(ctl, trt, side="right")
    wins = int(below.sum())
    ties = int((at_or_below - below).sum())
    losses = trt.shape[0] * ctl.shape[0] - wins - ties
    return PairCounts(wins, losses, ties)
