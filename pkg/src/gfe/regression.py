"""Least squares and the three dummy codings for time effects.

Method 1: T raw time dummies, no constant.
Method 2: constant plus raw dummies for periods 2..T.
Method 3: unit-demeaned dummies for periods 2..T, no constant; the level is
recovered afterwards so the T time effects sum to zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .panel import DemeanedPanel, PanelData, within_transform

__all__ = [
    "RankDeficiencyError",
    "TimeEffectEstimate",
    "RANK_RTOL",
    "least_squares",
    "fit_time_effects",
    "fit_2wfe",
    "levels_from_relative",
]

RANK_RTOL = 1e-10


class RankDeficiencyError(np.linalg.LinAlgError):
    """Design matrix is not of full column rank.

    ``columns`` names (or indexes) the columns found to depend on the others.
    """

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


def least_squares(design, response, column_names: Sequence[str] | None = None,
                  rtol: float = RANK_RTOL) -> np.ndarray:
    """Minimise ``||response - design @ b||`` with a column-pivoted QR.

    Raises RankDeficiencyError when a singular value of the design falls
    below ``rtol`` times the largest one; the error lists the columns the
    pivoting pushed past the numerical rank.
    """
    a = np.asarray(design, dtype=np.float64)
    b = np.asarray(response, dtype=np.float64)
    if a.ndim != 2 or b.shape != (a.shape[0],):
        raise ValueError(f"design {a.shape} and response {b.shape} do not conform")
    n, p = a.shape
    if p == 0:
        return np.zeros(0)
    names = list(column_names) if column_names is not None else list(range(p))
    if n < p:
        raise RankDeficiencyError(f"{n} rows for {p} columns", names[n:])
    q, r, piv = sla.qr(a, mode="economic", pivoting=True)
    sv = sla.svdvals(r)
    rank = int(np.sum(sv > rtol * sv[0])) if sv[0] > 0 else 0
    if rank < p:
        dependent = [names[j] for j in piv[rank:]]
        raise RankDeficiencyError(f"rank-deficient design (rank {rank} < {p}); "
                                  f"dependent columns: {dependent}", dependent)
    coef = np.empty(p)
    coef[piv] = sla.solve_triangular(r, q.T @ b)
    return coef


@dataclass(frozen=True)
class TimeEffectEstimate:
    """Covariate effects and common time effects from one dummy coding.

    ``alpha_dot`` holds the T time-demeaned effects, ``alpha_tilde`` the
    T - 1 effects relative to period 1. ``constant`` is only set by method 2.
    """

    theta: np.ndarray
    alpha_dot: np.ndarray
    alpha_tilde: np.ndarray
    method: int
    constant: float | None = None


def levels_from_relative(alpha_tilde: np.ndarray) -> np.ndarray:
    """Zero-sum levels from relative effects (last axis holds periods 2..T)."""
    alpha_tilde = np.asarray(alpha_tilde, dtype=np.float64)
    t = alpha_tilde.shape[-1] + 1
    first = -alpha_tilde.sum(axis=-1, keepdims=True) / t
    return np.concatenate([first, first + alpha_tilde], axis=-1)


def _observed_rows(dp: DemeanedPanel):
    ii, tt = np.nonzero(dp.mask)
    return ii, tt, dp.y[ii, tt], dp.x[ii, tt]


def fit_time_effects(dp: DemeanedPanel, method: int = 3) -> TimeEffectEstimate:
    """Regress the demeaned outcome on demeaned covariates and time dummies."""
    if method not in (1, 2, 3):
        raise ValueError("method must be 1, 2 or 3")
    p = dp.panel
    empty = np.flatnonzero(~dp.mask.any(axis=0))
    if empty.size:
        labels = [p.period_ids[j] for j in empty]
        raise RankDeficiencyError(f"empty period(s) {labels}: no observations",
                                  [f"period[{lab}]" for lab in labels])
    ii, tt, y, x = _observed_rows(dp)
    T = dp.n_periods
    k = dp.n_covariates
    onehot = np.zeros((tt.size, T))
    onehot[np.arange(tt.size), tt] = 1.0
    names = list(p.covariate_names)
    if method == 1:
        dummies = onehot
        names += [f"period[{lab}]" for lab in p.period_ids]
    elif method == 2:
        dummies = np.column_stack([np.ones(tt.size), onehot[:, 1:]])
        names += ["const"] + [f"period[{lab}]" for lab in p.period_ids[1:]]
    else:
        share = dp.mask[:, 1:] / dp.counts[:, None]
        dummies = onehot[:, 1:] - share[ii]
        names += [f"period[{lab}]" for lab in p.period_ids[1:]]
    coef = least_squares(np.column_stack([x, dummies]), y, names)
    theta, rest = coef[:k], coef[k:]
    constant = None
    if method == 1:
        alpha_dot = rest
        alpha_tilde = rest[1:] - rest[0]
    elif method == 2:
        constant = float(rest[0])
        alpha_tilde = rest[1:]
        alpha_dot = constant + np.concatenate([[0.0], alpha_tilde])
    else:
        alpha_tilde = rest
        alpha_dot = levels_from_relative(alpha_tilde)
    return TimeEffectEstimate(theta, alpha_dot, alpha_tilde, method, constant)


def fit_2wfe(panel: PanelData | DemeanedPanel) -> TimeEffectEstimate:
    """Standard two-way fixed effects fit (within transform, then method 3)."""
    dp = panel if isinstance(panel, DemeanedPanel) else within_transform(panel)
    return fit_time_effects(dp, method=3)
