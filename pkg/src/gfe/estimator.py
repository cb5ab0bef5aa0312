"""Grouped fixed-effects estimation by alternating minimisation.

Each iteration assigns every unit to the group whose time profile leaves the
smallest sum of squared residuals, then re-estimates the common covariate
effects and the group profiles given the grouping.

Two parameter-update codings are available:

``"modified"``
    Group indicators interacted with unit-demeaned dummies for periods
    2..T; profile levels are recovered so each row sums to zero. With
    ``G = 1`` this reproduces the standard two-way fixed-effects fit, also on
    unbalanced panels.
``"unmodified"``
    Group indicators interacted with T raw period dummies.

Group labels are 0-based internally; serialisers add 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .panel import DemeanedPanel, PanelData, within_transform
from .regression import (
    RankDeficiencyError,
    fit_2wfe,
    least_squares,
    levels_from_relative,
)

__all__ = [
    "EmptyGroupError",
    "GroupAssignment",
    "GroupTimeProfiles",
    "StartingValues",
    "GfeEstimate",
    "SweepResult",
    "unit_group_ssr",
    "ssr_matrix",
    "assignment_step",
    "parameter_step",
    "unmodified_parameter_step",
    "dense_parameter_step",
    "recompute_objective",
    "draw_start",
    "gfe_fit_single",
    "gfe_fit",
    "g_sweep",
]

log = logging.getLogger(__name__)

METHODS = ("modified", "unmodified")

# Gram-based solves defer to the dense QR path when a pivot drops below this
# fraction of the largest diagonal entry.
_GRAM_PIVOT_RTOL = 1e-13


class EmptyGroupError(ValueError):
    def __init__(self, groups):
        self.groups = list(groups)
        super().__init__(f"empty group(s) {[g + 1 for g in self.groups]}")


@dataclass(frozen=True)
class GroupAssignment:
    """Group label per unit (0-based) and the number of groups."""

    gamma: np.ndarray
    G: int

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.intp)
        if gamma.ndim != 1:
            raise ValueError("gamma must be one-dimensional")
        if self.G < 1 or (gamma.size and (gamma.min() < 0 or gamma.max() >= self.G)):
            raise ValueError(f"labels must lie in 0..{self.G - 1}")
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.gamma, minlength=self.G)

    @property
    def empty_groups(self) -> np.ndarray:
        return np.flatnonzero(self.sizes == 0)

    def relabel(self, mapping) -> "GroupAssignment":
        """Apply ``new_label = mapping[old_label]``."""
        return GroupAssignment(np.asarray(mapping)[self.gamma], self.G)


@dataclass(frozen=True)
class GroupTimeProfiles:
    """Time-demeaned group profiles (G x T) and the same rows shifted to start at 0."""

    alpha_dot: np.ndarray

    def __post_init__(self):
        a = np.array(self.alpha_dot, dtype=np.float64, ndmin=2)
        a.setflags(write=False)
        object.__setattr__(self, "alpha_dot", a)

    @property
    def G(self) -> int:
        return self.alpha_dot.shape[0]

    @property
    def alpha_shifted(self) -> np.ndarray:
        return self.alpha_dot - self.alpha_dot[:, :1]

    def permute(self, order) -> "GroupTimeProfiles":
        """Rows reordered so that new row g is old row ``order[g]``."""
        return GroupTimeProfiles(self.alpha_dot[np.asarray(order)])


@dataclass(frozen=True)
class StartingValues:
    theta: np.ndarray
    gamma: np.ndarray


@dataclass(frozen=True)
class GfeEstimate:
    theta: np.ndarray
    profiles: GroupTimeProfiles
    assignment: GroupAssignment
    objective: float
    iterations: int
    converged: bool
    method: str = "modified"
    start_index: int = 0
    seed: int | None = None
    n_starts: int = 1
    n_failed_starts: int = 0
    objective_trace: tuple = ()
    covariate_names: tuple = ()
    unit_ids: tuple = ()
    period_ids: tuple = ()

    @property
    def G(self) -> int:
        return self.assignment.G

    @property
    def gamma(self) -> np.ndarray:
        return self.assignment.gamma

    @property
    def alpha_dot(self) -> np.ndarray:
        return self.profiles.alpha_dot

    @property
    def alpha_shifted(self) -> np.ndarray:
        return self.profiles.alpha_shifted

    def relabel(self, order) -> "GfeEstimate":
        """Estimate with group ``order[g]`` renamed to ``g``; the fit is unchanged."""
        order = np.asarray(order)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)
        return replace(self, profiles=self.profiles.permute(order),
                       assignment=self.assignment.relabel(inverse))


# ------------------------------------------------------------------ assignment


def _check_method(method):
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")


def _residuals(dp: DemeanedPanel, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if dp.n_covariates == 0:
        return np.array(dp.y)
    n, t, k = dp.x.shape
    return dp.y - (dp.x.reshape(n * t, k) @ theta).reshape(n, t)


def ssr_matrix(dp: DemeanedPanel, theta, profiles: GroupTimeProfiles,
               method: str = "modified") -> np.ndarray:
    """(N, G) sums of squared residuals of every unit under every group.

    Under the modified coding the candidate profile is first demeaned over
    the unit's own observed periods, which is what the unit-demeaned dummy
    columns fit. For a balanced unit that correction vanishes.
    """
    _check_method(method)
    a = profiles.alpha_dot
    mask = dp.mask
    resid = _residuals(dp, theta)
    balanced = dp.panel.is_balanced
    out = np.empty((dp.n_units, profiles.G))
    if method == "modified" and not balanced:
        level = (mask @ a.T) / dp.counts[:, None]
    for g in range(profiles.G):
        err = resid - a[g]
        if method == "modified" and not balanced:
            err += level[:, g:g + 1]
        if not balanced:
            err *= mask
        out[:, g] = np.einsum("it,it->i", err, err)
    return out


def unit_group_ssr(dp: DemeanedPanel, unit: int, theta, profiles: GroupTimeProfiles,
                   g: int, method: str = "modified") -> float:
    """Sum of squared residuals of one unit if it belonged to group ``g``."""
    _check_method(method)
    obs = dp.mask[unit]
    resid = dp.y[unit, obs] - (dp.x[unit, obs] @ np.asarray(theta, dtype=np.float64)
                               if dp.n_covariates else 0.0)
    a = profiles.alpha_dot[g, obs]
    if method == "modified":
        a = a - a.mean()
    return float(np.sum((resid - a) ** 2))


def _argmin_assign(ssr, previous, singletons):
    gamma = np.argmin(ssr, axis=1)  # first minimum: smallest label wins ties
    if previous is not None:
        gamma = np.where(singletons, previous, gamma)
    return gamma


def assignment_step(dp: DemeanedPanel, theta, profiles: GroupTimeProfiles,
                    previous: GroupAssignment | None = None,
                    method: str = "modified") -> GroupAssignment:
    """Move each unit to its best-fitting group.

    Units observed once carry no information after demeaning and keep their
    ``previous`` label (group 0 when there is none).
    """
    ssr = ssr_matrix(dp, theta, profiles, method)
    prev = previous.gamma if previous is not None else np.zeros(dp.n_units, dtype=np.intp)
    return GroupAssignment(_argmin_assign(ssr, prev, dp.singletons), profiles.G)


def recompute_objective(dp: DemeanedPanel, theta, profiles: GroupTimeProfiles,
                        assignment: GroupAssignment, method: str = "modified") -> float:
    ssr = ssr_matrix(dp, theta, profiles, method)
    return float(ssr[np.arange(dp.n_units), assignment.gamma].sum())


# ------------------------------------------------------------ parameter update


def _indicator(gamma, G):
    z = np.zeros((gamma.size, G))
    z[np.arange(gamma.size), gamma] = 1.0
    return z


def _gram_chol_ok(chol, diag):
    piv = np.diagonal(chol, axis1=-2, axis2=-1) ** 2
    scale = np.max(diag, axis=-1, keepdims=True)
    return bool(np.all(piv > _GRAM_PIVOT_RTOL * np.maximum(scale, np.finfo(float).tiny)))


def _solve_blocks(axx, axd, add, bx, bd):
    """Solve the normal equations with block-diagonal dummy part.

    ``axx`` (k,k), ``axd`` (G,k,m), ``add`` (G,m,m), ``bx`` (k,), ``bd`` (G,m).
    Returns ``theta`` (k,) and ``coef`` (G,m), or None when a pivot looks
    numerically singular.
    """
    k = bx.shape[0]
    if add.shape[-1]:
        try:
            chol = np.linalg.cholesky(add)
        except np.linalg.LinAlgError:
            return None
        if not _gram_chol_ok(chol, np.diagonal(add, axis1=1, axis2=2)):
            return None
        rhs = np.concatenate([bd[:, :, None], axd.transpose(0, 2, 1)], axis=2)
        sol = np.linalg.solve(add, rhs)  # (G, m, 1 + k)
        u, w = sol[:, :, 0], sol[:, :, 1:]
    else:
        u = np.zeros(bd.shape)
        w = np.zeros(bd.shape + (k,))
    if k:
        s = axx - np.einsum("gkm,gml->kl", axd, w)
        r = bx - np.einsum("gkm,gm->k", axd, u)
        try:
            chol = np.linalg.cholesky(s)
        except np.linalg.LinAlgError:
            return None
        if not _gram_chol_ok(chol, np.diag(axx)):
            return None
        theta = np.linalg.solve(s, r)
        coef = u - w @ theta
    else:
        theta = np.zeros(0)
        coef = u
    return theta, coef


def _check_groups(gamma, G):
    sizes = np.bincount(gamma, minlength=G)
    if np.any(sizes == 0):
        raise EmptyGroupError(np.flatnonzero(sizes == 0))


def _group_arrays(assignment):
    if isinstance(assignment, GroupAssignment):
        return assignment.gamma, assignment.G
    gamma = np.asarray(assignment, dtype=np.intp)
    return gamma, int(gamma.max()) + 1


def parameter_step(dp: DemeanedPanel, assignment: GroupAssignment, theta=None):
    """Least-squares update of (theta, profiles) given the grouping, modified coding.

    Regresses the demeaned outcome on the demeaned covariates and on group
    indicators interacted with unit-demeaned dummies for periods 2..T, then
    converts each group's T - 1 relative effects into zero-sum levels.
    When ``theta`` is given it is held fixed and only profiles are fitted.
    """
    gamma, G = _group_arrays(assignment)
    _check_groups(gamma, G)
    T = dp.n_periods
    z = _indicator(gamma, G)
    n = dp.n_units
    fixed = theta is not None
    gram = (z.T @ dp.dummy_gram.reshape(n, T * T)).reshape(G, T, T)[:, 1:, 1:]
    yc = dp.y_centred
    if fixed:
        theta = np.asarray(theta, dtype=np.float64)
        if dp.n_covariates:
            yc = yc - dp.x_centred @ theta
        k = 0
    else:
        k = dp.n_covariates
    bd = (z.T @ yc)[:, 1:]
    if k:
        xs = (z.T @ dp.x_centred.reshape(n, T * k)).reshape(G, T, k)
        axd = xs[:, 1:, :].transpose(0, 2, 1)
        out = _solve_blocks(dp.xx, axd, gram, dp.xy, bd)
    else:
        out = _solve_blocks(np.zeros((0, 0)), np.zeros((G, 0, T - 1)), gram, np.zeros(0), bd)
    if out is None:
        return dense_parameter_step(dp, GroupAssignment(gamma, G), "modified", theta if fixed else None)
    th, rel = out
    if fixed:
        th = theta
    return th, GroupTimeProfiles(levels_from_relative(rel))


def unmodified_parameter_step(dp: DemeanedPanel, assignment: GroupAssignment, theta=None):
    """Least-squares update with G x T raw group-period dummies (no conversion)."""
    gamma, G = _group_arrays(assignment)
    _check_groups(gamma, G)
    T = dp.n_periods
    n = dp.n_units
    z = _indicator(gamma, G)
    mask = dp.mask.astype(np.float64)
    counts = z.T @ mask  # (G, T)
    add = counts[:, :, None] * np.eye(T)
    y = dp.y
    fixed = theta is not None
    if fixed:
        theta = np.asarray(theta, dtype=np.float64)
        if dp.n_covariates:
            y = y - dp.x @ theta
        k = 0
    else:
        k = dp.n_covariates
    bd = z.T @ y
    if k:
        axd = (z.T @ dp.x.reshape(n, T * k)).reshape(G, T, k).transpose(0, 2, 1)
        out = _solve_blocks(dp.xx, axd, add, dp.xy, bd)
    else:
        out = _solve_blocks(np.zeros((0, 0)), np.zeros((G, 0, T)), add, np.zeros(0), bd)
    if out is None:
        return dense_parameter_step(dp, GroupAssignment(gamma, G), "unmodified", theta if fixed else None)
    th, a = out
    if fixed:
        th = theta
    return th, GroupTimeProfiles(a)


def dense_parameter_step(dp: DemeanedPanel, assignment: GroupAssignment,
                         method: str = "modified", theta=None):
    """Reference parameter update through an explicit design and pivoted QR.

    Slow but transparent; used to cross-check the block solver and to name
    the offending (group, period) columns when the design is singular.
    """
    _check_method(method)
    gamma, G = _group_arrays(assignment)
    _check_groups(gamma, G)
    p = dp.panel
    T = dp.n_periods
    ii, tt = np.nonzero(dp.mask)
    y = dp.y[ii, tt]
    x = dp.x[ii, tt]
    if theta is not None:
        theta = np.asarray(theta, dtype=np.float64)
        if dp.n_covariates:
            y = y - x @ theta
        x = x[:, :0]
    k = x.shape[1]
    onehot = np.zeros((tt.size, T))
    onehot[np.arange(tt.size), tt] = 1.0
    if method == "modified":
        dummies = onehot[:, 1:] - (dp.mask[:, 1:] / dp.counts[:, None])[ii]
        periods = p.period_ids[1:]
    else:
        dummies = onehot
        periods = p.period_ids
    m = dummies.shape[1]
    design = np.zeros((tt.size, k + G * m))
    design[:, :k] = x
    for g in range(G):
        rows = gamma[ii] == g
        design[rows, k + g * m:k + (g + 1) * m] = dummies[rows]
    names = list(p.covariate_names[:k]) + [f"group {g + 1} x period {lab}"
                                            for g in range(G) for lab in periods]
    coef = least_squares(design, y, names)
    th = theta if theta is not None else coef[:k]
    a = coef[k:].reshape(G, m)
    if method == "modified":
        a = levels_from_relative(a)
    return th, GroupTimeProfiles(a)


def _step(method):
    return parameter_step if method == "modified" else unmodified_parameter_step


# ---------------------------------------------------------------- single fit


def _repair(gamma, G, unit_ssr, dp):
    """Fill empty groups by moving the worst-fitting units into them."""
    gamma = gamma.copy()
    sizes = np.bincount(gamma, minlength=G)
    full = dp.counts == dp.n_periods
    movable = ~dp.singletons
    for h in np.flatnonzero(sizes == 0):
        donors = movable & (sizes[gamma] > 1)
        # fully observed units keep every (group, period) cell identified
        pool = donors & full if np.any(donors & full) else donors
        if not np.any(pool):
            pool = sizes[gamma] > 1
        if not np.any(pool):
            raise EmptyGroupError([h])
        cand = np.flatnonzero(pool)
        u = cand[np.argmax(unit_ssr[cand])]
        sizes[gamma[u]] -= 1
        gamma[u] = h
        sizes[h] += 1
    return gamma


def _initial_state(dp, G, start, method):
    """Profiles for the starting grouping with theta held at its draw."""
    theta = np.asarray(start.theta, dtype=np.float64)
    gamma = np.asarray(start.gamma, dtype=np.intp).copy()
    step = _step(method)
    occupied = np.unique(gamma)
    if occupied.size < G:
        # fit the occupied groups, then seed the empty ones with their worst units
        compact = np.searchsorted(occupied, gamma)
        _, prof = step(dp, GroupAssignment(compact, occupied.size), theta)
        ssr = ssr_matrix(dp, theta, prof, method)[np.arange(dp.n_units), compact]
        gamma = _repair(gamma, G, ssr, dp)
    _, profiles = step(dp, GroupAssignment(gamma, G), theta)
    return theta, profiles, gamma


def _fit_demeaned(dp, G, start, max_iter, method):
    step = _step(method)
    theta, profiles, gamma = _initial_state(dp, G, start, method)
    n = np.arange(dp.n_units)
    trace = []
    iterations = 0
    converged = False
    while True:
        # one SSR evaluation serves both the objective of the current state
        # and the next assignment
        ssr = ssr_matrix(dp, theta, profiles, method)
        trace.append(float(ssr[n, gamma].sum()))
        if iterations >= max_iter:
            break
        raw = _argmin_assign(ssr, gamma, dp.singletons)
        if iterations > 0 and np.array_equal(raw, gamma):
            converged = True
            break
        new = raw
        if np.bincount(raw, minlength=G).min() == 0:
            new = _repair(raw, G, ssr[n, raw], dp)
            if iterations > 0 and np.array_equal(new, gamma):
                log.debug("assignment stalled on empty-group repair")
                break
        gamma = new
        theta, profiles = step(dp, GroupAssignment(gamma, G))
        iterations += 1
    return GfeEstimate(
        theta=np.asarray(theta, dtype=np.float64),
        profiles=profiles,
        assignment=GroupAssignment(gamma, G),
        objective=trace[-1],
        iterations=iterations,
        converged=converged,
        method=method,
        objective_trace=tuple(trace),
        covariate_names=dp.panel.covariate_names,
        unit_ids=dp.panel.unit_ids,
        period_ids=dp.panel.period_ids,
    )


def _demeaned(panel):
    return panel if isinstance(panel, DemeanedPanel) else within_transform(panel)


def gfe_fit_single(panel: PanelData | DemeanedPanel, G: int, init: StartingValues,
                   max_iter: int = 100, method: str = "modified") -> GfeEstimate:
    """One run of the alternating algorithm from the given starting values.

    Iterates until an assignment step leaves every label unchanged or
    ``max_iter`` parameter updates have been made; in the latter case the
    result carries ``converged=False``.
    """
    _check_method(method)
    if G < 1 or max_iter < 1:
        raise ValueError("G and max_iter must be >= 1")
    dp = _demeaned(panel)
    gamma = np.asarray(init.gamma, dtype=np.intp)
    if gamma.shape != (dp.n_units,) or gamma.min() < 0 or gamma.max() >= G:
        raise ValueError("initial grouping must label every unit in 0..G-1")
    return _fit_demeaned(dp, G, init, max_iter, method)


def draw_start(dp: DemeanedPanel, G: int, anchor_theta, rng: np.random.Generator) -> StartingValues:
    """Random start: theta ~ N(anchor, |anchor|) elementwise, uniform grouping."""
    anchor = np.asarray(anchor_theta, dtype=np.float64)
    theta = rng.normal(anchor, np.abs(anchor)) if anchor.size else np.zeros(0)
    gamma = rng.integers(0, G, size=dp.n_units)
    gamma[dp.singletons] = 0
    return StartingValues(theta, gamma)


def _run_start(dp, G, start, max_iter, method):
    try:
        return _fit_demeaned(dp, G, start, max_iter, method)
    except (np.linalg.LinAlgError, EmptyGroupError) as exc:
        return exc


def _better(a, b):
    return b is None or a.objective < b.objective


def gfe_fit(panel: PanelData | DemeanedPanel, G: int, n_starts: int = 100, seed: int = 0,
            max_iter: int = 100, method: str = "modified", n_jobs: int = 1,
            extra_starts: Sequence[StartingValues] = ()) -> GfeEstimate:
    """Best of ``n_starts`` randomly initialised runs.

    Start ``s`` draws from ``np.random.SeedSequence(seed).spawn(n_starts)[s]``,
    so every start can be replayed alone. ``extra_starts`` (e.g. a warm start
    from a smaller G) are appended after the random ones. The smallest
    objective wins; ties go to the lowest start index.
    """
    _check_method(method)
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    dp = _demeaned(panel)
    anchor = fit_2wfe(dp).theta
    children = np.random.SeedSequence(seed).spawn(n_starts)
    starts = [draw_start(dp, G, anchor, np.random.default_rng(c)) for c in children]
    starts += list(extra_starts)
    if n_jobs == 1 or len(starts) == 1:
        results = [_run_start(dp, G, s, max_iter, method) for s in starts]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_start)(dp, G, s, max_iter, method) for s in starts)
    best, best_index, failures = None, -1, []
    for idx, res in enumerate(results):
        if isinstance(res, Exception):
            failures.append(res)
            continue
        if _better(res, best):
            best, best_index = res, idx
    if best is None:
        raise failures[-1]
    return replace(best, start_index=best_index, seed=seed, n_starts=len(starts),
                   n_failed_starts=len(failures))


# -------------------------------------------------------------------- sweep


@dataclass
class SweepResult:
    fits: dict
    estimates: pd.DataFrame = field(repr=False)
    profiles: pd.DataFrame = field(repr=False)

    @property
    def objectives(self) -> pd.Series:
        return pd.Series({g: f.objective for g, f in self.fits.items()}, name="objective")


def profiles_frame(fit: GfeEstimate) -> pd.DataFrame:
    """Long table (G, group, period, alpha_dot, alpha_shifted), groups 1-based."""
    G, T = fit.alpha_dot.shape
    periods = fit.period_ids or tuple(range(1, T + 1))
    return pd.DataFrame({
        "G": G,
        "group": np.repeat(np.arange(1, G + 1), T),
        "period": np.tile(np.asarray(periods, dtype=object), G),
        "alpha_dot": fit.alpha_dot.ravel(),
        "alpha_shifted": fit.alpha_shifted.ravel(),
    })


def g_sweep(panel: PanelData | DemeanedPanel, g_range: Iterable[int], n_starts: int = 100,
            seed: int = 0, warm_start: bool = True, max_iter: int = 100,
            method: str = "modified", n_jobs: int = 1) -> SweepResult:
    """Fit every G in ``g_range`` and tabulate covariate effects and profiles.

    Every G uses the same ``seed``. With ``warm_start`` the previous (smaller)
    G's solution is added as one more start, which makes the best objective
    non-increasing in G.
    """
    g_values = sorted(set(int(g) for g in g_range))
    if not g_values or g_values[0] < 1:
        raise ValueError("g_range must be non-empty with all G >= 1")
    dp = _demeaned(panel)
    fits, prev = {}, None
    for G in g_values:
        extra = [StartingValues(prev.theta, prev.gamma)] if (warm_start and prev is not None) else []
        fit = gfe_fit(dp, G, n_starts, seed, max_iter, method, n_jobs, extra)
        fits[G] = prev = fit
    names = dp.panel.covariate_names
    estimates = pd.DataFrame(
        [(G, name, float(f.theta[j])) for G, f in fits.items() for j, name in enumerate(names)],
        columns=["G", "covariate", "estimate"])
    profiles = pd.concat([profiles_frame(f) for f in fits.values()], ignore_index=True)
    return SweepResult(fits, estimates, profiles)
