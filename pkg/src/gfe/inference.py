"""Label matching, the unit bootstrap, and helpers for reading estimates."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from .estimator import GfeEstimate, GroupAssignment, gfe_fit
from .panel import DemeanedPanel, PanelData, within_transform

__all__ = [
    "LabelPermutation",
    "BootstrapResult",
    "BootstrapError",
    "EXHAUSTIVE_MAX_G",
    "shift_profiles",
    "pairwise_distances",
    "match_labels",
    "bootstrap",
    "percentile_intervals",
    "proportional_effect",
    "group_summaries",
]

log = logging.getLogger(__name__)

EXHAUSTIVE_MAX_G = 8


def shift_profiles(alpha_dot) -> np.ndarray:
    """Shift every row so it starts at 0 in the first period."""
    a = np.array(alpha_dot, dtype=np.float64, ndmin=2)
    return a - a[:, :1]


# ------------------------------------------------------------ label matching


@dataclass(frozen=True)
class LabelPermutation:
    """Bijection aligning candidate labels to reference labels.

    ``mapping[g]`` is the candidate label that takes reference label ``g``.
    """

    mapping: np.ndarray
    aggregate_distance: float

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.intp)
        if sorted(m.tolist()) != list(range(m.size)):
            raise ValueError(f"mapping {m.tolist()} is not a permutation")
        m.setflags(write=False)
        object.__setattr__(self, "mapping", m)

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(self.mapping.size)
        return inv

    def apply_profiles(self, candidate) -> np.ndarray:
        return np.asarray(candidate)[self.mapping]

    def apply_labels(self, gamma) -> np.ndarray:
        """Translate candidate unit labels into reference labels."""
        return self.inverse[np.asarray(gamma)]

    def distance(self, reference, candidate) -> float:
        diff = self.apply_profiles(candidate) - np.asarray(reference)
        return float(np.linalg.norm(diff, axis=1).sum())


def pairwise_distances(reference, candidate) -> np.ndarray:
    """cost[g, h] = Euclidean distance between reference row g and candidate row h."""
    r = np.asarray(reference, dtype=np.float64)
    c = np.asarray(candidate, dtype=np.float64)
    return np.linalg.norm(r[:, None, :] - c[None, :, :], axis=2)


def match_labels(reference, candidate, mode: str = "auto") -> LabelPermutation:
    """Relabel ``candidate`` profiles to minimise the summed row distances to ``reference``.

    ``"exhaustive"`` scans all G! permutations in lexicographic order and keeps
    the first minimum. ``"assignment"`` solves the same problem as a linear
    assignment on the pairwise distance matrix. ``"auto"`` is exhaustive up to
    ``EXHAUSTIVE_MAX_G`` groups.
    """
    r = np.array(reference, dtype=np.float64, ndmin=2)
    c = np.array(candidate, dtype=np.float64, ndmin=2)
    if r.shape != c.shape:
        raise ValueError(f"profile shapes differ: {r.shape} vs {c.shape}")
    G = r.shape[0]
    if mode == "auto":
        mode = "exhaustive" if G <= EXHAUSTIVE_MAX_G else "assignment"
    cost = pairwise_distances(r, c)
    if mode == "exhaustive":
        perms = np.array(list(itertools.permutations(range(G))), dtype=np.intp)
        totals = np.zeros(len(perms))
        for g in range(G):  # fixed summation order keeps ties exact
            totals += cost[g, perms[:, g]]
        best = int(np.argmin(totals))
        return LabelPermutation(perms[best], float(totals[best]))
    if mode == "assignment":
        _, cols = linear_sum_assignment(cost)
        total = 0.0
        for g in range(G):
            total += cost[g, cols[g]]
        return LabelPermutation(cols, float(total))
    raise ValueError(f"unknown matching mode {mode!r}")


# ----------------------------------------------------------------- bootstrap


class BootstrapError(RuntimeError):
    pass


def percentile_intervals(values, percentiles=(2.5, 97.5)) -> np.ndarray:
    """Element-wise empirical percentiles (linear interpolation) along axis 0.

    Returns an array with a trailing axis of length 2: (lower, upper).
    """
    lo, hi = percentiles
    if not 0 <= lo <= hi <= 100:
        raise ValueError(f"bad percentiles {percentiles}")
    q = np.percentile(np.asarray(values, dtype=np.float64), [lo, hi], axis=0)
    return np.moveaxis(q, 0, -1)


@dataclass
class BootstrapResult:
    B: int
    reference: GfeEstimate
    matched_thetas: np.ndarray
    matched_profiles: np.ndarray
    percentiles: tuple
    replicates: np.ndarray  # indices b of the successful replications
    distances: np.ndarray
    failures: list = field(default_factory=list)
    seed: int | None = None

    @property
    def intervals_theta(self) -> np.ndarray:
        return percentile_intervals(self.matched_thetas, self.percentiles)

    @property
    def intervals_profiles(self) -> np.ndarray:
        return percentile_intervals(self.matched_profiles, self.percentiles)

    def intervals(self, percentiles) -> tuple[np.ndarray, np.ndarray]:
        return (percentile_intervals(self.matched_thetas, percentiles),
                percentile_intervals(self.matched_profiles, percentiles))

    def interval_frame(self) -> pd.DataFrame:
        """Long table of profile intervals: group (1-based), period, estimate, lower, upper."""
        est = self.reference.alpha_shifted
        iv = self.intervals_profiles
        G, T = est.shape
        periods = self.reference.period_ids or tuple(range(1, T + 1))
        return pd.DataFrame({
            "group": np.repeat(np.arange(1, G + 1), T),
            "period": np.tile(np.asarray(periods, dtype=object), G),
            "estimate": est.ravel(),
            "lower": iv[..., 0].ravel(),
            "upper": iv[..., 1].ravel(),
        })

    def matched_frame(self) -> pd.DataFrame:
        """Every matched replicate profile in long format."""
        R, G, T = self.matched_profiles.shape
        periods = self.reference.period_ids or tuple(range(1, T + 1))
        return pd.DataFrame({
            "replicate": np.repeat(self.replicates, G * T),
            "group": np.tile(np.repeat(np.arange(1, G + 1), T), R),
            "period": np.tile(np.asarray(periods, dtype=object), R * G),
            "alpha_shifted": self.matched_profiles.ravel(),
        })


def _take_demeaned(dp: DemeanedPanel, idx) -> DemeanedPanel:
    # demeaning is per unit, so resampling demeaned rows equals demeaning resampled rows
    p = dp.panel
    ids = [f"{p.unit_ids[i]}#{j}" for j, i in enumerate(idx)]
    rep = p.take_units(idx, ids)
    return DemeanedPanel(rep, dp.y[idx], dp.x[idx], dp.y_mean[idx], dp.x_mean[idx])


def _uniform_sampler(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, n, size=n)


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    """Generator for replication ``b``; independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence([seed, b + 1]))


def _one_replicate(dp, b, seed, G, n_starts, method, match, max_iter, reference_shifted, sampler):
    rng = replicate_rng(seed, b)
    idx = sampler(rng, dp.n_units)
    fit_seed = int(rng.integers(0, 2**63 - 1))
    try:
        fit = gfe_fit(_take_demeaned(dp, idx), G, n_starts, fit_seed, max_iter, method)
    except (np.linalg.LinAlgError, ValueError) as exc:
        return b, exc
    perm = match_labels(reference_shifted, fit.alpha_shifted, match)
    return b, (fit.theta, perm.apply_profiles(fit.alpha_shifted), perm.aggregate_distance)


def bootstrap(panel: PanelData | DemeanedPanel, G: int, B: int = 200, n_starts: int = 100,
              seed: int = 0, percentiles=(2.5, 97.5), method: str = "modified",
              match: str = "auto", max_iter: int = 100, n_jobs: int = 1,
              reference: GfeEstimate | None = None,
              sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None,
              max_failure_share: float = 0.1) -> BootstrapResult:
    """Unit bootstrap with label matching of the shifted profiles.

    The original-sample fit fixes the reference labels. Replication ``b``
    resamples N units with replacement (copies become distinct units), refits
    with its own starting values, and relabels its groups to the reference by
    minimum summed profile distance. Failed replications are recorded and
    dropped; more than ``max_failure_share`` of failures raises.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    dp = panel if isinstance(panel, DemeanedPanel) else within_transform(panel)
    if reference is None:
        reference = gfe_fit(dp, G, n_starts, seed, max_iter, method)
    elif reference.G != G:
        raise ValueError("reference fit has a different G")
    ref_shifted = reference.alpha_shifted
    sampler = sampler or _uniform_sampler
    args = (seed, G, n_starts, method, match, max_iter, ref_shifted, sampler)
    if n_jobs == 1:
        out = [_one_replicate(dp, b, *args) for b in range(B)]
    else:
        from joblib import Parallel, delayed

        out = Parallel(n_jobs=n_jobs)(delayed(_one_replicate)(dp, b, *args) for b in range(B))
    thetas, profiles, dists, ok, failures = [], [], [], [], []
    for b, res in out:
        if isinstance(res, Exception):
            failures.append((b, f"{type(res).__name__}: {res}"))
            continue
        thetas.append(res[0])
        profiles.append(res[1])
        dists.append(res[2])
        ok.append(b)
    if len(failures) > max_failure_share * B:
        raise BootstrapError(f"{len(failures)} of {B} replications failed; first: {failures[0][1]}")
    if failures:
        log.warning("%d bootstrap replications failed and were dropped", len(failures))
    k = dp.n_covariates
    T = dp.n_periods
    return BootstrapResult(
        B=B,
        reference=reference,
        matched_thetas=np.array(thetas).reshape(len(ok), k),
        matched_profiles=np.array(profiles).reshape(len(ok), G, T),
        percentiles=tuple(percentiles),
        replicates=np.array(ok, dtype=np.intp),
        distances=np.array(dists),
        failures=failures,
        seed=seed,
    )


# ------------------------------------------------------------ interpretation


def proportional_effect(coef: float, delta_log: float) -> float:
    """Proportional change in the outcome level, exp(coef * delta_log) - 1."""
    return math.expm1(coef * delta_log)


_STATS = ("count", "mean", "sd", "min", "q1", "median", "q3", "max")


def _describe(values: np.ndarray) -> dict:
    v = values[np.isfinite(values)]
    if v.size == 0:
        return dict.fromkeys(_STATS, np.nan) | {"count": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])  # linear interpolation
    return {
        "count": int(v.size),
        "mean": float(v.mean()),
        "sd": float(v.std(ddof=1)) if v.size > 1 else np.nan,
        "min": float(v.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v.max()),
    }


@dataclass
class GroupSummary:
    groups: pd.DataFrame
    stats: pd.DataFrame


def group_summaries(panel: PanelData, assignment: GroupAssignment | Mapping,
                    unit_columns: pd.DataFrame | None = None,
                    obs_columns: Mapping[str, np.ndarray] | None = None) -> GroupSummary:
    """Per-group size, share and descriptive statistics.

    Observation-level variables (outcome, covariates and any ``obs_columns``
    given as (N, T) arrays) are summarised over observed cells; ``unit_columns``
    is indexed by unit id and summarised over units. SD uses ``ddof=1``;
    quartiles use linear interpolation. Groups are reported 1-based.
    """
    if isinstance(assignment, Mapping):
        unknown = set(map(str, assignment)) - set(panel.unit_ids)
        if unknown:
            raise KeyError(f"unknown unit(s) in grouping: {sorted(unknown)[:5]}")
        lookup = {str(u): g for u, g in assignment.items()}
        missing = [u for u in panel.unit_ids if u not in lookup]
        if missing:
            raise KeyError(f"grouping misses unit(s): {missing[:5]}")
        labels = np.array([lookup[u] for u in panel.unit_ids], dtype=np.intp)
        G = int(labels.max()) + 1
    else:
        labels, G = assignment.gamma, assignment.G
        if labels.size != panel.n_units:
            raise ValueError("grouping does not cover every unit")
    obs_vars = {"y": panel.y}
    for j, name in enumerate(panel.covariate_names):
        obs_vars[name] = panel.x[:, :, j]
    for name, arr in (obs_columns or {}).items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != panel.y.shape:
            raise ValueError(f"obs column {name!r} must have shape (N, T)")
        obs_vars[name] = arr
    if unit_columns is not None:
        unit_columns = unit_columns.copy()
        unit_columns.index = unit_columns.index.map(str)
        extra = set(unit_columns.index) - set(panel.unit_ids)
        if extra:
            raise KeyError(f"unknown unit(s) in unit_columns: {sorted(extra)[:5]}")
        unit_columns = unit_columns.reindex(list(panel.unit_ids))
    sizes = np.bincount(labels, minlength=G)
    groups = pd.DataFrame({"group": np.arange(1, G + 1), "units": sizes,
                           "share": sizes / panel.n_units})
    rows = []
    for g in range(G):
        members = labels == g
        cells = panel.mask & members[:, None]
        for name, arr in obs_vars.items():
            rows.append({"group": g + 1, "variable": name, **_describe(arr[cells])})
        if unit_columns is not None:
            for name in unit_columns.columns:
                vals = unit_columns[name].to_numpy(dtype=np.float64)[members]
                rows.append({"group": g + 1, "variable": name, **_describe(vals)})
    stats = pd.DataFrame(rows, columns=["group", "variable", *_STATS])
    return GroupSummary(groups, stats)
