"""Panel data container, CSV ingestion and the unbalanced within transformation.

Panels are stored densely on the global ``N x T`` grid with a boolean
observation mask. Unobserved cells hold ``0.0`` and are never read without
the mask.
"""

from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "PanelData",
    "DemeanedPanel",
    "PanelError",
    "CsvSchema",
    "load_csv",
    "write_csv",
    "within_transform",
    "demeaned_time_dummies",
]


class PanelError(ValueError):
    """Raised for malformed panel input."""


@dataclass(frozen=True)
class CsvSchema:
    unit: str = "unit"
    period: str = "period"
    outcome: str = "y"
    covariates: tuple[str, ...] | None = None  # None: every remaining column


@dataclass(frozen=True, eq=False)
class PanelData:
    """Long-format, possibly unbalanced panel held on a dense grid.

    Attributes
    ----------
    unit_ids : tuple of str
        N distinct unit identifiers, in input order.
    period_ids : tuple
        T distinct period labels; position on this axis is the period index.
    y : ndarray, shape (N, T)
        Outcome, zero where unobserved.
    x : ndarray, shape (N, T, k)
        Covariates, zero where unobserved.
    mask : ndarray of bool, shape (N, T)
        True where (unit, period) is observed.
    covariate_names : tuple of str
    """

    unit_ids: tuple
    period_ids: tuple
    y: np.ndarray
    x: np.ndarray
    mask: np.ndarray
    covariate_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        if y.ndim != 2 or mask.shape != y.shape:
            raise PanelError("y and mask must both have shape (N, T)")
        n, t = y.shape
        if x.shape[:2] != (n, t):
            raise PanelError(f"x has shape {x.shape}, expected ({n}, {t}, k)")
        k = x.shape[2]
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(k))
        if len(names) != k:
            raise PanelError(f"{len(names)} covariate names for {k} covariates")
        unit_ids = tuple(str(u) for u in self.unit_ids)
        period_ids = tuple(self.period_ids)
        if len(unit_ids) != n or len(set(unit_ids)) != n:
            raise PanelError("unit_ids must be N distinct identifiers")
        if len(period_ids) != t or len(set(period_ids)) != t:
            raise PanelError("period_ids must be T distinct labels")
        if n < 1 or t < 1:
            raise PanelError("panel needs N >= 1 and T >= 1")
        empty = np.flatnonzero(~mask.any(axis=1))
        if empty.size:
            raise PanelError(f"unit {unit_ids[empty[0]]!r} has no observations")
        obs_y = y[mask]
        obs_x = x[mask]
        if not (np.all(np.isfinite(obs_y)) and np.all(np.isfinite(obs_x))):
            raise PanelError("observed cells must hold finite outcome and covariates")
        # canonical zero fill keeps equality and hashing of the grid well defined
        y = np.where(mask, y, 0.0)
        x = np.where(mask[:, :, None], x, 0.0)
        for arr in (y, x, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "unit_ids", unit_ids)
        object.__setattr__(self, "period_ids", period_ids)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[2]

    @property
    def n_obs(self) -> int:
        return int(self.mask.sum())

    @cached_property
    def counts(self) -> np.ndarray:
        """T_i for every unit."""
        c = self.mask.sum(axis=1)
        c.setflags(write=False)
        return c

    @cached_property
    def singletons(self) -> np.ndarray:
        """Boolean flag for units observed in a single period."""
        return self.counts == 1

    @cached_property
    def is_balanced(self) -> bool:
        return bool(self.mask.all())

    def observed_periods(self, unit: int) -> np.ndarray:
        return np.flatnonzero(self.mask[unit])

    def take_units(self, index: Sequence[int], unit_ids: Sequence | None = None) -> "PanelData":
        """Panel built from the given unit rows (duplicates allowed with fresh ids)."""
        index = np.asarray(index, dtype=np.intp)
        if unit_ids is None:
            unit_ids = [self.unit_ids[i] for i in index]
        return PanelData(unit_ids, self.period_ids, self.y[index], self.x[index],
                         self.mask[index], self.covariate_names)

    def __eq__(self, other):
        if not isinstance(other, PanelData):
            return NotImplemented
        return (
            self.unit_ids == other.unit_ids
            and self.period_ids == other.period_ids
            and self.covariate_names == other.covariate_names
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x)
        )

    __hash__ = None

    def __repr__(self):
        return (f"PanelData(N={self.n_units}, T={self.n_periods}, k={self.n_covariates}, "
                f"obs={self.n_obs}, balanced={self.is_balanced})")


@dataclass(frozen=True, eq=False)
class DemeanedPanel:
    """Within-transformed panel: every variable centred on its unit mean over tau_i."""

    panel: PanelData
    y: np.ndarray
    x: np.ndarray
    y_mean: np.ndarray
    x_mean: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.panel.mask

    @property
    def counts(self) -> np.ndarray:
        return self.panel.counts

    @property
    def singletons(self) -> np.ndarray:
        return self.panel.singletons

    @property
    def n_units(self) -> int:
        return self.panel.n_units

    @property
    def n_periods(self) -> int:
        return self.panel.n_periods

    @property
    def n_covariates(self) -> int:
        return self.panel.n_covariates

    def as_panel(self) -> PanelData:
        p = self.panel
        return PanelData(p.unit_ids, p.period_ids, self.y, self.x, p.mask, p.covariate_names)

    # Per-unit sufficient statistics shared by every regression on this panel.

    @cached_property
    def dummy_gram(self) -> np.ndarray:
        """(N, T, T) cross products of the unit-demeaned time dummies, per unit."""
        m = self.mask.astype(np.float64)
        w = 1.0 / self.counts
        gram = -np.einsum("it,is,i->its", m, m, w)
        idx = np.arange(self.n_periods)
        gram[:, idx, idx] += m
        return gram

    @cached_property
    def xx(self) -> np.ndarray:
        return np.einsum("itk,itl->kl", self.x, self.x)

    @cached_property
    def xy(self) -> np.ndarray:
        return np.einsum("itk,it->k", self.x, self.y)

    @cached_property
    def yy(self) -> float:
        return float(np.sum(self.y**2))

    @cached_property
    def y_centred(self) -> np.ndarray:
        """y re-centred against rounding drift so dummy cross products are exact."""
        return _recentre(self.y, self.mask, self.counts)

    @cached_property
    def x_centred(self) -> np.ndarray:
        return _recentre(self.x, self.mask, self.counts)


def _recentre(z, mask, counts):
    if z.ndim == 3:
        s = z.sum(axis=1) / counts[:, None]
        return z - mask[:, :, None] * s[:, None, :]
    s = z.sum(axis=1) / counts
    return z - mask * s[:, None]


def _unit_mean(z, mask, counts):
    # two-pass mean: plain mean, then add back the mean residual
    if z.ndim == 3:
        m = z.sum(axis=1) / counts[:, None]
        resid = np.where(mask[:, :, None], z - m[:, None, :], 0.0)
        return m + resid.sum(axis=1) / counts[:, None]
    m = z.sum(axis=1) / counts
    resid = np.where(mask, z - m[:, None], 0.0)
    return m + resid.sum(axis=1) / counts


def within_transform(panel: PanelData) -> DemeanedPanel:
    """Subtract each unit's mean over its own observed periods from every variable."""
    mask, counts = panel.mask, panel.counts
    y_mean = _unit_mean(panel.y, mask, counts)
    x_mean = _unit_mean(panel.x, mask, counts)
    y = np.where(mask, panel.y - y_mean[:, None], 0.0)
    x = np.where(mask[:, :, None], panel.x - x_mean[:, None, :], 0.0)
    for arr in (y, x, y_mean, x_mean):
        arr.setflags(write=False)
    return DemeanedPanel(panel, y, x, y_mean, x_mean)


def demeaned_time_dummies(panel: PanelData, unit: int, t: int) -> np.ndarray:
    """Unit-demeaned dummies for periods 2..T evaluated at (unit, t).

    ``t`` is a 0-based period index and must be observed for ``unit``.
    Entry ``s - 2`` equals ``1{t == s} - 1{s in tau_unit} / T_unit``.
    """
    mask = panel.mask[unit]
    if not 0 <= t < panel.n_periods or not mask[t]:
        raise ValueError(f"period index {t} is not observed for unit {panel.unit_ids[unit]!r}")
    d = -mask[1:].astype(np.float64) / mask.sum()
    if t >= 1:
        d[t - 1] += 1.0
    return d


# --------------------------------------------------------------------- CSV


def _parse_period(raw: str):
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        _dt.date.fromisoformat(raw)
    except ValueError:
        raise PanelError(f"period value {raw!r} is neither an integer nor an ISO date") from None
    return raw


def _parse_float(raw: str, column: str, row: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise PanelError(f"row {row}: non-numeric value {raw!r} in column {column!r}") from None
    if not math.isfinite(value):
        raise PanelError(f"row {row}: non-finite value {raw!r} in column {column!r}")
    return value


def load_csv(path, schema: CsvSchema | None = None) -> PanelData:
    """Read a long-format panel; absent (unit, period) rows mean unobserved.

    Row numbers in error messages count the header as row 1.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError(f"{path}: empty file, header row expected") from None
        header = [h.strip() for h in header]
        for col in (schema.unit, schema.period, schema.outcome):
            if col not in header:
                raise PanelError(f"{path}: missing column {col!r}")
        if schema.covariates is None:
            used = {schema.unit, schema.period, schema.outcome}
            covariates = tuple(h for h in header if h not in used)
        else:
            covariates = tuple(schema.covariates)
            for col in covariates:
                if col not in header:
                    raise PanelError(f"{path}: missing covariate column {col!r}")
        pos = {h: j for j, h in enumerate(header)}
        iu, ip, iy = pos[schema.unit], pos[schema.period], pos[schema.outcome]
        ix = [pos[c] for c in covariates]

        records = {}
        units = {}
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
            unit = row[iu].strip()
            period = _parse_period(row[ip].strip())
            key = (unit, period)
            if key in records:
                raise PanelError(f"row {rownum}: duplicate observation for unit {unit!r}, period {period!r}")
            y = _parse_float(row[iy].strip(), schema.outcome, rownum)
            xs = [_parse_float(row[j].strip(), covariates[m], rownum) for m, j in enumerate(ix)]
            records[key] = (y, xs)
            units.setdefault(unit, len(units))

    if not records:
        raise PanelError(f"{path}: no data rows")
    period_values = {p for _, p in records}
    if len({type(p) for p in period_values}) > 1:
        raise PanelError(f"{path}: period column mixes integers and dates")
    periods = sorted(period_values)
    ppos = {p: j for j, p in enumerate(periods)}
    n, t, k = len(units), len(periods), len(covariates)
    y = np.zeros((n, t))
    x = np.zeros((n, t, k))
    mask = np.zeros((n, t), dtype=bool)
    for (unit, period), (yv, xv) in records.items():
        i, j = units[unit], ppos[period]
        y[i, j] = yv
        x[i, j] = xv
        mask[i, j] = True
    return PanelData(tuple(units), tuple(periods), y, x, mask, covariates)


def write_csv(panel: PanelData, path, schema: CsvSchema | None = None) -> None:
    """Write observed rows in long format; floats use repr so reading back is exact."""
    schema = schema or CsvSchema()
    names = panel.covariate_names if schema.covariates is None else schema.covariates
    if len(names) != panel.n_covariates:
        raise PanelError("schema covariate count does not match panel")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([schema.unit, schema.period, schema.outcome, *names])
        for i, t in zip(*np.nonzero(panel.mask)):
            w.writerow([panel.unit_ids[i], panel.period_ids[t], repr(float(panel.y[i, t])),
                        *(repr(float(v)) for v in panel.x[i, t])])
