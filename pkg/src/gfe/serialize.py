"""JSON documents for estimates and bootstrap results. Group labels are written 1-based."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .estimator import GfeEstimate, GroupAssignment, GroupTimeProfiles
from .inference import BootstrapResult


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def estimate_to_dict(fit: GfeEstimate) -> dict:
    names = fit.covariate_names or tuple(f"x{j + 1}" for j in range(fit.theta.size))
    units = fit.unit_ids or tuple(str(i) for i in range(fit.gamma.size))
    return {
        "G": fit.G,
        "method": fit.method,
        "theta": {name: float(v) for name, v in zip(names, fit.theta)},
        "covariates": list(names),
        "periods": [_jsonable(p) for p in fit.period_ids],
        "alpha_dot": fit.alpha_dot.tolist(),
        "alpha_shifted": fit.alpha_shifted.tolist(),
        "gamma": {str(u): int(g) + 1 for u, g in zip(units, fit.gamma)},
        "objective": fit.objective,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "seed": fit.seed,
        "start_index": fit.start_index,
        "n_starts": fit.n_starts,
        "n_failed_starts": fit.n_failed_starts,
        "objective_trace": list(fit.objective_trace),
    }


def estimate_from_dict(d: dict) -> GfeEstimate:
    names = tuple(d["covariates"])
    units = tuple(d["gamma"])
    return GfeEstimate(
        theta=np.array([d["theta"][n] for n in names], dtype=np.float64),
        profiles=GroupTimeProfiles(np.array(d["alpha_dot"], dtype=np.float64)),
        assignment=GroupAssignment(np.array([d["gamma"][u] - 1 for u in units]), d["G"]),
        objective=d["objective"],
        iterations=d["iterations"],
        converged=d["converged"],
        method=d["method"],
        start_index=d["start_index"],
        seed=d["seed"],
        n_starts=d["n_starts"],
        n_failed_starts=d["n_failed_starts"],
        objective_trace=tuple(d["objective_trace"]),
        covariate_names=names,
        unit_ids=units,
        period_ids=tuple(d["periods"]),
    )


def bootstrap_to_dict(res: BootstrapResult) -> dict:
    names = res.reference.covariate_names
    it = res.intervals_theta
    return {
        "B": res.B,
        "seed": res.seed,
        "percentiles": list(res.percentiles),
        "reference": estimate_to_dict(res.reference),
        "replicates": res.replicates.tolist(),
        "matched_thetas": res.matched_thetas.tolist(),
        "matched_profiles": res.matched_profiles.tolist(),
        "match_distances": res.distances.tolist(),
        "intervals_theta": {n: it[j].tolist() for j, n in enumerate(names)},
        "intervals_profiles": res.intervals_profiles.tolist(),
        "failures": [{"replicate": b, "reason": r} for b, r in res.failures],
    }


def dump_json(obj, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
