"""Command-line front end: ``gfe {fit,sweep,bootstrap,simulate,mc,summarize}``.

Every command writes its artifacts plus ``manifest.json`` (config echo, seed,
package version and SHA-256 of each artifact) into ``--out``. Exit codes:
0 success, 1 estimation error, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .estimator import EmptyGroupError, g_sweep, gfe_fit, profiles_frame
from .inference import BootstrapError, bootstrap, group_summaries
from .panel import CsvSchema, PanelError, load_csv, write_csv
from .serialize import bootstrap_to_dict, dump_json, estimate_to_dict
from .simulation import load_dgp_spec, monte_carlo, simulate_panel

log = logging.getLogger("gfe")

EXIT_OK, EXIT_ESTIMATION, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    input: str | None
    schema: CsvSchema
    groups: int | None
    group_range: list | None
    starts: int
    reps: int
    sims: int
    seed: int | None
    percentiles: tuple
    out: Path
    method: str
    match: str
    threads: int
    max_iter: int
    spec: str | None
    gamma: str | None
    svg: bool

    def echo(self) -> dict:
        d = {k: v for k, v in vars(self).items() if k not in ("schema", "out")}
        d["out"] = str(self.out)
        d["schema"] = {"unit": self.schema.unit, "period": self.schema.period,
                       "outcome": self.schema.outcome,
                       "covariates": list(self.schema.covariates) if self.schema.covariates else None}
        d["percentiles"] = list(self.percentiles)
        return d


# ------------------------------------------------------------------ output


class Outputs:
    """Tracks written files so a failed run can remove its partial output."""

    def __init__(self, out: Path):
        self.out = out
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.out / name
        self.files.append(p)
        return p

    def json(self, name, obj):
        dump_json(obj, self.path(name))

    def frame(self, name, df):
        df.to_csv(self.path(name), index=False, float_format="%.17g")

    def cleanup(self):
        for p in self.files:
            p.unlink(missing_ok=True)

    def manifest(self, cfg: RunConfig, extra=None):
        hashes = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in self.files if p.exists()}
        doc = {"version": __version__, "command": cfg.command, "seed": cfg.seed,
               "config": cfg.echo(), "artifacts": hashes}
        if extra:
            doc.update(extra)
        dump_json(doc, self.path("manifest.json"))


def _profiles_svg(shifted: np.ndarray, path: Path, title: str = "") -> None:
    """Static line chart of shifted profiles, one polyline per group."""
    G, T = shifted.shape
    w, h, pad = 640, 400, 40
    lo, hi = float(shifted.min()), float(shifted.max())
    if hi == lo:
        hi, lo = hi + 1.0, lo - 1.0
    xs = [pad + (w - 2 * pad) * t / max(T - 1, 1) for t in range(T)]
    ys = lambda v: h - pad - (h - 2 * pad) * (v - lo) / (hi - lo)  # noqa: E731
    colours = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
               "#7f7f7f", "#bcbd22", "#17becf"]
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<text x="{pad}" y="20" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{ys(0):.1f}" x2="{w - pad}" y2="{ys(0):.1f}" stroke="#ccc"/>']
    for g in range(G):
        pts = " ".join(f"{x:.1f},{ys(v):.1f}" for x, v in zip(xs, shifted[g]))
        lines.append(f'<polyline fill="none" stroke="{colours[g % len(colours)]}" '
                     f'stroke-width="2" points="{pts}"><title>group {g + 1}</title></polyline>')
    lines.append("</svg>")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def _load(cfg: RunConfig):
    if not cfg.input:
        raise UsageError("--input is required")
    if not Path(cfg.input).is_file():
        raise FileNotFoundError(f"input file not found: {cfg.input}")
    return load_csv(cfg.input, cfg.schema)


def _need_seed(cfg):
    if cfg.seed is None:
        raise UsageError(f"{cfg.command} is stochastic: --seed is required")


def _need_groups(cfg):
    if cfg.groups is None:
        raise UsageError("--groups is required")
    return cfg.groups


def _write_gamma(out: Outputs, fit, name="gamma.csv"):
    with out.path(name).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "group"])
        for u, g in zip(fit.unit_ids, fit.gamma):
            w.writerow([u, int(g) + 1])


def cmd_fit(cfg: RunConfig, out: Outputs):
    """Fit one G and write the estimate, profiles and grouping."""
    _need_seed(cfg)
    G = _need_groups(cfg)
    panel = _load(cfg)
    fit = gfe_fit(panel, G, cfg.starts, cfg.seed, cfg.max_iter, cfg.method, cfg.threads)
    out.json("estimate.json", estimate_to_dict(fit))
    out.frame("profiles.csv", profiles_frame(fit))
    _write_gamma(out, fit)
    if cfg.svg:
        _profiles_svg(fit.alpha_shifted, out.path("profiles.svg"), f"G = {G}")


def cmd_sweep(cfg: RunConfig, out: Outputs):
    """Fit a range of G and tabulate estimates against G."""
    _need_seed(cfg)
    if not cfg.group_range:
        raise UsageError("--group-range is required")
    panel = _load(cfg)
    res = g_sweep(panel, cfg.group_range, cfg.starts, cfg.seed, max_iter=cfg.max_iter,
                  method=cfg.method, n_jobs=cfg.threads)
    out.frame("sweep_estimates.csv", res.estimates)
    out.frame("sweep_objectives.csv", res.objectives.rename_axis("G").reset_index())
    for G, fit in res.fits.items():
        out.frame(f"profiles_G{G}.csv", profiles_frame(fit))


def cmd_bootstrap(cfg: RunConfig, out: Outputs):
    """Unit bootstrap with label matching; percentile intervals."""
    _need_seed(cfg)
    G = _need_groups(cfg)
    panel = _load(cfg)
    res = bootstrap(panel, G, cfg.reps, cfg.starts, cfg.seed, cfg.percentiles, cfg.method,
                    cfg.match, cfg.max_iter, cfg.threads)
    out.json("bootstrap.json", bootstrap_to_dict(res))
    out.frame("intervals_profiles.csv", res.interval_frame())
    it = res.intervals_theta
    with out.path("intervals_theta.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["covariate", "estimate", "lower", "upper"])
        for j, name in enumerate(res.reference.covariate_names):
            w.writerow([name, repr(float(res.reference.theta[j])), repr(float(it[j, 0])),
                        repr(float(it[j, 1]))])
    out.frame("matched_profiles.csv", res.matched_frame())
    if cfg.svg:
        _profiles_svg(res.reference.alpha_shifted, out.path("profiles.svg"), f"G = {G}")


def cmd_simulate(cfg: RunConfig, out: Outputs):
    """Draw a synthetic panel from a DGP specification."""
    _need_seed(cfg)
    if not cfg.spec:
        raise UsageError("--spec is required")
    spec = load_dgp_spec(cfg.spec)
    panel, truth = simulate_panel(spec, cfg.seed)
    write_csv(panel, out.path("panel.csv"), CsvSchema(cfg.schema.unit, cfg.schema.period,
                                                      cfg.schema.outcome))
    out.json("truth.json", {
        "theta0": dict(zip(spec.covariate_names, truth.theta0.tolist())),
        "alpha_dot": truth.profiles0.tolist(),
        "alpha_shifted": truth.shifted_profiles0.tolist(),
        "gamma": {u: int(g) + 1 for u, g in zip(panel.unit_ids, truth.gamma0)},
        "spec": spec.to_dict(),
    })


def cmd_mc(cfg: RunConfig, out: Outputs):
    """Monte Carlo: simulate, fit and score M panels."""
    _need_seed(cfg)
    if not cfg.spec:
        raise UsageError("--spec is required")
    spec = load_dgp_spec(cfg.spec)
    res = monte_carlo(spec, cfg.sims, cfg.groups, cfg.starts, cfg.seed, cfg.method, cfg.match,
                      cfg.max_iter, cfg.threads)
    out.frame("scores.csv", res.scores)
    out.frame("summary.csv", res.summary())
    if res.matched_profiles is not None:
        bands = res.profile_bands(cfg.percentiles)
        G, T = spec.profiles0.shape
        import pandas as pd

        out.frame("profile_bands.csv", pd.DataFrame({
            "group": np.repeat(np.arange(1, G + 1), T),
            "period": np.tile(np.arange(1, T + 1), G),
            "true": spec.shifted_profiles0.ravel(),
            "mean": res.matched_profiles.mean(axis=0).ravel(),
            "sd": (res.matched_profiles.std(axis=0, ddof=1).ravel()
                   if len(res.matched_profiles) > 1 else np.full(G * T, np.nan)),
            "lower": bands[..., 0].ravel(),
            "upper": bands[..., 1].ravel(),
        }))
    if res.failures:
        out.json("failures.json", [{"replication": m, "reason": r} for m, r in res.failures])


def _read_gamma(path, panel):
    if str(path).endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        mapping = doc.get("gamma", doc)
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            mapping = {row["unit"]: row["group"] for row in csv.DictReader(fh)}
    return {str(u): int(g) - 1 for u, g in mapping.items()}


def cmd_summarize(cfg: RunConfig, out: Outputs):
    """Per-group descriptive statistics for a fitted grouping."""
    panel = _load(cfg)
    if not cfg.gamma:
        raise UsageError("--gamma is required (gamma.csv or estimate.json)")
    if not Path(cfg.gamma).is_file():
        raise FileNotFoundError(f"grouping file not found: {cfg.gamma}")
    summary = group_summaries(panel, _read_gamma(cfg.gamma, panel))
    out.frame("groups.csv", summary.groups)
    out.frame("group_stats.csv", summary.stats)


COMMANDS = {
    "fit": cmd_fit,
    "sweep": cmd_sweep,
    "bootstrap": cmd_bootstrap,
    "simulate": cmd_simulate,
    "mc": cmd_mc,
    "summarize": cmd_summarize,
}


# ------------------------------------------------------------------ parsing


def _group_range(text: str) -> list:
    values = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            values.extend(range(int(a), int(b) + 1))
        elif part:
            values.append(int(part))
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"bad group range {text!r}")
    return values


def _percentiles(text: str) -> tuple:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lower,upper', got {text!r}") from None
    if not 0 <= lo < hi <= 100:
        raise argparse.ArgumentTypeError(f"bad percentiles {text!r}")
    return lo, hi


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="long-format panel CSV")
    common.add_argument("--unit-col", default="unit")
    common.add_argument("--time-col", default="period")
    common.add_argument("--y-col", default="y")
    common.add_argument("--x-cols", help="comma-separated covariate columns (default: all others)")
    common.add_argument("--groups", type=_positive, help="number of groups G")
    common.add_argument("--group-range", type=_group_range, help="e.g. 1-8 or 1,2,4")
    common.add_argument("--starts", type=_positive, default=100, help="random starts per fit")
    common.add_argument("--reps", type=_positive, default=200, help="bootstrap replications B")
    common.add_argument("--sims", type=_positive, default=100, help="Monte Carlo replications M")
    common.add_argument("--seed", type=int)
    common.add_argument("--percentiles", type=_percentiles, default=(2.5, 97.5))
    common.add_argument("--method", choices=["modified", "unmodified"], default="modified")
    common.add_argument("--match", choices=["auto", "exhaustive", "assignment"], default="auto")
    common.add_argument("--threads", type=_positive, default=os.cpu_count() or 1)
    common.add_argument("--max-iter", type=_positive, default=100)
    common.add_argument("--spec", help="DGP specification (JSON) for simulate/mc")
    common.add_argument("--gamma", help="grouping file (gamma.csv or estimate.json) for summarize")
    common.add_argument("--svg", action="store_true", help="also draw shifted profiles as SVG")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).splitlines()[0])
    return parser


def _config(args) -> RunConfig:
    covs = tuple(c.strip() for c in args.x_cols.split(",") if c.strip()) if args.x_cols else None
    return RunConfig(
        command=args.command, input=args.input,
        schema=CsvSchema(args.unit_col, args.time_col, args.y_col, covs),
        groups=args.groups, group_range=args.group_range, starts=args.starts, reps=args.reps,
        sims=args.sims, seed=args.seed, percentiles=args.percentiles, out=Path(args.out),
        method=args.method, match=args.match, threads=args.threads, max_iter=args.max_iter,
        spec=args.spec, gamma=args.gamma, svg=args.svg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _config(args)
    out = Outputs(cfg.out)
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[cfg.command](cfg, out)
        out.manifest(cfg)
    except (UsageError, OSError, PanelError, json.JSONDecodeError, KeyError) as exc:
        out.cleanup()
        print(f"gfe {cfg.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (np.linalg.LinAlgError, EmptyGroupError, BootstrapError, ValueError) as exc:
        out.cleanup()
        print(f"gfe {cfg.command}: estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
