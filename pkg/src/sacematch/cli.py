"""Command-line interface: ``sacematch <command> [options]``.

Every command writes its output file plus ``<output>.manifest.json`` holding
the arguments, seed and library version. Errors are printed to stderr as a
JSON object and the process exits with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .data import Dataset, load_dataset, load_nsw, load_roles, nsw_paths, survival_rates
from .estimators import (
    estimate_bias_corrected,
    estimate_composite,
    estimate_crude,
    estimate_naive,
    estimate_regression,
    estimate_weighting,
    fit_outcome_model,
)
from .matching import DistanceSpec, balance_frame, balance_table, match
from .principal_score import PrincipalScoreModel, fit_em_cpsr, fit_em_monotonicity, strata_proportions, xi_bounds
from .ranktests import aligned_rank, wilcoxon_signed_rank
from .sensitivity import DEFAULT_ALPHA0, DEFAULT_ALPHA1, default_xi_grid, sweep_monotonicity, sweep_ppi

ESTIMATOR_NAMES = ("crude", "wls", "wls-i", "bc", "naive", "composite", "weighting")
TEST_NAMES = ("aligned-rank", "wilcoxon")
DISTANCES = {
    "mahalanobis": "mahalanobis",
    "mahalanobis-caliper": "mahalanobis_with_caliper",
    "pi-tilde": "pi_tilde_abs_diff",
    "exact": "exact",
}


class CliError(Exception):
    pass


def parse_range(text: str) -> list[float]:
    """``lo:hi:step`` (inclusive) or a comma-separated list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise CliError(f"range {text!r} must be lo:hi:step")
        lo, hi, step = map(float, parts)
        if step <= 0 or hi < lo:
            raise CliError(f"range {text!r} needs step > 0 and hi >= lo")
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return [float(np.round(lo + i * step, 10)) for i in range(n)]
    return [float(v) for v in text.split(",") if v.strip()]


def _names(text: str, valid: Sequence[str], what: str) -> list[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in names if v not in valid]
    if bad:
        raise CliError(f"unknown {what} {bad}; valid names: {', '.join(valid)}")
    return names


def _load(args) -> Dataset:
    if args.data is None and args.roles is None:
        return load_nsw()
    if args.data is None or args.roles is None:
        raise CliError("--data and --roles must be given together (omit both for the bundled NSW data)")
    meta = load_roles(args.roles)
    return load_dataset(args.data, meta)


def _write_manifest(out: Path, args, extra: Optional[dict] = None) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {"command": args.command, "version": __version__, "config": cfg, "output": out.name}
    if extra:
        manifest.update(extra)
    with open(f"{out}.manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _fit_em(args, d: Dataset, xi: Optional[float] = None) -> PrincipalScoreModel:
    kw = dict(tol=args.tol, max_iter=args.max_iter, accelerate=not args.plain_em)
    xi = getattr(args, "xi_em", None) if xi is None else xi
    if xi is None:
        return fit_em_monotonicity(d, **kw)
    return fit_em_cpsr(d, xi, **kw)


def _spec(args, d: Dataset, model: Optional[PrincipalScoreModel]) -> DistanceSpec:
    kind = DISTANCES[args.distance]
    needs_model = kind in ("mahalanobis_with_caliper", "pi_tilde_abs_diff")
    if needs_model and model is None:
        model = PrincipalScoreModel.load(args.model) if args.model else _fit_em(args, d)
    caliper, units = None, "absolute"
    if kind == "mahalanobis_with_caliper":
        if args.caliper is not None:
            caliper = args.caliper
        else:
            caliper, units = args.caliper_sd, "sd"
    return DistanceSpec(kind, caliper=caliper, caliper_units=units, score_model=model if needs_model else None)


def _match(args, d: Dataset, model=None):
    spec = _spec(args, d, model)
    return match(d, spec, with_replacement=args.replace, algorithm=args.algorithm), spec


def _emit(df: pd.DataFrame, out: Path) -> None:
    if out.suffix == ".json":
        out.write_text(df.to_json(orient="records", indent=2) + "\n")
    else:
        df.to_csv(out, index=False, float_format="%.10g")


# --- commands -------------------------------------------------------------------

def cmd_em(args) -> None:
    d = _load(args)
    p0, p1 = survival_rates(d)
    if args.xi_em is not None:
        lo, hi = xi_bounds(p0, p1)
        if not lo - 1e-9 <= args.xi_em <= hi + 1e-9:
            warnings.warn(f"xi={args.xi_em} outside the empirical bounds [{lo:.4f}, {hi:.4f}]")
    m = _fit_em(args, d)
    out = Path(args.out)
    payload = m.to_dict()
    props = strata_proportions(p0, p1, min(max(m.xi, 0.0), xi_bounds(p0, p1)[1]))
    payload["strata_proportions"] = dict(zip(("as", "har", "pro", "ns"), props.as_tuple()))
    out.write_text(json.dumps(payload, indent=2) + "\n")
    _write_manifest(out, args)
    print(m.coefficient_table().round(3).to_string())
    print("strata (as, har, pro, ns):", ", ".join(f"{v:.3f}" for v in props.as_tuple()))
    if not m.converged:
        print(f"warning: EM did not converge in {m.iterations} iterations", file=sys.stderr)


def cmd_match(args) -> None:
    d = _load(args)
    sample, _ = _match(args, d)
    out = Path(args.out)
    sample.save_csv(out)
    _write_manifest(out, args, {"n_pairs": sample.n_pairs, "n_unmatched": len(sample.unmatched_targets)})
    print(f"{sample.n_pairs} pairs, {len(sample.unmatched_targets)} unmatched targets")


def _balance_all(args, d: Dataset, sample) -> pd.DataFrame:
    parts = []
    for label, rows, smp in (("full", None, None), ("survivors", d.s == 1, None), ("matched", None, sample)):
        f = balance_frame(balance_table(d, smp, rows=rows, sd=args.smd_sd))
        f.insert(0, "sample", label)
        parts.append(f)
    return pd.concat(parts, ignore_index=True)


def cmd_balance(args) -> None:
    d = _load(args)
    sample, _ = _match(args, d)
    out = Path(args.out)
    frame = _balance_all(args, d, sample)
    _emit(frame, out)
    _write_manifest(out, args)
    print(frame[["sample", "covariate", "mean0", "mean1", "smd"]].round(3).to_string(index=False))


def cmd_estimate(args) -> None:
    estimators = _names(args.estimators, ESTIMATOR_NAMES, "estimator")
    tests = _names(args.tests, TEST_NAMES, "test") if args.tests else []
    if ("weighting" in estimators or "aligned-rank" in tests) and args.seed is None:
        raise CliError("--seed is required for bootstrap/permutation procedures")
    d = _load(args)
    matched = [e for e in estimators if e in ("crude", "wls", "wls-i", "bc")]
    model = None
    if "weighting" in estimators or (matched or tests or args.balance) and DISTANCES[args.distance] != "mahalanobis":
        model = PrincipalScoreModel.load(args.model) if args.model else _fit_em(args, d)
    rows = []
    sample = None
    if matched or tests or args.balance:
        sample, _ = _match(args, d, model)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        for name in estimators:
            if name == "naive":
                rep = estimate_naive(d)
            elif name == "composite":
                rep = estimate_composite(d)
            elif name == "weighting":
                rep = estimate_weighting(d, model, n_boot=args.n_boot, seed=args.seed)
            elif name == "crude":
                rep = estimate_crude(sample, d)
            elif name == "bc":
                rep = estimate_bias_corrected(sample, d)
            else:
                rep = estimate_regression(fit_outcome_model(d, sample, interactions=name == "wls-i"), sample, d)
            row = rep.to_row()
            row["name"] = name
            rows.append(row)
    for t in tests:
        if t == "aligned-rank":
            rep = aligned_rank(sample, d, n_perm=args.n_perm, seed=args.seed)
        else:
            if sample.with_replacement:
                raise CliError("wilcoxon needs a matching without replacement (--no-replace)")
            yt = d.y[sample.donor_rows] if sample.target_arm == 0 else d.y[sample.target_rows]
            yu = d.y[sample.target_rows] if sample.target_arm == 0 else d.y[sample.donor_rows]
            rep = wilcoxon_signed_rank(yt, yu)
        rows.append({"name": t, "estimator": rep.test, "estimate": rep.statistic, "p_value": rep.p_value,
                     "ci_method": rep.method})
    frame = pd.DataFrame(rows)
    cols = ["name"] + [c for c in frame.columns if c != "name"]
    frame = frame[cols]
    out = Path(args.out)
    _emit(frame, out)
    _write_manifest(out, args, None if sample is None else {"n_pairs": sample.n_pairs})
    if args.balance:
        bpath = Path(args.balance)
        _emit(_balance_all(args, d, sample), bpath)
        _write_manifest(bpath, args)
    show = [c for c in ("name", "estimate", "se", "ci_lo", "ci_hi", "p_value") if c in frame.columns]
    print(frame[show].round(4).to_string(index=False))


def cmd_sensitivity(args) -> None:
    d = _load(args)
    p0, p1 = survival_rates(d)
    lo, hi = xi_bounds(p0, p1)
    if args.kind == "mono":
        xi_values = parse_range(args.xi) if args.xi else list(default_xi_grid(p0, p1))
        bad = [x for x in xi_values if not lo - 1e-9 <= x <= hi + 1e-9]
        if bad:
            raise CliError(f"xi value(s) {bad} outside the bounds [{lo:.4f}, {hi:.4f}]")
    model = PrincipalScoreModel.load(args.model) if args.model else _fit_em(args, d)
    sample, spec = _match(args, d, model)
    out_model = fit_outcome_model(d, sample, interactions=args.interactions)
    if args.kind == "ppi":
        alpha1 = parse_range(args.alpha1) if args.alpha1 else list(DEFAULT_ALPHA1)
        grid = sweep_ppi(d, sample, model, out_model, alpha1)
    else:
        alpha0 = parse_range(args.alpha0) if args.alpha0 else list(DEFAULT_ALPHA0)
        refit = args.refit_em
        grid = sweep_monotonicity(
            d, sample, out_model, xi_values, alpha0, refit_em_per_xi=refit,
            spec=spec if refit else None, interactions=args.interactions,
            em_kwargs=dict(tol=args.tol, max_iter=args.max_iter, accelerate=not args.plain_em), threads=args.threads,
        )
    out = Path(args.out)
    frame = grid.to_frame()
    _emit(frame, out)
    _write_manifest(out, args, {"base_estimate": grid.base.estimate, "xi_bounds": [lo, hi]})
    print(frame.round(3).to_string(index=False))


def cmd_simulate(args) -> None:
    from .simulation import ESTIMATORS, MatchingConfig, run_scenario, scenario

    estimators = _names(args.estimators, ESTIMATORS, "estimator") if args.estimators else list(ESTIMATORS)
    cfg = scenario(args.scenario, args.pi_pro, args.k, misspecified=args.misspecified,
                   interactions=args.interactions, n=args.n, reps=args.reps, seed=args.seed)
    mcfg = MatchingConfig(kind=DISTANCES[args.distance], caliper_sd=args.caliper_sd, algorithm=args.algorithm)
    res = run_scenario(cfg, estimators, mcfg, workers=args.threads)
    out = Path(args.out)
    table = res.table.copy()
    table.insert(0, "scenario", res.scenario)
    table["true_sace"] = res.true_sace
    table["n_failed"] = res.n_failed
    _emit(table, out)
    _write_manifest(out, args, {"true_sace": res.true_sace, "failures": res.failures})
    print(f"{res.scenario}: true SACE {res.true_sace:.4f}, {res.n_failed} failed replicate(s)")
    print(res.table.round(3).to_string(index=False))


# --- parser ---------------------------------------------------------------------

def _data_args(p):
    p.add_argument("--data", help="input CSV (omit with --roles for the bundled NSW data)")
    p.add_argument("--roles", help="column-role JSON")
    p.add_argument("--tol", type=float, default=1e-6, help="EM tolerance")
    p.add_argument("--max-iter", type=int, default=500, help="EM iteration cap")
    p.add_argument("--plain-em", action="store_true", help="disable SQUAREM acceleration of EM")


def _match_args(p):
    p.add_argument("--distance", choices=sorted(DISTANCES), default="mahalanobis-caliper")
    p.add_argument("--caliper-sd", type=float, default=0.3, help="caliper as a multiple of SD(pi1_as)")
    p.add_argument("--caliper", type=float, help="absolute caliper (overrides --caliper-sd)")
    p.add_argument("--replace", dest="replace", action="store_true", default=True)
    p.add_argument("--no-replace", dest="replace", action="store_false")
    p.add_argument("--algorithm", choices=("greedy", "optimal"), default="greedy")
    p.add_argument("--model", help="score-model JSON from `em` (fitted on the fly otherwise)")
    p.add_argument("--smd-sd", choices=("pooled", "control", "treated"), default="pooled")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sacematch", description="Matching estimators for survivor effects")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("em", help="fit the principal-score model")
    _data_args(p)
    p.add_argument("--xi", dest="xi_em", type=float, help="harmed/always-survivor ratio (drops monotonicity)")
    p.add_argument("--out", default="em_model.json")
    p.set_defaults(func=cmd_em)

    p = sub.add_parser("match", help="match untreated survivors to treated survivors")
    _data_args(p)
    _match_args(p)
    p.add_argument("--out", default="matches.csv")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("balance", help="covariate balance before and after matching")
    _data_args(p)
    _match_args(p)
    p.add_argument("--out", default="balance.csv")
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("estimate", help="effect estimates and sharp-null tests")
    _data_args(p)
    _match_args(p)
    p.add_argument("--estimators", default="crude,wls,wls-i,bc", help=f"comma list from {', '.join(ESTIMATOR_NAMES)}")
    p.add_argument("--tests", default="", help=f"comma list from {', '.join(TEST_NAMES)}")
    p.add_argument("--seed", type=int, help="seed for bootstrap and permutation draws")
    p.add_argument("--n-boot", type=int, default=500)
    p.add_argument("--n-perm", type=int, default=10_000)
    p.add_argument("--balance", help="also write a balance table to this path")
    p.add_argument("--out", default="estimates.csv")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sensitivity", help="sensitivity curves")
    p.add_argument("kind", choices=("ppi", "mono"))
    _data_args(p)
    _match_args(p)
    p.add_argument("--alpha1", help="lo:hi:step or list (ppi)")
    p.add_argument("--xi", help="lo:hi:step or list (mono); default: bounds grid")
    p.add_argument("--alpha0", help="lo:hi:step or list (mono)")
    p.add_argument("--refit-em", action="store_true", help="refit the score model and rematch for each xi")
    p.add_argument("--interactions", action="store_true", help="outcome model with A-by-covariate terms")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="sensitivity.csv")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("simulate", help="Monte Carlo study of a registered scenario")
    p.add_argument("--scenario", choices=("A", "B"), default="A")
    p.add_argument("--k", type=int, choices=(3, 5, 10), default=5)
    p.add_argument("--pi-pro", choices=("high", "low"), default="high")
    p.add_argument("--interactions", action="store_true")
    p.add_argument("--misspecified", action="store_true")
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--estimators", help="comma list; default all")
    p.add_argument("--distance", choices=sorted(DISTANCES), default="mahalanobis-caliper")
    p.add_argument("--caliper-sd", type=float, default=0.25)
    p.add_argument("--algorithm", choices=("greedy", "optimal"), default="greedy")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="simulation.csv")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            args.func(args)
    except Exception as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
