"""Command-line front end: ``estimate`` on CSV data and ``simulate`` for the study designs.

All numeric output is written at full precision (Python ``repr``), so files
produced from the same seed are byte-identical across runs.  A JSON config
file with keys equal to the flag destinations can stand in for any flag;
explicitly passed flags win over config values and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np
import pandas as pd

from . import __version__
from .ape import ape_adjustment_inputs, ape_variance, probit_ape_binary
from .data_model import make_dataset
from .dgp import PopulationSpec, default_spec
from .errors import FPClusterError, InputError, MetadataRequiredError
from .mestimation import (
    RegressorSpec,
    fit_ols,
    fit_one_way_fe,
    fit_probit,
    fit_triple_diff,
    fit_two_way_fe,
    generic_scores,
)
from .montecarlo import DESIGN_FAMILIES, DESIGN_TARGETS, family_dof, run_study
from .shrinkage import AdjustmentInputs, adjusted_oneway, adjusted_twoway
from .variance import v_cgm, v_cgm2, v_ehw, v_lz_oneway

_DESIGNS = tuple(DESIGN_TARGETS)
_MODELS = ("ols", "probit", "diff-in-means", "oneway-fe", "twfe", "triple-diff")
_FAMILY_ALIASES = {"lz": "lz-g", "adj-oneway": "adj-oneway-g"}
_KNOWN_FAMILIES = (
    "ehw", "lz-g", "lz-h", "cgm", "cgm2", "adj-oneway-g", "adj-oneway-h",
    "cgm-adj", "cgm2-adj", "adj-twoway-case1",
)


def _split_csv_list(value):
    return [piece.strip() for piece in value.split(",") if piece.strip()] if value else []


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpcluster",
        description="Design-based cluster-robust variance estimation and study reproduction.",
    )
    parser.add_argument("--version", action="version", version=f"fpcluster {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    est = sub.add_parser("estimate", help="fit a model on CSV data and report standard errors")
    est.add_argument("--config", default=None, help="JSON config with keys equal to flag names")
    est.add_argument("--data", default=None, help="input CSV path (header required)")
    est.add_argument("--model", default=None, choices=_MODELS)
    est.add_argument("--y", default=None, help="outcome column")
    est.add_argument("--x", default=None, help="comma-separated assignment/treatment columns")
    est.add_argument("--z", default=None, help="comma-separated attribute columns used as regressors")
    est.add_argument("--cluster-g", dest="cluster_g", default=None)
    est.add_argument("--cluster-h", dest="cluster_h", default=None)
    est.add_argument("--time", default=None, help="period column (triple-diff only)")
    est.add_argument("--family", default=None, help="comma-separated variance families")
    est.add_argument("--case", type=int, default=None, help="adjusted one-way case (1-4)")
    est.add_argument("--population-size", dest="population_size", type=int, default=None)
    est.add_argument("--total-clusters-g", dest="total_clusters_g", type=int, default=None)
    est.add_argument("--total-clusters-h", dest="total_clusters_h", type=int, default=None)
    est.add_argument("--attributes", default=None,
                     help="columns for the shrinkage projection (defaults to --z)")
    est.add_argument("--no-attr-intercept", dest="attr_intercept",
                     action="store_const", const=False, default=None)
    est.add_argument("--no-intercept", dest="intercept",
                     action="store_const", const=False, default=None)
    est.add_argument("--ape", action="store_true", help="also report the probit APE")
    est.add_argument("--treated-only", dest="treated_only", action="store_true")
    est.add_argument("--out", default=None, help="output path (stdout when omitted)")
    est.add_argument("--format", dest="fmt", default=None, choices=("csv", "json"))

    sim = sub.add_parser("simulate", help="run a named Monte Carlo study design")
    sim.add_argument("--config", default=None)
    sim.add_argument("--design", default=None, choices=_DESIGNS)
    sim.add_argument("--reps", type=int, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--workers", type=int, default=None)
    sim.add_argument("--families", default=None, help="comma-separated subset of the design families")
    sim.add_argument("--level", type=float, default=None)
    sim.add_argument("--clusters-g", dest="clusters_g", type=int, default=None)
    sim.add_argument("--clusters-h", dest="clusters_h", type=int, default=None)
    sim.add_argument("--out", default=None)
    sim.add_argument("--format", dest="fmt", default=None, choices=("csv", "json"))
    return parser


def _apply_config(args: argparse.Namespace) -> argparse.Namespace:
    if getattr(args, "config", None) is None:
        return args
    with open(args.config, encoding="utf-8") as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise InputError("config file must hold a JSON object")
    valid = {k for k in vars(args) if k not in ("config", "subcommand")}
    unknown = set(config) - valid
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    for key, value in config.items():
        if getattr(args, key) is None or getattr(args, key) is False:
            setattr(args, key, value)
    return args


def _fill_boolean_defaults(args: argparse.Namespace) -> None:
    for key in ("intercept", "attr_intercept"):
        if getattr(args, key, True) is None:
            setattr(args, key, True)


def _read_column(frame: pd.DataFrame, name: str, path: str, numeric=True):
    if name not in frame.columns:
        raise InputError(f"column {name!r} not found in {path}")
    col = frame[name]
    if not numeric:
        return col.to_numpy()
    # parse with Python's correctly-rounded float so repr output round-trips
    # bit for bit (pandas' fast parser can be one ulp off)
    values = np.empty(len(col), dtype=float)
    for row, raw in enumerate(col.to_numpy()):
        text = str(raw).strip()
        if text == "":
            raise InputError(f"column {name!r}, row {row}: missing value")
        try:
            values[row] = float(text)
        except ValueError:
            raise InputError(
                f"column {name!r}, row {row}: could not parse {raw!r} as a number"
            ) from None
    return values


def _resolve_families(raw: str | None, case: int | None) -> list[str]:
    names = _split_csv_list(raw) if raw else ["lz-g"]
    case = 2 if case is None else case
    resolved = []
    for name in names:
        name = _FAMILY_ALIASES.get(name, name)
        if name.startswith("adj-oneway-") and "case" not in name:
            name = f"{name}-case{case}"
        base = name.rsplit("-case", 1)[0] if "-case" in name else name
        if base not in _KNOWN_FAMILIES and name not in _KNOWN_FAMILIES:
            raise InputError(f"unknown variance family {name!r}")
        resolved.append(name)
    return resolved


def _fit(args, data):
    k_x = len(_split_csv_list(args.x)) if args.x else 0
    k_z = len(_split_csv_list(args.z)) if args.z else 0
    spec = RegressorSpec(
        intercept=args.intercept,
        assignment_cols=tuple(range(k_x)),
        attribute_cols=tuple(range(k_z)),
    )
    model_name = args.model or "ols"
    if model_name == "ols":
        return fit_ols(data, spec)
    if model_name == "probit":
        return fit_probit(data, spec)
    if model_name == "diff-in-means":
        return fit_ols(data, RegressorSpec(intercept=True, assignment_cols=(0,)))
    if model_name == "oneway-fe":
        return fit_one_way_fe(data, treatment_col=0)
    if model_name == "twfe":
        return fit_two_way_fe(data, treatment_col=0)
    if model_name == "triple-diff":
        return fit_triple_diff(data, treatment_col=0)
    raise InputError(f"unknown model {args.model!r}")


def _coefficient_targets(args, model):
    """(name, index) pairs for the assignment coefficients to report."""
    if (args.model or "ols") in ("oneway-fe", "twfe", "triple-diff"):
        return [(model.names[0], 0)]
    x_names = _split_csv_list(args.x)
    return [(name, model.names.index(name)) for name in x_names]


def _family_report(family, bundle, data, args):
    clusters = data.clusters
    if family == "ehw":
        return v_ehw(bundle.scores, bundle.hessian_avg, family_dof("ehw", clusters))
    if family in ("lz-g", "lz-h"):
        return v_lz_oneway(bundle.scores, bundle.hessian_avg, clusters, family[-1])
    if family == "cgm":
        return v_cgm(bundle.scores, bundle.hessian_avg, clusters)
    if family == "cgm2":
        return v_cgm2(bundle.scores, bundle.hessian_avg, clusters)
    inputs = _adjustment_inputs(args, data, bundle.scores)
    if family.startswith("adj-oneway-"):
        dim = family.split("-")[2]
        case = int(family.rsplit("case", 1)[1])
        return adjusted_oneway(inputs, case, bundle.hessian_avg, dim=dim).report
    if family == "cgm-adj":
        return adjusted_twoway(inputs, 2, bundle.hessian_avg, base="cgm").report
    if family == "cgm2-adj":
        return adjusted_twoway(inputs, 2, bundle.hessian_avg, base="cgm2").report
    if family == "adj-twoway-case1":
        return adjusted_twoway(inputs, 1, bundle.hessian_avg).report
    raise InputError(f"unknown variance family {family!r}")


def _adjustment_inputs(args, data, scores):
    if args.population_size is None:
        raise MetadataRequiredError(
            "adjusted families require --population-size (and cluster totals when sampled)"
        )
    attr_names = _split_csv_list(args.attributes) if args.attributes else _split_csv_list(args.z)
    if not attr_names:
        raise MetadataRequiredError("adjusted families require --attributes or --z columns")
    frame = args._frame
    z_attr = np.column_stack([_read_column(frame, c, args.data) for c in attr_names])
    return AdjustmentInputs(
        scores=scores, z_attr=z_attr, clusters=data.clusters, n=data.n,
        population_size=args.population_size,
        total_clusters_g=args.total_clusters_g or data.clusters.n_clusters_g,
        total_clusters_h=args.total_clusters_h or data.clusters.n_clusters_h,
        add_intercept=args.attr_intercept,
    )


def _run_estimate(args) -> int:
    for required in ("data", "y", "cluster_g"):
        if getattr(args, required) in (None, ""):
            raise InputError(f"--{required.replace('_', '-')} is required")
    frame = pd.read_csv(args.data, dtype=str, keep_default_na=False)
    args._frame = frame
    y = _read_column(frame, args.y, args.data)
    x_names = _split_csv_list(args.x)
    if not x_names and (args.model or "ols") != "ols":
        raise InputError("--x is required for this model")
    x = (np.column_stack([_read_column(frame, c, args.data) for c in x_names])
         if x_names else np.zeros((len(y), 0)))
    z_names = _split_csv_list(args.z)
    z = (np.column_stack([_read_column(frame, c, args.data) for c in z_names])
         if z_names else None)
    g = _read_column(frame, args.cluster_g, args.data, numeric=False)
    h = _read_column(frame, args.cluster_h, args.data, numeric=False) if args.cluster_h else None
    period = _read_column(frame, args.time, args.data, numeric=False) if args.time else None
    data = make_dataset(
        y, x, z, g, h,
        population_size=args.population_size,
        total_clusters_g=args.total_clusters_g,
        total_clusters_h=args.total_clusters_h,
        period=period, x_names=x_names or None, z_names=z_names or None,
    )
    families = _resolve_families(args.family, args.case)
    model = _fit(args, data)
    bundle = generic_scores(model)
    rows = []
    for family in families:
        report = _family_report(family, bundle, data, args)
        for name, idx in _coefficient_targets(args, model):
            rows.append({
                "target": name,
                "family": report.family,
                "estimate": float(model.theta[idx]),
                "se": float(report.se[idx]),
                "dof": report.dof,
                "flags": ";".join(report.notes),
            })
    if args.ape:
        if model.model_kind != "probit":
            raise InputError("--ape requires --model probit")
        treatment_idx = model.names.index(x_names[0])
        ape = probit_ape_binary(model, treatment_idx, treated_only=args.treated_only)
        shrink = None
        if any(f not in ("ehw", "lz-g", "lz-h", "cgm", "cgm2") for f in families):
            base = _adjustment_inputs(args, data, bundle.scores)
            shrink = ape_adjustment_inputs(
                ape, base.z_attr, data.clusters, data.n, base.population_size,
                base.total_clusters_g, base.total_clusters_h, base.add_intercept,
            )
        for family in families:
            report = ape_variance(ape, data.clusters, family, shrink=shrink)
            rows.append({
                "target": "ape",
                "family": report.family,
                "estimate": float(ape.gamma[0]),
                "se": float(report.se[0]),
                "dof": report.dof,
                "flags": ";".join(report.notes),
            })
    _write_rows(rows, ("target", "family", "estimate", "se", "dof", "flags"),
                args.out, args.fmt or "csv")
    return 0


def _write_rows(rows, columns, out, fmt) -> None:
    if fmt == "json":
        payload = json.dumps(rows, indent=2, allow_nan=True) + "\n"
    else:
        lines = [",".join(columns)]
        for row in rows:
            cells = []
            for col in columns:
                value = row[col]
                cells.append(repr(float(value)) if isinstance(value, float) else str(value))
            lines.append(",".join(cells))
        payload = "\n".join(lines) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(payload)
    else:
        sys.stdout.write(payload)


def _run_simulate(args) -> int:
    if args.design is None:
        raise InputError("--design is required")
    if args.reps is None or args.reps < 1:
        raise InputError("--reps is required and must be >= 1")
    if args.seed is None:
        raise InputError("--seed is required: reproducibility is a feature, not an option")
    spec = default_spec(args.design, int(args.seed))
    if args.clusters_g or args.clusters_h:
        config = spec.to_config()
        config["n_clusters_g"] = args.clusters_g or spec.n_clusters_g
        config["n_clusters_h"] = args.clusters_h or spec.n_clusters_h
        spec = PopulationSpec.from_config(config)
    families = _split_csv_list(args.families) if args.families else None
    if families:
        unknown = set(families) - set(DESIGN_FAMILIES[args.design])
        if unknown:
            raise InputError(
                f"families {sorted(unknown)} not available for design {args.design}; "
                f"choose from {DESIGN_FAMILIES[args.design]}"
            )
    table = run_study(spec, int(args.reps), families=families,
                      level=args.level or 0.95, workers=args.workers)
    out = args.out
    if out:
        if (args.fmt or "csv") == "json":
            table.to_json(out)
        else:
            table.to_csv(out)
    summary_lines = [
        f"design={table.kind} seed={table.seed} reps={table.reps} failed={table.failed}",
    ]
    for target in DESIGN_TARGETS[args.design]:
        summary_lines.append(
            f"  {target}: truth={table.truth[target]:.6g} sd={table.sd[target]:.6g}"
        )
    for row in table.rows:
        summary_lines.append(
            f"  {row['target']:>6s} {row['family']:<18s} mean_se={row['mean_se']:.6g} "
            f"coverage={row['coverage']:.4g}"
        )
    if table.reps == 1:
        summary_lines.append("  single replication: SD and coverage undefined (NaN)")
    print("\n".join(summary_lines))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(args)
        _fill_boolean_defaults(args)
        if args.subcommand == "estimate":
            return _run_estimate(args)
        return _run_simulate(args)
    except (InputError, MetadataRequiredError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FPClusterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
