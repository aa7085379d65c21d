"""
Command-line interface.

    python -m pacsmr <subcommand> [options]

Subcommands: fit, diagnose, thin, cv, select-infer, stability, simulate.
Options can also come from a JSON config file (--config) whose keys are the
long flag names with '-' replaced by '_'; explicit flags win. A manifest
written by an earlier run is accepted as a config file.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from pacsmr import __version__
from pacsmr.artifacts import build_manifest, write_json, write_jsonl, write_table
from pacsmr.errors import NumericalError, ValidationError
from pacsmr.estimators import LqaConfig, Method
from pacsmr.grouping import PipelineConfig, extract_signal_groups, post_selection_pipeline, stability_summary
from pacsmr.matrix_core import instrument_strength, is_psd, min_eigenvalue
from pacsmr.model_selection import SelectionConfig, SelectionRule, fit_tuned, parse_method
from pacsmr.simulation import (
    DEFAULT_ESTIMATORS,
    TABLE_HEADERS,
    DgpConfig,
    run_experiment,
    run_pipeline_experiment,
)
from pacsmr.summary_data import build_design, exposure_correlation, load_dataset, write_dataset
from pacsmr.thinning import ThinningPlan, thin_multi_fold

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


@dataclass(frozen=True)
class RunConfig:
    """Flat mirror of every CLI option."""
    data: str = None
    sigma: str = None
    trait_sd: str = None
    out: str = "."
    seed: int = 0
    threads: int = None
    log_level: str = "WARNING"
    progress: bool = False
    # fitting and tuning
    method: str = "pacs"
    threshold: float = None
    folds: int = 5
    repeats: int = 1
    rule: str = "1se"
    grid_points: int = 25
    taus: tuple = (0.5, 1.0, 2.0, 3.0)
    ridge_points: int = 25
    correlation_source: str = "raw"
    fixed_weights: bool = False
    lqa_tol: float = 1e-6
    lqa_max_iter: int = 500
    fusion: str = "mean"
    # inference
    precision: float = 1e-3
    level: float = 0.95
    runs: int = 100
    aggregate: str = "descriptive"
    alpha: float = 0.05
    # thinning
    epsilons: tuple = None
    # simulation
    n: int = 100_000
    p: int = 500
    replicates: int = 100
    estimators: tuple = DEFAULT_ESTIMATORS
    sigma_mode: str = "phenotypic"
    sigma_gamma: float = 1e-3
    gamma_scale: str = "variance"
    dgp_seed: int = 2024
    generator: str = "individual"
    pipeline: bool = False

    @property
    def resolved_threads(self):
        return self.threads if self.threads is not None else (os.cpu_count() or 1)

    def selection(self):
        lqa = LqaConfig(tol=self.lqa_tol, max_iter=self.lqa_max_iter, fusion=self.fusion)
        return SelectionConfig(
            grid_points=self.grid_points,
            taus=tuple(self.taus),
            ridge_points=self.ridge_points,
            folds=self.folds,
            repeats=self.repeats,
            rule=SelectionRule(self.rule),
            threshold=self.threshold,
            refit_weights=not self.fixed_weights,
            correlation_source=self.correlation_source,
            lqa=lqa,
            threads=self.resolved_threads,
        )

    def pipeline_config(self):
        return PipelineConfig(self.selection(), self.method, self.precision, self.level)

    def dgp(self):
        return DgpConfig(n=self.n, p=self.p, sigma_gamma=self.sigma_gamma,
                         gamma_scale=self.gamma_scale, seed=self.dgp_seed,
                         sigma_mode=self.sigma_mode)


_TUPLE_FIELDS = {"taus", "epsilons", "estimators"}


# =============================================================================
# Argument parsing
# =============================================================================

def _float_list(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from None


def _name_list(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _common_parser():
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    group = common.add_argument_group(title="Run options")
    group.add_argument("--config", help="JSON file of option values (flags override it)")
    group.add_argument("--out", help="Output directory (default: current directory)")
    group.add_argument("--seed", type=int, help="Master seed (default: 0)")
    group.add_argument("--threads", type=int, help="Worker processes (default: logical cores)")
    group.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                       help="Logging verbosity on stderr (default: WARNING)")
    group.add_argument("--progress", action="store_true", help="Show progress bars")
    return common


def _add_data_options(parser):
    group = parser.add_argument_group(title="Input options")
    group.add_argument("--data", help="Harmonized summary statistics TSV")
    group.add_argument("--sigma", help="K x K exposure correlation CSV (default: identity)")
    group.add_argument("--trait-sd", help="Exposure trait SDs, one comma-separated line")


def _add_tuning_options(parser):
    group = parser.add_argument_group(title="Estimation options")
    group.add_argument("--method", help="ivw, divw, dridge, dlasso, pacs, pacs-<x>, ivw-lasso "
                                        "(default: pacs)")
    group.add_argument("--threshold", type=float,
                       help="Correlation threshold for the pairwise weights (pacs-x)")
    group.add_argument("--folds", type=int, help="Cross-validation folds (default: 5)")
    group.add_argument("--repeats", type=int, help="Cross-validation repeats (default: 1)")
    group.add_argument("--rule", choices=["min", "1se"], help="Candidate rule (default: 1se)")
    group.add_argument("--grid-points", type=int, help="Lambda grid size (default: 25)")
    group.add_argument("--taus", type=_float_list, help="Adaptive weight powers (default: 0.5,1,2,3)")
    group.add_argument("--ridge-points", type=int, help="Ridge grid size (default: 25)")
    group.add_argument("--correlation-source", choices=["raw", "zscore"],
                       help="Exposure correlation used by the pairwise weights (default: raw)")
    group.add_argument("--fixed-weights", action="store_true",
                       help="Use full-data adaptive weights in every fold")
    group.add_argument("--lqa-tol", type=float, help="LQA relative tolerance (default: 1e-6)")
    group.add_argument("--lqa-max-iter", type=int, help="LQA iteration cap (default: 500)")
    group.add_argument("--fusion", choices=["mean", "precision"],
                       help="Value assigned to fused coefficients (default: mean)")


def _add_inference_options(parser):
    group = parser.add_argument_group(title="Inference options")
    group.add_argument("--precision", type=float,
                       help="Magnitude tolerance for signal groups (default: 1e-3)")
    group.add_argument("--level", type=float, help="Confidence level (default: 0.95)")


def _subcommand(sub, common, name, help_text):
    return sub.add_parser(name, parents=[common], help=help_text,
                          argument_default=argparse.SUPPRESS)


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="pacsmr",
        description="Multivariable Mendelian randomization with pairwise clustering and shrinkage")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", metavar="subcommand")
    sub.required = True

    fit = _subcommand(sub, common, "fit", "Fit one estimator (tuned by CV if penalized)")
    _add_data_options(fit)
    _add_tuning_options(fit)
    _add_inference_options(fit)

    diagnose = _subcommand(sub, common, "diagnose", "Instrument strength and projection")
    _add_data_options(diagnose)
    diagnose.add_argument("--correlation-source", choices=["raw", "zscore"])

    thin = _subcommand(sub, common, "thin", "Split a dataset by data thinning")
    _add_data_options(thin)
    thin.add_argument("--folds", type=int, help="Number of equal folds (default: 5)")
    thin.add_argument("--epsilons", type=_float_list, help="Fold fractions summing to 1")

    cv = _subcommand(sub, common, "cv", "Cross-validation table for a penalized method")
    _add_data_options(cv)
    _add_tuning_options(cv)

    select = _subcommand(sub, common, "select-infer", "Select on one thinned fold, infer on the other")
    _add_data_options(select)
    _add_tuning_options(select)
    _add_inference_options(select)

    stability = _subcommand(sub, common, "stability", "Repeat select-infer over new thinnings")
    _add_data_options(stability)
    _add_tuning_options(stability)
    _add_inference_options(stability)
    group = stability.add_argument_group(title="Stability options")
    group.add_argument("--runs", type=int, help="Thinning runs (default: 100)")
    group.add_argument("--aggregate", choices=["descriptive", "median"],
                       help="Summary of the most frequent grouping (default: descriptive)")
    group.add_argument("--alpha", type=float, help="Significance level for counts (default: 0.05)")

    simulate = _subcommand(sub, common, "simulate", "Monte Carlo experiment")
    _add_tuning_options(simulate)
    _add_inference_options(simulate)
    group = simulate.add_argument_group(title="Simulation options")
    group.add_argument("--n", type=int, help="Individuals per cohort (default: 100000)")
    group.add_argument("--p", type=int, help="SNPs (default: 500)")
    group.add_argument("--replicates", type=int, help="Monte Carlo replicates (default: 100)")
    group.add_argument("--estimators", type=_name_list,
                       help=f"Comma-separated estimators (default: {','.join(DEFAULT_ESTIMATORS)})")
    group.add_argument("--sigma-mode", choices=["null_z", "phenotypic", "identity"],
                       help="Exposure correlation supplied to the estimators (default: phenotypic)")
    group.add_argument("--sigma-gamma", type=float, help="Scale of the true SNP effects (default: 1e-3)")
    group.add_argument("--gamma-scale", choices=["variance", "sd"],
                       help="Whether --sigma-gamma is a variance or an SD (default: variance)")
    group.add_argument("--dgp-seed", type=int, help="Seed of the fixed true effects (default: 2024)")
    gen = group.add_mutually_exclusive_group()
    gen.add_argument("--individual", dest="generator", action="store_const", const="individual",
                     help="Individual-level generator (default)")
    gen.add_argument("--fast", dest="generator", action="store_const", const="fast",
                     help="Summary-level generator")
    group.add_argument("--pipeline", action="store_true",
                       help="Run the select-infer pipeline instead of the estimator comparison")
    return parser


def _read_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if isinstance(values, dict) and "subcommand" in values and isinstance(values.get("config"), dict):
        values = values["config"]
    if not isinstance(values, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return values


def resolve_config(args):
    """Defaults, then the config file, then explicit flags."""
    given = {k: v for k, v in vars(args).items() if k not in ("subcommand", "config")}
    values = {}
    if getattr(args, "config", None):
        values.update(_read_config_file(args.config))
    values.update(given)

    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValidationError(f"unknown option(s): {', '.join(unknown)}")
    for key in _TUPLE_FIELDS & set(values):
        if values[key] is not None:
            values[key] = tuple(values[key])
    return replace(RunConfig(), **values)


# =============================================================================
# Subcommands
# =============================================================================

def _load(run):
    if not run.data:
        raise ValidationError("--data is required")
    return load_dataset(run.data, run.sigma, run.trait_sd)


def _inputs(run):
    return [p for p in (run.data, run.sigma, run.trait_sd) if p]


def cmd_fit(run, out):
    ds = _load(run)
    tuned = fit_tuned(ds, run.method, run.selection(), run.seed)
    names = list(ds.exposure_names)
    result = {
        "fit": tuned.fit.to_dict(names),
        "signal_groups": extract_signal_groups(tuned.fit, run.precision).to_dict(names),
        "phi": tuned.phi,
        "strength": None if tuned.strength is None else tuned.strength.to_dict(),
        "cv": None if tuned.cv is None else tuned.cv.to_dict(),
    }
    outputs = [out / "fit.json"]
    write_json(outputs[0], result)
    if tuned.cv is not None:
        outputs.append(out / "cv.csv")
        write_table(outputs[-1], tuned.cv.table)
    print(f"{tuned.fit.method.value}: " + ", ".join(
        f"{n}={b:.4g}" for n, b in zip(names, tuned.fit.beta)))
    return outputs


def cmd_diagnose(run, out):
    ds = _load(run)
    dq = build_design(ds)
    raw = instrument_strength(dq)
    white = instrument_strength(dq, whiten=True)
    projection = dq.projection
    r_hat = exposure_correlation(ds, run.correlation_source)
    off = r_hat[np.triu_indices(ds.k, 1)]
    names = list(ds.exposure_names)
    result = {
        "p": ds.p,
        "k": ds.k,
        "strength": {"raw": raw.to_dict(), "whitened": white.to_dict()},
        "projection": {
            "applied": not is_psd(dq.debiased_matrix),
            "raw_min_eigenvalue": min_eigenvalue(dq.debiased_matrix),
            "distance": projection.distance,
            "converged": projection.converged,
            "iterations": projection.iterations,
        },
        "exposure_correlation": {
            "source": run.correlation_source,
            "max_abs": float(np.max(np.abs(off))) if off.size else 0.0,
            "matrix": pd.DataFrame(r_hat, index=names, columns=names).to_dict(),
        },
    }
    outputs = [out / "diagnostics.json"]
    write_json(outputs[0], result)
    print(f"instrument strength parameter {white.is_param:.3g} (whitened), "
          f"{raw.is_param:.3g} (raw); projection applied: {result['projection']['applied']}")
    return outputs


def _thinning_plan(run):
    if run.epsilons:
        return ThinningPlan(run.epsilons, run.seed)
    return ThinningPlan.even(run.folds, run.seed)


def cmd_thin(run, out):
    ds = _load(run)
    reps = thin_multi_fold(ds, _thinning_plan(run))
    outputs = [out / "sigma.csv"]
    for m, fold in enumerate(reps.folds, start=1):
        outputs.append(out / f"fold_{m}.tsv")
        write_dataset(fold, outputs[-1], sigma_path=outputs[0] if m == 1 else None)
    return outputs


def cmd_cv(run, out):
    ds = _load(run)
    method, _ = parse_method(run.method, run.threshold)
    if method in (Method.IVW, Method.DIVW, Method.DRIDGE):
        raise ValidationError(f"cv needs a penalized method, got '{run.method}'")
    tuned = fit_tuned(ds, run.method, run.selection(), run.seed)
    outputs = [out / "cv.csv", out / "cv.json"]
    write_table(outputs[0], tuned.cv.table)
    write_json(outputs[1], {**tuned.cv.to_dict(), "phi": tuned.phi,
                            "diagnostics": tuned.cv.diagnostics})
    return outputs


def cmd_select_infer(run, out):
    ds = _load(run)
    result = post_selection_pipeline(ds, run.pipeline_config(), run.seed)
    names = list(ds.exposure_names)
    outputs = [out / "select_infer.json"]
    write_json(outputs[0], result.to_dict(names))
    if result.inference is not None:
        outputs.append(out / "inference.csv")
        write_table(outputs[-1], result.inference.to_frame(names))
    print(f"status {result.status}; grouping {result.selection.label_string()}")
    return outputs


def cmd_stability(run, out):
    ds = _load(run)
    summary = stability_summary(ds, run.pipeline_config(), run.runs, run.seed,
                                run.resolved_threads, run.aggregate, run.alpha, run.progress)
    outputs = [out / name for name in ("coassignment.csv", "distance.csv", "runs.csv",
                                       "significance.csv", "groupings.csv", "stability.json")]
    write_table(outputs[0], summary.coassignment.rename_axis("exposure").reset_index())
    write_table(outputs[1], summary.distance.rename_axis("exposure").reset_index())
    write_table(outputs[2], summary.runs)
    write_table(outputs[3], summary.significance)
    write_table(outputs[4], summary.grouping_frequencies)
    write_json(outputs[5], {"most_frequent": summary.most_frequent, "runs": run.runs})
    return outputs


def cmd_simulate(run, out):
    cfg = run.dgp()
    if run.pipeline:
        result = run_pipeline_experiment(cfg, run.replicates, run.seed, run.pipeline_config(),
                                         run.resolved_threads, run.generator, run.progress)
        outputs = [out / "replicates.jsonl", out / "groupings.csv", out / "coverage.csv",
                   out / "pipeline.json"]
        write_jsonl(outputs[0], result.records.to_dict(orient="records"))
        write_table(outputs[1], result.frequencies)
        write_table(outputs[2], result.coverage)
        write_json(outputs[3], result.selection)
        return outputs

    result = run_experiment(cfg, run.estimators, run.replicates, run.seed, run.selection(),
                            run.resolved_threads, run.generator, run.progress)
    outputs = [out / "metrics.csv", out / "replicates.jsonl"]
    write_table(outputs[0], result.summary.rename(columns=TABLE_HEADERS))
    write_jsonl(outputs[1], result.records.to_dict(orient="records"))
    print(result.summary.to_string(index=False))
    return outputs


def _manifest_details(subcommand, run):
    if subcommand == "thin":
        return {"epsilons": [float(eps) for eps in _thinning_plan(run).epsilons]}
    return {}


COMMANDS = {
    "fit": cmd_fit,
    "diagnose": cmd_diagnose,
    "thin": cmd_thin,
    "cv": cmd_cv,
    "select-infer": cmd_select_infer,
    "stability": cmd_stability,
    "simulate": cmd_simulate,
}


def _configure_logging(level):
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, stream=sys.stderr,
                        force=True)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = resolve_config(args)
        _configure_logging(run.log_level)
        out = Path(run.out)
        outputs = COMMANDS[args.subcommand](run, out)
        manifest_path = out / "manifest.json"
        manifest = build_manifest(args.subcommand, asdict(run), __version__, run.seed,
                                  _inputs(run), outputs)
        manifest.update(_manifest_details(args.subcommand, run))
        write_json(manifest_path, manifest)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
