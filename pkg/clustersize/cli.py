"""Command-line entry point: ``clustersize {simulate,fit,summarize,power,recover}``.

Exit codes: 0 on success, 1 on numerical failure or (with ``--strict``) a
fit that did not converge, 2 on usage and input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pandas as pd

from clustersize import __version__
from clustersize.config import RunConfig, load_config
from clustersize.constraint import Constraint, Family
from clustersize.dataset import Dataset, load_dataset, plot_rows, summarize, write_dataset
from clustersize.diagnostics import diagnose, summarize_posterior
from clustersize.errors import ConfigError, DataValidationError, ModelSpecError, NumericalError
from clustersize.mcmc import ChainConfig, fit_joint_and_independent, prior_sensitivity, run_mcmc
from clustersize.mlfit import (
    MLOptions,
    compare_overdispersion,
    delta_equality_lrt,
    delta_split_lrt,
    field_effects_posterior_mean,
    fit_ml,
    naive_standard_errors,
)
from clustersize.model import effect_table, icc_levels
from clustersize.params import DEFAULT_PRIORS, ModelSpec, PriorSpec
from clustersize.power import PowerScenario, anova_power, difference_parameter, required_n, simulated_power
from clustersize.recover import RecoveryOptions, run_recovery
from clustersize.simulate import DesignPreset, TrueParams, simulate_dataset, study_truth
from clustersize.tissue import Grouping

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"
DRAWS_FORMAT = "%.10g"


def _jsonable(obj: object) -> object:
    """Plain JSON types, with non-finite floats written as null."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def write_json(path: Path, payload: dict, cfg: RunConfig) -> Path:
    """Write ``payload`` with the resolved config embedded under ``"config"``."""
    text = json.dumps(_jsonable({"config": cfg.to_dict(), **payload}), indent=2, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def write_csv(path: Path, frame: pd.DataFrame, float_format: str = DRAWS_FORMAT) -> Path:
    frame.to_csv(path, index=False, float_format=float_format, lineterminator="\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(str(cfg["out_dir"]))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _grouping(cfg: RunConfig, key: str = "grouping") -> Grouping | None:
    value = cfg.get(key)
    if value is None:
        return None
    try:
        return Grouping(str(value).lower())
    except ValueError:
        msg = f"unknown grouping {value!r} (expected coarse or fine)"
        raise ConfigError(msg) from None


def _load_input(cfg: RunConfig) -> Dataset:
    data_dir = Path(str(cfg.get("data_dir") or cfg["out_dir"]))
    fields = cfg.get("fields") or data_dir / "fields.csv"
    vessels = cfg.get("vessels") or data_dir / "vessels.csv"
    return load_dataset(fields, vessels)


def _truth(family: Family, grouping: Grouping, rho_zero: bool, with_pla: bool) -> TrueParams:
    truth = study_truth(family, grouping, rho_zero)
    if with_pla and family is not Family.PLA_LMM:
        truth = TrueParams(truth.spec, truth.theta, pla=study_truth(Family.PLA_LMM, grouping).theta)
    return truth


def cmd_simulate(cfg: RunConfig) -> int:
    """Write ``fields.csv``, ``vessels.csv`` and ``truth.json``."""
    family = Family.parse(str(cfg["family"]))
    truth = _truth(family, _grouping(cfg), bool(cfg["rho_zero"]), bool(cfg["with_pla"]))
    design = DesignPreset.named(str(cfg["design"]))
    out = _out_dir(cfg)
    d = simulate_dataset(truth.spec, truth, design, int(cfg["seed"]), n_jobs=int(cfg["threads"]))
    write_dataset(d, out)
    write_json(
        out / "truth.json",
        {
            "seed": cfg["seed"],
            "design": design.name,
            "n_specimens": d.n_specimens,
            "n_fields": d.n_fields,
            "n_vessels": d.n_vessels,
            "truth": truth.to_dict(),
        },
        cfg,
    )
    print(f"simulated {d.n_specimens} specimens, {d.n_fields} fields, {d.n_vessels} vessels into {out}")
    return EXIT_OK


def _fit_spec(cfg: RunConfig) -> ModelSpec:
    constraints = cfg["constraints"]
    if isinstance(constraints, str):
        constraints = [constraints]
    try:
        parsed = frozenset(Constraint(str(c).lower()) for c in constraints)
    except ValueError:
        msg = f"unknown constraint in {list(constraints)} (expected rho_zero or delta_equal)"
        raise ConfigError(msg) from None
    return ModelSpec(Family.parse(str(cfg["family"])), _grouping(cfg), parsed, _grouping(cfg, "delta_grouping"))


def _priors(cfg: RunConfig) -> PriorSpec:
    factor = float(cfg["prior_factor"])
    return DEFAULT_PRIORS if factor == 1.0 else DEFAULT_PRIORS.scaled(factor)


def _chain_config(cfg: RunConfig) -> ChainConfig:
    return ChainConfig(
        burn_in=int(cfg["burn_in"]),
        keep_iterations=int(cfg["keep"]),
        thin=int(cfg["thin"]),
        n_chains=int(cfg["chains"]),
        seed=int(cfg["seed"]),
    )


def _fit_extras(cfg: RunConfig, spec: ModelSpec, d: Dataset, opts: MLOptions, out: Path) -> None:
    """Model comparisons requested with ``--compare`` and ``--lrt``."""
    if cfg["compare"]:
        if spec.family.is_count:
            report = compare_overdispersion(d, spec.grouping, opts)
            write_json(out / "overdispersion.json", report.to_dict(), cfg)
            print(f"negative binomial vs Poisson: delta loglik {report.delta_loglik:.4f}, dispersion {report.dispersion:.4g}")
        elif spec.family is Family.JOINT:
            paired = fit_joint_and_independent(
                d, _priors(cfg), _chain_config(cfg), spec.grouping, n_jobs=int(cfg["threads"])
            )
            write_json(out / "paired.json", paired.to_dict(), cfg)
        else:
            msg = f"--compare is defined for lvd_pois, lvd_negbin and joint, not {spec.family.value}"
            raise ModelSpecError(msg)
    if cfg["lrt"]:
        if spec.family is not Family.CIRC_HET:
            msg = f"--lrt is defined for circ_het, not {spec.family.value}"
            raise ModelSpecError(msg)
        tests = {"delta_equal": delta_equality_lrt(d, spec.grouping, opts).to_dict()}
        if spec.grouping is Grouping.COARSE:
            tests["delta_split"] = delta_split_lrt(d, opts).to_dict()
        write_json(out / "lrt.json", tests, cfg)
        for name, result in tests.items():
            print(f"{name}: LR {result['statistic']:.3f} on {result['df']} df, p = {result['p_value']:.4g}")


def cmd_fit(cfg: RunConfig) -> int:
    """Fit one model by ML or MCMC and write its summary (plus draws and diagnostics for MCMC)."""
    spec = _fit_spec(cfg)
    method = str(cfg["method"]).lower()
    if method not in ("ml", "mcmc"):
        msg = f"unknown method {method!r} (expected ml or mcmc)"
        raise ConfigError(msg)
    d = _load_input(cfg)
    out = _out_dir(cfg)
    opts = MLOptions(n_nodes=int(cfg["n_nodes"]))
    status = EXIT_OK

    if method == "ml":
        fit = fit_ml(spec, d, opts=opts)
        payload = fit.to_dict()
        payload["effects"] = [
            {**vars(row), "phrase": row.phrase} for row in effect_table(fit.theta_hat, spec)
        ]
        if spec.family.is_gaussian:
            payload["icc"] = icc_levels(spec, fit.theta_hat)
            payload["naive"] = [
                {**vars(row), "inflation": row.inflation} for row in naive_standard_errors(fit, d)
            ]
        write_json(out / "summary.json", payload, cfg)
        if cfg["field_effects"]:
            write_csv(out / "field_effects.csv", field_effects_posterior_mean(spec, fit.theta_hat, d))
        print(f"{spec.family.value}: loglik {fit.max_loglik:.4f}, converged {fit.converged}")
        if cfg["strict"] and not fit.converged:
            logger.error("optimizer did not converge: %s", fit.message)
            status = EXIT_FAILURE
    else:
        priors = _priors(cfg)
        chains = run_mcmc(spec, priors, d, _chain_config(cfg), n_jobs=int(cfg["threads"]))
        summary = summarize_posterior(chains)
        report = diagnose(chains)
        write_json(out / "summary.json", {**summary.to_dict(), "diagnostics_ok": report.ok}, cfg)
        write_csv(out / "draws.csv", chains.to_frame())
        header = {k: json.dumps(_jsonable(v)) for k, v in cfg.to_dict().items()}
        (out / "diagnostics.txt").write_text(report.to_text(header), encoding="utf-8")
        if cfg["sensitivity"]:
            sens = prior_sensitivity(spec, d, _chain_config(cfg), priors, n_jobs=int(cfg["threads"]))
            write_json(out / "sensitivity.json", sens.to_dict(), cfg)
        print(f"{spec.family.value}: {chains.n_chains} chain(s) x {chains.n_kept} draws, diagnostics {'OK' if report.ok else 'FLAGGED'}")
        if cfg["strict"] and not report.ok:
            status = EXIT_FAILURE

    _fit_extras(cfg, spec, d, opts, out)
    return status


def cmd_summarize(cfg: RunConfig) -> int:
    """Descriptive summary by tissue group plus plot-ready per-vessel rows."""
    d = _load_input(cfg)
    out = _out_dir(cfg)
    table = summarize(d)
    frame = table.to_frame()
    write_csv(out / "summary.csv", frame, float_format="%.6g")
    write_csv(out / "plot_rows.csv", plot_rows(d), float_format="%.6g")
    write_json(
        out / "summary.json",
        {
            "total_fields": table.total_fields,
            "total_vessels": table.total_vessels,
            "logarea_lvd_correlation": table.logarea_lvd_correlation,
            "rows": frame.to_dict(orient="records"),
        },
        cfg,
    )
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_power(cfg: RunConfig) -> int:
    """One-way ANOVA power, optionally the n for a target power and a simulation check."""
    scenario = PowerScenario(
        tuple(float(x) for x in cfg["means"]), float(cfg["sd"]), int(cfg["n"]), float(cfg["alpha"])
    )
    row = {
        "k": scenario.k,
        "n_per_group": scenario.n_per_group,
        "alpha": scenario.alpha,
        "difference_parameter": difference_parameter(scenario),
        "power": anova_power(scenario),
    }
    if cfg["target"] is not None:
        row["target"] = float(cfg["target"])
        row["required_n"] = required_n(scenario, float(cfg["target"]))
    if int(cfg["reps"]) > 0:
        row["simulated_power"] = simulated_power(
            scenario, int(cfg["reps"]), seed=int(cfg["seed"]), n_jobs=int(cfg["threads"])
        )
    out = _out_dir(cfg)
    write_json(out / "power.json", {"scenario": scenario.to_dict(), **row}, cfg)
    print(pd.DataFrame([row]).to_string(index=False))
    return EXIT_OK


def cmd_recover(cfg: RunConfig) -> int:
    """Repeated simulate-then-fit from the study-derived truth of one family."""
    family = Family.parse(str(cfg["family"]))
    truth = study_truth(family, _grouping(cfg))
    design = DesignPreset.named(str(cfg["design"]))
    chains = ChainConfig(
        burn_in=int(cfg["burn_in"]),
        keep_iterations=int(cfg["keep"]),
        thin=int(cfg["thin"]),
        n_chains=int(cfg["chains"]),
    )
    opts = RecoveryOptions(
        method=str(cfg["method"]).lower(),
        n_replicates=int(cfg["replicates"]),
        seed=int(cfg["seed"]),
        chains=chains,
        contrast=bool(cfg["contrast"]),
    )
    report = run_recovery(truth, design, opts, n_jobs=int(cfg["threads"]))
    out = _out_dir(cfg)
    summary = report.summary()
    write_csv(out / "recovery.csv", summary)
    write_csv(out / "replicates.csv", report.replicates)
    if report.contrast is not None:
        write_csv(out / "contrast.csv", report.contrast)
    write_json(out / "recovery.json", report.to_dict(), cfg)
    print(summary.to_string(index=False))
    if cfg["strict"] and report.n_converged < report.n_replicates:
        return EXIT_FAILURE
    return EXIT_OK


COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "summarize": cmd_summarize,
    "power": cmd_power,
    "recover": cmd_recover,
}


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS keeps flags that were not given out of the namespace, so the
    # config file and built-in defaults apply to them.
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="base random seed")
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--out-dir", dest="out_dir", help="output directory")
    common.add_argument("--threads", type=int, help="worker processes for chains and replicates")
    common.add_argument("--strict", action="store_true", help="exit 1 when a fit fails to converge")
    common.add_argument("-v", "--verbose", action="count", help="INFO with -v, DEBUG with -vv")
    return common


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir", dest="data_dir", help="directory holding fields.csv and vessels.csv")
    p.add_argument("--fields", help="field table (overrides --data-dir)")
    p.add_argument("--vessels", help="vessel table (overrides --data-dir)")


def _chain_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--keep", type=int, help="iterations after burn-in")
    p.add_argument("--thin", type=int)
    p.add_argument("--chains", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(
        prog="clustersize",
        description="Hierarchical and joint models for clustered data with informative cluster size.",
        parents=[common],
        argument_default=argparse.SUPPRESS,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    families = [f.value for f in Family]
    groupings = [g.value for g in Grouping]

    p = sub.add_parser("simulate", parents=[common], argument_default=argparse.SUPPRESS, help="simulate a dataset")
    p.add_argument("--family", help=f"generating model ({', '.join(families)})")
    p.add_argument("--grouping", choices=groupings)
    p.add_argument("--design", help="table1 or balanced_<specimens>x<fields>")
    p.add_argument("--rho-zero", dest="rho_zero", action=argparse.BooleanOptionalAction)
    p.add_argument("--with-pla", dest="with_pla", action=argparse.BooleanOptionalAction)

    p = sub.add_parser("fit", parents=[common], argument_default=argparse.SUPPRESS, help="fit a model")
    _data_flags(p)
    p.add_argument("--family", help=f"model family ({', '.join(families)})")
    p.add_argument("--method", choices=["ml", "mcmc"])
    p.add_argument("--grouping", choices=groupings)
    p.add_argument("--delta-grouping", dest="delta_grouping", choices=groupings)
    p.add_argument(
        "--constraint", dest="constraints", action="append", choices=[c.value for c in Constraint]
    )
    p.add_argument("--n-nodes", dest="n_nodes", type=int, help="Gauss-Hermite nodes per latent dimension")
    p.add_argument("--prior-factor", dest="prior_factor", type=float, help="scale every prior hyperparameter")
    p.add_argument("--compare", action="store_true", help="NB vs Poisson (LVD) or joint vs rho=0 (joint)")
    p.add_argument("--lrt", action="store_true", help="likelihood-ratio tests on circularity multipliers")
    p.add_argument("--sensitivity", action="store_true", help="refit under x10 and /10 priors")
    p.add_argument("--field-effects", dest="field_effects", action="store_true")
    _chain_flags(p)

    p = sub.add_parser("summarize", parents=[common], argument_default=argparse.SUPPRESS, help="descriptive summary")
    _data_flags(p)

    p = sub.add_parser("power", parents=[common], argument_default=argparse.SUPPRESS, help="ANOVA power")
    p.add_argument("--means", type=float, nargs="+")
    p.add_argument("--sd", type=float, help="common within-group SD")
    p.add_argument("--n", type=int, help="observations per group")
    p.add_argument("--alpha", type=float)
    p.add_argument("--target", type=float, help="report the n reaching this power")
    p.add_argument("--reps", type=int, help="simulation replicates for a Monte-Carlo check")

    p = sub.add_parser("recover", parents=[common], argument_default=argparse.SUPPRESS, help="parameter recovery")
    p.add_argument("--family", help=f"generating and fitted model ({', '.join(families)})")
    p.add_argument("--method", choices=["ml", "mcmc"])
    p.add_argument("--grouping", choices=groupings)
    p.add_argument("--design", help="table1 or balanced_<specimens>x<fields>")
    p.add_argument("--replicates", type=int)
    p.add_argument("--contrast", action=argparse.BooleanOptionalAction, help="conditional-model contrast")
    _chain_flags(p)
    return parser


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    values = vars(ns)
    command = values.pop("command")
    config_path = values.pop("config", None)
    configure_logging(values.pop("verbose", 0))
    try:
        cfg = load_config(command, config_path, values)
        return COMMANDS[command](cfg)
    except (NumericalError, np.linalg.LinAlgError) as err:
        logger.error("numerical failure: %s", err)
        print(f"clustersize: numerical failure: {err}", file=sys.stderr)
        return EXIT_FAILURE
    except (DataValidationError, ModelSpecError, ConfigError, FileNotFoundError, ValueError) as err:
        parser.print_usage(sys.stderr)
        print(f"clustersize {command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
