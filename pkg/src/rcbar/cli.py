"""Command-line front end: simulate, estimate, asymptotics, experiment.

Exit codes: 0 success, 1 usage error, 2 validation or file-format error,
3 experiment finished with a failing verdict.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import (
    confidence_interval,
    limit_matrices,
    noise_block_plugin_covariance,
    qsl_target,
    rho_clt_covariance,
    sigma_clt_covariance,
    theta_clt_covariance,
    theta_plugin_covariance,
    wald_test,
)
from .bar import simulate, stability_margin
from .chain import InducedCoefficientLaw, stationary_moments
from .estimation import estimate_all
from .genealogy import generation_counts, sample_observation_tree
from .harness import EXPERIMENT_KINDS, ExperimentConfig, run_experiment
from .io import (
    ConfigError,
    LineageFormatError,
    file_sha256,
    load_config,
    read_lineage,
    write_lineage,
    write_truth,
)
from .noise import MomentBudgetError

USAGE_EXIT = 1
VALIDATION_EXIT = 2
EXPERIMENT_FAIL_EXIT = 3

EXPERIMENT_ALIASES = {
    "consistency": "consistency",
    "rate": "rate_qsl",
    "qsl": "rate_qsl",
    "rate_qsl": "rate_qsl",
    "coverage": "coverage",
    "normality": "coverage",
    "bias": "bias",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(USAGE_EXIT)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _matrix_block(name: str, matrix) -> str:
    lines = [f"# {name}"]
    arr = np.atleast_2d(np.asarray(matrix, dtype=float))
    for row in arr:
        lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    noise = cfg.build_noise()
    margin = None
    try:
        margin = stability_margin(cfg.params, noise, cfg.obs, kappa=1)
    except MomentBudgetError:
        pass
    if margin is not None and margin >= 1.0 and not args.allow_unstable:
        raise ConfigError(
            f"configuration is unstable (order-4 contraction margin {margin:.4g} >= 1); "
            f"pass --allow-unstable to simulate anyway"
        )
    tree = sample_observation_tree(cfg.obs, cfg.generations, seed=seed)
    lineage = simulate(cfg.params, noise, tree, seed=seed, keep_noise=cfg.keep_truth)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lineage_path = out_dir / "lineage.csv"
    write_lineage(lineage, lineage_path)
    written = [str(lineage_path)]
    if cfg.keep_truth:
        truth_path = out_dir / "truth.csv"
        write_truth(lineage, truth_path)
        written.append(str(truth_path))
    counts, total = generation_counts(tree)
    print(
        json.dumps(
            {
                "written": written,
                "cells": total,
                "generations": cfg.generations,
                "generation_counts": counts,
                "extinct": tree.is_extinct,
                "stability_margin_order4": margin,
                "seed": seed,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return 0


def _interval_list(point, cov, level):
    out = []
    for i, p in enumerate(point):
        var = max(float(cov[i, i]), 0.0)
        out.append(list(confidence_interval(float(p), var, level)))
    return out


def cmd_estimate(args) -> int:
    lineage = read_lineage(args.lineage)
    bundle = estimate_all(lineage)
    level = args.level
    report: dict = {
        "file": str(args.lineage),
        "sha256": file_sha256(args.lineage),
        "cells": lineage.tree.n_observed,
        "generations": lineage.max_generation,
        "level": level,
        "version": __version__,
        "coefficients": {
            "status": bundle.theta_status,
            "names": ["a", "b", "c", "d"],
            "values": bundle.theta,
        },
        "noise_variances": {
            "status": bundle.sigma_status,
            "names": ["sigma_eps2", "rho00", "rho11", "sigma_eta2"],
            "values": bundle.sigma,
            "out_of_cone": bundle.sigma_out_of_cone,
        },
        "sibling_covariances": {
            "status": bundle.rho_status,
            "names": ["rho_eps", "rho", "rho_eta"],
            "values": bundle.rho,
        },
        "design": {
            "mean_gram": bundle.design.gram,
            "variance_gram": bundle.design.var_gram,
            "covariance_gram": bundle.design.cov_gram,
            "cells_up_to_mothers": bundle.design.n_cells,
        },
        "included_mother_generations": bundle.included_generations,
    }
    if bundle.theta is not None and bundle.sigma is not None and bundle.rho is not None:
        cov_theta = theta_plugin_covariance(
            lineage, bundle.sigma, bundle.rho, design=bundle.design
        )
        report["coefficients"]["conf_int"] = _interval_list(bundle.theta, cov_theta, level)
        report["coefficients"]["covariance"] = cov_theta
        cov_sigma, cov_rho = noise_block_plugin_covariance(
            lineage, bundle.residuals, bundle.sigma, bundle.rho
        )
        if cov_sigma is not None:
            report["noise_variances"]["conf_int"] = _interval_list(bundle.sigma, cov_sigma, level)
            tests = {}
            for idx, name in ((0, "sigma_eps2"), (3, "sigma_eta2")):
                var = float(cov_sigma[idx, idx])
                if var > 0:
                    z, p = wald_test(float(bundle.sigma[idx]), var, 0.0, sided="one")
                    tests[name] = {"z": z, "p_one_sided": p}
            report["positivity_tests"] = tests
        if cov_rho is not None:
            report["sibling_covariances"]["conf_int"] = _interval_list(
                bundle.rho, cov_rho, level
            )
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "estimate.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_asymptotics(args) -> int:
    cfg = load_config(args.config)
    noise = cfg.build_noise()
    law = InducedCoefficientLaw(cfg.params, noise, cfg.obs)
    sm = stationary_moments(law, 8)
    lm = limit_matrices(
        cfg.params, noise, cfg.obs, sm, literal_cross_moment=args.literal_paper_typos
    )
    blocks = [
        _matrix_block("stationary_trait_moments q=0..8", sm.values),
        _matrix_block("mean_gram_limit", lm.gram),
        _matrix_block("variance_gram_limit", lm.var_gram),
        _matrix_block("covariance_gram_limit", lm.cov_gram),
        _matrix_block("score_covariance_limit", lm.score_cov),
        _matrix_block("scale_limit", lm.scale),
        _matrix_block("clt_cov_coefficients", theta_clt_covariance(lm)),
        _matrix_block("clt_cov_noise_variances", sigma_clt_covariance(lm)),
        _matrix_block("clt_cov_sibling", rho_clt_covariance(lm)),
        _matrix_block("overfit_constants_even r=0,1,2", lm.overfit_var0),
        _matrix_block("overfit_constants_odd r=0,1,2", lm.overfit_var1),
        _matrix_block("overfit_constants_pair r=0,1,2", lm.overfit_cov),
        _matrix_block("bias_noise_variances", lm.bias_sigma),
        _matrix_block("bias_sibling", lm.bias_rho),
        _matrix_block("qsl_limit", [qsl_target(lm)]),
    ]
    margins = []
    for kappa in (1, 2):
        try:
            margins.append(stability_margin(cfg.params, noise, cfg.obs, kappa=kappa))
        except MomentBudgetError:
            break
    blocks.append(_matrix_block("stability_margins kappa=1..", margins))
    print("\n".join(blocks))
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    block = dict(cfg.experiment)
    kind_raw = block.pop("kind", None)
    if kind_raw is None:
        raise ConfigError("experiment.kind: required")
    kind = EXPERIMENT_ALIASES.get(str(kind_raw))
    if kind is None:
        raise ConfigError(
            f"experiment.kind: unknown kind {kind_raw!r}; expected one of "
            f"{sorted(EXPERIMENT_ALIASES)}"
        )
    horizon = block.pop("horizon", cfg.generations)
    replicates = block.pop("replicates", 200)
    level = args.level if args.level is not None else block.pop("level", 0.95)
    block.pop("level", None)
    stationary_start = block.pop("stationary_start", True)
    seed = args.seed if args.seed is not None else cfg.seed
    noise = cfg.build_noise()
    margin = stability_margin(cfg.params, noise, cfg.obs, kappa=1)
    if margin >= 1.0 and not args.allow_unstable:
        raise ConfigError(
            f"configuration is unstable (order-4 contraction margin {margin:.4g} >= 1)"
        )
    exp_cfg = ExperimentConfig(
        kind=kind,
        params=cfg.params,
        noise=noise,
        obs=cfg.obs,
        horizon=int(horizon),
        replicates=int(replicates),
        seed=int(seed),
        level=float(level),
        stationary_start=bool(stationary_start),
        tolerances=block,
    )
    result = run_experiment(exp_cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{kind}_replicates.csv").write_text(result.replicate_csv())
    (out_dir / f"{kind}_summary.csv").write_text(result.summary_csv())
    for v in result.verdicts:
        print(f"{v.status.upper():12s} {v.name}: observed {v.observed} (tolerance {v.tolerance})")
    print(f"survivors {result.survivors} / attempts {result.attempts}")
    return EXPERIMENT_FAIL_EXIT if result.failed else 0


def build_parser() -> _Parser:
    parser = _Parser(prog="rcbar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="simulate a lineage file from a configuration")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", default=".")
    p_sim.add_argument("--allow-unstable", action="store_true")
    p_sim.set_defaults(func=cmd_simulate)

    p_est = sub.add_parser("estimate", help="estimate parameters from a lineage file")
    p_est.add_argument("lineage")
    p_est.add_argument("--level", type=float, default=0.95)
    p_est.add_argument("--out", default=None)
    p_est.set_defaults(func=cmd_estimate)

    p_asy = sub.add_parser("asymptotics", help="print limit matrices and constants")
    p_asy.add_argument("--config", required=True)
    p_asy.add_argument("--literal-paper-typos", action="store_true")
    p_asy.set_defaults(func=cmd_asymptotics)

    p_exp = sub.add_parser("experiment", help="run a Monte Carlo validation experiment")
    p_exp.add_argument("--config", required=True)
    p_exp.add_argument("--seed", type=int, default=None)
    p_exp.add_argument("--out", default=".")
    p_exp.add_argument("--level", type=float, default=None)
    p_exp.add_argument("--allow-unstable", action="store_true")
    p_exp.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, LineageFormatError, MomentBudgetError, ValueError) as exc:
        print(f"rcbar: {exc}", file=sys.stderr)
        return VALIDATION_EXIT


if __name__ == "__main__":
    sys.exit(main())
