"""Monte Carlo experiments that turn the limit theorems into pass/fail checks.

Each experiment simulates independent replicate trees from one model
configuration, keeps the surviving replicates (every limit statement is
conditional on survival), aggregates a theorem-specific statistic and
compares it to its theoretical limit at an explicit tolerance.  Replicates
are seeded individually from the master seed, so a configuration determines
every byte of the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .asymptotics import (
    limit_matrices,
    normal_quantile,
    qsl_target,
    theta_plugin_covariance,
)
from .bar import BarParams, simulate, stability_margin
from .chain import InducedCoefficientLaw, stationary_moments
from .estimation import (
    estimate_all,
    noise_block_systems,
    theta_trajectory,
)
from .genealogy import ObservationParams, sample_observation_tree
from .noise import _NoiseBase

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "Verdict",
    "run_experiment",
    "run_consistency",
    "run_rate_qsl",
    "run_coverage",
    "run_bias",
    "stationary_start_sampler",
]

EXPERIMENT_KINDS = ("consistency", "rate_qsl", "coverage", "bias")

# First horizon entering the quadratic-strong-law tail average; earlier
# horizons sit too far from the asymptotic regime on desk-scale trees.
QSL_START = 6
# Burn-in length when drawing the ancestor from the stationary trait law.
STATIONARY_BURN_IN = 60


def stationary_start_sampler(law: InducedCoefficientLaw, burn_in: int = STATIONARY_BURN_IN):
    """Ancestor sampler: run the tagged-branch chain to near-stationarity."""

    def sampler(rng: np.random.Generator) -> float:
        y = 0.0
        a, b = law.sample(rng, burn_in)
        for i in range(burn_in):
            y = a[i] + b[i] * y
        return float(y)

    return sampler


@dataclass
class ExperimentConfig:
    """One Monte Carlo experiment: model, scale, seed and tolerances."""

    kind: str
    params: BarParams
    noise: _NoiseBase
    obs: ObservationParams
    horizon: int
    replicates: int
    seed: int
    level: float = 0.95
    stationary_start: bool = True
    tolerances: dict = field(default_factory=dict)
    max_attempt_factor: int = 8

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(
                f"unknown experiment kind {self.kind!r}; expected one of {EXPERIMENT_KINDS}"
            )
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if not 0 < self.level < 1:
            raise ValueError("level must be inside (0, 1)")

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "coefficients": list(self.params.as_vector()),
            "observation": [self.obs.p0, self.obs.p1, self.obs.p01],
            "noise_family": self.noise.family,
            "horizon": self.horizon,
            "replicates": self.replicates,
            "seed": self.seed,
            "level": self.level,
            "stationary_start": self.stationary_start,
        }


@dataclass
class Verdict:
    name: str
    status: str  # pass | fail | inconclusive
    observed: str
    tolerance: str
    details: str = ""


@dataclass
class ExperimentResult:
    kind: str
    config: dict
    columns: list[str]
    records: list[list]
    aggregates: dict
    verdicts: list[Verdict]
    survivors: int
    attempts: int

    @property
    def failed(self) -> bool:
        return any(v.status == "fail" for v in self.verdicts)

    def replicate_csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.records:
            lines.append(",".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        lines = ["section,name,value"]
        for key, value in sorted(self.config.items()):
            lines.append(f"config,{key},{_fmt(value)}")
        lines.append(f"run,survivors,{self.survivors}")
        lines.append(f"run,attempts,{self.attempts}")
        for key, value in sorted(self.aggregates.items()):
            lines.append(f"aggregate,{key},{_fmt(value)}")
        for v in self.verdicts:
            lines.append(
                f"verdict,{v.name},{v.status};observed={v.observed};"
                f"tolerance={v.tolerance};{v.details}"
            )
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + " ".join(_fmt(float(x)) for x in value) + "]"
    return str(value)


def _simulation_params(cfg: ExperimentConfig) -> BarParams:
    if not cfg.stationary_start:
        return cfg.params
    law = InducedCoefficientLaw(cfg.params, cfg.noise, cfg.obs)
    base = cfg.params
    return BarParams(
        base.a, base.b, base.c, base.d, x1=base.x1,
        x1_sampler=stationary_start_sampler(law),
    )


class _ReplicateStream:
    """Iterate surviving replicates while tracking the attempt count exactly."""

    def __init__(self, cfg: ExperimentConfig, keep_noise: bool = False):
        self.cfg = cfg
        self.keep_noise = keep_noise
        self.attempts = 0
        self.survivors = 0

    def __iter__(self):
        cfg = self.cfg
        sim_params = _simulation_params(cfg)
        max_attempts = cfg.max_attempt_factor * cfg.replicates
        while self.survivors < cfg.replicates and self.attempts < max_attempts:
            self.attempts += 1
            seed = _replicate_seed(cfg.seed, self.attempts)
            tree = sample_observation_tree(cfg.obs, cfg.horizon, seed=seed)
            if tree.is_extinct:
                continue
            self.survivors += 1
            yield self.attempts, simulate(
                sim_params, cfg.noise, tree, seed=seed, keep_noise=self.keep_noise
            )


def _replicate_seed(master: int, attempt: int) -> int:
    # Stable scalar per (master, attempt); feeds the per-cell seed derivation.
    return int(np.random.SeedSequence((int(master), int(attempt))).generate_state(1)[0])


def _survival_verdict(cfg: ExperimentConfig, survivors: int, attempts: int) -> Verdict:
    expected = 1.0 - cfg.obs.extinction_probability()
    observed = survivors / attempts if attempts else 0.0
    se = float(np.sqrt(max(expected * (1 - expected), 1e-12) / max(attempts, 1)))
    ok = abs(observed - expected) <= 3 * se + 1e-12
    return Verdict(
        name="survival-fraction",
        status="pass" if ok else "fail",
        observed=f"{observed:.4f}",
        tolerance=f"{expected:.4f} +- {3 * se:.4f} (3 SE)",
        details=f"survivors={survivors};attempts={attempts}",
    )


def _check_budget(cfg: ExperimentConfig, kappa: int, what: str):
    cfg.noise.require_kappa(kappa, what)
    margin = stability_margin(cfg.params, cfg.noise, cfg.obs, kappa=1)
    if margin >= 1.0:
        raise ValueError(
            f"configuration is unstable (order-4 contraction margin {margin:.4g} >= 1)"
        )


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def run_consistency(cfg: ExperimentConfig) -> ExperimentResult:
    """Median estimation error against the horizon: decreasing, at the predicted pace.

    Tracks the mean-parameter error over horizons 4..n per replicate.  The
    medians must decrease with the horizon (one inversion allowed) and the
    four-generation error ratio must sit inside the band implied by the
    square-root-of-tree-size convergence rate.
    """
    _check_budget(cfg, 2, "mean-parameter consistency")
    horizons = list(range(4, cfg.horizon + 1))
    columns = ["attempt", "n_cells"] + [f"err_norm_h{h}" for h in horizons]
    records = []
    errors = {h: [] for h in horizons}
    theta_true = cfg.params.as_vector()
    stream = _ReplicateStream(cfg)
    for attempt, lineage in stream:
        traj = {rec[0]: rec[1] for rec in theta_trajectory(lineage)}
        row = [attempt, lineage.tree.n_observed]
        for h in horizons:
            theta = traj.get(h)
            if theta is None:
                row.append(float("nan"))
            else:
                err = float(np.linalg.norm(theta - theta_true))
                errors[h].append(err)
                row.append(err)
        records.append(row)

    survivors, attempts = stream.survivors, stream.attempts
    verdicts = []
    aggregates = {"horizons": horizons}
    if survivors == 0:
        verdicts.append(
            Verdict("consistency", "inconclusive", "n/a", "n/a", "all replicates extinct")
        )
        return ExperimentResult(
            cfg.kind, cfg.describe(), columns, records, aggregates, verdicts, survivors, attempts
        )

    medians = {h: float(np.median(errors[h])) for h in horizons if errors[h]}
    aggregates.update({f"median_err_h{h}": m for h, m in medians.items()})
    ordered = [medians[h] for h in horizons if h in medians]
    inversions = sum(1 for lo, hi in zip(ordered, ordered[1:]) if hi > lo)
    max_inversions = int(cfg.tolerances.get("max_inversions", 1))
    verdicts.append(
        Verdict(
            name="error-medians-decrease",
            status="pass" if inversions <= max_inversions else "fail",
            observed=f"{inversions} inversions",
            tolerance=f"<= {max_inversions} inversions",
        )
    )
    h_hi = cfg.horizon
    h_lo = cfg.horizon - 4
    if h_lo in medians and h_hi in medians and medians[h_hi] > 0:
        ratio = medians[h_lo] / medians[h_hi]
        lo, hi = cfg.tolerances.get("rate_ratio_band", (1.4, 2.8))
        aggregates["rate_ratio"] = ratio
        aggregates["rate_ratio_predicted"] = cfg.obs.m ** 2
        verdicts.append(
            Verdict(
                name="four-generation-error-ratio",
                status="pass" if lo <= ratio <= hi else "fail",
                observed=f"{ratio:.3f}",
                tolerance=f"in [{lo}, {hi}] (predicted {cfg.obs.m ** 2:.3f})",
            )
        )
    verdicts.append(_survival_verdict(cfg, survivors, attempts))
    return ExperimentResult(
        cfg.kind, cfg.describe(), columns, records, aggregates, verdicts, survivors, attempts
    )


def run_rate_qsl(cfg: ExperimentConfig) -> ExperimentResult:
    """Convergence-rate boundedness and the quadratic-strong-law running average.

    The rate statistic rescales the squared error by tree growth; its medians
    must stay bounded along the horizon.  The quadratic-form running average
    over usable horizons must land within the configured tolerance of its
    theoretical limit.
    """
    _check_budget(cfg, 2, "rate and quadratic strong law")
    lm = limit_matrices(cfg.params, cfg.noise, cfg.obs)
    target = qsl_target(lm)
    theta_true = cfg.params.as_vector()
    m = cfg.obs.m
    qsl_start = int(cfg.tolerances.get("qsl_start", QSL_START))

    rate_horizons = list(range(6, cfg.horizon + 1))
    columns = ["attempt", "n_cells", "qsl", "qsl_full"] + [
        f"rate_h{h}" for h in rate_horizons
    ]
    records = []
    qsl_values, qsl_full_values = [], []
    rate_stats = {h: [] for h in rate_horizons}
    stream = _ReplicateStream(cfg)
    for attempt, lineage in stream:
        tail_sum = tail_count = 0.0
        full_sum = 0.0
        row_rates = {}
        for ell, theta, gram, scale_gram, _ in theta_trajectory(lineage):
            if theta is None or gram[0, 0] < 4 or gram[2, 2] < 4:
                continue
            sv = np.linalg.svd(scale_gram, compute_uv=False)
            if sv[-1] <= 1e-12 * sv[0]:
                continue
            u = theta - theta_true
            quad = float(u @ gram @ np.linalg.solve(scale_gram, gram @ u))
            full_sum += quad
            if ell >= qsl_start:
                tail_sum += quad
                tail_count += 1
            if ell in rate_stats:
                row_rates[ell] = m**ell * float(u @ u) / ell
        qsl = tail_sum / tail_count if tail_count else float("nan")
        qsl_full = full_sum / cfg.horizon
        qsl_values.append(qsl)
        qsl_full_values.append(qsl_full)
        for h, v in row_rates.items():
            rate_stats[h].append(v)
        records.append(
            [attempt, lineage.tree.n_observed, qsl, qsl_full]
            + [row_rates.get(h, float("nan")) for h in rate_horizons]
        )

    survivors, attempts = stream.survivors, stream.attempts
    verdicts = []
    aggregates = {"qsl_target": target}
    if survivors == 0:
        verdicts.append(Verdict("rate-qsl", "inconclusive", "n/a", "n/a", "all replicates extinct"))
        return ExperimentResult(
            cfg.kind, cfg.describe(), columns, records, aggregates, verdicts, survivors, attempts
        )

    qsl_mean = float(np.nanmean(qsl_values))
    qsl_se = float(np.nanstd(qsl_values, ddof=1) / np.sqrt(max(survivors, 2)))
    rel_tol = float(cfg.tolerances.get("qsl_rel_tol", 0.10))
    aggregates.update(
        {
            "qsl_mean": qsl_mean,
            "qsl_se": qsl_se,
            "qsl_rel_dev": (qsl_mean - target) / target if target else float("nan"),
            "qsl_full_mean": float(np.nanmean(qsl_full_values)),
        }
    )
    verdicts.append(
        Verdict(
            name="qsl-running-average",
            status="pass" if abs(qsl_mean - target) <= rel_tol * abs(target) else "fail",
            observed=f"{qsl_mean:.5f}",
            tolerance=f"within {rel_tol:.0%} of {target:.5f}",
        )
    )
    medians = {h: float(np.median(v)) for h, v in rate_stats.items() if len(v) >= survivors // 2}
    aggregates.update({f"rate_median_h{h}": v for h, v in medians.items()})
    late = {h: v for h, v in medians.items() if h >= 8}
    if late:
        spread = max(late.values()) / max(min(late.values()), 1e-300)
        bound = float(cfg.tolerances.get("rate_spread_bound", 3.0))
        verdicts.append(
            Verdict(
                name="rate-statistic-bounded",
                status="pass" if spread <= bound else "fail",
                observed=f"max/min median = {spread:.3f}",
                tolerance=f"<= {bound}",
                details="growth-rescaled squared error per horizon",
            )
        )
    verdicts.append(_survival_verdict(cfg, survivors, attempts))
    return ExperimentResult(
        cfg.kind, cfg.describe(), columns, records, aggregates, verdicts, survivors, attempts
    )


def run_coverage(cfg: ExperimentConfig) -> ExperimentResult:
    """Empirical confidence-interval coverage of the mean parameters.

    Each replicate builds the plug-in sandwich covariance from its own
    estimates; the fraction of intervals covering the truth must sit inside
    the binomial band around the nominal level.  Standardized errors feed a
    normality diagnostic (Kolmogorov-Smirnov distance, reported).
    """
    _check_budget(cfg, 2, "coverage")
    theta_true = cfg.params.as_vector()
    z = normal_quantile(0.5 + cfg.level / 2.0)
    names = ["a", "b", "c", "d"]
    columns = ["attempt", "n_cells"] + [f"cover_{n}" for n in names] + [f"z_{n}" for n in names]
    records = []
    covers = []
    zscores = []
    usable = 0
    stream = _ReplicateStream(cfg)
    for attempt, lineage in stream:
        bundle = estimate_all(lineage)
        if bundle.theta is None or bundle.sigma is None or bundle.rho is None:
            continue
        cov = theta_plugin_covariance(lineage, bundle.sigma, bundle.rho, design=bundle.design)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        if not np.all(se > 0):
            continue
        usable += 1
        std_err = (bundle.theta - theta_true) / se
        hit = np.abs(std_err) <= z
        covers.append(hit)
        zscores.append(std_err)
        records.append([attempt, lineage.tree.n_observed] + [int(h) for h in hit] + list(std_err))

    survivors, attempts = stream.survivors, stream.attempts
    verdicts = []
    aggregates = {"nominal_level": cfg.level, "usable_replicates": usable}
    if usable == 0:
        verdicts.append(Verdict("coverage", "inconclusive", "n/a", "n/a", "no usable replicates"))
        return ExperimentResult(
            cfg.kind, cfg.describe(), columns, records, aggregates, verdicts, survivors, attempts
        )
    covers = np.array(covers, dtype=float)
    zscores = np.array(zscores)
    band = float(cfg.tolerances.get("coverage_band", 3 * np.sqrt(cfg.level * (1 - cfg.level) / usable)))
    for i, name in enumerate(names):
        rate = float(covers[:, i].mean())
        aggregates[f"coverage_{name}"] = rate
        verdicts.append(
            Verdict(
                name=f"coverage-{name}",
                status="pass" if abs(rate - cfg.level) <= band else "fail",
                observed=f"{rate:.4f}",
                tolerance=f"{cfg.level} +- {band:.4f}",
            )
        )
        aggregates[f"ks_{name}"] = _ks_statistic(zscores[:, i])
    verdicts.append(_survival_verdict(cfg, survivors, attempts))
    return ExperimentResult(
        cfg.kind, cfg.describe(), columns, records, aggregates, verdicts, survivors, attempts
    )


def _ks_statistic(z: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between standardized errors and a unit normal."""
    from .asymptotics import normal_cdf

    z = np.sort(z)
    n = len(z)
    cdf = np.array([normal_cdf(v) for v in z])
    upper = np.max(np.arange(1, n + 1) / n - cdf)
    lower = np.max(cdf - np.arange(0, n) / n)
    return float(max(upper, lower))


def run_bias(cfg: ExperimentConfig) -> ExperimentResult:
    """Slow-bias constants of the residual blocks against their theory values.

    Per replicate the residual-block estimates are recomputed with the exact
    model noise (truth side-channel) on the same mothers; the scaled mean
    difference must match the theoretical bias vectors within 3 standard
    errors componentwise.
    """
    _check_budget(cfg, 2, "bias constants")
    lm = limit_matrices(cfg.params, cfg.noise, cfg.obs)
    theory = np.concatenate([lm.bias_sigma, lm.bias_rho])
    names = [
        "sigma_eps2", "rho00", "rho11", "sigma_eta2",
        "rho_eps", "rho", "rho_eta",
    ]
    columns = ["attempt", "n_cells"] + [f"dev_{n}" for n in names]
    records = []
    devs = []
    stream = _ReplicateStream(cfg, keep_noise=True)
    for attempt, lineage in stream:
        bundle = estimate_all(lineage)
        if (
            bundle.sigma is None
            or bundle.rho is None
            or not bundle.included_generations
        ):
            continue
        res_true = {child: lineage.true_residual(child) for child in bundle.sequential}
        var_gram, var_rhs, cov_gram, cov_rhs = noise_block_systems(
            lineage, res_true, bundle.included_generations
        )
        sigma_true = np.linalg.solve(var_gram, var_rhs)
        rho_true = np.linalg.solve(cov_gram, cov_rhs)
        scale = bundle.design.n_cells / cfg.horizon
        dev = scale * np.concatenate([bundle.sigma - sigma_true, bundle.rho - rho_true])
        devs.append(dev)
        records.append([attempt, lineage.tree.n_observed] + list(dev))

    survivors, attempts = stream.survivors, stream.attempts
    verdicts = []
    aggregates = {f"theory_{n}": float(t) for n, t in zip(names, theory)}
    if not devs:
        verdicts.append(Verdict("bias", "inconclusive", "n/a", "n/a", "no usable replicates"))
        return ExperimentResult(
            cfg.kind, cfg.describe(), columns, records, aggregates, verdicts, survivors, attempts
        )
    devs = np.array(devs)
    mean = devs.mean(axis=0)
    se = devs.std(axis=0, ddof=1) / np.sqrt(len(devs))
    n_se = float(cfg.tolerances.get("bias_n_se", 3.0))
    for i, name in enumerate(names):
        aggregates[f"mean_{name}"] = float(mean[i])
        aggregates[f"se_{name}"] = float(se[i])
        ok = abs(mean[i] - theory[i]) <= n_se * se[i]
        verdicts.append(
            Verdict(
                name=f"bias-{name}",
                status="pass" if ok else "fail",
                observed=f"{mean[i]:.4f}",
                tolerance=f"{theory[i]:.4f} +- {n_se * se[i]:.4f} ({n_se:g} SE)",
            )
        )
    verdicts.append(_survival_verdict(cfg, survivors, attempts))
    return ExperimentResult(
        cfg.kind, cfg.describe(), columns, records, aggregates, verdicts, survivors, attempts
    )


_RUNNERS = {
    "consistency": run_consistency,
    "rate_qsl": run_rate_qsl,
    "coverage": run_coverage,
    "bias": run_bias,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Dispatch one experiment by kind."""
    return _RUNNERS[cfg.kind](cfg)
