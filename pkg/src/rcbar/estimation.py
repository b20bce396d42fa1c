"""Least-squares inference for the branching autoregression.

Three nested regressions share one pass over the observed mother cells:

* the mean parameters (a, b, c, d), two decoupled 2x2 normal systems, one
  per child branch;
* the residual-variance block (additive variance, the two own-branch
  additive/coefficient covariances, coefficient variance), a 4x4 system
  regressing squared fitted residuals on (1, 2X, 2X, X^2);
* the sibling-covariance block, a 3x3 system regressing cross products of
  sibling residuals on (1, 2X, X^2) over doubly observed pairs.

Degenerate data never produces silent numbers: each block carries a status
(ok / singular / insufficient-data) and the unconstrained variance estimates
keep an explicit out-of-cone flag when negative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .bar import LineageTree

__all__ = [
    "DesignMatrices",
    "EstimateBundle",
    "accumulate_design",
    "estimate_theta",
    "residuals",
    "sequential_residuals",
    "noise_block_systems",
    "estimate_sigma",
    "estimate_sigma_fixed_coefficients",
    "empirical_residual_variance",
    "estimate_rho",
    "estimate_all",
    "theta_trajectory",
    "BifurcatingAutoregression",
]

# Reciprocal-condition threshold below which a normal matrix is declared singular.
RCOND_SINGULAR = 1e-12

STATUS_OK = "ok"
STATUS_SINGULAR = "singular"
STATUS_INSUFFICIENT = "insufficient-data"


@dataclass
class DesignMatrices:
    """Normal-equation accumulators over the observed mothers.

    ``gram0``/``gram1`` are the per-branch 2x2 mean-regression matrices,
    ``var_gram`` the 4x4 variance-regression matrix, ``cov_gram`` the 3x3
    sibling-covariance matrix, and ``scale_gram`` the standardized 4x4
    quadratic-variation normalizer used by the quadratic strong law.
    ``mother_horizon`` is the deepest mother generation included and
    ``n_cells`` counts all observed cells up to that generation.
    """

    gram0: np.ndarray
    gram1: np.ndarray
    var_gram: np.ndarray
    cov_gram: np.ndarray
    scale_gram: np.ndarray
    mother_horizon: int
    n_cells: int

    @property
    def gram(self) -> np.ndarray:
        """4x4 block-diagonal mean-regression matrix."""
        out = np.zeros((4, 4))
        out[:2, :2] = self.gram0
        out[2:, 2:] = self.gram1
        return out


class _Accumulator:
    """Running sums for all three regressions, extended one generation at a time."""

    def __init__(self):
        self.gram0 = np.zeros((2, 2))
        self.gram1 = np.zeros((2, 2))
        self.var_gram = np.zeros((4, 4))
        self.cov_gram = np.zeros((3, 3))
        self.scale_gram = np.zeros((4, 4))
        self.rhs_theta = np.zeros(4)
        self.mother_horizon = -1
        self.n_cells = 0

    def add_generation(self, gen, x, d0, x0, d1, x1):
        self.mother_horizon = gen
        self.n_cells += len(x)
        if len(x) == 0:
            return
        for branch, (mask, child) in enumerate(((d0, x0), (d1, x1))):
            if not mask.any():
                continue
            xm = x[mask]
            xc = child[mask]
            p1, p2, p3, p4 = xm.sum(), (xm**2).sum(), (xm**3).sum(), (xm**4).sum()
            cnt = float(mask.sum())
            gram = np.array([[cnt, p1], [p1, p2]])
            if branch == 0:
                self.gram0 += gram
                self.rhs_theta[:2] += [xc.sum(), (xm * xc).sum()]
            else:
                self.gram1 += gram
                self.rhs_theta[2:] += [xc.sum(), (xm * xc).sum()]
            # Variance-regression rows: (1, 2X, 0, X^2) for the even branch,
            # (1, 0, 2X, X^2) for the odd branch.
            mid = 1 if branch == 0 else 2
            vg = self.var_gram
            vg[0, 0] += cnt
            vg[0, mid] += 2 * p1
            vg[mid, 0] += 2 * p1
            vg[mid, mid] += 4 * p2
            vg[mid, 3] += 2 * p3
            vg[3, mid] += 2 * p3
            vg[0, 3] += p2
            vg[3, 0] += p2
            vg[3, 3] += p4
            # Standardized quadratic-variation block: (1 + X^2) x moment matrix.
            w1 = (xm * (1 + xm**2)).sum()
            w0 = (1 + xm**2).sum()
            w2 = (xm**2 * (1 + xm**2)).sum()
            sg = np.array([[w0, w1], [w1, w2]])
            if branch == 0:
                self.scale_gram[:2, :2] += sg
            else:
                self.scale_gram[2:, 2:] += sg
        both = d0 & d1
        if both.any():
            xm = x[both]
            p1, p2, p3, p4 = xm.sum(), (xm**2).sum(), (xm**3).sum(), (xm**4).sum()
            cnt = float(both.sum())
            self.cov_gram += np.array(
                [
                    [cnt, 2 * p1, p2],
                    [2 * p1, 4 * p2, 2 * p3],
                    [p2, 2 * p3, p4],
                ]
            )

    def design(self) -> DesignMatrices:
        return DesignMatrices(
            gram0=self.gram0.copy(),
            gram1=self.gram1.copy(),
            var_gram=self.var_gram.copy(),
            cov_gram=self.cov_gram.copy(),
            scale_gram=self.scale_gram.copy(),
            mother_horizon=self.mother_horizon,
            n_cells=self.n_cells,
        )


def _generation_data(lineage: LineageTree, ell: int):
    """Mother values and child observations for one mother generation."""
    tree = lineage.tree
    cells = tree.generation(ell)
    x = np.array([lineage.values[int(k)] for k in cells])
    d0 = np.array([2 * int(k) in tree.observed for k in cells], dtype=bool)
    d1 = np.array([2 * int(k) + 1 in tree.observed for k in cells], dtype=bool)
    x0 = np.array([lineage.values.get(2 * int(k), np.nan) for k in cells])
    x1 = np.array([lineage.values.get(2 * int(k) + 1, np.nan) for k in cells])
    return cells, x, d0, x0, d1, x1


def _mother_generations(lineage: LineageTree):
    for ell in range(lineage.max_generation):
        yield _generation_data(lineage, ell)


def accumulate_design(lineage: LineageTree) -> DesignMatrices:
    """Exact normal-equation sums over all mothers up to the last-but-one generation."""
    acc = _Accumulator()
    for ell in range(lineage.max_generation):
        _, x, d0, x0, d1, x1 = _generation_data(lineage, ell)
        acc.add_generation(ell, x, d0, x0, d1, x1)
    if lineage.max_generation == 0:
        acc.mother_horizon = -1
        acc.n_cells = 0
    return acc.design()


def _solve_block(gram: np.ndarray, rhs: np.ndarray):
    """Solve one normal system; None when numerically singular or empty."""
    scale = np.abs(gram).max()
    if scale == 0.0:
        return None
    sv = np.linalg.svd(gram, compute_uv=False)
    if sv[-1] <= RCOND_SINGULAR * sv[0]:
        return None
    return np.linalg.solve(gram, rhs)


def estimate_theta(lineage: LineageTree):
    """Least-squares mean parameters (a, b, c, d) with a status flag.

    The two branches decouple into independent 2x2 systems; a branch whose
    observed mothers share a single trait value (or has fewer than two usable
    pairs) is singular and no numbers are emitted.
    """
    acc = _Accumulator()
    for ell in range(lineage.max_generation):
        _, x, d0, x0, d1, x1 = _generation_data(lineage, ell)
        acc.add_generation(ell, x, d0, x0, d1, x1)
    return _theta_from_acc(acc)


def _theta_from_acc(acc: _Accumulator):
    if acc.gram0[0, 0] == 0.0 and acc.gram1[0, 0] == 0.0:
        return None, STATUS_INSUFFICIENT
    even = _solve_block(acc.gram0, acc.rhs_theta[:2])
    odd = _solve_block(acc.gram1, acc.rhs_theta[2:])
    if even is None or odd is None:
        return None, STATUS_SINGULAR
    theta = np.concatenate([even, odd])
    # Exactness guard on the linear solve.
    lhs = np.concatenate([acc.gram0 @ even, acc.gram1 @ odd])
    err = np.linalg.norm(lhs - acc.rhs_theta)
    if err > 1e-8 * max(1.0, np.linalg.norm(acc.rhs_theta)):
        return None, STATUS_SINGULAR
    return theta, STATUS_OK


def residuals(lineage: LineageTree, theta: np.ndarray) -> dict[int, float]:
    """Fitted residual of every observed child, keyed by the child label."""
    a, b, c, d = theta
    out: dict[int, float] = {}
    tree = lineage.tree
    for ell in range(lineage.max_generation):
        for k in tree.generation(ell):
            k = int(k)
            x = lineage.values[k]
            even, odd = 2 * k, 2 * k + 1
            if even in tree.observed:
                out[even] = lineage.values[even] - a - b * x
            if odd in tree.observed:
                out[odd] = lineage.values[odd] - c - d * x
    return out


# A mother generation enters the residual blocks only once its horizon's fit
# rests on at least this many children per branch; smaller fits have wildly
# heavy-tailed errors that a finite tree cannot average away.
MIN_SEQUENTIAL_FIT = 6


def sequential_residuals(lineage: LineageTree, min_fit_size: int = MIN_SEQUENTIAL_FIT):
    """Out-of-sample residuals: each mother generation uses its own horizon's fit.

    The residual of a child whose mother sits in generation ``ell`` is taken
    against the mean parameters estimated from data up to generation ``ell``
    only.  This is the residual convention of the variance and sibling-block
    estimators: it keeps the leftover noise orthogonal to the fit error, at
    the price of a slow (order n over tree size) upward bias quantified by
    the overfit constants.

    Returns ``(res, included)`` where ``res`` maps child labels to residuals
    and ``included`` lists the mother generations that contributed (those
    whose horizon fit is well posed and rests on at least ``min_fit_size``
    children per branch; the root generation never qualifies).
    """
    traj = theta_trajectory(lineage)
    tree = lineage.tree
    res: dict[int, float] = {}
    included: list[int] = []
    for ell in range(1, lineage.max_generation):
        _, theta, gram, _, _ = traj[ell - 1]
        if theta is None:
            continue
        if gram[0, 0] < min_fit_size or gram[2, 2] < min_fit_size:
            continue
        included.append(ell)
        a, b, c, d = theta
        for k in tree.generation(ell):
            k = int(k)
            x = lineage.values[k]
            even, odd = 2 * k, 2 * k + 1
            if even in tree.observed:
                res[even] = lineage.values[even] - a - b * x
            if odd in tree.observed:
                res[odd] = lineage.values[odd] - c - d * x
    return res, included


def noise_block_systems(lineage: LineageTree, res: dict[int, float], generations):
    """Restricted normal systems of the two residual regressions.

    Sums run over the mothers in the given generations only, so the normal
    matrices stay consistent with whichever residual convention produced
    ``res``.  Returns ``(var_gram, var_rhs, cov_gram, cov_rhs)``.
    """
    var_gram = np.zeros((4, 4))
    cov_gram = np.zeros((3, 3))
    var_rhs = np.zeros(4)
    cov_rhs = np.zeros(3)
    tree = lineage.tree
    for ell in generations:
        for k in tree.generation(ell):
            k = int(k)
            x = lineage.values[k]
            r0 = res.get(2 * k)
            r1 = res.get(2 * k + 1)
            if r0 is not None:
                row = np.array([1.0, 2 * x, 0.0, x * x])
                var_gram += np.outer(row, row)
                var_rhs += row * r0**2
            if r1 is not None:
                row = np.array([1.0, 0.0, 2 * x, x * x])
                var_gram += np.outer(row, row)
                var_rhs += row * r1**2
            if r0 is not None and r1 is not None:
                row = np.array([1.0, 2 * x, x * x])
                cov_gram += np.outer(row, row)
                cov_rhs += row * (r0 * r1)
    return var_gram, var_rhs, cov_gram, cov_rhs


def _resolve_residuals(lineage: LineageTree, res):
    if res is not None:
        return res, range(lineage.max_generation)
    return sequential_residuals(lineage)


def estimate_sigma(lineage: LineageTree, res: dict[int, float] | None = None):
    """Variance-block estimate (sigma_eps^2, rho00, rho11, sigma_eta^2).

    By default the out-of-sample residual convention is used: each mother
    generation is residualized against the fit from data up to that
    generation, and the normal matrix is restricted to the matching mothers.
    An explicit residual map overrides this and is used over all mothers.

    Returns ``(estimate, status, out_of_cone)``.  The estimator is raw least
    squares, so a negative variance coordinate is reported as-is with the
    out-of-cone flag set instead of being truncated.
    """
    res, generations = _resolve_residuals(lineage, res)
    var_gram, var_rhs, _, _ = noise_block_systems(lineage, res, generations)
    if var_gram[0, 0] == 0.0:
        return None, STATUS_INSUFFICIENT, False
    sigma = _solve_block(var_gram, var_rhs)
    if sigma is None:
        return None, STATUS_SINGULAR, False
    out_of_cone = bool(sigma[0] < 0 or sigma[3] < 0)
    return sigma, STATUS_OK, out_of_cone


def estimate_sigma_fixed_coefficients(
    lineage: LineageTree, res: dict[int, float] | None = None
) -> float:
    """Additive variance under the fixed-coefficient (no slope noise) model.

    With the coefficient-noise terms dropped, the variance regression keeps
    only its intercept and the least-squares solution collapses to the plain
    average of squared residuals over observed children.
    """
    res, _ = _resolve_residuals(lineage, res)
    if not res:
        raise ValueError("no observed children to average over")
    return sum(r**2 for r in res.values()) / len(res)


def empirical_residual_variance(res: dict[int, float]) -> float:
    """Plain average of squared residuals over all residualized children."""
    if not res:
        raise ValueError("no observed children to average over")
    return sum(r**2 for r in res.values()) / len(res)


def estimate_rho(lineage: LineageTree, res: dict[int, float] | None = None):
    """Sibling-covariance estimate (rho_eps, rho, rho_eta) with a status flag.

    Needs doubly observed sibling pairs; without any the status is
    insufficient-data.  Residual convention as in :func:`estimate_sigma`.
    """
    res, generations = _resolve_residuals(lineage, res)
    _, _, cov_gram, cov_rhs = noise_block_systems(lineage, res, generations)
    if cov_gram[0, 0] == 0.0:
        return None, STATUS_INSUFFICIENT
    rho = _solve_block(cov_gram, cov_rhs)
    if rho is None:
        return None, STATUS_SINGULAR
    return rho, STATUS_OK


@dataclass
class EstimateBundle:
    """Joint result of the three regressions on one lineage.

    ``residuals`` holds the final-fit residual map used by covariance
    plug-ins; ``sequential`` the out-of-sample residuals behind the variance
    and sibling blocks, with ``included_generations`` the mother generations
    they cover.
    """

    theta: Optional[np.ndarray]
    theta_status: str
    sigma: Optional[np.ndarray]
    sigma_status: str
    sigma_out_of_cone: bool
    rho: Optional[np.ndarray]
    rho_status: str
    design: DesignMatrices
    residuals: Optional[dict[int, float]]
    sequential: Optional[dict[int, float]] = None
    included_generations: Optional[list[int]] = None


def estimate_all(lineage: LineageTree) -> EstimateBundle:
    """Run the mean, variance and sibling-covariance regressions in sequence."""
    design = accumulate_design(lineage)
    theta, theta_status = estimate_theta(lineage)
    if theta is None:
        return EstimateBundle(
            theta=None,
            theta_status=theta_status,
            sigma=None,
            sigma_status=STATUS_INSUFFICIENT,
            sigma_out_of_cone=False,
            rho=None,
            rho_status=STATUS_INSUFFICIENT,
            design=design,
            residuals=None,
        )
    res = residuals(lineage, theta)
    seq, included = sequential_residuals(lineage)
    var_gram, var_rhs, cov_gram, cov_rhs = noise_block_systems(lineage, seq, included)
    if var_gram[0, 0] == 0.0:
        sigma, sigma_status, cone = None, STATUS_INSUFFICIENT, False
    else:
        sigma = _solve_block(var_gram, var_rhs)
        if sigma is None:
            sigma, sigma_status, cone = None, STATUS_SINGULAR, False
        else:
            sigma_status = STATUS_OK
            cone = bool(sigma[0] < 0 or sigma[3] < 0)
    if cov_gram[0, 0] == 0.0:
        rho, rho_status = None, STATUS_INSUFFICIENT
    else:
        rho = _solve_block(cov_gram, cov_rhs)
        rho_status = STATUS_SINGULAR if rho is None else STATUS_OK
    return EstimateBundle(
        theta=theta,
        theta_status=theta_status,
        sigma=sigma,
        sigma_status=sigma_status,
        sigma_out_of_cone=cone,
        rho=rho,
        rho_status=rho_status,
        design=design,
        residuals=res,
        sequential=seq,
        included_generations=included,
    )


def theta_trajectory(lineage: LineageTree):
    """Mean-parameter estimates at every horizon, from running accumulators.

    Yields one record per horizon ``ell`` (mothers up to generation ell-1):
    ``(ell, theta or None, gram 4x4, scale_gram 4x4, n_cells)``.  Horizons
    whose normal matrices are still singular yield ``theta = None``.
    """
    acc = _Accumulator()
    records = []
    for ell in range(lineage.max_generation):
        _, x, d0, x0, d1, x1 = _generation_data(lineage, ell)
        acc.add_generation(ell, x, d0, x0, d1, x1)
        theta, status = _theta_from_acc(acc)
        design = acc.design()
        records.append(
            (
                ell + 1,
                theta if status == STATUS_OK else None,
                design.gram,
                design.scale_gram,
                design.n_cells,
            )
        )
    return records


class BifurcatingAutoregression(BaseEstimator):
    """Least-squares estimator of the branching autoregression, sklearn style.

    Call :meth:`fit` on a :class:`~rcbar.bar.LineageTree`; the fitted object
    exposes ``coef_`` (the four mean parameters), ``noise_var_`` (the
    variance block), ``sibling_cov_`` (the cross-sibling block), per-block
    statuses and, when a covariance plug-in is available, normal confidence
    intervals via :meth:`conf_int`.

    Parameters
    ----------
    level : float
        Default confidence level for :meth:`conf_int`.
    """

    def __init__(self, level: float = 0.95):
        self.level = level

    def fit(self, X: LineageTree, y=None):
        if not isinstance(X, LineageTree):
            raise TypeError("fit expects a LineageTree")
        bundle = estimate_all(X)
        self.lineage_ = X
        self.bundle_ = bundle
        self.design_ = bundle.design
        self.coef_ = bundle.theta
        self.coef_status_ = bundle.theta_status
        self.noise_var_ = bundle.sigma
        self.noise_var_status_ = bundle.sigma_status
        self.noise_var_out_of_cone_ = bundle.sigma_out_of_cone
        self.sibling_cov_ = bundle.rho
        self.sibling_cov_status_ = bundle.rho_status
        self.residuals_ = bundle.residuals
        self.n_cells_ = bundle.design.n_cells
        self.coef_cov_ = None
        if bundle.theta is not None and bundle.sigma is not None and bundle.rho is not None:
            from .asymptotics import theta_plugin_covariance

            self.coef_cov_ = theta_plugin_covariance(
                X, bundle.sigma, bundle.rho, design=bundle.design
            )
        return self

    def conf_int(self, level: Optional[float] = None) -> np.ndarray:
        """(4, 2) normal confidence bounds for the mean parameters."""
        from .asymptotics import confidence_interval

        if getattr(self, "coef_cov_", None) is None:
            raise ValueError("no fitted covariance available; fit() first")
        level = self.level if level is None else level
        return np.array(
            [
                confidence_interval(self.coef_[i], self.coef_cov_[i, i], level)
                for i in range(4)
            ]
        )
