"""Limit matrices, bias constants, plug-in covariances and normal inference.

Everything here is exact matrix assembly from stationary trait moments and
the noise moment table: the almost-sure limits of the three normal matrices,
the limiting covariance core of the mean-parameter estimating equations and
its unit-noise normalizer, the slow (order n / tree size) bias constants of
the residual-based blocks, and the central-limit covariances of all three
estimators.  Finite-sample plug-in versions of the same objects are built
from one lineage for confidence intervals and tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from math import comb

import numpy as np
from scipy.special import ndtri

from .bar import BarParams, LineageTree
from .chain import InducedCoefficientLaw, StationaryMoments, ell, stationary_moments
from .estimation import DesignMatrices, accumulate_design
from .genealogy import ObservationParams
from .noise import MomentBudgetError, _NoiseBase

__all__ = [
    "LimitMatrices",
    "limit_matrices",
    "bias_vectors",
    "theta_clt_covariance",
    "sigma_clt_covariance",
    "rho_clt_covariance",
    "qsl_target",
    "theta_plugin_covariance",
    "noise_block_plugin_covariance",
    "confidence_interval",
    "wald_test",
    "normal_cdf",
    "normal_quantile",
]


def normal_cdf(z: float) -> float:
    """Standard normal distribution function via the complementary error function."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must be inside (0, 1), got {p}")
    return float(ndtri(p))


def confidence_interval(point: float, variance: float, level: float) -> tuple[float, float]:
    """Two-sided normal interval around ``point`` with the given variance."""
    if variance < 0:
        raise ValueError(f"variance must be non-negative, got {variance}")
    half = normal_quantile(0.5 + level / 2.0) * math.sqrt(variance)
    return point - half, point + half


def wald_test(estimate: float, variance: float, null_value: float = 0.0, sided: str = "two"):
    """Normal test of ``estimate`` against ``null_value``.

    Returns ``(z, p)``.  ``sided="one"`` tests the one-sided alternative that
    the parameter exceeds the null (the positivity test); ``"two"`` is the
    usual two-sided test.
    """
    if variance <= 0:
        raise ValueError(f"wald test needs a positive variance, got {variance}")
    z = (estimate - null_value) / math.sqrt(variance)
    if sided == "two":
        p = 2.0 * (1.0 - normal_cdf(abs(z)))
    elif sided == "one":
        p = 1.0 - normal_cdf(z)
    else:
        raise ValueError(f"sided must be 'one' or 'two', got {sided!r}")
    return z, min(p, 1.0)


# ---------------------------------------------------------------------------
# Limit matrices
# ---------------------------------------------------------------------------


@dataclass
class LimitMatrices:
    """Almost-sure limits of all inference matrices for one model configuration.

    ``gram0``/``gram1``/``gram`` are the normalized mean-regression normal
    matrices, ``var_gram`` and ``cov_gram`` those of the variance and
    sibling-covariance regressions.  ``score_cov`` is the limiting covariance
    core of the mean estimating equations (blocks ``score_cov0``,
    ``score_cov1``, ``score_cov01``) and ``scale`` its unit-noise
    counterpart.  ``overfit_var0``/``overfit_var1``/``overfit_cov`` hold the
    order-(0,1,2) residual-overfit constants; ``bias_sigma``/``bias_rho`` the
    induced slow-bias vectors of the two residual-based estimators.
    ``clt_var_core`` and ``clt_cov_core`` are the central-limit covariance
    cores of the variance and sibling-covariance blocks.
    """

    gram0: np.ndarray
    gram1: np.ndarray
    gram: np.ndarray
    var_gram: np.ndarray
    cov_gram: np.ndarray
    score_cov0: np.ndarray
    score_cov1: np.ndarray
    score_cov01: np.ndarray
    score_cov: np.ndarray
    scale0: np.ndarray
    scale1: np.ndarray
    scale: np.ndarray
    drift0: np.ndarray
    drift1: np.ndarray
    curvature0: np.ndarray
    curvature1: np.ndarray
    pair_gram: np.ndarray
    pair_drift: np.ndarray
    pair_curvature: np.ndarray
    overfit_var0: np.ndarray
    overfit_var1: np.ndarray
    overfit_cov: np.ndarray
    bias_sigma: np.ndarray
    bias_rho: np.ndarray
    clt_var_core: np.ndarray
    clt_cov_core: np.ndarray
    mean_offspring: float


def _hankel(values: np.ndarray, start: int, size: int) -> np.ndarray:
    return np.array(
        [[values[start + i + j] for j in range(size)] for i in range(size)]
    )


def _ell_vector(which, obs, sm: StationaryMoments, up_to: int) -> np.ndarray:
    return np.array([ell(which, q, obs, sm) for q in range(up_to + 1)])


def _square_poly_coeffs(c0: float, c1: float, c2: float, d0: float, d1: float, d2: float):
    # Coefficients of (c0 + c1 X + c2 X^2)(d0 + d1 X + d2 X^2).
    return np.array(
        [
            c0 * d0,
            c0 * d1 + c1 * d0,
            c0 * d2 + c1 * d1 + c2 * d0,
            c1 * d2 + c2 * d1,
            c2 * d2,
        ]
    )


def _fourth_moment_coeffs(table, branch: int) -> np.ndarray:
    # Coefficients in X of E[(e + h X)^4] for one branch.
    out = np.empty(5)
    for r in range(5):
        if branch == 0:
            out[r] = comb(4, r) * table(4 - r, r, 0, 0)
        else:
            out[r] = comb(4, r) * table(0, 0, 4 - r, r)
    return out


def _pair_square_coeffs(table) -> np.ndarray:
    # Coefficients in X of E[(e0 + h0 X)^2 (e1 + h1 X)^2].
    out = np.zeros(5)
    for r in range(3):
        for s in range(3):
            out[r + s] += comb(2, r) * comb(2, s) * table(2 - r, r, 2 - s, s)
    return out


def _cross_square_coeffs(table, moments, literal_cross_moment: bool) -> np.ndarray:
    # Coefficients in X of Var[(e0 + h0 X)(e1 + h1 X)] = pair square minus the
    # squared cross-moment polynomial (rho_eps + 2 rho X + rho_eta X^2)^2.
    pair = _pair_square_coeffs(table)
    # The published display repeats the order-(2,0,2,0) joint moment in the
    # X^4 coefficient; the even/odd split implies the (0,2,0,2) moment there.
    top = table(2, 0, 2, 0) if literal_cross_moment else table(0, 2, 0, 2)
    pair[4] = top
    cross = _square_poly_coeffs(
        moments.rho_eps, 2 * moments.rho, moments.rho_eta,
        moments.rho_eps, 2 * moments.rho, moments.rho_eta,
    )
    return pair - cross


def gamma_sigma_matrix(a0, a1, a01, ell0, ell1, ell01) -> np.ndarray:
    """CLT covariance core of the variance block from excess-moment polynomials.

    ``a0``/``a1``/``a01`` are degree-4 coefficient vectors of the conditional
    variance of the squared even/odd residual and of their conditional
    covariance; ``ell*`` are per-cell average vectors up to order 8.
    """

    def roll(coeffs, ells, q):
        return sum(coeffs[r] * ells[r + q] for r in range(5))

    aq0 = np.array([roll(a0, ell0, q) for q in range(5)])
    aq1 = np.array([roll(a1, ell1, q) for q in range(5)])
    aq01 = np.array([roll(a01, ell01, q) for q in range(5)])
    b0 = aq0 + aq01
    b1 = aq1 + aq01
    return np.array(
        [
            [b0[0] + b1[0], 2 * b0[1], 2 * b1[1], b0[2] + b1[2]],
            [2 * b0[1], 4 * aq0[2], 4 * aq01[2], 2 * b0[3]],
            [2 * b1[1], 4 * aq01[2], 4 * aq1[2], 2 * b1[3]],
            [b0[2] + b1[2], 2 * b0[3], 2 * b1[3], b0[4] + b1[4]],
        ]
    )


def gamma_rho_matrix(c, ell01) -> np.ndarray:
    """CLT covariance core of the sibling block from its excess-moment polynomial."""
    cq = np.array([sum(c[r] * ell01[r + q] for r in range(5)) for q in range(5)])
    return np.array(
        [
            [cq[0], 2 * cq[1], cq[2]],
            [2 * cq[1], 4 * cq[2], 2 * cq[3]],
            [cq[2], 2 * cq[3], cq[4]],
        ]
    )


def _overfit_trace(core: np.ndarray, gram: np.ndarray, weight: np.ndarray, order: str) -> float:
    gram_inv = np.linalg.inv(gram)
    if order == "sandwich":
        return float(np.trace(core @ gram_inv @ weight @ gram_inv))
    if order == "literal":
        return float(np.trace(core @ gram_inv @ gram_inv @ weight))
    raise ValueError(f"order must be 'sandwich' or 'literal', got {order!r}")


def limit_matrices(
    params: BarParams,
    noise: _NoiseBase,
    obs: ObservationParams,
    sm: StationaryMoments | None = None,
    trace_order: str = "sandwich",
    literal_cross_moment: bool = False,
) -> LimitMatrices:
    """Assemble every limit object for one model configuration.

    Needs stationary trait moments up to order 8 (computed on the fly when
    ``sm`` is not supplied).  ``trace_order`` selects the operator ordering
    inside the residual-overfit traces: ``"sandwich"`` applies the inverse
    normal matrix on both sides of the weight matrix (the ordering the
    quadratic-form derivation produces), ``"literal"`` applies it twice on
    the left as in the published statements; the two agree whenever the
    matrices commute.  ``literal_cross_moment`` reproduces the published
    X^4 coefficient of the sibling-block variance polynomial instead of the
    even/odd-consistent one.
    """
    if sm is None:
        law = InducedCoefficientLaw(params, noise, obs)
        sm = stationary_moments(law, 8)
    if sm.q_max < 8:
        raise MomentBudgetError(
            f"limit matrices need stationary moments up to order 8, got {sm.q_max}"
        )
    table = noise.moment_table
    mom = noise.moments
    m = obs.m

    ell0 = _ell_vector(0, obs, sm, 8)
    ell1 = _ell_vector(1, obs, sm, 8)
    ell01 = _ell_vector("01", obs, sm, 8)

    gram0 = _hankel(ell0, 0, 2)
    gram1 = _hankel(ell1, 0, 2)
    gram = np.zeros((4, 4))
    gram[:2, :2] = gram0
    gram[2:, 2:] = gram1

    var_gram = np.array(
        [
            [ell0[0] + ell1[0], 2 * ell0[1], 2 * ell1[1], ell0[2] + ell1[2]],
            [2 * ell0[1], 4 * ell0[2], 0.0, 2 * ell0[3]],
            [2 * ell1[1], 0.0, 4 * ell1[2], 2 * ell1[3]],
            [ell0[2] + ell1[2], 2 * ell0[3], 2 * ell1[3], ell0[4] + ell1[4]],
        ]
    )
    cov_gram = np.array(
        [
            [ell01[0], 2 * ell01[1], ell01[2]],
            [2 * ell01[1], 4 * ell01[2], 2 * ell01[3]],
            [ell01[2], 2 * ell01[3], ell01[4]],
        ]
    )

    def weighted(ells, w0, w1, w2):
        return w0 * _hankel(ells, 0, 2) + w1 * _hankel(ells, 1, 2) + w2 * _hankel(ells, 2, 2)

    score0 = weighted(ell0, mom.sigma_eps2, 2 * mom.rho00, mom.sigma_eta2)
    score1 = weighted(ell1, mom.sigma_eps2, 2 * mom.rho11, mom.sigma_eta2)
    score01 = weighted(ell01, mom.rho_eps, 2 * mom.rho, mom.rho_eta)
    score = np.zeros((4, 4))
    score[:2, :2] = score0
    score[2:, 2:] = score1
    score[:2, 2:] = score01
    score[2:, :2] = score01

    scale0 = _hankel(ell0, 0, 2) + _hankel(ell0, 2, 2)
    scale1 = _hankel(ell1, 0, 2) + _hankel(ell1, 2, 2)
    scale = np.zeros((4, 4))
    scale[:2, :2] = scale0
    scale[2:, 2:] = scale1

    drift0 = _hankel(ell0, 1, 2)
    drift1 = _hankel(ell1, 1, 2)
    curvature0 = _hankel(ell0, 2, 2)
    curvature1 = _hankel(ell1, 2, 2)
    pair_gram = _hankel(ell01, 0, 2)
    pair_drift = _hankel(ell01, 1, 2)
    pair_curvature = _hankel(ell01, 2, 2)

    # Residual-overfit constants: order r weights the squared fit error by X^r.
    q0 = np.array(
        [
            (m - 1) * _overfit_trace(score0, gram0, w, trace_order)
            for w in (gram0, drift0, curvature0)
        ]
    )
    q1 = np.array(
        [
            (m - 1) * _overfit_trace(score1, gram1, w, trace_order)
            for w in (gram1, drift1, curvature1)
        ]
    )

    def pair_embed(block):
        out = np.zeros((4, 4))
        out[:2, 2:] = block
        out[2:, :2] = block
        return out

    q01 = np.array(
        [
            0.5 * (m - 1) * _overfit_trace(score, gram, pair_embed(w), trace_order)
            for w in (pair_gram, pair_drift, pair_curvature)
        ]
    )

    bias_sigma = np.linalg.solve(
        var_gram, np.array([q0[0] + q1[0], 2 * q0[1], 2 * q1[1], q0[2] + q1[2]])
    )
    bias_rho = np.linalg.solve(cov_gram, np.array([q01[0], 2 * q01[1], q01[2]]))

    sq0 = _square_poly_coeffs(
        mom.sigma_eps2, 2 * mom.rho00, mom.sigma_eta2,
        mom.sigma_eps2, 2 * mom.rho00, mom.sigma_eta2,
    )
    sq1 = _square_poly_coeffs(
        mom.sigma_eps2, 2 * mom.rho11, mom.sigma_eta2,
        mom.sigma_eps2, 2 * mom.rho11, mom.sigma_eta2,
    )
    sq01 = _square_poly_coeffs(
        mom.sigma_eps2, 2 * mom.rho00, mom.sigma_eta2,
        mom.sigma_eps2, 2 * mom.rho11, mom.sigma_eta2,
    )
    a0 = _fourth_moment_coeffs(table, 0) - sq0
    a1 = _fourth_moment_coeffs(table, 1) - sq1
    a01 = _pair_square_coeffs(table) - sq01
    clt_var_core = gamma_sigma_matrix(a0, a1, a01, ell0, ell1, ell01)

    c = _cross_square_coeffs(table, mom, literal_cross_moment)
    clt_cov_core = gamma_rho_matrix(c, ell01)

    return LimitMatrices(
        gram0=gram0,
        gram1=gram1,
        gram=gram,
        var_gram=var_gram,
        cov_gram=cov_gram,
        score_cov0=score0,
        score_cov1=score1,
        score_cov01=score01,
        score_cov=score,
        scale0=scale0,
        scale1=scale1,
        scale=scale,
        drift0=drift0,
        drift1=drift1,
        curvature0=curvature0,
        curvature1=curvature1,
        pair_gram=pair_gram,
        pair_drift=pair_drift,
        pair_curvature=pair_curvature,
        overfit_var0=q0,
        overfit_var1=q1,
        overfit_cov=q01,
        bias_sigma=bias_sigma,
        bias_rho=bias_rho,
        clt_var_core=clt_var_core,
        clt_cov_core=clt_cov_core,
        mean_offspring=m,
    )


def bias_vectors(lm: LimitMatrices) -> tuple[np.ndarray, np.ndarray]:
    """Slow-bias limit vectors of the variance and sibling blocks."""
    return lm.bias_sigma.copy(), lm.bias_rho.copy()


def theta_clt_covariance(lm: LimitMatrices) -> np.ndarray:
    """Per-observation CLT covariance of the mean parameters (sandwich form)."""
    gram_inv = np.linalg.inv(lm.gram)
    return gram_inv @ lm.score_cov @ gram_inv


def sigma_clt_covariance(lm: LimitMatrices) -> np.ndarray:
    inv = np.linalg.inv(lm.var_gram)
    return inv @ lm.clt_var_core @ inv


def rho_clt_covariance(lm: LimitMatrices) -> np.ndarray:
    inv = np.linalg.inv(lm.cov_gram)
    return inv @ lm.clt_cov_core @ inv


def qsl_target(lm: LimitMatrices) -> float:
    """Limit of the quadratic-strong-law running average, tr(score_cov scale^-1)."""
    return float(np.trace(lm.score_cov @ np.linalg.inv(lm.scale)))


# ---------------------------------------------------------------------------
# Finite-sample plug-ins
# ---------------------------------------------------------------------------


def _clamped_sigma(sigma_hat: np.ndarray) -> np.ndarray:
    # Negative variance coordinates are clamped to zero inside covariance
    # plug-ins only, keeping the assembled matrices positive semi-definite.
    out = np.array(sigma_hat, dtype=float)
    out[0] = max(out[0], 0.0)
    out[3] = max(out[3], 0.0)
    return out


def score_cov_accumulator(
    lineage: LineageTree, sigma_hat: np.ndarray, rho_hat: np.ndarray
) -> np.ndarray:
    """Finite-sample conditional-covariance accumulator of the mean score.

    Sums, over observed mothers, the per-mother conditional covariance of the
    estimating-equation increments evaluated at the supplied noise-block
    values.  Dividing by the cell count gives the finite-n version of the
    score covariance limit.
    """
    se2, r00, r11, sh2 = _clamped_sigma(sigma_hat)
    re_, rr, rh = rho_hat
    tree = lineage.tree
    out = np.zeros((4, 4))
    for ellg in range(lineage.max_generation):
        for k in tree.generation(ellg):
            k = int(k)
            x = lineage.values[k]
            d0 = 2 * k in tree.observed
            d1 = 2 * k + 1 in tree.observed
            if not (d0 or d1):
                continue
            g = np.array([[1.0, x], [x, x * x]])
            if d0:
                out[:2, :2] += (se2 + 2 * r00 * x + sh2 * x * x) * g
            if d1:
                out[2:, 2:] += (se2 + 2 * r11 * x + sh2 * x * x) * g
            if d0 and d1:
                cross = (re_ + 2 * rr * x + rh * x * x) * g
                out[:2, 2:] += cross
                out[2:, :2] += cross
    return out


def theta_plugin_covariance(
    lineage: LineageTree,
    sigma_hat: np.ndarray,
    rho_hat: np.ndarray,
    design: DesignMatrices | None = None,
) -> np.ndarray:
    """Finite-sample sandwich covariance of the fitted mean parameters.

    The score-covariance accumulator is evaluated at the estimated noise
    blocks and sandwiched between the inverse normal matrices; no extra
    normalization is needed because the normal matrices carry the sample
    size.
    """
    if design is None:
        design = accumulate_design(lineage)
    gram = design.gram
    sv = np.linalg.svd(gram, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise ValueError("mean-regression normal matrix is numerically singular")
    core = score_cov_accumulator(lineage, sigma_hat, rho_hat)
    gram_inv = np.linalg.inv(gram)
    return gram_inv @ core @ gram_inv


def _residual_power_fits(lineage: LineageTree, res: dict[int, float]):
    """Degree-4 polynomial fits of residual fourth powers against the mother trait.

    Returns the coefficient vectors of the least-squares fits of the fourth
    power of even residuals, of odd residuals, and of the squared sibling
    products, each regressed on (1, X, X^2, X^3, X^4).
    """
    tree = lineage.tree
    rows = {"even": ([], []), "odd": ([], []), "pair": ([], [])}
    for ellg in range(lineage.max_generation):
        for k in tree.generation(ellg):
            k = int(k)
            x = lineage.values[k]
            r0 = res.get(2 * k)
            r1 = res.get(2 * k + 1)
            if r0 is not None:
                rows["even"][0].append(x)
                rows["even"][1].append(r0**4)
            if r1 is not None:
                rows["odd"][0].append(x)
                rows["odd"][1].append(r1**4)
            if r0 is not None and r1 is not None:
                rows["pair"][0].append(x)
                rows["pair"][1].append((r0 * r1) ** 2)
    fits = {}
    for name, (xs, ys) in rows.items():
        if len(xs) < 5:
            fits[name] = None
            continue
        design = np.vander(np.asarray(xs), 5, increasing=True)
        coef, *_ = np.linalg.lstsq(design, np.asarray(ys), rcond=None)
        fits[name] = coef
    return fits


def _empirical_ell_vectors(lineage: LineageTree):
    tree = lineage.tree
    ell0 = np.zeros(9)
    ell1 = np.zeros(9)
    ell01 = np.zeros(9)
    n_cells = 0
    for ellg in range(lineage.max_generation):
        for k in tree.generation(ellg):
            k = int(k)
            n_cells += 1
            x = lineage.values[k]
            powers = x ** np.arange(9)
            if 2 * k in tree.observed:
                ell0 += powers
            if 2 * k + 1 in tree.observed:
                ell1 += powers
            if 2 * k in tree.observed and 2 * k + 1 in tree.observed:
                ell01 += powers
    if n_cells == 0:
        raise ValueError("no observed mothers")
    return ell0 / n_cells, ell1 / n_cells, ell01 / n_cells, n_cells


def noise_block_plugin_covariance(
    lineage: LineageTree,
    res: dict[int, float],
    sigma_hat: np.ndarray,
    rho_hat: np.ndarray,
):
    """Plug-in covariance matrices of the variance and sibling-block estimates.

    The conditional fourth-moment polynomials of the residuals are estimated
    from the data by polynomial regression, combined with empirical per-cell
    averages into the CLT covariance cores, and sandwiched between the
    inverse finite-sample normal matrices.  Returns
    ``(cov_sigma or None, cov_rho or None)``.
    """
    design = accumulate_design(lineage)
    ell0, ell1, ell01, n_cells = _empirical_ell_vectors(lineage)
    fits = _residual_power_fits(lineage, res)
    se2, r00, r11, sh2 = _clamped_sigma(sigma_hat)

    cov_sigma = None
    if fits["even"] is not None and fits["odd"] is not None:
        sq0 = _square_poly_coeffs(se2, 2 * r00, sh2, se2, 2 * r00, sh2)
        sq1 = _square_poly_coeffs(se2, 2 * r11, sh2, se2, 2 * r11, sh2)
        sq01 = _square_poly_coeffs(se2, 2 * r00, sh2, se2, 2 * r11, sh2)
        a0 = fits["even"] - sq0
        a1 = fits["odd"] - sq1
        a01 = (fits["pair"] - sq01) if fits["pair"] is not None else np.zeros(5)
        core = gamma_sigma_matrix(a0, a1, a01, ell0, ell1, ell01)
        u = design.var_gram
        sv = np.linalg.svd(u, compute_uv=False)
        if sv[-1] > 1e-12 * sv[0]:
            u_inv = np.linalg.inv(u)
            cov_sigma = u_inv @ (n_cells * core) @ u_inv

    cov_rho = None
    if fits["pair"] is not None and rho_hat is not None:
        re_, rr, rh = rho_hat
        cross = _square_poly_coeffs(re_, 2 * rr, rh, re_, 2 * rr, rh)
        c = fits["pair"] - cross
        core = gamma_rho_matrix(c, ell01)
        v = design.cov_gram
        sv = np.linalg.svd(v, compute_uv=False)
        if sv[-1] > 1e-12 * sv[0]:
            v_inv = np.linalg.inv(v)
            cov_rho = v_inv @ (n_cells * core) @ v_inv
    return cov_sigma, cov_rho
