"""Joint law of the driving noise 4-vector and its moment table.

Each mother cell draws one 4-vector ``(e0, h0, e1, h1)``: additive noise and
coefficient noise for the even child, then for the odd child.  All four
components are centred; their second moments are collected in
:class:`NoiseSecondMoments`.  Downstream limit formulas consume joint moments
``E[e0^i h0^j e1^k h1^l]`` up to total order 8, precomputed once per model in
a :class:`MomentTable`.

Two samplable families are provided: a Gaussian reference law (moments of all
orders) and an elliptical Student law rescaled to a target covariance (finite
moment budget, exercising the limited-moment regime of the theory), plus a
degenerate zero-noise law for exact-recovery oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

__all__ = [
    "NoiseSecondMoments",
    "MomentTable",
    "MomentBudgetError",
    "GaussianNoise",
    "StudentNoise",
    "ZeroNoise",
    "build_gaussian_noise",
    "build_scaled_student_noise",
    "zero_noise",
    "empirical_moment_table",
    "gaussian_moment_table",
]

TABLE_ORDER = 8

# Minimum kappa demanded by each family of asymptotic results.
THEOREM_KAPPA = {
    "consistency_theta": 2,
    "consistency_sigma_rho": 4,
    "rate_theta": 4,
    "clt_theta": 4,
    "rate_sigma_rho": 8,
    "clt_sigma_rho": 8,
}


class MomentBudgetError(ValueError):
    """A computation asked for a joint moment beyond the model's budget."""


@dataclass(frozen=True)
class NoiseSecondMoments:
    """Second-moment block of the noise 4-vector.

    Parameters
    ----------
    sigma_eps2 : float
        Common variance of the two additive components.
    sigma_eta2 : float
        Common variance of the two coefficient components.
    rho_eps : float
        Covariance between the two additive components.
    rho_eta : float
        Covariance between the two coefficient components.
    rho00, rho01, rho10, rho11 : float
        Additive-vs-coefficient covariances; ``rho01`` pairs the even
        additive with the odd coefficient component, ``rho10`` the reverse.
    """

    sigma_eps2: float
    sigma_eta2: float
    rho_eps: float = 0.0
    rho_eta: float = 0.0
    rho00: float = 0.0
    rho01: float = 0.0
    rho10: float = 0.0
    rho11: float = 0.0

    def __post_init__(self):
        for name in ("sigma_eps2", "sigma_eta2"):
            if getattr(self, name) < 0 or not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be a finite non-negative variance")
        lam = np.linalg.eigvalsh(self.covariance())
        if lam[0] < -1e-10 * max(1.0, lam[-1]):
            raise ValueError(
                f"noise covariance is not positive semi-definite "
                f"(smallest eigenvalue {lam[0]:.6g})"
            )

    @property
    def rho(self) -> float:
        """Identifiable symmetric cross covariance, (rho01 + rho10) / 2."""
        return 0.5 * (self.rho01 + self.rho10)

    def covariance(self) -> np.ndarray:
        """4x4 covariance in component order (e0, h0, e1, h1)."""
        return np.array(
            [
                [self.sigma_eps2, self.rho00, self.rho_eps, self.rho01],
                [self.rho00, self.sigma_eta2, self.rho10, self.rho_eta],
                [self.rho_eps, self.rho10, self.sigma_eps2, self.rho11],
                [self.rho01, self.rho_eta, self.rho11, self.sigma_eta2],
            ]
        )


class MomentTable:
    """Joint moments ``E[e0^i h0^j e1^k h1^l]`` for i+j+k+l <= max_order."""

    def __init__(self, entries: dict[tuple[int, int, int, int], float], max_order: int):
        self.max_order = max_order
        self._entries = dict(entries)

    def __call__(self, i: int, j: int, k: int, l: int) -> float:
        order = i + j + k + l
        if order > self.max_order:
            raise MomentBudgetError(
                f"joint moment of order {order} requested but the table stops at "
                f"order {self.max_order}"
            )
        return self._entries[(i, j, k, l)]

    def items(self):
        return self._entries.items()


def _pairing_sum(cov: np.ndarray, indices: list[int]) -> float:
    # Sum over perfect matchings of the index multiset of the product of
    # pairwise covariances (the Gaussian moment expansion).
    if not indices:
        return 1.0
    first, rest = indices[0], indices[1:]
    total = 0.0
    for pos in range(len(rest)):
        paired = cov[first, rest[pos]]
        if paired != 0.0:
            total += paired * _pairing_sum(cov, rest[:pos] + rest[pos + 1 :])
    return total


def _all_exponents(max_order: int):
    for i, j, k, l in product(range(max_order + 1), repeat=4):
        if i + j + k + l <= max_order:
            yield i, j, k, l


def gaussian_moment_table(cov: np.ndarray, max_order: int = TABLE_ORDER) -> MomentTable:
    """Closed-form centred-Gaussian moment table via the pairing expansion."""
    entries = {}
    for expo in _all_exponents(max_order):
        order = sum(expo)
        if order % 2 == 1:
            entries[expo] = 0.0
        else:
            idx = [v for v, p in enumerate(expo) for _ in range(p)]
            entries[expo] = _pairing_sum(cov, idx)
    return MomentTable(entries, max_order)


class _NoiseBase:
    """Shared bookkeeping: second moments, moment table, kappa budget."""

    moments: NoiseSecondMoments
    moment_table: MomentTable
    family: str

    @property
    def theoretical_kappa(self) -> float:
        raise NotImplementedError

    @property
    def max_valid_kappa(self) -> int:
        """Largest kappa whose order-4*kappa moments the table can serve."""
        table_kappa = self.moment_table.max_order // 4
        return int(min(table_kappa, self.theoretical_kappa))

    def theorem_support(self) -> dict[str, bool]:
        """Which groups of asymptotic results this noise family's moment budget covers."""
        return {
            name: self.theoretical_kappa >= need for name, need in THEOREM_KAPPA.items()
        }

    def require_kappa(self, kappa: int, what: str = "this computation"):
        if kappa > self.max_valid_kappa:
            raise MomentBudgetError(
                f"{what} needs moments of order {4 * kappa} (kappa = {kappa}) but "
                f"this {self.family} model only budgets kappa <= {self.max_valid_kappa}"
            )


class GaussianNoise(_NoiseBase):
    """Centred multivariate normal noise with a closed-form moment table."""

    family = "gaussian"

    def __init__(self, moments: NoiseSecondMoments):
        self.moments = moments
        cov = moments.covariance()
        lam, q = np.linalg.eigh(cov)
        self._transform = q @ np.diag(np.sqrt(np.clip(lam, 0.0, None)))
        self.moment_table = gaussian_moment_table(cov)

    @property
    def theoretical_kappa(self) -> float:
        return math.inf

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` noise 4-vectors, shape (size, 4)."""
        z = rng.standard_normal((size, 4))
        return z @ self._transform.T


class StudentNoise(_NoiseBase):
    """Elliptical multivariate-t noise rescaled to a target covariance.

    The sampler divides a Gaussian vector by an independent chi-square mixing
    variable, so all four components share tails; the scale matrix is shrunk
    by (dof-2)/dof so the covariance matches ``moments`` exactly.  Moments of
    total order 2p exist only for dof > 2p, hence the dof > 8 requirement for
    the order-8 table.
    """

    family = "student"

    def __init__(self, moments: NoiseSecondMoments, dof: float):
        if dof <= TABLE_ORDER:
            raise ValueError(
                f"dof must exceed {TABLE_ORDER} so joint moments up to order "
                f"{TABLE_ORDER} exist, got dof = {dof}"
            )
        self.moments = moments
        self.dof = float(dof)
        scale = moments.covariance() * (self.dof - 2.0) / self.dof
        lam, q = np.linalg.eigh(scale)
        self._transform = q @ np.diag(np.sqrt(np.clip(lam, 0.0, None)))
        gauss = gaussian_moment_table(scale)
        entries = {}
        for expo, value in gauss.items():
            p = sum(expo) // 2
            entries[expo] = value * self._mixing_factor(p)
        self.moment_table = MomentTable(entries, TABLE_ORDER)

    def _mixing_factor(self, p: int) -> float:
        # E[(dof / chi2_dof)^p] = dof^p / ((dof-2)(dof-4)...(dof-2p)).
        factor = 1.0
        for r in range(1, p + 1):
            factor *= self.dof / (self.dof - 2.0 * r)
        return factor

    @property
    def theoretical_kappa(self) -> float:
        # Moments up to order 4*kappa must exist, i.e. 4*kappa < dof.
        return int((self.dof - 1e-9) // 4)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        z = rng.standard_normal((size, 4))
        w = rng.chisquare(self.dof, size)
        return (z @ self._transform.T) * np.sqrt(self.dof / w)[:, None]


class ZeroNoise(_NoiseBase):
    """Deterministic zero noise, for exact-recovery and hand-recursion oracles."""

    family = "zero"

    def __init__(self):
        self.moments = NoiseSecondMoments(0.0, 0.0)
        entries = {expo: (1.0 if sum(expo) == 0 else 0.0) for expo in _all_exponents(TABLE_ORDER)}
        self.moment_table = MomentTable(entries, TABLE_ORDER)

    @property
    def theoretical_kappa(self) -> float:
        return math.inf

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.zeros((size, 4))


def build_gaussian_noise(moments: NoiseSecondMoments) -> GaussianNoise:
    """Gaussian noise model; enforces strictly positive component variances."""
    _require_positive_variances(moments)
    return GaussianNoise(moments)


def build_scaled_student_noise(moments: NoiseSecondMoments, dof: float) -> StudentNoise:
    """Student noise model matching ``moments`` exactly; needs dof > 8."""
    _require_positive_variances(moments)
    return StudentNoise(moments, dof)


def zero_noise() -> ZeroNoise:
    return ZeroNoise()


def _require_positive_variances(moments: NoiseSecondMoments):
    if moments.sigma_eps2 <= 0.0:
        raise ValueError("the additive-noise variance must be strictly positive")
    if moments.sigma_eta2 <= 0.0:
        raise ValueError("the coefficient-noise variance must be strictly positive")


def empirical_moment_table(samples, max_order: int = 4) -> MomentTable:
    """Plug-in joint moments of observed noise 4-vectors.

    Parameters
    ----------
    samples : array-like, shape (n, 4)
        One row per draw, component order (e0, h0, e1, h1).
    max_order : int
        Largest total order to tabulate, at most 8.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[1] != 4 or x.shape[0] == 0:
        raise ValueError("samples must be a non-empty (n, 4) array")
    if max_order > TABLE_ORDER:
        raise ValueError(f"max_order is capped at {TABLE_ORDER}")
    powers = [np.ones_like(x)]
    for _ in range(max_order):
        powers.append(powers[-1] * x)
    entries = {}
    for i, j, k, l in _all_exponents(max_order):
        entries[(i, j, k, l)] = float(
            np.mean(powers[i][:, 0] * powers[j][:, 1] * powers[k][:, 2] * powers[l][:, 3])
        )
    return MomentTable(entries, max_order)
