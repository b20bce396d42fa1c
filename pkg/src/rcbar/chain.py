"""Law of the trait process along a uniformly tagged surviving branch.

Following one surviving line of descent, the trait evolves as a scalar
autoregression ``Y[n+1] = A[n+1] + B[n+1] Y[n]`` whose random coefficient
pair ``(A, B)`` picks the even-child law ``(a + e0, b + h0)`` with
probability ``m0`` and the odd-child law ``(c + e1, d + h1)`` with
probability ``m1``.  Its stationary moments drive every limit matrix of the
asymptotic theory; they obey a triangular recursion solved here in closed
form from the noise moment table.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np

from .bar import BarParams
from .genealogy import ObservationParams
from .noise import MomentBudgetError, _NoiseBase

__all__ = [
    "InducedCoefficientLaw",
    "StationaryMoments",
    "stationary_moments",
    "sample_chain",
    "sample_terminal",
    "ell",
]

# Reject stationary moments whose defining denominator 1 - E[B^q] is this close to 0.
DENOMINATOR_TOL = 1e-9


class InducedCoefficientLaw:
    """Mixture law of the tagged-branch coefficient pair ``(A, B)``."""

    def __init__(self, params: BarParams, noise: _NoiseBase, obs: ObservationParams):
        if not obs.is_supercritical:
            raise ValueError(
                f"the tagged-branch law needs a super-critical observation law, m = {obs.m}"
            )
        self.params = params
        self.noise = noise
        self.obs = obs
        self._table = noise.moment_table
        self.max_order = self._table.max_order

    @lru_cache(maxsize=None)
    def _branch_moment(self, branch: int, i: int, j: int) -> float:
        # E[(intercept + e)^i (slope + h)^j] for one branch, by binomial expansion.
        if branch == 0:
            intercept, slope = self.params.a, self.params.b
        else:
            intercept, slope = self.params.c, self.params.d
        total = 0.0
        for r in range(i + 1):
            for s in range(j + 1):
                theta = (
                    self._table(r, s, 0, 0) if branch == 0 else self._table(0, 0, r, s)
                )
                if theta == 0.0:
                    continue
                total += (
                    comb(i, r)
                    * comb(j, s)
                    * intercept ** (i - r)
                    * slope ** (j - s)
                    * theta
                )
        return total

    def mixed_moment(self, i: int, j: int) -> float:
        """E[A^i B^j], defined for i + j up to the table order."""
        if i + j > self.max_order:
            raise MomentBudgetError(
                f"mixed coefficient moment of order {i + j} exceeds the table order "
                f"{self.max_order}"
            )
        return self.obs.m0 * self._branch_moment(0, i, j) + self.obs.m1 * self._branch_moment(1, i, j)

    def slope_moment_ok(self, q: int) -> bool:
        """Whether the order-q slope moment contracts (1 - E[B^q] bounded away from 0)."""
        return self.mixed_moment(0, q) < 1.0 - DENOMINATOR_TOL

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``size`` coefficient pairs (A, B)."""
        draws = self.noise.sample(rng, size)
        pick_odd = rng.random(size) < self.obs.m1
        a_even = self.params.a + draws[:, 0]
        b_even = self.params.b + draws[:, 1]
        a_odd = self.params.c + draws[:, 2]
        b_odd = self.params.d + draws[:, 3]
        return np.where(pick_odd, a_odd, a_even), np.where(pick_odd, b_odd, b_even)


@dataclass(frozen=True)
class StationaryMoments:
    """Vector of stationary trait moments, entry q holding E[Y^q]."""

    values: np.ndarray

    @property
    def q_max(self) -> int:
        return len(self.values) - 1

    def __getitem__(self, q: int) -> float:
        if q < 0 or q > self.q_max:
            raise MomentBudgetError(
                f"stationary moment of order {q} not computed (have 0..{self.q_max})"
            )
        return float(self.values[q])


def stationary_moments(law: InducedCoefficientLaw, q_max: int) -> StationaryMoments:
    """Solve the triangular stationary-moment recursion up to order ``q_max``.

    Order q is obtained from lower orders through

        E[Y^q] (1 - E[B^q]) = sum_{s<q} C(q, s) E[A^(q-s) B^s] E[Y^s],

    valid whenever the even slope moments up to q (q+1 for odd q) contract.
    A near-critical denominator is refused rather than inverted.
    """
    if q_max < 0:
        raise ValueError("q_max must be non-negative")
    if q_max > law.max_order:
        raise MomentBudgetError(
            f"stationary moments up to order {q_max} need the noise table up to that "
            f"order; it stops at {law.max_order}"
        )
    # Even-order contraction gates its own order and the odd order below it.
    for q in range(2, q_max + 1):
        gate = q if q % 2 == 0 else q + 1
        if gate > law.max_order:
            # Odd top order with no even neighbour in the table: fall back to
            # requiring the odd denominator itself to contract.
            gate = q
        if not law.slope_moment_ok(gate):
            raise MomentBudgetError(
                f"stationary moment of order {q} does not exist under the stability "
                f"budget: E[B^{gate}] = {law.mixed_moment(0, gate):.6g} is not below 1"
            )
    values = np.empty(q_max + 1)
    values[0] = 1.0
    for q in range(1, q_max + 1):
        acc = sum(
            comb(q, s) * law.mixed_moment(q - s, s) * values[s] for s in range(q)
        )
        values[q] = acc / (1.0 - law.mixed_moment(0, q))
    return StationaryMoments(values=values)


def sample_chain(
    law: InducedCoefficientLaw, y0: float, n_steps: int, rng: np.random.Generator
) -> np.ndarray:
    """One exact trajectory of the tagged-branch autoregression, length n_steps + 1."""
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    path = np.empty(n_steps + 1)
    path[0] = y0
    if n_steps:
        a, b = law.sample(rng, n_steps)
        for i in range(n_steps):
            path[i + 1] = a[i] + b[i] * path[i]
    return path


def sample_terminal(
    law: InducedCoefficientLaw,
    y0: float,
    n_steps: int,
    n_chains: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Terminal values of ``n_chains`` independent trajectories started at ``y0``."""
    y = np.full(n_chains, float(y0))
    for _ in range(n_steps):
        a, b = law.sample(rng, n_chains)
        y = a + b * y
    return y


def ell(which, q: int, obs: ObservationParams, sm: StationaryMoments) -> float:
    """Limiting per-cell average of indicator-weighted trait powers.

    ``which`` selects the indicator: 0 for cells with an observed even child,
    1 for an observed odd child, "01" for both.  The limit is the matching
    observation probability times the stationary moment of order ``q``.
    """
    moment = sm[q]
    if which == 0:
        return (obs.p01 + obs.p0) * moment
    if which == 1:
        return (obs.p01 + obs.p1) * moment
    if which in ("01", 2):
        return obs.p01 * moment
    raise ValueError(f"which must be 0, 1 or '01', got {which!r}")
