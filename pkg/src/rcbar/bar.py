"""Trajectory simulation of the branching autoregression on an observed tree.

Given an observed genealogy, the trait of each observed child is an affine
function of its mother's trait with randomly perturbed slope and intercept:

    even child of k:  X[2k]   = (b + h0) X[k] + (a + e0)
    odd child of k:   X[2k+1] = (d + h1) X[k] + (c + e1)

where ``(e0, h0, e1, h1)`` is one draw of the noise 4-vector per mother,
shared by both children so cross-sibling correlations are realised exactly,
and independent across mothers.  Values exist only for observed cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Callable, Optional

import numpy as np

from .genealogy import ObservationParams, ObservationTree, generation_of
from .noise import MomentBudgetError, _NoiseBase

__all__ = ["BarParams", "LineageTree", "simulate", "stability_margin"]


@dataclass(frozen=True)
class BarParams:
    """Autoregression coefficients, ordered (a, b, c, d).

    ``a`` and ``b`` are the intercept and slope towards the even child,
    ``c`` and ``d`` towards the odd child.  ``x1`` is the ancestor trait;
    ``x1_sampler`` optionally replaces it with a random draw.
    """

    a: float
    b: float
    c: float
    d: float
    x1: float = 0.0
    x1_sampler: Optional[Callable[[np.random.Generator], float]] = None

    def __post_init__(self):
        for name in ("a", "b", "c", "d", "x1"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def as_vector(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d])


@dataclass(frozen=True)
class LineageTree:
    """Observed genealogy plus the trait value of every observed cell.

    ``values[k]`` exists exactly for the observed labels ``k``.  In
    simulation mode with ``keep_noise`` the per-mother noise draws are
    retained: ``mother_noise[k] = (e0, h0, e1, h1)`` for each observed
    mother ``k``, which lets tests and bias experiments reconstruct the
    exact model residuals.
    """

    tree: ObservationTree
    values: dict[int, float]
    mother_noise: Optional[dict[int, tuple]] = field(default=None, repr=False)

    def __post_init__(self):
        if set(self.values) != self.tree.observed:
            raise ValueError("values must be defined exactly on the observed cells")
        bad = [k for k, v in self.values.items() if not np.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite trait values at cells {sorted(bad)[:5]}")

    @property
    def max_generation(self) -> int:
        return self.tree.max_generation

    def generation_values(self, ell: int) -> tuple[np.ndarray, np.ndarray]:
        """Observed labels of generation ``ell`` and their trait values."""
        cells = self.tree.generation(ell)
        return cells, np.array([self.values[int(k)] for k in cells])

    def true_residual(self, child: int) -> float:
        """Exact model residual e + h * X[mother] of an observed child."""
        if self.mother_noise is None:
            raise ValueError("this lineage was built without the noise side-channel")
        mother = child // 2
        e0, h0, e1, h1 = self.mother_noise[mother]
        x = self.values[mother]
        if child % 2 == 0:
            return e0 + h0 * x
        return e1 + h1 * x


def simulate(
    params: BarParams,
    noise: _NoiseBase,
    tree: ObservationTree,
    seed,
    keep_noise: bool = False,
) -> LineageTree:
    """Run the autoregression over the observed cells of ``tree``.

    One noise 4-vector is drawn per observed mother (a pure function of
    ``(seed, mother label)``), and shared by both of its children even when
    only one of them is observed.  Cells missing from the tree get no value.

    Parameters
    ----------
    params : BarParams
    noise : noise model with a ``sample`` method
    tree : ObservationTree
    seed : int
        Master seed; the noise stream and the ancestor draw are derived from it.
    keep_noise : bool
        Retain the per-mother draws for truth-based diagnostics.
    """
    noise_rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x401)))
    x1_rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x402)))

    # Dense draw indexed by mother label: row k is mother k's 4-vector.
    n_mother_labels = 2 ** tree.max_generation if tree.max_generation > 0 else 1
    draws = noise.sample(noise_rng, n_mother_labels)

    values: dict[int, float] = {}
    x1 = params.x1 if params.x1_sampler is None else float(params.x1_sampler(x1_rng))
    values[1] = x1

    for ell in range(tree.max_generation):
        mothers = tree.generation(ell)
        for k in mothers:
            k = int(k)
            x = values[k]
            e0, h0, e1, h1 = draws[k]
            even, odd = 2 * k, 2 * k + 1
            if even in tree.observed:
                values[even] = (params.b + h0) * x + (params.a + e0)
            if odd in tree.observed:
                values[odd] = (params.d + h1) * x + (params.c + e1)

    mother_noise = None
    if keep_noise:
        mother_noise = {
            int(k): tuple(draws[int(k)])
            for ell in range(tree.max_generation)
            for k in tree.generation(ell)
        }
    return LineageTree(tree=tree, values=values, mother_noise=mother_noise)


def stability_margin(
    params: BarParams,
    noise: _NoiseBase,
    obs: ObservationParams,
    kappa: int = 1,
) -> float:
    """Moment contraction margin of the slope coefficients.

    Returns ``m0 E[(b + h0)^(4 kappa)] + m1 E[(d + h1)^(4 kappa)]``, computed
    by binomial expansion against the model's moment table.  Values below 1
    mean traits of order up to 4*kappa stay bounded along the tree.
    """
    if kappa < 1:
        raise ValueError("kappa must be a positive integer")
    order = 4 * kappa
    table = noise.moment_table
    if order > table.max_order:
        raise MomentBudgetError(
            f"stability check at kappa = {kappa} needs coefficient-noise moments "
            f"of order {order}; the table stops at order {table.max_order}"
        )
    even = sum(
        comb(order, r) * params.b ** (order - r) * table(0, r, 0, 0)
        for r in range(order + 1)
    )
    odd = sum(
        comb(order, r) * params.d ** (order - r) * table(0, 0, 0, r)
        for r in range(order + 1)
    )
    return obs.m0 * even + obs.m1 * odd
