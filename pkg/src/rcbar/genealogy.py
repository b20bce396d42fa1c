"""Binary-heap genealogies and the Galton-Watson observation process.

Cells are labelled by positive integers: cell 1 is the ancestor and the two
children of cell k are 2k and 2k+1.  A cell is either observed or missing;
once a cell is missing, its whole subtree is missing.  Which children of an
observed cell are themselves observed is decided by an i.i.d. draw over the
four outcomes {both, even only, odd only, none}, so the per-generation counts
of observed cells form a Galton-Watson process.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ObservationParams",
    "ObservationTree",
    "generation_of",
    "sample_observation_tree",
    "generation_counts",
    "w_estimate",
]

# Dense per-cell random draws are indexed by the cell label, which caps the
# supported depth (2**(n+1) uniforms for n generations).
MAX_GENERATIONS = 20


def generation_of(k: int) -> int:
    """Return the generation of cell ``k``, i.e. the ``n`` with 2^n <= k < 2^(n+1).

    The ancestor (k=1) is generation 0, cells {2, 3} are generation 1, and so
    on along the binary-heap labelling.
    """
    if k < 1:
        raise ValueError(f"cell labels start at 1, got {k}")
    return int(k).bit_length() - 1


@dataclass(frozen=True)
class ObservationParams:
    """Offspring-observation law of a cell.

    An observed cell keeps both children with probability ``p01``, only the
    even child with probability ``p0``, only the odd child with probability
    ``p1``, and neither otherwise.

    Attributes
    ----------
    p0, p1, p01 : float
        Outcome probabilities; must be non-negative with sum at most 1.
    """

    p0: float
    p1: float
    p01: float

    def __post_init__(self):
        for name in ("p0", "p1", "p01"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a probability, got {value}")
        if self.p0 + self.p1 + self.p01 > 1 + 1e-12:
            raise ValueError(
                f"p0 + p1 + p01 = {self.p0 + self.p1 + self.p01} exceeds 1"
            )

    @property
    def m(self) -> float:
        """Mean number of observed children per observed cell."""
        return 2.0 * self.p01 + self.p0 + self.p1

    @property
    def m0(self) -> float:
        """Probability that the even child of a tagged branch is observed, (p01+p0)/m."""
        return (self.p01 + self.p0) / self.m

    @property
    def m1(self) -> float:
        """Probability weight of the odd branch, (p01+p1)/m."""
        return (self.p01 + self.p1) / self.m

    @property
    def is_supercritical(self) -> bool:
        """Whether the observed tree survives forever with positive probability (m > 1)."""
        return self.m > 1.0

    def extinction_probability(self) -> float:
        """Smallest non-negative root of s = (1-p0-p1-p01) + (p0+p1)s + p01*s^2."""
        p_none = 1.0 - self.p0 - self.p1 - self.p01
        if self.p01 == 0.0:
            # Linear fixed-point equation; extinction is certain unless p_none = 0.
            return 1.0 if p_none > 0 else 0.0
        other_root = p_none / self.p01
        return min(1.0, other_root)


@dataclass(frozen=True)
class ObservationTree:
    """Set of observed cells down to a fixed generation.

    The observed set is stored sparsely, one sorted integer array per
    generation.  Invariants: the root is observed, and the mother of every
    observed cell (other than the root) is observed.
    """

    max_generation: int
    by_generation: tuple[np.ndarray, ...]
    observed: frozenset[int] = field(repr=False)

    @classmethod
    def from_generations(cls, arrays) -> "ObservationTree":
        by_gen = tuple(np.asarray(np.sort(a), dtype=np.int64) for a in arrays)
        observed = frozenset(int(k) for a in by_gen for k in a)
        tree = cls(max_generation=len(by_gen) - 1, by_generation=by_gen, observed=observed)
        tree.validate()
        return tree

    def validate(self):
        if 1 not in self.observed:
            raise ValueError("the root cell must be observed")
        for ell, cells in enumerate(self.by_generation):
            for k in cells:
                if generation_of(int(k)) != ell:
                    raise ValueError(f"cell {k} filed under generation {ell}")
                if k > 1 and (int(k) // 2) not in self.observed:
                    raise ValueError(
                        f"cell {k} is observed but its mother {int(k) // 2} is not"
                    )

    def generation(self, ell: int) -> np.ndarray:
        """Sorted labels of the observed cells in generation ``ell``."""
        if ell < 0 or ell > self.max_generation:
            return np.empty(0, dtype=np.int64)
        return self.by_generation[ell]

    def __contains__(self, k: int) -> bool:
        return k in self.observed

    @property
    def n_observed(self) -> int:
        return sum(len(a) for a in self.by_generation)

    @property
    def is_extinct(self) -> bool:
        """True when the last sampled generation holds no observed cell."""
        return len(self.by_generation[self.max_generation]) == 0

    def cells(self) -> np.ndarray:
        """All observed labels in increasing order."""
        if self.n_observed == 0:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([a for a in self.by_generation])


def _observation_uniforms(seed, n_max: int) -> np.ndarray:
    # One uniform per possible cell label; u[k] decides the offspring outcome
    # of cell k.  Drawing the full dense vector makes every cell's draw a pure
    # function of (seed, k), independent of traversal order.
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x0B5)))
    return rng.random(2 ** (n_max + 1))


def sample_observation_tree(params: ObservationParams, n_max: int, seed) -> ObservationTree:
    """Sample the observed genealogy down to generation ``n_max``.

    Each observed cell keeps {both, even, odd, no} children with probabilities
    (p01, p0, p1, rest), independently across cells.  The draw attached to a
    cell depends only on ``(seed, cell label)``, so the same seed always yields
    the same tree.

    Parameters
    ----------
    params : ObservationParams
    n_max : int
        Deepest generation to sample (0 gives the root alone).
    seed : int
        Master seed for the observation draws.
    """
    if n_max < 0:
        raise ValueError(f"n_max must be >= 0, got {n_max}")
    if n_max > MAX_GENERATIONS:
        raise ValueError(f"n_max = {n_max} exceeds the supported depth {MAX_GENERATIONS}")
    u = _observation_uniforms(seed, n_max)
    both, even_only, odd_only = params.p01, params.p0, params.p1

    generations = [np.array([1], dtype=np.int64)]
    for _ in range(n_max):
        mothers = generations[-1]
        if len(mothers) == 0:
            generations.append(np.empty(0, dtype=np.int64))
            continue
        draw = u[mothers]
        keep_even = draw < both + even_only
        keep_odd = (draw < both) | ((draw >= both + even_only) & (draw < both + even_only + odd_only))
        children = np.concatenate([2 * mothers[keep_even], 2 * mothers[keep_odd] + 1])
        generations.append(np.sort(children))
    return ObservationTree.from_generations(generations)


def generation_counts(tree: ObservationTree) -> tuple[list[int], int]:
    """Observed-cell counts per generation and their total."""
    counts = [len(tree.generation(ell)) for ell in range(tree.max_generation + 1)]
    return counts, sum(counts)


def w_estimate(tree: ObservationTree, params: ObservationParams) -> float:
    """Estimate the geometric-growth limit of the observed-population size.

    Returns |observed generation n_max| / m^n_max, the natural finite-depth
    estimate of the almost-sure limit of that ratio.  Zero on extinct trees.
    """
    if params.m <= 1.0:
        raise ValueError(
            f"the growth limit requires a super-critical law (m > 1), got m = {params.m}"
        )
    n = tree.max_generation
    return len(tree.generation(n)) / params.m**n
