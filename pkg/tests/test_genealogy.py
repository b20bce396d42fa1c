import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import rcbar
from rcbar.genealogy import MAX_GENERATIONS


def test_generation_of_basics():
    assert rcbar.generation_of(1) == 0
    assert rcbar.generation_of(2) == 1
    assert rcbar.generation_of(3) == 1
    assert rcbar.generation_of(2**10 + 17) == 10


def test_generation_of_rejects_zero():
    with pytest.raises(ValueError):
        rcbar.generation_of(0)


@given(st.integers(min_value=1, max_value=2**40))
def test_generation_of_dyadic_property(k):
    n = rcbar.generation_of(k)
    assert 2**n <= k < 2 ** (n + 1)


def test_observation_params_validation():
    with pytest.raises(ValueError):
        rcbar.ObservationParams(p0=-0.1, p1=0.2, p01=0.5)
    with pytest.raises(ValueError):
        rcbar.ObservationParams(p0=0.5, p1=0.4, p01=0.2)
    obs = rcbar.ObservationParams(0.2, 0.2, 0.5)
    assert obs.m == pytest.approx(1.4)
    assert obs.m0 == pytest.approx(0.5)
    assert obs.m1 == pytest.approx(0.5)
    assert obs.is_supercritical


def test_extinction_probability_reference():
    obs = rcbar.ObservationParams(0.2, 0.2, 0.5)
    # Root of p01 s^2 + (p0+p1-1) s + p_none: the sub-unit root.
    q = obs.extinction_probability()
    p_none = 1 - 0.2 - 0.2 - 0.5
    assert p_none + 0.4 * q + 0.5 * q**2 == pytest.approx(q, abs=1e-12)
    assert q == pytest.approx(0.2)
    assert rcbar.ObservationParams(0.3, 0.3, 0.0).extinction_probability() == 1.0


def test_full_tree_when_both_children_always_kept():
    obs = rcbar.ObservationParams(0.0, 0.0, 1.0)
    tree = rcbar.sample_observation_tree(obs, 5, seed=0)
    counts, total = rcbar.generation_counts(tree)
    assert counts == [1, 2, 4, 8, 16, 32]
    assert total == 2**6 - 1


def test_immediate_extinction_when_no_child_kept():
    obs = rcbar.ObservationParams(0.0, 0.0, 0.0)
    tree = rcbar.sample_observation_tree(obs, 4, seed=1)
    counts, total = rcbar.generation_counts(tree)
    assert total == 1
    assert counts[0] == 1 and sum(counts[1:]) == 0
    assert tree.is_extinct


def test_counts_match_observed_cardinality():
    obs = rcbar.ObservationParams(0.2, 0.2, 0.5)
    tree = rcbar.sample_observation_tree(obs, 10, seed=7)
    counts, total = rcbar.generation_counts(tree)
    assert total == len(tree.observed) == tree.n_observed


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=2**31),
    probs=st.tuples(
        st.floats(0.0, 0.4), st.floats(0.0, 0.4), st.floats(0.0, 0.2)
    ),
)
def test_upward_closure_always_holds(seed, probs):
    p0, p1, p01 = probs
    tree = rcbar.sample_observation_tree(rcbar.ObservationParams(p0, p1, p01), 7, seed=seed)
    for k in tree.observed:
        if k > 1:
            assert (k // 2) in tree.observed


def test_sampling_is_reproducible_and_order_free():
    obs = rcbar.ObservationParams(0.3, 0.1, 0.45)
    t1 = rcbar.sample_observation_tree(obs, 9, seed=123)
    t2 = rcbar.sample_observation_tree(obs, 9, seed=123)
    assert t1.observed == t2.observed
    # The same seed at a smaller depth gives the exact prefix.
    t3 = rcbar.sample_observation_tree(obs, 5, seed=123)
    prefix = {k for k in t1.observed if rcbar.generation_of(k) <= 5}
    assert t3.observed == prefix


def test_depth_cap():
    with pytest.raises(ValueError):
        rcbar.sample_observation_tree(
            rcbar.ObservationParams(0.2, 0.2, 0.5), MAX_GENERATIONS + 1, seed=0
        )


def test_offspring_law_frequencies_reference():
    # Conditional on an observed mother, the four child outcomes must follow
    # (p01, p0, p1, rest) within a binomial band.
    obs = rcbar.ObservationParams(0.2, 0.2, 0.5)
    both = even = odd = none = 0
    for seed in range(400):
        tree = rcbar.sample_observation_tree(obs, 6, seed=seed)
        for ell in range(tree.max_generation):
            for k in tree.generation(ell):
                k = int(k)
                e = 2 * k in tree.observed
                o = 2 * k + 1 in tree.observed
                if e and o:
                    both += 1
                elif e:
                    even += 1
                elif o:
                    odd += 1
                else:
                    none += 1
    n = both + even + odd + none
    for count, p in ((both, 0.5), (even, 0.2), (odd, 0.2), (none, 0.1)):
        se = np.sqrt(p * (1 - p) / n)
        assert abs(count / n - p) < 4 * se


def test_mean_generation_size_matches_growth_rate():
    # E[size of generation 12] = m^12 for the reference law; Monte Carlo over
    # many seeds must match within standard error.
    obs = rcbar.ObservationParams(0.2, 0.2, 0.5)
    n, reps = 12, 10_000
    sizes = np.empty(reps)
    for seed in range(reps):
        tree = rcbar.sample_observation_tree(obs, n, seed=seed)
        sizes[seed] = len(tree.generation(n))
    expected = obs.m**n
    assert expected == pytest.approx(56.69, abs=0.01)
    se = sizes.std(ddof=1) / np.sqrt(reps)
    assert abs(sizes.mean() - expected) < 3 * se


def test_w_estimate_full_tree_and_extinct():
    full = rcbar.sample_observation_tree(rcbar.ObservationParams(0, 0, 1.0), 6, seed=0)
    assert rcbar.w_estimate(full, rcbar.ObservationParams(0, 0, 1.0)) == 1.0
    obs = rcbar.ObservationParams(0.2, 0.2, 0.5)
    seed = 0
    while True:
        tree = rcbar.sample_observation_tree(obs, 8, seed=seed)
        if tree.is_extinct:
            break
        seed += 1
    assert rcbar.w_estimate(tree, obs) == 0.0


def test_w_estimate_rejects_subcritical():
    obs = rcbar.ObservationParams(0.3, 0.3, 0.0)
    tree = rcbar.sample_observation_tree(obs, 3, seed=2)
    with pytest.raises(ValueError):
        rcbar.w_estimate(tree, obs)


def test_w_estimates_stabilize_across_depths():
    # Along one seed, the growth estimate settles: mean over seeds at depth 13
    # and 14 differ by well under 2 percent.
    obs = rcbar.ObservationParams(0.2, 0.2, 0.5)
    reps = 3000
    w13 = np.empty(reps)
    w14 = np.empty(reps)
    for seed in range(reps):
        t14 = rcbar.sample_observation_tree(obs, 14, seed=seed)
        w14[seed] = rcbar.w_estimate(t14, obs)
        w13[seed] = len(t14.generation(13)) / obs.m**13
    assert abs(w13.mean() - w14.mean()) / w14.mean() < 0.02
    # And the overall mean is the martingale value 1 within 3 SE.
    se = w14.std(ddof=1) / np.sqrt(reps)
    assert abs(w14.mean() - 1.0) < 3 * se
