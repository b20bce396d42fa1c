import numpy as np
import pytest

import rcbar
from rcbar.chain import InducedCoefficientLaw
from rcbar.harness import stationary_start_sampler


@pytest.fixture(scope="session")
def reference_obs():
    return rcbar.ObservationParams(p0=0.2, p1=0.2, p01=0.5)


@pytest.fixture(scope="session")
def reference_params():
    return rcbar.BarParams(a=0.5, b=0.5, c=0.6, d=0.4)


@pytest.fixture(scope="session")
def reference_noise():
    return rcbar.build_gaussian_noise(rcbar.NoiseSecondMoments(sigma_eps2=0.25, sigma_eta2=0.04))


@pytest.fixture(scope="session")
def correlated_noise():
    return rcbar.build_gaussian_noise(
        rcbar.NoiseSecondMoments(
            sigma_eps2=0.25,
            sigma_eta2=0.04,
            rho_eps=0.1,
            rho_eta=0.01,
            rho00=0.05,
            rho01=0.02,
            rho10=0.03,
            rho11=-0.04,
        )
    )


def stationary_params(params, noise, obs):
    """Copy of ``params`` whose ancestor is drawn near the stationary trait law."""
    law = InducedCoefficientLaw(params, noise, obs)
    return rcbar.BarParams(
        params.a, params.b, params.c, params.d, x1=params.x1,
        x1_sampler=stationary_start_sampler(law),
    )


def surviving_lineage(params, noise, obs, n_max, seed0, keep_noise=False):
    """First surviving lineage at or after seed0 (deterministic)."""
    seed = seed0
    while True:
        tree = rcbar.sample_observation_tree(obs, n_max, seed=seed)
        if not tree.is_extinct:
            return rcbar.simulate(params, noise, tree, seed=seed, keep_noise=keep_noise), seed
        seed += 1
