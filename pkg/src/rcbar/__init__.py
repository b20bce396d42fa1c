"""Simulation and least-squares inference for branching autoregressions
with randomly perturbed coefficients on partially observed binary genealogies."""

from .genealogy import (
    ObservationParams,
    ObservationTree,
    generation_of,
    sample_observation_tree,
    generation_counts,
    w_estimate,
)
from .noise import (
    NoiseSecondMoments,
    MomentTable,
    MomentBudgetError,
    build_gaussian_noise,
    build_scaled_student_noise,
    zero_noise,
    empirical_moment_table,
)
from .bar import BarParams, LineageTree, simulate, stability_margin
from .chain import (
    InducedCoefficientLaw,
    StationaryMoments,
    stationary_moments,
    sample_chain,
    sample_terminal,
    ell,
)
from .estimation import (
    DesignMatrices,
    EstimateBundle,
    accumulate_design,
    estimate_theta,
    residuals,
    estimate_sigma,
    estimate_rho,
    estimate_all,
    theta_trajectory,
    BifurcatingAutoregression,
)
from .asymptotics import (
    LimitMatrices,
    limit_matrices,
    bias_vectors,
    theta_clt_covariance,
    sigma_clt_covariance,
    rho_clt_covariance,
    qsl_target,
    theta_plugin_covariance,
    noise_block_plugin_covariance,
    confidence_interval,
    wald_test,
)

__version__ = "0.1.0"
