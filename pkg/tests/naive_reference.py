"""Independent brute-force reference for the three estimators.

Deliberately dumb: plain dict lookups, python-float double loops over all
cells, explicit normal matrices solved with numpy at the end.  Shares no
accumulation code with the package; used to pin the package's estimators on
small trees.
"""

import numpy as np


def generation(k: int) -> int:
    g = 0
    while k >= 2 ** (g + 1):
        g += 1
    return g


def design_matrices(values: dict, max_generation: int):
    """All normal matrices summed over mothers below the last generation."""
    s0 = np.zeros((2, 2))
    s1 = np.zeros((2, 2))
    u = np.zeros((4, 4))
    v = np.zeros((3, 3))
    for k in sorted(values):
        if generation(k) >= max_generation:
            continue
        x = values[k]
        even_seen = (2 * k) in values
        odd_seen = (2 * k + 1) in values
        if even_seen:
            s0 += np.array([[1.0, x], [x, x * x]])
            row = np.array([1.0, 2 * x, 0.0, x * x])
            u += np.outer(row, row)
        if odd_seen:
            s1 += np.array([[1.0, x], [x, x * x]])
            row = np.array([1.0, 0.0, 2 * x, x * x])
            u += np.outer(row, row)
        if even_seen and odd_seen:
            row = np.array([1.0, 2 * x, x * x])
            v += np.outer(row, row)
    return s0, s1, u, v


def theta_at_horizon(values: dict, horizon: int):
    """Mean parameters from mothers in generations < horizon; None when singular."""
    s0 = np.zeros((2, 2))
    s1 = np.zeros((2, 2))
    rhs = np.zeros(4)
    for k in sorted(values):
        if generation(k) >= horizon:
            continue
        x = values[k]
        if (2 * k) in values:
            s0 += np.array([[1.0, x], [x, x * x]])
            rhs[0] += values[2 * k]
            rhs[1] += x * values[2 * k]
        if (2 * k + 1) in values:
            s1 += np.array([[1.0, x], [x, x * x]])
            rhs[2] += values[2 * k + 1]
            rhs[3] += x * values[2 * k + 1]
    out = np.empty(4)
    for block, (gram, b) in enumerate(((s0, rhs[:2]), (s1, rhs[2:]))):
        sv = np.linalg.svd(gram, compute_uv=False)
        if gram[0, 0] == 0 or sv[-1] <= 1e-12 * sv[0]:
            return None
        out[2 * block : 2 * block + 2] = np.linalg.solve(gram, b)
    return out


def estimate_theta(values: dict, max_generation: int):
    return theta_at_horizon(values, max_generation)


def noise_blocks(values: dict, max_generation: int, min_fit: int = 6):
    """Variance and sibling-covariance estimates with sequential residuals.

    A mother generation contributes only when the fit at its horizon exists
    and rests on at least ``min_fit`` children per branch, mirroring the
    estimator's documented convention.
    """
    res = {}
    for ell in range(1, max_generation):
        theta = theta_at_horizon(values, ell)
        if theta is None:
            continue
        count0 = sum(
            1 for k in values if generation(k) < ell and (2 * k) in values
        )
        count1 = sum(
            1 for k in values if generation(k) < ell and (2 * k + 1) in values
        )
        if count0 < min_fit or count1 < min_fit:
            continue
        a, b, c, d = theta
        for k in sorted(values):
            if generation(k) != ell:
                continue
            x = values[k]
            if (2 * k) in values:
                res[2 * k] = values[2 * k] - a - b * x
            if (2 * k + 1) in values:
                res[2 * k + 1] = values[2 * k + 1] - c - d * x
    u = np.zeros((4, 4))
    ru = np.zeros(4)
    v = np.zeros((3, 3))
    rv = np.zeros(3)
    for k in sorted(values):
        x = values[k]
        r0 = res.get(2 * k)
        r1 = res.get(2 * k + 1)
        if r0 is not None:
            row = np.array([1.0, 2 * x, 0.0, x * x])
            u += np.outer(row, row)
            ru += row * r0 * r0
        if r1 is not None:
            row = np.array([1.0, 0.0, 2 * x, x * x])
            u += np.outer(row, row)
            ru += row * r1 * r1
        if r0 is not None and r1 is not None:
            row = np.array([1.0, 2 * x, x * x])
            v += np.outer(row, row)
            rv += row * r0 * r1
    sigma = None
    if u[0, 0] > 0:
        sv = np.linalg.svd(u, compute_uv=False)
        if sv[-1] > 1e-12 * sv[0]:
            sigma = np.linalg.solve(u, ru)
    rho = None
    if v[0, 0] > 0:
        sv = np.linalg.svd(v, compute_uv=False)
        if sv[-1] > 1e-12 * sv[0]:
            rho = np.linalg.solve(v, rv)
    return sigma, rho
