"""File formats: lineage CSV, truth side-channel CSV, JSON run configuration.

A lineage file is a CSV with header ``index,value`` and one row per observed
cell, where ``index`` is the binary-heap label (root is 1).  Observation
status is implied by row presence; a row whose mother is absent is a format
error.  The truth side-channel carries the realized noise per observed child
as ``index,eps,eta`` rows.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bar import BarParams, LineageTree
from .genealogy import MAX_GENERATIONS, ObservationParams, ObservationTree, generation_of
from .noise import NoiseSecondMoments, build_gaussian_noise, build_scaled_student_noise, zero_noise

__all__ = [
    "ConfigError",
    "LineageFormatError",
    "RunConfig",
    "load_config",
    "read_lineage",
    "write_lineage",
    "write_truth",
    "file_sha256",
]


class ConfigError(ValueError):
    """Invalid run configuration; message lists every offending field."""


class LineageFormatError(ValueError):
    """Malformed lineage file; message cites the offending line."""


def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_lineage(lineage: LineageTree, path) -> None:
    """Write the observed cells as ``index,value`` rows in increasing label order."""
    lines = ["index,value"]
    for k in sorted(lineage.values):
        lines.append(f"{k},{_fmt_float(lineage.values[k])}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_truth(lineage: LineageTree, path) -> None:
    """Write the per-child realized noise as ``index,eps,eta`` rows."""
    if lineage.mother_noise is None:
        raise ValueError("lineage carries no noise side-channel; simulate with keep_noise")
    lines = ["index,eps,eta"]
    for k in sorted(lineage.values):
        if k == 1:
            continue
        e0, h0, e1, h1 = lineage.mother_noise[k // 2]
        eps, eta = (e0, h0) if k % 2 == 0 else (e1, h1)
        lines.append(f"{k},{_fmt_float(eps)},{_fmt_float(eta)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_lineage(path) -> LineageTree:
    """Parse a lineage CSV into a tree plus values, with hard format checks.

    Rejects malformed rows (with their line number), duplicate labels, a
    missing root, and any cell whose mother is absent: a missing cell cannot
    have observed descendants.
    """
    text = Path(path).read_text()
    values: dict[int, float] = {}
    lines = text.splitlines()
    if not lines or lines[0].strip().lower() != "index,value":
        raise LineageFormatError(f"{path}: first line must be the header 'index,value'")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise LineageFormatError(f"{path}:{lineno}: expected 'index,value', got {line!r}")
        try:
            k = int(parts[0])
            v = float(parts[1])
        except ValueError as exc:
            raise LineageFormatError(f"{path}:{lineno}: {exc}") from None
        if k < 1:
            raise LineageFormatError(f"{path}:{lineno}: cell labels start at 1, got {k}")
        if not np.isfinite(v):
            raise LineageFormatError(f"{path}:{lineno}: non-finite value {parts[1]}")
        if k in values:
            raise LineageFormatError(f"{path}:{lineno}: duplicate cell {k}")
        values[k] = v
    if 1 not in values:
        raise LineageFormatError(f"{path}: the root cell (index 1) is missing")
    observed = set(values)
    for k in sorted(observed):
        if k > 1 and (k // 2) not in observed:
            raise LineageFormatError(
                f"{path}: cell {k} is present but its mother {k // 2} is not; a missing "
                f"cell has no observed descendants"
            )
    max_gen = max(generation_of(k) for k in observed)
    by_gen = [[] for _ in range(max_gen + 1)]
    for k in sorted(observed):
        by_gen[generation_of(k)].append(k)
    tree = ObservationTree.from_generations([np.array(g, dtype=np.int64) for g in by_gen])
    return LineageTree(tree=tree, values=values)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

NOISE_FAMILIES = ("gaussian", "student", "zero")
NOISE_FIELDS = (
    "sigma_eps2", "sigma_eta2", "rho_eps", "rho_eta", "rho00", "rho01", "rho10", "rho11",
)


@dataclass
class RunConfig:
    """Validated run configuration assembled from the JSON file."""

    seed: int
    params: BarParams
    obs: ObservationParams
    noise_family: str
    noise_moments: NoiseSecondMoments
    noise_dof: float | None
    generations: int
    keep_truth: bool
    experiment: dict

    def build_noise(self):
        if self.noise_family == "zero":
            return zero_noise()
        if self.noise_family == "student":
            return build_scaled_student_noise(self.noise_moments, self.noise_dof)
        return build_gaussian_noise(self.noise_moments)


def load_config(path) -> RunConfig:
    """Load and validate the JSON configuration, collecting every error."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")

    errors: list[str] = []

    def need(section, key, kind, default=None, required=False):
        block = raw.get(section, {})
        if not isinstance(block, dict):
            errors.append(f"{section}: must be an object")
            return default
        if key not in block:
            if required:
                errors.append(f"{section}.{key}: required")
            return default
        value = block[key]
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if kind is bool and isinstance(value, bool):
            return value
        if kind is str and isinstance(value, str):
            return value
        errors.append(f"{section}.{key}: expected {kind.__name__}, got {value!r}")
        return default

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append("seed: expected a non-negative integer")
        seed = 0

    a = need("model", "a", float, required=True)
    b = need("model", "b", float, required=True)
    c = need("model", "c", float, required=True)
    d = need("model", "d", float, required=True)
    x1 = need("model", "x1", float, default=0.0)

    p0 = need("observation", "p0", float, required=True)
    p1 = need("observation", "p1", float, required=True)
    p01 = need("observation", "p01", float, required=True)

    family = need("noise", "family", str, default="gaussian")
    if family not in NOISE_FAMILIES:
        errors.append(f"noise.family: expected one of {NOISE_FAMILIES}, got {family!r}")
        family = "gaussian"
    noise_kwargs = {}
    for name in NOISE_FIELDS:
        default = 0.0
        value = need("noise", name, float, default=default)
        noise_kwargs[name] = value if value is not None else default
    dof = need("noise", "dof", float)
    if family == "student" and dof is None:
        errors.append("noise.dof: required for the student family")

    generations = need("simulation", "generations", int, default=8)
    keep_truth = need("simulation", "keep_truth", bool, default=False)
    if generations is not None and not 0 <= generations <= MAX_GENERATIONS:
        errors.append(f"simulation.generations: must be in [0, {MAX_GENERATIONS}]")

    experiment = raw.get("experiment", {})
    if not isinstance(experiment, dict):
        errors.append("experiment: must be an object")
        experiment = {}

    params = obs = moments = None
    if not errors:
        try:
            params = BarParams(a, b, c, d, x1=x1)
        except ValueError as exc:
            errors.append(f"model: {exc}")
        try:
            obs = ObservationParams(p0, p1, p01)
        except ValueError as exc:
            errors.append(f"observation: {exc}")
        try:
            moments = NoiseSecondMoments(**noise_kwargs)
        except ValueError as exc:
            errors.append(f"noise: {exc}")
        if family == "zero" and any(noise_kwargs[f] != 0.0 for f in NOISE_FIELDS):
            errors.append("noise: the zero family takes no nonzero moments")

    if errors:
        raise ConfigError(f"{path}: invalid configuration:\n  " + "\n  ".join(errors))

    cfg = RunConfig(
        seed=seed,
        params=params,
        obs=obs,
        noise_family=family,
        noise_moments=moments,
        noise_dof=dof,
        generations=generations,
        keep_truth=keep_truth,
        experiment=experiment,
    )
    try:
        cfg.build_noise()
    except ValueError as exc:
        raise ConfigError(f"{path}: noise: {exc}") from None
    return cfg
