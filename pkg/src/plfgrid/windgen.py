"""Synthetic wind-farm output generator.

Produces correlated, non-Gaussian farm output histories (per-unit on the
system base) from a ground-truth Gaussian mixture, for desk-scale experiments
where real measurement campaigns are unavailable.  The ground truth is kept
alongside the samples so tests can compare fitted models against it.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import gmm

CLIP_WARN_FRACTION = 0.05
PSD_TOL = 1e-10


@dataclass
class WindSpec:
    """Ground truth for a set of wind farms.

    ``mixture`` is over farm active power (p.u.); samples are clipped to
    [0, capacity] per farm.  ``correlation`` records the target correlation
    used to build the mixture blocks, for provenance.
    """

    names: list
    capacity: np.ndarray
    mixture: gmm.Gmm
    n_samples: int = 8760
    seed: int = 0
    correlation: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.capacity = np.atleast_1d(np.asarray(self.capacity, dtype=float))
        if len(self.names) != self.capacity.size:
            raise ValueError("names and capacity lengths differ")
        if self.mixture.dim != self.capacity.size:
            raise ValueError("mixture dimension does not match farm count")
        if np.any(self.capacity <= 0):
            raise ValueError("capacity must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.correlation is not None:
            self.correlation = np.asarray(self.correlation, dtype=float)

    @property
    def n_farms(self) -> int:
        return self.capacity.size


def check_correlation(corr: np.ndarray, n: int) -> np.ndarray:
    """Validate a correlation matrix; raises with an eigenvalue diagnostic."""
    corr = np.asarray(corr, dtype=float)
    if corr.shape != (n, n):
        raise ValueError(f"correlation shape {corr.shape}, expected ({n}, {n})")
    if not np.allclose(corr, corr.T, atol=1e-12):
        raise ValueError("correlation matrix is not symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
        raise ValueError("correlation diagonal is not all ones")
    lo = float(np.linalg.eigvalsh(corr).min())
    if lo < -PSD_TOL:
        raise ValueError(
            f"correlation matrix is not positive semidefinite "
            f"(min eigenvalue {lo:.3e})")
    return corr


def build_mixture(weights, means, sigmas, correlation) -> gmm.Gmm:
    """Mixture with covariance blocks diag(s) C diag(s) per component.

    ``means`` and ``sigmas`` are (K, farms); ``correlation`` is shared.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    sigmas = np.atleast_2d(np.asarray(sigmas, dtype=float))
    K, f = means.shape
    corr = check_correlation(correlation, f)
    covs = np.empty((K, f, f))
    for k in range(K):
        covs[k] = corr * np.outer(sigmas[k], sigmas[k])
    return gmm.Gmm(weights=np.asarray(weights, dtype=float),
                   means=means, covariances=covs)


def generate(spec: WindSpec) -> np.ndarray:
    """Sample the history matrix (n_samples x farms), clipped to bounds."""
    raw = gmm.sample(spec.mixture, spec.n_samples, spec.seed)
    clipped = np.clip(raw, 0.0, spec.capacity)
    frac = float(np.mean(clipped != raw))
    if frac >= CLIP_WARN_FRACTION:
        warnings.warn(
            f"clipping altered {frac:.1%} of samples; ground-truth mixture "
            f"is distorted", stacklevel=2)
    return clipped


def _flat_correlation(n: int, rho: float) -> np.ndarray:
    return np.full((n, n), rho) + (1.0 - rho) * np.eye(n)


def _block_correlation(block_sizes, intra: float, inter: float) -> np.ndarray:
    n = sum(block_sizes)
    corr = np.full((n, n), inter)
    at = 0
    for s in block_sizes:
        corr[at:at + s, at:at + s] = intra
        at += s
    np.fill_diagonal(corr, 1.0)
    return corr


PRESET_NAMES = ("unimodal-skewed", "bimodal", "nine-farm-maryland-like")


def preset(name: str, *, scale: float = 1.0, n_samples: int = 8760,
           seed: int = 0) -> WindSpec:
    """Named ground-truth configurations.

    ``scale`` multiplies means, spreads and capacities together, so the
    shape of the distribution survives rescaling to a specific grid.
    """
    if name == "unimodal-skewed":
        # Single broad regime with a heavy right shoulder.
        f = 3
        weights = [0.50, 0.35, 0.15]
        means = np.array([
            [0.11, 0.12, 0.13],
            [0.19, 0.21, 0.23],
            [0.31, 0.34, 0.38],
        ])
        sigmas = np.array([
            [0.035, 0.035, 0.040],
            [0.050, 0.055, 0.055],
            [0.080, 0.085, 0.090],
        ])
        corr = _flat_correlation(f, 0.5)
        cap = np.full(f, 0.60)
    elif name == "bimodal":
        f = 3
        weights = [0.55, 0.45]
        means = np.array([
            [0.08, 0.09, 0.08],
            [0.36, 0.40, 0.38],
        ])
        sigmas = np.array([
            [0.035, 0.040, 0.035],
            [0.065, 0.070, 0.065],
        ])
        corr = _flat_correlation(f, 0.6)
        cap = np.full(f, 0.65)
    elif name == "nine-farm-maryland-like":
        # Three coastal clusters of three farms: calm / moderate / windy
        # regimes with stronger correlation inside a cluster.
        f = 9
        weights = [0.50, 0.35, 0.15]
        means = np.vstack([
            np.full(f, 0.06),
            np.full(f, 0.16),
            np.full(f, 0.28),
        ])
        means = means + np.array([0.000, 0.004, -0.003, 0.006, -0.005,
                                  0.002, -0.002, 0.005, -0.004])
        sigmas = np.vstack([
            np.full(f, 0.025),
            np.full(f, 0.050),
            np.full(f, 0.070),
        ])
        corr = _block_correlation((3, 3, 3), intra=0.7, inter=0.3)
        cap = np.full(f, 0.40)
    else:
        raise ValueError(f"unknown preset {name!r}; known: {PRESET_NAMES}")

    mixture = build_mixture(weights, np.asarray(means) * scale,
                            np.asarray(sigmas) * scale, corr)
    names = [f"farm{k + 1}" for k in range(f)]
    return WindSpec(names=names, capacity=cap * scale, mixture=mixture,
                    n_samples=n_samples, seed=seed, correlation=corr)


def spec_to_dict(spec: WindSpec) -> dict:
    out = {
        "names": list(spec.names),
        "capacity": spec.capacity.tolist(),
        "mixture": gmm.to_dict(spec.mixture),
        "n_samples": int(spec.n_samples),
        "seed": int(spec.seed),
    }
    if spec.correlation is not None:
        out["correlation"] = spec.correlation.tolist()
    return out


def spec_from_dict(d: dict) -> WindSpec:
    """Build a spec from JSON.

    Accepts either an explicit ``mixture`` or ``components`` of the form
    {weight, mean: per-farm, sigma: per-farm} plus a shared ``correlation``.
    """
    names = list(d["names"])
    f = len(names)
    if "mixture" in d:
        mixture = gmm.from_dict(d["mixture"])
    else:
        comps = d["components"]
        corr = d.get("correlation", np.eye(f).tolist())
        mixture = build_mixture(
            weights=[c["weight"] for c in comps],
            means=[c["mean"] for c in comps],
            sigmas=[c["sigma"] for c in comps],
            correlation=corr)
    return WindSpec(
        names=names,
        capacity=np.asarray(d["capacity"], dtype=float),
        mixture=mixture,
        n_samples=int(d.get("n_samples", 8760)),
        seed=int(d.get("seed", 0)),
        correlation=(np.asarray(d["correlation"], dtype=float)
                     if "correlation" in d else None))
