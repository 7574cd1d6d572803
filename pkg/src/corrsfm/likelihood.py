"""Gaussian + Uniform mixture model for correlation observations.

Each target pixel observes one correlation ``c`` in ``[-1, 1]`` with density

    (1 - rho) * N(c | mu, sigma) + rho * U(c | -1, 1)

The Uniform arm absorbs occlusions, moving objects and lighting changes;
``rho`` is floored at ``RHO_MIN`` so the density, and its log, stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .features import CorrelationMap

RHO_MIN = 1e-3
RHO_MAX_HEURISTIC = 0.9
SIGMA_MIN = 1e-3
SIGMA_MAX = 2.0
UNIFORM_DENSITY = 0.5  # U(-1, 1)
_SQRT_2PI = np.sqrt(2.0 * np.pi)


class LikelihoodError(ValueError):
    pass


@dataclass(frozen=True)
class UncertaintyMaps:
    rho: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        rho, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (self.rho, self.mu, self.sigma))
        if not (rho.shape == mu.shape == sigma.shape):
            raise LikelihoodError(f"uncertainty maps differ in shape: {rho.shape}, {mu.shape}, {sigma.shape}")
        _check_params(rho, mu, sigma)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def shape(self):
        return self.rho.shape

    @classmethod
    def constant(cls, shape, rho: float, mu: float, sigma: float) -> "UncertaintyMaps":
        return cls(np.full(shape, rho), np.full(shape, mu), np.full(shape, sigma))


@dataclass(frozen=True)
class LikelihoodMap:
    density: np.ndarray
    log_density: np.ndarray
    valid: np.ndarray


def _check_params(rho, mu, sigma, rho_min: float = RHO_MIN):
    rho, mu, sigma = np.asarray(rho), np.asarray(mu), np.asarray(sigma)
    if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise LikelihoodError("mixture parameters must be finite")
    if np.any(rho < rho_min) or np.any(rho > 1):
        raise LikelihoodError(f"rho must lie in [{rho_min}, 1]")
    if np.any(np.abs(mu) > 1):
        raise LikelihoodError("mu must lie in [-1, 1]")
    if np.any(sigma < SIGMA_MIN) or np.any(sigma > SIGMA_MAX):
        raise LikelihoodError(f"sigma must lie in [{SIGMA_MIN}, {SIGMA_MAX}]")


def gaussian_pdf(c, mu, sigma):
    z = (np.asarray(c, dtype=np.float64) - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * _SQRT_2PI)


def mixture_pdf(c, rho, mu, sigma, rho_min: float = RHO_MIN):
    """Mixture density; works elementwise on arrays.

    Pass ``rho_min=0`` to evaluate the pure Gaussian (used by tests and
    ablations; the solver always keeps the floor).
    """
    _check_params(rho, mu, sigma, rho_min)
    c = np.asarray(c, dtype=np.float64)
    if np.any(np.abs(c) > 1 + 1e-6):
        raise LikelihoodError("correlation must lie in [-1, 1]")
    out = (1.0 - rho) * gaussian_pdf(c, mu, sigma) + rho * UNIFORM_DENSITY
    return float(out) if np.ndim(out) == 0 else out


def likelihood_map(I_corr: CorrelationMap, U: UncertaintyMaps) -> LikelihoodMap:
    """Per-pixel density; pixels without an observation get the Uniform density."""
    if I_corr.values.shape != U.shape:
        raise LikelihoodError(f"correlation map {I_corr.values.shape} and uncertainty {U.shape} differ")
    c = np.where(I_corr.valid, I_corr.values, U.mu)
    dens = (1.0 - U.rho) * gaussian_pdf(c, U.mu, U.sigma) + U.rho * UNIFORM_DENSITY
    dens = np.where(I_corr.valid, dens, UNIFORM_DENSITY)
    return LikelihoodMap(dens, np.log(dens), I_corr.valid.copy())


def mean_log_likelihood(L: LikelihoodMap) -> float:
    return float(np.mean(L.log_density))


def default_uncertainty(
    I_t: np.ndarray,
    I_s_warped: np.ndarray,
    visible: np.ndarray,
    rho0: float = 0.1,
    kappa: float = 2.0,
    mu0: float = 1.0,
    sigma0: float = 0.3,
    rho_max: float = RHO_MAX_HEURISTIC,
) -> UncertaintyMaps:
    """Residual-driven mixture parameters.

    ``rho`` grows with the mean absolute photometric residual over the
    visible part of each 3x3 neighbourhood; invisible pixels get ``rho_max``.
    """
    I_t = np.asarray(I_t, dtype=np.float64)
    I_w = np.asarray(I_s_warped, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    if not (I_t.shape == I_w.shape == visible.shape):
        raise LikelihoodError(f"shapes differ: {I_t.shape}, {I_w.shape}, {visible.shape}")
    resid = np.where(visible, np.abs(I_t - I_w), 0.0)
    frac = uniform_filter(visible.astype(np.float64), size=3, mode="nearest")
    local = uniform_filter(resid, size=3, mode="nearest") / np.maximum(frac, 1e-12)
    rho = np.clip(rho0 + kappa * local, RHO_MIN, rho_max)
    rho = np.where(visible, rho, rho_max)
    shape = I_t.shape
    return UncertaintyMaps(rho, np.full(shape, float(mu0)), np.full(shape, float(sigma0)))
