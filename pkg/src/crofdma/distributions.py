"""Analytic distribution machinery for interference sums and the received SINR.

Covers the Gaussian approximation of a sum of squared complex Gaussian
magnitudes, the closed-form SINR cdf/pdf built on it, the moment-matched
chi-square approximation of weighted sums, the resulting collision
probability, and the deterministic interference budget that guarantees a
collision probability.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from scipy import special, stats

from .model import EstimationModel, ParameterError


class DomainError(ValueError):
    """Raised for non-finite or out-of-domain arguments of a distribution function."""


@dataclass(frozen=True)
class GaussianParams:
    mean: float
    variance: float

    def __post_init__(self):
        if self.variance < 0:
            raise ParameterError(f"variance must be nonnegative, got {self.variance}")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True)
class ScaledChiSquare:
    """``scale * chi2_dof(noncentrality)``; dof is twice the number of terms."""

    noncentrality: float
    dof: int
    scale: float

    def __post_init__(self):
        if self.noncentrality < 0 or self.scale <= 0 or self.dof <= 0 or self.dof % 2:
            raise ParameterError(f"invalid scaled chi-square {self}")

    @property
    def n_terms(self) -> int:
        return self.dof // 2

    def cdf(self, x):
        """Cdf of the approximating variable (exact noncentral chi-square law)."""
        x = np.asarray(x, dtype=float) / self.scale
        if self.noncentrality == 0:
            return special.chdtr(self.dof, x)
        return stats.ncx2.cdf(x, self.dof, self.noncentrality)


@dataclass(frozen=True)
class SinrDistParams:
    direct_mean: float
    total_noise: float
    p_total: float
    i_threshold: float
    k_subcarriers: int
    nsp: GaussianParams

    def __post_init__(self):
        for name in ("direct_mean", "total_noise", "p_total", "i_threshold"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if self.k_subcarriers < 1:
            raise ParameterError("k_subcarriers must be positive")
        if self.nsp.variance <= 0:
            raise ParameterError("the interference-sum variance must be positive")


VARIANCE_CONVENTIONS = ("per_component", "total")


def power_sum_gaussian(channel_means, shared_variance: float,
                       convention: str = "per_component") -> GaussianParams:
    """Gaussian approximation of ``sum_k |H_k|^2`` for independent complex Gaussians.

    ``convention="per_component"`` treats ``shared_variance`` as the variance of
    the real and of the imaginary part of each ``H_k``; ``"total"`` treats it as
    ``E|H_k - mean_k|^2`` (each part carrying half).
    """
    means = np.atleast_1d(np.asarray(channel_means, dtype=complex))
    if means.size == 0:
        raise ParameterError("channel_means must be nonempty")
    if not shared_variance > 0:
        raise ParameterError("shared_variance must be positive")
    k = means.size
    ncp = float(np.sum(np.abs(means) ** 2) / shared_variance)
    if convention == "per_component":
        return GaussianParams(shared_variance * (2 * k + ncp),
                              shared_variance ** 2 * (4 * k + 4 * ncp))
    if convention == "total":
        return GaussianParams(shared_variance * (k + ncp),
                              shared_variance ** 2 * (k + 2 * ncp))
    raise ParameterError(f"unknown variance convention {convention!r}")


def _check_gamma(gamma):
    g = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(g)):
        raise DomainError("gamma must be finite")
    if np.any(g < 0):
        raise DomainError("gamma must be nonnegative")
    return g


def _cdf_terms(g: np.ndarray, p: SinrDistParams):
    """Return the power-limited term, the interference-limited term and helpers."""
    k = p.k_subcarriers
    s = p.total_noise
    mu_n, sd_n = p.nsp.mean, p.nsp.std
    threshold = p.i_threshold * k / p.p_total
    c = k * s / (p.p_total * p.direct_mean)
    a = s / (p.direct_mean * p.i_threshold)

    power_limited = 0.5 * np.exp(-c * g) * special.erfc((mu_n - threshold) / (math.sqrt(2) * sd_n))
    # interference-limited part: Gaussian-weighted Laplace transform of N^sp
    # over [threshold, inf), written with erfcx so large gamma cannot overflow
    z = (threshold - mu_n + a * g * p.nsp.variance) / (math.sqrt(2) * sd_n)
    expo = -a * g * mu_n + 0.5 * (a * g) ** 2 * p.nsp.variance
    with np.errstate(over="ignore"):
        interference_limited = np.where(
            z > 0,
            0.5 * special.erfcx(np.maximum(z, 0)) * np.exp(expo - np.maximum(z, 0) ** 2),
            0.5 * np.exp(np.minimum(expo, 0)) * special.erfc(np.minimum(z, 0)),
        )
    return power_limited, interference_limited, c, a, z, expo


def sinr_cdf_unclamped(gamma, p: SinrDistParams):
    g = _check_gamma(gamma)
    pl, il, *_ = _cdf_terms(g, p)
    return 1.0 - pl - il


def sinr_cdf(gamma, p: SinrDistParams):
    """Cdf of ``min(P_t/K, I_th/N^sp) * |H^ss|^2 / noise`` with Gaussian ``N^sp``."""
    out = np.clip(sinr_cdf_unclamped(gamma, p), 0.0, 1.0)
    return out if np.ndim(out) else float(out)


def sinr_pdf(gamma, p: SinrDistParams):
    """Density of the received SINR; the exact derivative of :func:`sinr_cdf`."""
    g = _check_gamma(gamma)
    pl, il, c, a, z, expo = _cdf_terms(g, p)
    sd_n = p.nsp.std
    dexpo = -a * p.nsp.mean + a * a * g * p.nsp.variance
    dz = a * sd_n / math.sqrt(2)
    gauss = np.exp(expo - z * z) * dz / math.sqrt(math.pi)
    out = np.maximum(c * pl - dexpo * il + gauss, 0.0)
    return out if np.ndim(out) else float(out)


def weighted_chi_square_approx(weights, means) -> ScaledChiSquare:
    """Moment-match ``sum_k w_k |X_k|^2`` by a single scaled noncentral chi-square.

    ``X_k`` are complex Gaussians with unit-variance real and imaginary parts
    and squared mean magnitude ``means[k]``.
    """
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    m = np.atleast_1d(np.asarray(means, dtype=float))
    if w.shape != m.shape or w.ndim != 1 or w.size == 0:
        raise ParameterError(f"weights and means must be equal-length nonempty vectors "
                             f"({w.shape} vs {m.shape})")
    if np.any(w <= 0) or np.any(m < 0):
        raise ParameterError("weights must be positive and means nonnegative")
    k = w.size
    ncp = float(m.sum())
    if np.all(w == w[0]):
        scale = float(w[0])
    else:
        scale = float(np.sum(w * (2.0 + m)) / (2 * k + ncp))
    return ScaledChiSquare(ncp, 2 * k, scale)


def upper_gamma_regularized(k: int, x: float) -> float:
    """Q(k, x) for integer ``k`` via the Poisson-sum identity."""
    if k < 1 or int(k) != k:
        raise ParameterError(f"k must be a positive integer, got {k}")
    if x < 0 or not math.isfinite(x):
        raise DomainError(f"x must be finite and nonnegative, got {x}")
    if x == 0:
        return 1.0
    log_x = math.log(x)
    terms = [math.exp(-x + j * log_x - math.lgamma(j + 1)) for j in range(int(k))]
    return min(math.fsum(terms), 1.0)


def collision_prob(i_th: float, s: ScaledChiSquare) -> float:
    """Probability that the approximated interference exceeds ``i_th``."""
    if not i_th > 0:
        raise ParameterError(f"i_th must be positive, got {i_th}")
    x = (i_th / s.scale) / (2.0 * (1.0 + s.noncentrality / s.dof))
    return upper_gamma_regularized(s.n_terms, x)


def deterministic_cap(i_th: float, eps: float, k: int) -> float:
    """Budget on ``sum_k alpha_k sum_n phi P`` that keeps the collision probability <= eps."""
    if not 0.0 < eps < 1.0:
        raise ParameterError(f"eps must lie in (0, 1), got {eps}")
    if k < 2 or int(k) != k:
        raise ParameterError(f"k must be an integer >= 2, got {k}")
    if not i_th > 0:
        raise ParameterError(f"i_th must be positive, got {i_th}")
    root_factorial = math.exp(math.lgamma(k + 1) / k)
    # 1 - (1 - eps)^(1/k), computed without cancellation
    tail = -math.expm1(math.log1p(-eps) / k)
    return k * i_th / (-root_factorial * math.log(tail))


def cross_power_sum_params(kind: str, est: EstimationModel, k: int,
                           pr: float | None = None) -> GaussianParams:
    """Gaussian law of the cross-link power sum given imperfect knowledge.

    ``kind`` is one of ``"average"``, ``"worst"`` or ``"probabilistic"``; the
    parameters follow the per-component variance convention of
    :func:`power_sum_gaussian`.
    """
    rho2 = est.correlation ** 2
    v_hat = est.estimate_variance
    inflated = v_hat * (1 + rho2) ** 2
    if kind == "average":
        return GaussianParams(2 * k * inflated, 4 * k * inflated ** 2)
    if kind == "worst":
        if pr is None or not 0.0 <= pr < 1.0:
            raise ParameterError(f"worst case needs pr in [0, 1), got {pr}")
        ncp = k * abs(est.error_variance * (1 - rho2) / ((1 - pr) * inflated))
        return GaussianParams(inflated * (2 * k + ncp), inflated ** 2 * (4 * k + 4 * ncp))
    if kind == "probabilistic":
        mean = 2 * k * inflated + 2 * k * (1 - rho2) ** 2 * est.error_variance
        return GaussianParams(mean, 4 * k * inflated ** 2)
    if kind == "perfect":
        raise ParameterError("perfect cross-link knowledge: use power_sum_gaussian instead")
    raise ParameterError(f"unknown scenario kind {kind!r}")
