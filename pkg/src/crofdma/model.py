"""System configuration, channel sampling and the cross-link estimation-error model."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math

import numpy as np


class ParameterError(ValueError):
    """Raised when a model or solver parameter is outside its valid range."""


@dataclass(frozen=True)
class SystemConfig:
    """Scenario-independent parameters of the shared-spectrum OFDMA system.

    Powers are in watts. ``cross_mean`` and ``cross_variance`` describe the
    CTx->PRx channel when its knowledge is perfect; ``direct_mean_range`` bounds
    the uniform draw of the mean direct-link power gains.
    """

    n_users: int = 3
    n_subcarriers: int = 64
    p_total: float = 30.0
    i_threshold: float = 10.0
    ber_target: float = 1e-2
    noise_power: float = 1e-13
    primary_interference_power: float = 1e-13
    direct_mean_range: tuple[float, float] = (0.0, 2.0)
    cross_mean: complex = 0.05 + 0j
    cross_variance: float = 0.1
    rng_seed: int = 2016
    # "min_term": gamma uses the nominal power min(P_t/K, I/N^sp) so that
    # M = 1 + zeta*P*|H|^2/noise.  "per_subcarrier": gamma uses P_t/K.
    sinr_reference: str = "min_term"

    def __post_init__(self):
        if self.n_users < 1 or self.n_subcarriers < 1:
            raise ParameterError("n_users and n_subcarriers must be positive")
        if not 0.0 < self.ber_target < 0.3:
            raise ParameterError(f"ber_target must lie in (0, 0.3), got {self.ber_target}")
        for name in ("p_total", "i_threshold", "noise_power",
                     "primary_interference_power", "cross_variance"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ParameterError(f"{name} must be positive and finite, got {value}")
        lo, hi = self.direct_mean_range
        if lo < 0 or hi < lo:
            raise ParameterError(f"invalid direct_mean_range {self.direct_mean_range}")
        if self.sinr_reference not in ("min_term", "per_subcarrier"):
            raise ParameterError(f"unknown sinr_reference {self.sinr_reference!r}")

    @property
    def total_noise(self) -> float:
        return self.noise_power + self.primary_interference_power

    @property
    def nominal_power(self) -> float:
        """Per-subcarrier power P_t/K used to tabulate ``ChannelRealization.sinr``."""
        return self.p_total / self.n_subcarriers

    def with_(self, **changes) -> "SystemConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class EstimationModel:
    """Statistics of the cross-link estimate and its error.

    The estimate and error are correlated complex Gaussians with
    ``cov(estimate, error) = error_variance``.  Use :meth:`from_correlation`
    to build a self-consistent model from (rho, estimate variance).
    """

    correlation: float
    error_variance: float
    estimate_variance: float

    def __post_init__(self):
        if not 0.0 <= self.correlation <= 1.0:
            raise ParameterError(f"correlation must lie in [0, 1], got {self.correlation}")
        if self.error_variance < 0 or self.estimate_variance < 0:
            raise ParameterError("variances must be nonnegative")

    @classmethod
    def from_correlation(cls, rho: float, estimate_variance: float) -> "EstimationModel":
        return cls(rho, rho * rho * estimate_variance, estimate_variance)

    @classmethod
    def from_variances(cls, error_variance: float, channel_variance: float) -> "EstimationModel":
        total = error_variance + channel_variance
        if total <= 0:
            raise ParameterError("error and channel variances cannot both be zero")
        return cls(math.sqrt(error_variance / total), error_variance, total)

    @property
    def channel_variance(self) -> float:
        """Variance of the true channel implied by ``correlation`` and ``error_variance``."""
        rho2 = self.correlation ** 2
        if rho2 == 0.0:
            return self.estimate_variance - self.error_variance
        return self.error_variance * (1.0 - rho2) / rho2

    def check_consistent(self, rtol: float = 1e-9) -> None:
        """Raise if the correlation cannot be realized by the sampler."""
        if self.error_variance > self.estimate_variance * (1 + rtol):
            raise ParameterError(
                "joint sampling needs estimate_variance >= error_variance "
                f"({self.estimate_variance} < {self.error_variance})")
        implied = 0.0 if self.estimate_variance == 0 else self.error_variance / self.estimate_variance
        if abs(implied - self.correlation ** 2) > rtol * max(1.0, implied):
            raise ParameterError(
                f"correlation {self.correlation} is incompatible with variances "
                f"(error/estimate ratio {implied:.6g} != rho^2 {self.correlation ** 2:.6g})")


@dataclass(frozen=True)
class ChannelRealization:
    direct_power_gains: np.ndarray  # (N, K)
    cross_gains: np.ndarray         # (K,) complex, true channel
    cross_estimates: np.ndarray     # (K,) complex
    cross_errors: np.ndarray        # (K,) complex
    sinr: np.ndarray                # (N, K), nominal power P_t/K
    direct_means: np.ndarray = field(repr=False, default=None)

    @property
    def n_users(self) -> int:
        return self.direct_power_gains.shape[0]

    @property
    def n_subcarriers(self) -> int:
        return self.direct_power_gains.shape[1]


def complex_normal(rng: np.random.Generator, variance, size, mean=0.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian with E|X - mean|^2 = variance."""
    scale = np.sqrt(np.asarray(variance, dtype=float) / 2.0)
    z = rng.standard_normal(size) + 1j * rng.standard_normal(size)
    return mean + scale * z


def draw_direct_means(cfg: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.direct_mean_range
    return rng.uniform(lo, hi, size=(cfg.n_users, cfg.n_subcarriers))


def sample_realization(cfg: SystemConfig, est: EstimationModel | None,
                       rng: np.random.Generator,
                       direct_means: np.ndarray | None = None) -> ChannelRealization:
    """Draw one fading state of every direct link and of the cross-link.

    With ``est=None`` the cross-link is known perfectly and drawn from
    ``CN(cfg.cross_mean, cfg.cross_variance)``.  Otherwise the error is drawn
    first, ``error ~ CN(0, e)``, and the estimate as ``error + W`` with
    ``W ~ CN(0, estimate_variance - e)`` so that ``cov(estimate, error) = e``.
    """
    if direct_means is None:
        direct_means = draw_direct_means(cfg, rng)
    direct_means = np.asarray(direct_means, dtype=float)
    if direct_means.shape != (cfg.n_users, cfg.n_subcarriers):
        raise ParameterError(f"direct_means has shape {direct_means.shape}, "
                             f"expected {(cfg.n_users, cfg.n_subcarriers)}")
    k = cfg.n_subcarriers
    gains = rng.exponential(1.0, size=direct_means.shape) * direct_means

    if est is None:
        cross = complex_normal(rng, cfg.cross_variance, k, cfg.cross_mean)
        estimates = cross.copy()
        errors = np.zeros(k, dtype=complex)
    else:
        est.check_consistent()
        errors = complex_normal(rng, est.error_variance, k)
        innovation = complex_normal(rng, max(est.estimate_variance - est.error_variance, 0.0), k)
        estimates = errors + innovation
        cross = estimates + errors

    sinr = cfg.nominal_power * gains / cfg.total_noise
    return ChannelRealization(gains, cross, estimates, errors, sinr, direct_means)


def posterior_error_params(est: EstimationModel, estimate) -> tuple[complex, float]:
    """Mean and variance of the estimation error conditioned on the estimate."""
    rho2 = est.correlation ** 2
    return rho2 * estimate, (1.0 - rho2) * est.error_variance


def posterior_channel_params(est: EstimationModel, estimate) -> tuple[complex, float]:
    """Mean and variance of the true cross-link conditioned on the estimate."""
    rho2 = est.correlation ** 2
    return (1.0 + rho2) * estimate, (1.0 - rho2) * est.error_variance


def worst_case_bound(est: EstimationModel, estimate, pr: float):
    """Chebyshev radius that contains the conditional error with probability >= ``pr``.

    Works elementwise on arrays of estimates.
    """
    if not 0.0 <= pr < 1.0:
        raise ParameterError(f"pr must lie in [0, 1), got {pr}")
    mean, variance = posterior_error_params(est, estimate)
    return np.sqrt(variance / (1.0 - pr)) + np.abs(mean)
