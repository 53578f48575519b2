"""Noise-level bookkeeping: training sigma draws, the sampling ladder and
the input/output scalings wrapped around the raw network."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    num_steps: int = 64
    # sigma_data**2 / sigma*^2 instead of sigma_data / sigma*
    edm_standard_skip: bool = False

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ValueError(f"sigma_data must be positive, got {self.sigma_data}")
        if self.p_std < 0:
            raise ValueError(f"p_std must be non-negative, got {self.p_std}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.num_steps < 2:
            raise ValueError(f"num_steps must be >= 2, got {self.num_steps}")

    def coeffs(self, sigma: float) -> "Preconditioning":
        return precondition_coeffs(sigma, self.sigma_data, self.edm_standard_skip)

    def weight(self, sigma: float) -> float:
        return loss_weight(sigma, self.sigma_data)


@dataclass(frozen=True)
class Preconditioning:
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


def sample_training_sigma(rng: np.random.Generator, n: int, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Draw ``n`` log-normal noise levels, ``ln sigma ~ N(p_mean, p_std^2)``."""
    schedule = schedule or NoiseSchedule()
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    z = rng.normal(schedule.p_mean, schedule.p_std, size=n) if schedule.p_std > 0 else np.full(n, schedule.p_mean)
    return np.exp(z)


def step_sigmas(schedule: NoiseSchedule) -> np.ndarray:
    """Power-rho ladder ``sigma_0 = sigma_max > ... > sigma_{N-1} = sigma_min``
    followed by a trailing zero (N + 1 entries)."""
    n = schedule.num_steps
    if n < 2:
        raise ValueError(f"num_steps must be >= 2, got {n}")
    inv_rho = 1.0 / schedule.rho
    hi = schedule.sigma_max**inv_rho
    lo = schedule.sigma_min**inv_rho
    frac = np.arange(n, dtype=np.float64) / (n - 1)
    sigmas = (hi + frac * (lo - hi)) ** schedule.rho
    # pin the endpoints; the power round-trip is off by an ulp or two
    sigmas[0] = schedule.sigma_max
    sigmas[-1] = schedule.sigma_min
    return np.append(sigmas, 0.0)


def _check_sigma(sigma) -> None:
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError(f"sigma must be positive, got {sigma}")


def precondition_coeffs(sigma: float, sigma_data: float = 0.5, edm_standard_skip: bool = False) -> Preconditioning:
    """Scalings around the raw network at noise level ``sigma``.

    With ``s* = sqrt(sigma^2 + sigma_data^2)``:
    ``c_skip = sigma_data / s*`` (or ``sigma_data^2 / s*^2`` when
    ``edm_standard_skip``), ``c_out = sigma * sigma_data / s*``,
    ``c_in = 1 / s*`` and ``c_noise = ln(sigma) / 4``.
    """
    _check_sigma(sigma)
    sigma = float(sigma)
    star = math.sqrt(sigma * sigma + sigma_data * sigma_data)
    c_skip = sigma_data**2 / star**2 if edm_standard_skip else sigma_data / star
    return Preconditioning(
        c_skip=c_skip,
        c_out=sigma * sigma_data / star,
        c_in=1.0 / star,
        c_noise=math.log(sigma) / 4.0,
    )


def loss_weight(sigma: float, sigma_data: float = 0.5) -> float:
    """``w(sigma) = (s* / (sigma * sigma_data))^2``; the reciprocal of ``c_out^2``."""
    _check_sigma(sigma)
    sigma = float(sigma)
    return (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data) ** 2
