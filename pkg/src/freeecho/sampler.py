"""Deterministic probability-flow ODE integration.

Step counting: ``t_i`` counts rungs from the *clean* end of the ladder, so
``t_i = 0`` does nothing, ``t_i = num_steps`` is full generation from pure
noise, and a truncated run with ``t_i`` re-integrates the last ``t_i``
rungs starting at ``sigma_{N - t_i}``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .schedule import NoiseSchedule, step_sigmas

log = logging.getLogger(__name__)

SOLVERS = ("euler", "heun")


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int, sigma: float):
        super().__init__(f"non-finite sampler state at step {step} (sigma={sigma:g})")
        self.step = step
        self.sigma = sigma


@dataclass
class SamplerConfig:
    solver: str = "heun"
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    t_i: int = 15
    guidance_scale: float = 7.0
    seed: int = 0

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if not 0 <= self.t_i <= self.schedule.num_steps:
            raise ValueError(f"t_i={self.t_i} outside [0, {self.schedule.num_steps}]")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be non-negative")


@dataclass
class Trajectory:
    sigmas: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    every: int = 1

    def record(self, i: int, sigma: float, x: np.ndarray, last: bool = False) -> None:
        if i % self.every == 0 or last:
            if self.sigmas and not sigma < self.sigmas[-1]:
                raise AssertionError("trajectory sigma must strictly decrease")
            self.sigmas.append(float(sigma))
            self.states.append(np.array(x, copy=True))

    def dump(self, out_dir) -> list:
        """Write numbered ``.npy`` snapshots plus an index of sigmas."""
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for n, (s, x) in enumerate(zip(self.sigmas, self.states)):
            p = out / f"{n:04d}.npy"
            np.save(p, x)
            paths.append(p)
        (out / "sigmas.txt").write_text("\n".join(f"{n:04d} {s:.10g}" for n, s in enumerate(self.sigmas)) + "\n")
        return paths


def ode_rhs(x, sigma: float, denoiser: Callable, condition=None):
    """``dx/dsigma = (x - D(x, sigma)) / sigma``."""
    if sigma <= 0:
        raise ValueError(f"ode_rhs needs sigma > 0, got {sigma}")
    d = denoiser(x, sigma) if condition is None else denoiser(x, sigma, condition)
    return (x - d) / sigma


def integrate(denoiser: Callable, x, sigmas, solver: str = "heun", trajectory: Trajectory | None = None):
    """Integrate from ``sigmas[0]`` through each following entry.

    Heun applies the trapezoidal corrector on every step except one ending
    at sigma = 0, where the derivative is undefined.
    """
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}")
    x = np.array(x, dtype=np.float64, copy=True)
    if trajectory is not None:
        trajectory.record(0, sigmas[0], x)
    for i in range(len(sigmas) - 1):
        s_cur, s_next = float(sigmas[i]), float(sigmas[i + 1])
        d_cur = ode_rhs(x, s_cur, denoiser)
        x_next = x + (s_next - s_cur) * d_cur
        if solver == "heun" and s_next > 0:
            d_next = ode_rhs(x_next, s_next, denoiser)
            x_next = x + (s_next - s_cur) * 0.5 * (d_cur + d_next)
        if not np.all(np.isfinite(x_next)):
            raise NonFiniteStateError(i, s_cur)
        x = x_next
        if trajectory is not None:
            trajectory.record(i + 1, s_next, x, last=i == len(sigmas) - 2)
    return x


def sigma_at_step(schedule: NoiseSchedule, t_i: int) -> float:
    """Noise level at which a truncated run of ``t_i`` steps starts."""
    n = schedule.num_steps
    if not 1 <= t_i <= n:
        raise ValueError(f"t_i={t_i} outside [1, {n}]")
    return float(step_sigmas(schedule)[n - t_i])


def initial_noise(shape, config: SamplerConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    return config.schedule.sigma_max * rng.standard_normal(shape)


def sample_full(denoiser: Callable, shape, config: SamplerConfig, rng: np.random.Generator | None = None,
                trajectory: Trajectory | None = None) -> np.ndarray:
    """Generate from ``N(0, sigma_max^2 I)`` down to sigma = 0."""
    if config.t_i != config.schedule.num_steps:
        raise ValueError("sample_full requires t_i == num_steps")
    x = initial_noise(shape, config, rng)
    return integrate(denoiser, x, step_sigmas(config.schedule), config.solver, trajectory)


def sample_truncated(denoiser: Callable, init, config: SamplerConfig, rng: np.random.Generator | None = None,
                     trajectory: Trajectory | None = None) -> np.ndarray:
    """Continue the reverse ODE from ``init``, already noised to
    ``sigma_at_step(schedule, t_i)``, through the last ``t_i`` rungs."""
    n = config.schedule.num_steps
    if config.t_i == 0:
        log.warning("t_i = 0: returning the initialization unchanged")
        return np.array(init, dtype=np.float64, copy=True)
    sigmas = step_sigmas(config.schedule)[n - config.t_i:]
    return integrate(denoiser, init, sigmas, config.solver, trajectory)


def cfg_denoiser(denoiser: Callable, condition, guidance_scale: float) -> Callable:
    """Classifier-free guidance: ``D(x, s, null) + g * (D(x, s, c) - D(x, s, null))``.

    The null condition is ``None``; conditional denoisers must treat it as
    the dropped-out (all-zeros) condition used during training.
    """

    def guided(x, sigma, _condition=None):
        uncond = denoiser(x, sigma, None)
        if guidance_scale == 0:
            return uncond
        cond = denoiser(x, sigma, condition)
        return uncond + guidance_scale * (cond - uncond)

    return guided
