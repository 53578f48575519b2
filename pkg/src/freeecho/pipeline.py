"""Segmentation-to-video generators built on the sampler.

Every generator exposes ``gen(seg, seed)`` for one clip and
``gen.batch(seg, seeds)`` for several clips of the same segmentation, which
are integrated together as one batch. Outputs are clipped to [-1, 1].
"""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from .data import SegmentationMap
from .pseudo import (DEFAULT_EPSILON, IntensityHistogram, PseudoVideo, free_echo_pseudo_video,
                     labels_to_intensity, replicate_frames)
from .sampler import SamplerConfig, cfg_denoiser, integrate, sigma_at_step, sample_truncated
from .schedule import NoiseSchedule, step_sigmas
from .training import render_condition

log = logging.getLogger(__name__)

METHODS = ("free-echo", "sdedit", "cls-free", "unconditional")


def _clip(x: np.ndarray) -> np.ndarray:
    n = int(np.count_nonzero(np.abs(x) > 1.0))
    if n:
        log.debug("clipping %d of %d output values to [-1, 1]", n, x.size)
    return np.clip(x, -1.0, 1.0)


def _seg_key(seg: SegmentationMap):
    labels = np.ascontiguousarray(seg.labels)
    return labels.shape, labels.tobytes()


class _TruncatedGenerator:
    """Shared machinery: build a clean pseudo-video per segmentation, noise
    it to ``sigma(t_i)`` with one RNG per seed, integrate the last ``t_i``
    rungs."""

    method = ""

    def __init__(self, denoiser: Callable, frames: int, schedule: NoiseSchedule | None = None,
                 t_i: int = 15, solver: str = "heun"):
        self.denoiser = denoiser
        self.frames = frames
        self.config = SamplerConfig(solver=solver, schedule=schedule or NoiseSchedule(), t_i=t_i)
        self._cache: dict = {}

    @property
    def t_i(self) -> int:
        return self.config.t_i

    def _make_pseudo(self, seg: SegmentationMap) -> PseudoVideo:
        raise NotImplementedError

    def pseudo_video(self, seg: SegmentationMap) -> PseudoVideo:
        key = _seg_key(seg)
        if key not in self._cache:
            self._cache[key] = self._make_pseudo(seg)
        return self._cache[key]

    def initial_states(self, seg: SegmentationMap, seeds) -> np.ndarray:
        clean = self.pseudo_video(seg).frames
        if self.t_i == 0:
            return np.stack([clean for _ in seeds])
        sigma = sigma_at_step(self.config.schedule, self.t_i)
        return np.stack([clean + sigma * np.random.default_rng(s).standard_normal(clean.shape) for s in seeds])

    def batch(self, seg: SegmentationMap, seeds) -> np.ndarray:
        init = self.initial_states(seg, list(seeds))
        return _clip(sample_truncated(self.denoiser, init, self.config))

    def __call__(self, seg: SegmentationMap, seed: int) -> np.ndarray:
        return self.batch(seg, [seed])[0]


class FreeEchoGenerator(_TruncatedGenerator):
    """Colorize labels, match the intensity histogram to the dataset by
    entropic transport, replicate over frames, then run a truncated reverse
    ODE with the unconditional denoiser."""

    method = "free-echo"

    def __init__(self, denoiser: Callable, dataset_hist: IntensityHistogram, frames: int,
                 schedule: NoiseSchedule | None = None, t_i: int = 15, solver: str = "heun",
                 mapping: dict[int, float] | None = None, epsilon: float = DEFAULT_EPSILON):
        super().__init__(denoiser, frames, schedule, t_i, solver)
        self.dataset_hist = dataset_hist
        self.mapping = mapping
        self.epsilon = epsilon

    def _make_pseudo(self, seg):
        return free_echo_pseudo_video(seg, self.dataset_hist, self.frames, self.mapping, self.epsilon)


class SDEditGenerator(_TruncatedGenerator):
    """Same truncated run from a fixed per-label palette, without
    histogram matching."""

    method = "sdedit"

    def __init__(self, denoiser: Callable, frames: int, schedule: NoiseSchedule | None = None,
                 t_i: int = 15, solver: str = "heun", palette: dict[int, float] | None = None):
        super().__init__(denoiser, frames, schedule, t_i, solver)
        self.palette = palette

    def _make_pseudo(self, seg):
        image = labels_to_intensity(seg, self.palette)
        return PseudoVideo(replicate_frames(image, self.frames), image)


class _FullGenerator:
    def __init__(self, denoiser: Callable, frames: int, frame_shape, schedule: NoiseSchedule | None = None,
                 solver: str = "heun"):
        schedule = schedule or NoiseSchedule()
        self.denoiser = denoiser
        self.frames = frames
        self.frame_shape = tuple(frame_shape)
        self.config = SamplerConfig(solver=solver, schedule=schedule, t_i=schedule.num_steps)

    @property
    def t_i(self) -> int:
        return self.config.t_i

    def _noise(self, seeds) -> np.ndarray:
        shape = (self.frames,) + self.frame_shape
        smax = self.config.schedule.sigma_max
        return np.stack([smax * np.random.default_rng(s).standard_normal(shape) for s in seeds])

    def _run(self, denoiser, seeds) -> np.ndarray:
        x = integrate(denoiser, self._noise(list(seeds)), step_sigmas(self.config.schedule), self.config.solver)
        return _clip(x)


class ClassifierFreeGenerator(_FullGenerator):
    """Full generation from pure noise with a segmentation-conditioned
    denoiser and classifier-free guidance."""

    method = "cls-free"

    def __init__(self, denoiser: Callable, frames: int, frame_shape, schedule: NoiseSchedule | None = None,
                 solver: str = "heun", guidance_scale: float = 7.0):
        super().__init__(denoiser, frames, frame_shape, schedule, solver)
        if guidance_scale < 0:
            raise ValueError("guidance_scale must be non-negative")
        self.guidance_scale = guidance_scale

    def batch(self, seg: SegmentationMap, seeds) -> np.ndarray:
        if seg.shape != self.frame_shape:
            raise ValueError(f"segmentation {seg.shape} does not match frame shape {self.frame_shape}")
        cond = render_condition(seg, self.frames)
        return self._run(cfg_denoiser(self.denoiser, cond, self.guidance_scale), seeds)

    def __call__(self, seg: SegmentationMap, seed: int) -> np.ndarray:
        return self.batch(seg, [seed])[0]


class UnconditionalGenerator(_FullGenerator):
    """Full generation from pure noise; the segmentation is ignored."""

    method = "unconditional"

    def batch(self, seg, seeds) -> np.ndarray:
        return self._run(self.denoiser, seeds)

    def __call__(self, seg, seed: int) -> np.ndarray:
        return self.batch(seg, [seed])[0]
