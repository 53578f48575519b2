"""Denoising objective and the optimization loop.

All randomness (batch indices, noise levels, noise, condition dropout)
comes from numpy generators whose state is stored in every checkpoint, so
a resumed run continues the exact loss trajectory of an uninterrupted one.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .data import SegmentationMap
from .denoiser import PreconditionedDenoiser, save_checkpoint, wrap_preconditioned
from .schedule import NoiseSchedule, sample_training_sigma

log = logging.getLogger(__name__)

# log-sigma bucket edges for the per-noise-level loss breakdown
SIGMA_BUCKETS = (-2.4, -1.2, 0.0)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, sigma):
        sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
        super().__init__(f"non-finite denoising loss at sigma={sigma.tolist()}")
        self.sigma = sigma


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, cause: Exception, last_checkpoint: Path | None):
        super().__init__(f"training aborted at step {step}: {cause}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    total_iterations: int = 100_000
    condition_dropout_prob: float = 0.1
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 100
    ema_decay: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.total_iterations < 0:
            raise ValueError("batch_size must be positive and total_iterations non-negative")
        if not 0.0 <= self.condition_dropout_prob <= 1.0:
            raise ValueError("condition_dropout_prob must lie in [0, 1]")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be positive")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")


@dataclass
class TrainState:
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    running_loss: float | None = None
    initial_running_loss: float | None = None
    checkpoints: list[Path] = field(default_factory=list)


def as_batch(videos, dtype=torch.float32) -> torch.Tensor:
    """Stack videos into a (B, C, K, H, W) tensor."""
    if isinstance(videos, torch.Tensor):
        return videos.to(dtype)
    if isinstance(videos, np.ndarray):
        arr = videos
    else:
        arr = np.stack([(v[0] if isinstance(v, tuple) else v).pixels if not isinstance(v, np.ndarray) else v
                        for v in videos])
    if arr.ndim == 4:
        arr = arr[:, None]
    elif arr.ndim == 5 and arr.shape[-1] in (1, 3) and arr.shape[1] not in (1, 3):
        arr = np.moveaxis(arr, -1, 1)
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype)


def render_condition(seg: SegmentationMap, frames: int) -> np.ndarray:
    """Segmentation as an extra input channel, (1, K, H, W). Label ``l`` of
    ``L`` is drawn at ``(rank(l) + 1) / L`` so that no label collides with
    the all-zeros null condition."""
    ids = sorted(seg.label_set)
    lut = {lid: (i + 1) / len(ids) for i, lid in enumerate(ids)}
    img = np.vectorize(lut.__getitem__, otypes=[np.float64])(seg.labels)
    return np.repeat(img[None, None], frames, axis=1)


def weighted_error(denoiser, x, sigma, noise, schedule: NoiseSchedule, condition=None) -> torch.Tensor:
    """Per-sample ``w(sigma) * ||D(x + sigma n, sigma) - x||^2``."""
    s = sigma.reshape((-1,) + (1,) * (x.ndim - 1))
    noisy = x + s * noise
    out = denoiser(noisy, sigma) if condition is None else denoiser(noisy, sigma, condition)
    sd = schedule.sigma_data
    w = (sigma**2 + sd**2) / (sigma * sd) ** 2
    return w * (out - x).pow(2).flatten(1).sum(dim=1)


def denoising_loss(denoiser, batch, schedule: NoiseSchedule, rng: np.random.Generator | None = None,
                   sigma=None, noise=None, condition=None) -> torch.Tensor:
    """Batch mean of ``w(sigma) ||D(x + sigma n, sigma) - x||_2^2`` with a fresh
    log-normal ``sigma`` and standard normal ``n`` per batch element.

    ``sigma`` and ``noise`` may be passed explicitly; otherwise they are drawn
    from ``rng``.
    """
    x = as_batch(batch) if not isinstance(batch, torch.Tensor) else batch
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if sigma is None or noise is None:
        if rng is None:
            raise ValueError("need rng when sigma/noise are not given")
    if sigma is None:
        sigma = sample_training_sigma(rng, x.shape[0], schedule)
    if noise is None:
        noise = rng.standard_normal(tuple(x.shape))
    sigma = torch.as_tensor(sigma, dtype=x.dtype).reshape(-1)
    noise = torch.as_tensor(noise, dtype=x.dtype)
    per = weighted_error(denoiser, x, sigma, noise, schedule, condition)
    if not torch.isfinite(per).all():
        bad = ~torch.isfinite(per)
        raise NonFiniteLossError(sigma[bad].detach().cpu().numpy())
    return per.mean()


def _bucket(log_sigma: np.ndarray) -> np.ndarray:
    return np.searchsorted(SIGMA_BUCKETS, log_sigma)


def _bucket_names() -> list[str]:
    edges = ("-inf",) + tuple(f"{e:g}" for e in SIGMA_BUCKETS) + ("inf",)
    return [f"ln_sigma[{lo},{hi})" for lo, hi in zip(edges[:-1], edges[1:])]


class _Trainer:
    def __init__(self, dataset, model, config: TrainConfig, schedule: NoiseSchedule,
                 conditions: np.ndarray | None, out_dir, resume_from, checkpoint_extra=None):
        self.cfg = config
        self.checkpoint_extra = dict(checkpoint_extra or {})
        self.schedule = schedule
        self.denoiser = model if isinstance(model, PreconditionedDenoiser) else wrap_preconditioned(model, schedule)
        self.denoiser.schedule = schedule
        self.data = as_batch(dataset)
        if self.data.shape[0] == 0:
            raise ValueError("empty dataset")
        self.conditions = None if conditions is None else torch.as_tensor(conditions, dtype=self.data.dtype)
        self.params = [p for p in self.denoiser.parameters() if p.requires_grad]
        self.opt = torch.optim.Adam(self.params, lr=config.learning_rate, betas=(0.9, 0.999))
        self.ema = copy.deepcopy(self.denoiser.raw_net) if config.ema_decay else None
        self.rng = np.random.default_rng([config.seed, 0])
        self.drop_rng = np.random.default_rng([config.seed, 1])
        self.state = TrainState()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.last_good: Path | None = None
        if resume_from is not None:
            self._resume(resume_from)

    def _resume(self, path):
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
        self.denoiser.raw_net.load_state_dict(payload["parameters"])
        self.opt.load_state_dict(payload["optimizer"])
        self.rng.bit_generator.state = payload["rng_state"]
        self.drop_rng.bit_generator.state = payload["drop_rng_state"]
        if self.ema is not None and payload.get("ema_parameters") is not None:
            self.ema.load_state_dict(payload["ema_parameters"])
        st = payload["train_state"]
        self.state = TrainState(step=st["step"], loss_history=list(st["loss_history"]),
                                running_loss=st["running_loss"], initial_running_loss=st["initial_running_loss"])
        self.last_good = Path(path)

    def _checkpoint(self, name: str) -> Path:
        path = self.out_dir / name
        st = self.state
        extra = {
            "optimizer": self.opt.state_dict(),
            "rng_state": self.rng.bit_generator.state,
            "drop_rng_state": self.drop_rng.bit_generator.state,
            "train_config": asdict(self.cfg),
            "train_state": {"step": st.step, "loss_history": st.loss_history, "running_loss": st.running_loss,
                            "initial_running_loss": st.initial_running_loss},
            "ema_parameters": None if self.ema is None else self.ema.state_dict(),
            **self.checkpoint_extra,
        }
        save_checkpoint(path, self.denoiser, st.step, extra)
        return path

    def _log(self, record: dict) -> None:
        if self.out_dir is None:
            return
        with (self.out_dir / "train_log.jsonl").open("a") as fh:
            fh.write(json.dumps(record) + "\n")

    def step(self) -> tuple[float, np.ndarray, np.ndarray]:
        cfg = self.cfg
        idx = self.rng.integers(0, self.data.shape[0], size=cfg.batch_size)
        x = self.data[idx]
        sigma = sample_training_sigma(self.rng, cfg.batch_size, self.schedule)
        noise = self.rng.standard_normal(tuple(x.shape))
        cond = None
        if self.conditions is not None:
            keep = self.drop_rng.random(cfg.batch_size) >= cfg.condition_dropout_prob
            cond = self.conditions[idx] * torch.as_tensor(keep, dtype=x.dtype).reshape(-1, 1, 1, 1, 1)
        sig_t = torch.as_tensor(sigma, dtype=x.dtype)
        per = weighted_error(self.denoiser, x, sig_t, torch.as_tensor(noise, dtype=x.dtype), self.schedule, cond)
        if not torch.isfinite(per).all():
            raise NonFiniteLossError(sigma[~torch.isfinite(per).numpy()])
        loss = per.mean()
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.learning_rate > 0:
            self.opt.step()
        if self.ema is not None:
            with torch.no_grad():
                for pe, p in zip(self.ema.parameters(), self.denoiser.raw_net.parameters()):
                    pe.lerp_(p, 1.0 - cfg.ema_decay)
        return float(loss.detach()), sigma, per.detach().numpy()

    def run(self) -> TrainState:
        cfg, st = self.cfg, self.state
        window, sig_window, per_window = [], [], []
        t0 = time.perf_counter()
        while st.step < cfg.total_iterations:
            try:
                loss, sigma, per = self.step()
            except NonFiniteLossError as exc:
                raise TrainingAborted(st.step, exc, self.last_good) from exc
            st.step += 1
            st.loss_history.append(loss)
            st.running_loss = loss if st.running_loss is None else 0.98 * st.running_loss + 0.02 * loss
            if st.initial_running_loss is None:
                st.initial_running_loss = st.running_loss
            window.append(loss)
            sig_window.append(sigma)
            per_window.append(per)
            if st.step % cfg.log_every == 0 or st.step == cfg.total_iterations:
                buckets = _bucket(np.log(np.concatenate(sig_window)))
                per_all = np.concatenate(per_window)
                by_bucket = {name: float(per_all[buckets == b].mean())
                             for b, name in enumerate(_bucket_names()) if np.any(buckets == b)}
                self._log({"step": st.step, "loss": float(np.mean(window)), "running_loss": st.running_loss,
                           "wall_time": time.perf_counter() - t0, "sigma_buckets": by_bucket})
                window, sig_window, per_window = [], [], []
            if self.out_dir is not None and (st.step % cfg.checkpoint_every == 0 or st.step == cfg.total_iterations):
                path = self._checkpoint(f"checkpoint_{st.step:07d}.pt")
                self._checkpoint("last.pt")
                st.checkpoints.append(path)
                self.last_good = path
        if self.ema is not None:
            self.denoiser.raw_net.load_state_dict(self.ema.state_dict())
        return st


def train(dataset, model, config: TrainConfig, schedule: NoiseSchedule, out_dir=None,
          resume_from=None, checkpoint_extra: dict | None = None) -> TrainState:
    """Adam on the denoising objective.

    ``dataset`` is a sequence of videos (or ``(video, segmentation)`` pairs)
    or a (N, C, K, H, W) array; ``model`` is a raw network or an already
    wrapped :class:`PreconditionedDenoiser`. With ``out_dir`` set, writes
    ``train_log.jsonl`` and checkpoints every ``checkpoint_every`` steps.
    A non-finite loss raises :class:`TrainingAborted` and leaves the last
    good checkpoint in place. ``checkpoint_extra`` entries are stored
    verbatim in every checkpoint.
    """
    return _Trainer(dataset, model, config, schedule, None, out_dir, resume_from, checkpoint_extra).run()


def train_classifier_free(dataset, model, config: TrainConfig, schedule: NoiseSchedule, out_dir=None,
                          resume_from=None, checkpoint_extra: dict | None = None) -> TrainState:
    """As :func:`train`, feeding each clip's rendered segmentation as an
    extra channel that is zeroed with probability ``condition_dropout_prob``."""
    net = model.raw_net if isinstance(model, PreconditionedDenoiser) else model
    if not getattr(getattr(net, "config", None), "with_condition_channel", False):
        raise ValueError("classifier-free training needs a model built with_condition_channel")
    pairs = list(dataset)
    if not all(isinstance(p, tuple) and isinstance(p[1], SegmentationMap) for p in pairs):
        raise ValueError("classifier-free training needs (video, segmentation) pairs")
    videos = [p[0] for p in pairs]
    conds = np.stack([render_condition(seg, v.num_frames) for v, seg in pairs])
    return _Trainer(videos, model, config, schedule, conds, out_dir, resume_from, checkpoint_extra).run()
