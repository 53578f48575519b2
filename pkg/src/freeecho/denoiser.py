"""Denoiser contract ``D(x, sigma[, condition]) -> x_hat`` and its
implementations: the preconditioned wrapper around a raw network and the
closed-form Gaussian posterior mean used to check the samplers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .schedule import NoiseSchedule
from .unet3d import UNet3D, UNet3DConfig, build_unet3d

CHECKPOINT_FORMAT_VERSION = 1


class ContractViolation(RuntimeError):
    """A denoiser returned something other than an array shaped like its input."""


def _is_tensor(x) -> bool:
    return isinstance(x, torch.Tensor)


def _batch_sigma(sigma, x):
    """Broadcast a scalar or per-batch sigma against ``x``; returns the
    broadcastable sigma and its flat (B,) or scalar form."""
    if _is_tensor(x):
        s = torch.as_tensor(sigma, dtype=x.dtype, device=x.device)
    else:
        s = np.asarray(sigma, dtype=np.float64)
    if s.ndim == 0:
        return s, s
    flat = s.reshape(-1)
    return flat.reshape((-1,) + (1,) * (x.ndim - 1)), flat


def _coefficients(sigma, schedule: NoiseSchedule):
    lib = torch if _is_tensor(sigma) else np
    if (sigma <= 0).any() if _is_tensor(sigma) else np.any(sigma <= 0):
        raise ValueError(f"sigma must be positive, got {sigma}")
    sd = schedule.sigma_data
    star = lib.sqrt(sigma**2 + sd**2)
    c_skip = sd**2 / star**2 if schedule.edm_standard_skip else sd / star
    return c_skip, sigma * sd / star, 1.0 / star, lib.log(sigma) / 4.0


class PreconditionedDenoiser(nn.Module):
    """``D(s, sigma) = c_skip * s + c_out * F(c_in * s, ln(sigma) / 4)``.

    ``raw_net`` may be a torch module or any callable; with a plain
    callable the wrapper also works on numpy arrays.
    """

    def __init__(self, raw_net: Callable, schedule: NoiseSchedule):
        super().__init__()
        self.raw_net = raw_net
        self.schedule = schedule

    def raw_output(self, s, sigma, condition=None):
        sig, flat = _batch_sigma(sigma, s)
        _, _, c_in, c_noise = _coefficients(sig, self.schedule)
        noise_in = c_noise.reshape(-1) if flat.ndim else c_noise
        args = (c_in * s, noise_in) if condition is None else (c_in * s, noise_in, condition)
        out = self.raw_net(*args)
        if tuple(out.shape) != tuple(s.shape):
            raise ContractViolation(f"raw network returned shape {tuple(out.shape)} for input {tuple(s.shape)}")
        return out

    def forward(self, s, sigma, condition=None):
        sig, _ = _batch_sigma(sigma, s)
        c_skip, c_out, _, _ = _coefficients(sig, self.schedule)
        return c_skip * s + c_out * self.raw_output(s, sigma, condition)


def wrap_preconditioned(raw_net: Callable, schedule: NoiseSchedule) -> PreconditionedDenoiser:
    return PreconditionedDenoiser(raw_net, schedule)


@dataclass(frozen=True)
class GaussianOracle:
    """Data distribution ``N(mean, covariance)``; ``covariance`` may be a
    scalar variance (isotropic) or a full symmetric PSD matrix."""

    mean: np.ndarray | float
    covariance: np.ndarray | float

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.ndim == 0:
            if cov < 0:
                raise ValueError("variance must be non-negative")
        else:
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
                raise ValueError(f"covariance must be square, got {cov.shape}")
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError("covariance must be symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-12:
                raise ValueError("covariance must be positive semidefinite")


def gaussian_oracle_denoiser(oracle: GaussianOracle) -> Callable:
    """Exact posterior mean ``mu + S (S + sigma^2 I)^-1 (x - mu)`` for data
    drawn from ``oracle``; the last axis of ``x`` indexes the data dimension
    when the covariance is a matrix."""
    cov = np.asarray(oracle.covariance, dtype=np.float64)

    if cov.ndim == 0:
        var = float(cov)
        mean = oracle.mean

        def denoise(x, sigma, condition=None):
            sig, _ = _batch_sigma(sigma, x)
            mu = torch.as_tensor(mean, dtype=x.dtype) if _is_tensor(x) else np.asarray(mean)
            return mu + (var / (var + sig**2)) * (x - mu)

        return denoise

    evals, evecs = np.linalg.eigh(cov)
    mean = np.asarray(oracle.mean, dtype=np.float64)

    def denoise(x, sigma, condition=None):
        x = np.asarray(x, dtype=np.float64)
        sig = np.asarray(sigma, dtype=np.float64).reshape(-1, *([1] * (x.ndim - 1))) if np.ndim(sigma) else sigma
        # work in the eigenbasis, where the gain is diagonal
        z = (x - mean) @ evecs
        gain = evals / (evals + np.asarray(sig) ** 2)
        return mean + (gain * z) @ evecs.T

    return denoise


class TorchDenoiser:
    """Evaluate a torch denoiser on numpy arrays in inference mode.

    Inputs shaped ``(B, C, K, H, W)`` pass through; ``(K, H, W)`` and
    ``(B, K, H, W)`` single-channel volumes get a channel axis added and
    removed around the call. Evaluation runs in chunks of ``batch_size``.
    """

    def __init__(self, module: nn.Module, dtype=torch.float32, batch_size: int = 64):
        self.module = module.eval()
        self.dtype = dtype
        self.batch_size = batch_size

    def _to_model(self, x):
        if x.ndim == 3:
            return x[None, None], lambda y: y[0, 0]
        if x.ndim == 4:
            return x[:, None], lambda y: y[:, 0]
        return x, lambda y: y

    def __call__(self, x, sigma, condition=None):
        xm, undo = self._to_model(np.asarray(x))
        n = xm.shape[0]
        sig = np.array(np.broadcast_to(np.asarray(sigma, dtype=np.float64).reshape(-1), (n,))) if np.ndim(sigma) else np.full(n, float(sigma))
        cond = None
        if condition is not None:
            cond, _ = self._to_model(np.asarray(condition))
            cond = np.broadcast_to(cond, (n,) + cond.shape[1:])
        out = np.empty(xm.shape, dtype=np.float64)
        with torch.no_grad():
            for lo in range(0, n, self.batch_size):
                hi = min(n, lo + self.batch_size)
                xt = torch.as_tensor(np.ascontiguousarray(xm[lo:hi]), dtype=self.dtype)
                st = torch.as_tensor(sig[lo:hi], dtype=self.dtype)
                ct = None if cond is None else torch.as_tensor(np.ascontiguousarray(cond[lo:hi]), dtype=self.dtype)
                out[lo:hi] = self.module(xt, st, ct).double().numpy()
        return undo(out)


def save_checkpoint(path, denoiser: PreconditionedDenoiser, step: int, extra: dict | None = None) -> None:
    """Write a checkpoint: parameters keyed by name plus shapes, dtype,
    network config, schedule and the training step."""
    net = denoiser.raw_net
    state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": int(step),
        "model_config": net.config.to_dict(),
        "schedule": dict(denoiser.schedule.__dict__),
        "parameters": state,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "dtypes": {k: str(v.dtype) for k, v in state.items()},
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[PreconditionedDenoiser, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    cfg = UNet3DConfig(**payload["model_config"])
    net = build_unet3d(cfg, seed=None)
    net.load_state_dict(payload["parameters"])
    schedule = NoiseSchedule(**payload["schedule"])
    return PreconditionedDenoiser(net, schedule), payload


def describe_checkpoint(path) -> str:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    info = {k: payload[k] for k in ("format_version", "step", "model_config", "schedule")}
    info["num_parameters"] = int(sum(np.prod(s) for s in payload["shapes"].values()))
    return json.dumps(info, indent=2)


__all__ = [
    "ContractViolation",
    "GaussianOracle",
    "PreconditionedDenoiser",
    "TorchDenoiser",
    "UNet3D",
    "gaussian_oracle_denoiser",
    "load_checkpoint",
    "save_checkpoint",
    "wrap_preconditioned",
]
