"""Quality metrics and the per-segmentation evaluation protocol."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
DATA_RANGE = 2.0
TABLE_COLUMNS = ("Method", "Step t", "SSIM", "PSNR", "FID", "FVD")


# -- SSIM / PSNR --------------------------------------------------------------


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the last two axes."""
    n = w.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=-2) @ w
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=-1) @ w


def ssim(a, b, data_range: float = DATA_RANGE, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over an 11-tap Gaussian window (sigma 1.5) with
    ``C1 = (k1 L)^2``, ``C2 = (k2 L)^2``.

    Inputs are single images (H, W) or stacks (..., H, W); for stacks the
    per-frame means are averaged. Images smaller than the window use the
    largest odd window that fits.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise ValueError("ssim needs at least 2-D input")
    side = min(a.shape[-2:])
    if side < win_size:
        win_size = side if side % 2 else side - 1
    w = _gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    s_aa = _filter_valid(a * a, w) - mu_a * mu_a
    s_bb = _filter_valid(b * b, w) - mu_b * mu_b
    s_ab = _filter_valid(a * b, w) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * s_ab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2))
    per_frame = smap.mean(axis=(-2, -1))
    return float(np.mean(per_frame))


def psnr(a, b, max_value: float = DATA_RANGE, cap: float = PSNR_CAP, return_flag: bool = False):
    """``10 log10(max_value^2 / MSE)``; identical inputs give ``cap``
    (flagged when ``return_flag``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    capped = mse == 0.0
    value = cap if capped else min(cap, 10.0 * np.log10(max_value**2 / mse))
    if capped:
        log.debug("psnr: identical inputs, returning cap %.1f dB", cap)
    return (float(value), capped) if return_flag else float(value)


# -- Frechet distance ---------------------------------------------------------


def _psd_sqrt(mat: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < 0:
        log.debug("clipping negative eigenvalue %.3g of %s", vals.min(), what)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets:
    ``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    Covariances are maximum-likelihood (divide by N), so a set and the same
    set with every vector repeated fit the same Gaussian.
    """
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2:
        raise ValueError("features must be (N, D) arrays")
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature dimension mismatch {fa.shape[1]} vs {fb.shape[1]}")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ValueError("need at least two feature vectors per side")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False, bias=True))
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False, bias=True))
    root_a = _psd_sqrt(cov_a, "cov_a")
    # tr((S_a S_b)^(1/2)) = tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), a symmetric PSD root
    inner = root_a @ cov_b @ root_a
    ev = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if ev.min() < 0:
        log.debug("clipping negative eigenvalue %.3g in the cross term", ev.min())
    cross = np.sqrt(np.clip(ev, 0.0, None)).sum()
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(d, 0.0)


# -- feature extractors -------------------------------------------------------


@dataclass(frozen=True)
class FeatureExtractor:
    name: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, batch) -> np.ndarray:
        out = np.asarray(self.fn(np.asarray(batch, dtype=np.float64)))
        if out.ndim != 2 or out.shape[1] != self.dim:
            raise ValueError(f"{self.name} returned shape {out.shape}, expected (N, {self.dim})")
        return out


def _random_filters(seed: int, n: int, size: int) -> torch.Tensor:
    g = np.random.default_rng(seed)
    w = g.standard_normal((n, 1, size, size))
    w -= w.mean(axis=(2, 3), keepdims=True)
    w /= np.sqrt((w**2).sum(axis=(2, 3), keepdims=True))
    return torch.as_tensor(w)


def _image_features(images: np.ndarray, filters: torch.Tensor, grid: int) -> np.ndarray:
    x = torch.as_tensor(images, dtype=torch.float64)[:, None]
    resp = torch.tanh(2.0 * F.conv2d(x, filters))
    pooled = F.adaptive_avg_pool2d(resp, grid).flatten(1)
    energy = resp.abs().mean(dim=(2, 3))
    intensity = F.adaptive_avg_pool2d(x, grid).flatten(1)
    return torch.cat([pooled, energy, intensity], dim=1).numpy()


def desk_image_extractor(seed: int = 2024, num_filters: int = 12, size: int = 5, grid: int = 2) -> FeatureExtractor:
    """Fixed random zero-mean conv filters + tanh, pooled on a coarse grid,
    plus filter energies and the pooled intensity layout. Input (N, H, W)."""
    filters = _random_filters(seed, num_filters, size)
    dim = num_filters * grid * grid + num_filters + grid * grid
    return FeatureExtractor(f"desk-randconv-img-s{seed}", dim, lambda imgs: _image_features(imgs, filters, grid))


def desk_video_extractor(seed: int = 2024, num_filters: int = 12, size: int = 5, grid: int = 2) -> FeatureExtractor:
    """Frame-stacked variant: the image features averaged over frames,
    concatenated with the same features of absolute frame differences.
    Input (N, K, H, W)."""
    filters = _random_filters(seed, num_filters, size)
    per = num_filters * grid * grid + num_filters + grid * grid

    def fn(videos):
        n, k = videos.shape[:2]
        frames = _image_features(videos.reshape(n * k, *videos.shape[2:]), filters, grid).reshape(n, k, per)
        if k > 1:
            diffs = np.abs(np.diff(videos, axis=1))
            motion = _image_features(diffs.reshape(n * (k - 1), *videos.shape[2:]), filters, grid).reshape(n, k - 1, per)
            motion = motion.mean(axis=1)
        else:
            motion = np.zeros((n, per))
        return np.concatenate([frames.mean(axis=1), motion], axis=1)

    return FeatureExtractor(f"desk-randconv-vid-s{seed}", 2 * per, fn)


# -- protocol -----------------------------------------------------------------


@dataclass
class MetricReport:
    method: str
    step: int | None
    ssim: float
    psnr: float
    fid: float
    fvd: float
    l2: float
    num_conditions: int
    samples_per_condition: int
    num_generated: int
    psnr_capped: int
    image_extractor: str
    video_extractor: str
    per_condition: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _as_video_array(v) -> np.ndarray:
    return np.asarray(getattr(v, "pixels", v), dtype=np.float64)


def evaluate_method(generator, test_set, samples_per_condition: int = 10,
                    image_extractor: FeatureExtractor | None = None,
                    video_extractor: FeatureExtractor | None = None,
                    seed: int = 0, method: str = "method", step: int | None = None) -> MetricReport:
    """Generate ``samples_per_condition`` clips per test segmentation (distinct
    seeds) and score them against the ground-truth clip of that segmentation.

    SSIM, PSNR and per-pixel L2 are averaged over (sample, ground truth)
    pairs; FID pools frame features and FVD pools clip features of all
    generated vs all ground-truth clips. ``generator(seg, seed)`` returns a
    (K, H, W) clip; a ``generator.batch(seg, seeds)`` method, if present, is
    used instead. Conditions whose generation fails are recorded and left out.
    """
    image_extractor = image_extractor or desk_image_extractor()
    video_extractor = video_extractor or desk_video_extractor()
    gen_videos, real_videos, per_condition, failures = [], [], [], []
    ssims, psnrs, l2s, capped = [], [], [], 0
    for ci, (gt, seg) in enumerate(test_set):
        gt_px = _as_video_array(gt)
        seeds = [seed * 1_000_003 + ci * samples_per_condition + j for j in range(samples_per_condition)]
        try:
            if hasattr(generator, "batch"):
                samples = np.asarray(generator.batch(seg, seeds), dtype=np.float64)
            else:
                samples = np.stack([_as_video_array(generator(seg, s)) for s in seeds])
            if samples.shape[1:] != gt_px.shape or not np.all(np.isfinite(samples)):
                raise ValueError(f"generator returned {samples.shape} / non-finite for ground truth {gt_px.shape}")
        except Exception as exc:  # a failing condition is reported, not fatal
            log.warning("condition %d failed: %s", ci, exc)
            failures.append({"condition": ci, "error": f"{type(exc).__name__}: {exc}"})
            continue
        c_ssim, c_psnr, c_l2 = [], [], []
        for smp in samples:
            c_ssim.append(ssim(smp, gt_px))
            value, flag = psnr(smp, gt_px, return_flag=True)
            c_psnr.append(value)
            capped += flag
            c_l2.append(float(np.mean((smp - gt_px) ** 2)))
        ssims += c_ssim
        psnrs += c_psnr
        l2s += c_l2
        per_condition.append({"condition": ci, "identifier": getattr(gt, "identifier", str(ci)),
                              "ssim": float(np.mean(c_ssim)), "psnr": float(np.mean(c_psnr)),
                              "l2": float(np.mean(c_l2))})
        gen_videos.append(samples)
        real_videos.append(gt_px)

    if not gen_videos:
        raise RuntimeError(f"every condition failed: {failures}")
    gen = np.concatenate(gen_videos)
    real = np.stack(real_videos)
    fid = frechet_distance(image_extractor(gen.reshape(-1, *gen.shape[-2:])),
                           image_extractor(real.reshape(-1, *real.shape[-2:])))
    fvd = frechet_distance(video_extractor(gen), video_extractor(real)) if len(real) >= 2 else float("nan")
    return MetricReport(
        method=method, step=step,
        ssim=float(np.mean(ssims)), psnr=float(np.mean(psnrs)), fid=fid, fvd=fvd, l2=float(np.mean(l2s)),
        num_conditions=len(per_condition), samples_per_condition=samples_per_condition,
        num_generated=int(gen.shape[0]), psnr_capped=int(capped),
        image_extractor=image_extractor.name, video_extractor=video_extractor.name,
        per_condition=per_condition, failures=failures,
    )


def format_table(reports, with_l2: bool = False) -> str:
    """Plain-text table with one row per report and a footer naming the
    feature extractors behind FID/FVD."""
    cols = list(TABLE_COLUMNS) + (["L2"] if with_l2 else [])
    rows = []
    for r in reports:
        row = [r.method, "-" if r.step is None else str(r.step), f"{r.ssim:.4f}", f"{r.psnr:.2f}",
               f"{r.fid:.4f}", f"{r.fvd:.4f}"]
        if with_l2:
            row.append(f"{r.l2:.5f}")
        rows.append(row)
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(cols)]
    line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))
    out = [line(cols), "-+-".join("-" * w for w in widths)] + [line(r) for r in rows]
    names = sorted({(r.image_extractor, r.video_extractor) for r in reports})
    for img, vid in names:
        out.append(f"FID features: {img}; FVD features: {vid} "
                   "(substitute extractors; not comparable with InceptionV3 / R(2+1)D scores)")
    failed = sum(len(r.failures) for r in reports)
    if failed:
        out.append(f"{failed} condition(s) failed to generate; see per-report failures")
    return "\n".join(out) + "\n"
