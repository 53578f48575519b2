"""Pseudo-video construction from a segmentation map.

Labels become flat intensities, the intensity histogram of that image is
matched to the training-data histogram with entropic optimal transport
(1D, squared cost, log-domain Sinkhorn), and the barycentric map of the
plan re-colors each label. The static result is replicated over K frames
and noised to the level where the truncated reverse ODE starts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import SegmentationMap
from .sampler import sigma_at_step
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

DEFAULT_BINS = 64
DEFAULT_EPSILON = 1e-3

# darkest to brightest when no explicit mapping is configured
_LABEL_ORDER = ("background", "myocardium", "LV endocardium", "LA endocardium")


@dataclass(frozen=True)
class IntensityHistogram:
    bin_edges: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        masses = np.asarray(self.masses, dtype=np.float64)
        if edges.ndim != 1 or masses.shape != (edges.size - 1,):
            raise ValueError("need B + 1 edges for B masses")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if np.any(masses < 0) or abs(masses.sum() - 1.0) > 1e-9:
            raise ValueError(f"masses must be non-negative and sum to 1 (sum={masses.sum()})")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "masses", masses)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def num_bins(self) -> int:
        return self.masses.size


def default_bin_edges(bins: int = DEFAULT_BINS, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return np.linspace(lo, hi, bins + 1)


def bin_index(values, edges) -> np.ndarray:
    """Bin of each value; values outside the edges land in the end bins."""
    idx = np.searchsorted(edges, np.asarray(values, dtype=np.float64), side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def histogram(values, edges=None) -> IntensityHistogram:
    edges = default_bin_edges() if edges is None else np.asarray(edges, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot histogram an empty array")
    counts = np.bincount(bin_index(values, edges), minlength=len(edges) - 1).astype(np.float64)
    return IntensityHistogram(edges, counts / counts.sum())


def wasserstein1(a: IntensityHistogram, b: IntensityHistogram) -> float:
    """W1 between two histograms on the same bins, treating mass as sitting
    at bin centers: integral of |CDF_a - CDF_b|."""
    if not np.array_equal(a.bin_edges, b.bin_edges):
        raise ValueError("histograms must share bin edges")
    cdf_gap = np.abs(np.cumsum(a.masses - b.masses))[:-1]
    return float(np.sum(cdf_gap * np.diff(a.centers)))


def dataset_intensity_histogram(dataset, bins: int = DEFAULT_BINS, max_videos: int | None = None,
                                frames_per_video: int | None = None, seed: int = 0,
                                edges=None) -> IntensityHistogram:
    """Pooled pixel histogram over a subsample of the training videos.

    ``dataset`` holds ``(VideoVolume, SegmentationMap)`` pairs or bare videos.
    """
    videos = [item[0] if isinstance(item, tuple) else item for item in dataset]
    if not videos:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    if max_videos is not None and max_videos < len(videos):
        videos = [videos[i] for i in sorted(rng.choice(len(videos), max_videos, replace=False))]
    edges = default_bin_edges(bins) if edges is None else edges
    counts = np.zeros(len(edges) - 1)
    for v in videos:
        px = v.pixels
        if frames_per_video is not None and frames_per_video < px.shape[0]:
            px = px[np.sort(rng.choice(px.shape[0], frames_per_video, replace=False))]
        counts += np.bincount(bin_index(px.ravel(), edges), minlength=len(edges) - 1)
    return IntensityHistogram(edges, counts / counts.sum())


# -- label intensities --------------------------------------------------------


def default_label_intensities(label_set: dict[int, str], lo: float = -1.0, hi: float = 1.0) -> dict[int, float]:
    """Evenly spaced intensities, background darkest, then myocardium, then
    the chambers; unknown names follow in id order."""

    def rank(item):
        lid, name = item
        return (_LABEL_ORDER.index(name) if name in _LABEL_ORDER else len(_LABEL_ORDER), lid)

    ordered = [lid for lid, _ in sorted(label_set.items(), key=rank)]
    values = np.linspace(lo, hi, len(ordered)) if len(ordered) > 1 else np.array([lo])
    return {lid: float(v) for lid, v in zip(ordered, values)}


def labels_to_intensity(seg: SegmentationMap, mapping: dict[int, float] | None = None) -> np.ndarray:
    mapping = default_label_intensities(seg.label_set) if mapping is None else mapping
    present = np.unique(seg.labels)
    missing = [int(l) for l in present if int(l) not in mapping]
    if missing:
        raise KeyError(f"no intensity for labels {missing}")
    vals = [mapping[int(l)] for l in present]
    if len(set(vals)) != len(vals):
        raise ValueError("label intensities must be distinct")
    lut_keys = np.array(sorted(mapping))
    lut_vals = np.array([mapping[k] for k in lut_keys], dtype=np.float64)
    return lut_vals[np.searchsorted(lut_keys, seg.labels)]


# -- Sinkhorn -----------------------------------------------------------------


@dataclass
class TransportPlan:
    coupling: np.ndarray
    source: IntensityHistogram
    target: IntensityHistogram
    epsilon: float
    iterations: int
    marginal_error: float
    converged: bool
    cost_trace: list[float] = field(default_factory=list)
    dual_trace: list[float] = field(default_factory=list)

    @property
    def cost(self) -> float:
        c = self.source.centers[:, None] - self.target.centers[None, :]
        return float(np.sum(self.coupling * c * c))

    def barycentric_map(self) -> np.ndarray:
        """Mean target intensity of each source bin (NaN where the bin
        carries no mass)."""
        rows = self.coupling.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = self.coupling @ self.target.centers / rows
        out[rows <= 0] = np.nan
        return out


def _lse(m, axis):
    top = m.max(axis=axis, keepdims=True)
    return (top + np.log(np.exp(m - top).sum(axis=axis, keepdims=True))).squeeze(axis)


def _mass(m) -> float:
    with np.errstate(over="ignore"):  # an overshooting trial step scores -inf and is rejected
        return float(np.exp(m).sum())


def _half_step(u, v, neg_k, a, b, log_a, dual, omega):
    """Sinkhorn update of ``u`` (rows of ``neg_k``) with safeguarded
    over-relaxation; returns the new potential and dual / epsilon."""
    with np.errstate(over="ignore", under="ignore", divide="ignore"):
        rows = np.exp(u[:, None] + v[None, :] + neg_k).sum(axis=1)
    if np.all((rows > 1e-250) & (rows < 1e250)):
        # lse_j(v_j + k_ij) = log(rows_i) - u_i, with no shift needed
        u_new = u + log_a - np.log(rows)
    else:
        u_new = log_a - _lse(v[None, :] + neg_k, 1)
        rows = None
    d_new = u_new @ a + v @ b  # a plain update makes the plan sum to one
    if omega > 1:
        u_try = u + omega * (u_new - u)
        if rows is not None:
            with np.errstate(over="ignore"):
                mass = float(rows @ np.exp(u_try - u))
        else:
            mass = _mass(u_try[:, None] + v[None, :] + neg_k)
        d_try = u_try @ a + v @ b - mass + 1.0
        if d_try >= dual:
            return u_try, d_try
    return u_new, d_new


def sinkhorn(source: IntensityHistogram, target: IntensityHistogram, epsilon: float = DEFAULT_EPSILON,
             max_iters: int = 50000, tol: float = 1e-6, trace_every: int = 10,
             overrelaxation: float = 1.95) -> TransportPlan:
    """Entropic OT between two 1D histograms with cost ``(x - y)^2``.

    Log-domain alternating updates of the dual potentials on the bins that
    carry mass; stops when the L1 error of both marginals is below ``tol``
    (checked every ``trace_every`` iterations). Each half-step tries the
    over-relaxed update ``f + omega * (f_sinkhorn - f)`` and keeps it only if
    the dual objective does not drop, otherwise takes the plain Sinkhorn
    update. Either way the dual ascends monotonically to the same fixed
    point; ``overrelaxation=1`` is textbook Sinkhorn. Non-convergence is
    reported on the plan, not raised.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not 1.0 <= overrelaxation < 2.0:
        raise ValueError("overrelaxation must lie in [1, 2)")
    if trace_every < 1:
        raise ValueError("trace_every must be positive")
    rs = np.flatnonzero(source.masses > 0)
    cs = np.flatnonzero(target.masses > 0)
    a, b = source.masses[rs], target.masses[cs]
    log_a, log_b = np.log(a), np.log(b)
    cost = (source.centers[rs][:, None] - target.centers[cs][None, :]) ** 2
    neg_k = -cost / epsilon
    neg_kt = np.ascontiguousarray(neg_k.T)
    omega = overrelaxation

    # potentials in units of epsilon: f = epsilon * u, g = epsilon * v
    u = np.zeros(a.size)
    v = np.zeros(b.size)
    # dual / epsilon = u.a + v.b - sum(plan) + 1
    dual = 1.0 - _mass(neg_k)
    cost_trace, dual_trace = [], []
    err = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        u, dual = _half_step(u, v, neg_k, a, b, log_a, dual, omega)
        v, dual = _half_step(v, u, neg_kt, b, a, log_b, dual, omega)
        if it % trace_every and it != max_iters:
            continue
        p = np.exp(u[:, None] + v[None, :] + neg_k)
        err = np.abs(p.sum(axis=1) - a).sum() + np.abs(p.sum(axis=0) - b).sum()
        cost_trace.append(float(np.sum(p * cost)))
        dual_trace.append(float(epsilon * dual))
        if err < tol:
            break
    converged = bool(err < tol)
    if not converged:
        log.warning("sinkhorn stopped after %d iterations with marginal error %.3g", it, err)

    full = np.zeros((source.num_bins, target.num_bins))
    full[np.ix_(rs, cs)] = p
    return TransportPlan(full, source, target, epsilon, it, float(err), converged, cost_trace, dual_trace)


def transport_remap(image, plan: TransportPlan) -> np.ndarray:
    """Send each pixel to the barycentric image of its source bin."""
    image = np.asarray(image, dtype=np.float64)
    edges = plan.source.bin_edges
    idx = bin_index(image, edges)
    tmap = plan.barycentric_map()
    supported = np.flatnonzero(~np.isnan(tmap))
    if supported.size == 0:
        raise ValueError("transport plan carries no mass")
    off = ~np.isin(idx, supported) | (image < edges[0]) | (image > edges[-1])
    if off.any():
        log.warning("transport_remap: %d pixels outside the plan's source support, clamped", int(off.sum()))
        nearest = supported[np.abs(supported[None, :] - idx[off][:, None]).argmin(axis=1)]
        idx = idx.copy()
        idx[off] = nearest
    return tmap[idx]


# -- pseudo videos ------------------------------------------------------------


@dataclass
class PseudoVideo:
    frames: np.ndarray
    intensity_image: np.ndarray
    plan: TransportPlan | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if not np.all(self.frames == self.frames[:1]):
            raise ValueError("pseudo-video frames must be identical")


def replicate_frames(image, frames: int) -> np.ndarray:
    return np.repeat(np.asarray(image, dtype=np.float64)[None], frames, axis=0)


def _noised(clean, schedule, t_i, rng):
    sigma = sigma_at_step(schedule, t_i)
    return clean + sigma * rng.standard_normal(clean.shape)


def free_echo_pseudo_video(seg: SegmentationMap, dataset_hist: IntensityHistogram, frames: int,
                           mapping: dict[int, float] | None = None, epsilon: float = DEFAULT_EPSILON,
                           **sinkhorn_kw) -> PseudoVideo:
    raw = labels_to_intensity(seg, mapping)
    plan = sinkhorn(histogram(raw, dataset_hist.bin_edges), dataset_hist, epsilon, **sinkhorn_kw)
    image = transport_remap(raw, plan)
    return PseudoVideo(replicate_frames(image, frames), image, plan)


def make_free_echo_init(seg: SegmentationMap, dataset_hist: IntensityHistogram, frames: int,
                        schedule: NoiseSchedule, t_i: int, rng: np.random.Generator,
                        mapping: dict[int, float] | None = None, epsilon: float = DEFAULT_EPSILON,
                        **sinkhorn_kw) -> tuple[np.ndarray, PseudoVideo]:
    """Noisy start ``pseudo + sigma(t_i) * n`` for a truncated reverse run,
    together with the clean pseudo-video."""
    pseudo = free_echo_pseudo_video(seg, dataset_hist, frames, mapping, epsilon, **sinkhorn_kw)
    return _noised(pseudo.frames, schedule, t_i, rng), pseudo


def make_sdedit_init(seg: SegmentationMap, palette: dict[int, float] | None, frames: int,
                     schedule: NoiseSchedule, t_i: int, rng: np.random.Generator) -> tuple[np.ndarray, PseudoVideo]:
    """Same as :func:`make_free_echo_init` with a fixed colorization and no
    histogram matching. ``palette=None`` uses the default label intensities."""
    image = labels_to_intensity(seg, palette)
    pseudo = PseudoVideo(replicate_frames(image, frames), image)
    return _noised(pseudo.frames, schedule, t_i, rng), pseudo


def palette_of(seg: SegmentationMap, image) -> dict[int, float]:
    """Per-label intensity of an image that is constant on each label."""
    image = np.asarray(image)
    out = {}
    for lid in np.unique(seg.labels):
        vals = np.unique(image[seg.labels == lid])
        if vals.size != 1:
            raise ValueError(f"label {lid} is not a single intensity")
        out[int(lid)] = float(vals[0])
    return out
