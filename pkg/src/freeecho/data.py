"""Video volumes, segmentation maps, the synthetic toy-echo generator and
the on-disk dataset layouts."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

CAMUS_LABELS = {0: "background", 1: "LV endocardium", 2: "myocardium", 3: "LA endocardium"}
ECHONET_LABELS = {0: "background", 1: "LV endocardium"}

# train/val/test sizes used for the public datasets
CAMUS_SPLITS = (400, 50, 50)
ECHONET_SPLITS = (8024, 1003, 1003)

CONTAINER_VERSION = 1
FORMATS = ("toy-container", "camus-layout", "echonet-layout")


def normalize(pixels, max_value: float = 255.0) -> np.ndarray:
    """Affine map of ``[0, max_value]`` onto ``[-1, 1]``; out-of-range values
    are clamped and counted."""
    x = np.asarray(pixels, dtype=np.float64)
    bad = int(np.count_nonzero((x < 0) | (x > max_value)))
    if bad:
        log.warning("normalize: clamped %d out-of-range values", bad)
        x = np.clip(x, 0.0, max_value)
    return x * (2.0 / max_value) - 1.0


def denormalize(x, max_value: float = 255.0) -> np.ndarray:
    y = np.asarray(x, dtype=np.float64)
    bad = int(np.count_nonzero((y < -1) | (y > 1)))
    if bad:
        log.warning("denormalize: clamped %d out-of-range values", bad)
        y = np.clip(y, -1.0, 1.0)
    return (y + 1.0) * (max_value / 2.0)


def to_uint8(x) -> np.ndarray:
    return np.rint(denormalize(np.clip(x, -1.0, 1.0))).astype(np.uint8)


@dataclass
class VideoVolume:
    """``K x H x W`` (or ``K x H x W x C``) pixels in ``[-1, 1]``."""

    pixels: np.ndarray
    frame_rate: float = 50.0
    identifier: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim not in (3, 4):
            raise ValueError(f"video must be K x H x W (x C), got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError(f"video {self.identifier!r} has non-finite pixels")
        if self.pixels.min() < -1.0 or self.pixels.max() > 1.0:
            raise ValueError(f"video {self.identifier!r} outside [-1, 1]")

    @property
    def num_frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.pixels.shape[1:3]


@dataclass
class SegmentationMap:
    labels: np.ndarray
    label_set: dict[int, str] = field(default_factory=lambda: dict(CAMUS_LABELS))

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2 or not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"segmentation must be an H x W integer raster, got {self.labels.dtype} {self.labels.shape}")
        self.label_set = {int(k): v for k, v in self.label_set.items()}
        unknown = set(np.unique(self.labels).tolist()) - set(self.label_set)
        if unknown:
            raise ValueError(f"labels {sorted(unknown)} not in label set {sorted(self.label_set)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


class Dataset(list):
    """List of ``(VideoVolume, SegmentationMap)`` pairs that also remembers
    which entries were rejected while loading, and any split manifest."""

    def __init__(self, items=(), rejects=None, splits=None):
        super().__init__(items)
        self.rejects: list[tuple[str, str]] = list(rejects or [])
        self.splits: dict[str, list[str]] = dict(splits or {})

    def split(self, name: str) -> "Dataset":
        ids = set(self.splits.get(name, []))
        return Dataset([p for p in self if p[0].identifier in ids], splits={name: sorted(ids)})


# -- toy generator ------------------------------------------------------------


@dataclass
class ToyDatasetConfig:
    num_videos: int = 64
    frames: int = 8
    height: int = 32
    width: int = 32
    num_labels: int = 4
    motion_amplitude: float = 0.25
    speckle_scale: float = 0.3
    cone_mask: bool = True
    geometry_jitter: float = 0.08
    seed: int = 0
    frame_rate: float = 50.0

    def __post_init__(self):
        if self.num_labels not in (2, 4):
            raise ValueError("num_labels must be 2 (LV only) or 4 (LV, myocardium, LA)")
        if min(self.frames, self.height, self.width) < 2 or self.num_videos < 0:
            raise ValueError("degenerate toy dataset shape")
        if not 0 <= self.motion_amplitude < 1:
            raise ValueError("motion_amplitude must lie in [0, 1)")
        if not 0 <= self.geometry_jitter <= 0.2:
            raise ValueError("geometry_jitter must lie in [0, 0.2]")


# normalized geometry: rows/cols in [0, 1], apex of the sector at the top
_LV = dict(cy=0.44, cx=0.5, ay=0.22, ax=0.13)
_MYO_THICKNESS = 0.075
_LA = dict(cy=0.84, cx=0.5, ay=0.075, ax=0.11)
_CONE = dict(apex_y=0.0, apex_x=0.5, radius=0.98, half_angle=math.radians(40))
_INTENSITY = {"tissue": 0.3, "myocardium": 0.6, "chamber": 0.85}


def _toy_geometry(cfg: ToyDatasetConfig, index: int) -> dict:
    g = np.random.default_rng([cfg.seed, index, 0]) if cfg.geometry_jitter else None
    j = cfg.geometry_jitter

    def jit(v, scale=1.0):
        return v + (scale * j * g.uniform(-1, 1) if g is not None else 0.0)

    lv = dict(cy=jit(_LV["cy"], 0.5), cx=jit(_LV["cx"], 0.5), ay=_LV["ay"] * (1 + jit(0.0)), ax=_LV["ax"] * (1 + jit(0.0)))
    la = dict(cy=lv["cy"] + (_LA["cy"] - _LV["cy"]), cx=jit(lv["cx"], 0.3), ay=_LA["ay"], ax=_LA["ax"] * (1 + jit(0.0)))
    geo = dict(lv=lv, la=la)
    if lv["cy"] + lv["ay"] + _MYO_THICKNESS >= 1.0 or la["cy"] + la["ay"] >= 1.0 or lv["cx"] - lv["ax"] - _MYO_THICKNESS <= 0:
        raise ValueError("toy geometry exceeds the frame")
    return geo


def _ellipse(yy, xx, cy, cx, ay, ax):
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _frame_labels(geo: dict, k: int, cfg: ToyDatasetConfig, yy, xx) -> np.ndarray:
    """Labels (0 bg, 1 LV, 2 myocardium, 3 LA) for frame ``k``."""
    phase = (1.0 - math.cos(2.0 * math.pi * k / cfg.frames)) / 2.0
    shrink = 1.0 - cfg.motion_amplitude * phase
    grow = 1.0 + 0.5 * cfg.motion_amplitude * phase
    lv, la = geo["lv"], geo["la"]
    ay, ax = lv["ay"] * shrink, lv["ax"] * shrink
    labels = np.zeros(yy.shape, dtype=np.int64)
    labels[_ellipse(yy, xx, lv["cy"], lv["cx"], ay + _MYO_THICKNESS, ax + _MYO_THICKNESS)] = 2
    labels[_ellipse(yy, xx, lv["cy"], lv["cx"], ay, ax)] = 1
    labels[_ellipse(yy, xx, la["cy"], la["cx"], la["ay"] * grow, la["ax"] * grow)] = 3
    return labels


def _grid(cfg: ToyDatasetConfig):
    ys = (np.arange(cfg.height) + 0.5) / cfg.height
    xs = (np.arange(cfg.width) + 0.5) / cfg.width
    return np.meshgrid(ys, xs, indexing="ij")


def _cone(cfg: ToyDatasetConfig, yy, xx) -> np.ndarray:
    if not cfg.cone_mask:
        return np.ones(yy.shape, dtype=bool)
    dy, dx = yy - _CONE["apex_y"], xx - _CONE["apex_x"]
    r = np.hypot(dy, dx)
    return (r <= _CONE["radius"]) & (np.abs(np.arctan2(dx, dy)) <= _CONE["half_angle"])


def toy_label_sequence(cfg: ToyDatasetConfig, index: int) -> np.ndarray:
    """Full-anatomy labels for every frame of toy video ``index`` (K x H x W)."""
    yy, xx = _grid(cfg)
    geo = _toy_geometry(cfg, index)
    return np.stack([_frame_labels(geo, k, cfg, yy, xx) for k in range(cfg.frames)])


def _speckle(cfg: ToyDatasetConfig, index: int) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    if cfg.speckle_scale == 0:
        return np.ones((cfg.height, cfg.width))
    rng = np.random.default_rng([cfg.seed, index, 1])
    shape = 1.0 / cfg.speckle_scale**2
    field_ = rng.gamma(shape, 1.0 / shape, size=(cfg.height, cfg.width))
    field_ = gaussian_filter(field_, 0.5, mode="reflect")
    return field_ / field_.mean()


def generate_toy_video(cfg: ToyDatasetConfig, index: int) -> tuple[VideoVolume, SegmentationMap]:
    yy, xx = _grid(cfg)
    labels = toy_label_sequence(cfg, index)
    tone = np.full(labels.shape, _INTENSITY["tissue"])
    tone[labels == 2] = _INTENSITY["myocardium"]
    tone[(labels == 1) | (labels == 3)] = _INTENSITY["chamber"]
    img = np.clip(tone * _speckle(cfg, index)[None], 0.0, 1.0) * _cone(cfg, yy, xx)[None]
    frames = np.rint(img * 255.0).astype(np.uint8)
    video = VideoVolume(normalize(frames), frame_rate=cfg.frame_rate, identifier=f"toy{index:05d}")
    ed = labels[0]
    if cfg.num_labels == 2:
        seg = SegmentationMap((ed == 1).astype(np.int64), dict(ECHONET_LABELS))
    else:
        seg = SegmentationMap(ed, dict(CAMUS_LABELS))
    return video, seg


def generate_toy_dataset(cfg: ToyDatasetConfig) -> Dataset:
    """Toy echo clips: a bright ventricle that contracts and re-expands
    once over the clip inside a darker sector, with static speckle. The
    map labels frame 0, where the ventricle is largest."""
    return Dataset(generate_toy_video(cfg, i) for i in range(cfg.num_videos))


# -- frame selection ----------------------------------------------------------


def take_first_frames(video: VideoVolume, k: int = 24, loop: bool = False) -> VideoVolume:
    n = video.num_frames
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        if not loop:
            raise ValueError(f"video {video.identifier!r} has {n} frames, need {k}")
        log.info("looping %r from %d to %d frames", video.identifier, n, k)
        idx = np.arange(k) % n
    else:
        idx = np.arange(k)
    return VideoVolume(video.pixels[idx], frame_rate=video.frame_rate, identifier=video.identifier)


# -- disk formats -------------------------------------------------------------


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8), mode="L").save(path)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I;16", "I"):
            im = im.convert("L")
        return np.asarray(im)


def save_video_frames(video_pixels: np.ndarray, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(to_uint8(video_pixels)):
        p = out / f"{k:03d}.png"
        _write_png(p, frame)
        paths.append(p)
    return paths


def save_gif(video_pixels: np.ndarray, path, frame_rate: float = 10.0) -> Path:
    """Animated preview of a normalized single-channel clip."""
    path = Path(path)
    frames = [Image.fromarray(f, mode="L") for f in to_uint8(video_pixels)]
    frames[0].save(path, save_all=True, append_images=frames[1:], duration=int(1000 / frame_rate), loop=0)
    return path


def load_segmentation(path, label_set: dict[int, str] | None = None) -> SegmentationMap:
    """Label raster from a PNG (pixel value = label id) or from a toy-container
    video directory holding ``segmentation.png``."""
    path = Path(path)
    if path.is_dir():
        meta = path / "meta.json"
        if label_set is None and meta.exists():
            label_set = {int(k): v for k, v in json.loads(meta.read_text())["label_set"].items()}
        path = path / "segmentation.png"
    labels = _read_png(path).astype(np.int64)
    return SegmentationMap(labels, dict(label_set or CAMUS_LABELS))


def save_toy_container(dataset, root, splits: dict | None = None) -> Path:
    """One directory per video: ``frames/NNN.png`` (8-bit), ``segmentation.png``
    (label ids as pixel values) and ``meta.json``. ``manifest.json`` at the
    root lists the videos and their split."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for video, seg in dataset:
        if video.pixels.ndim != 3:
            raise ValueError("toy container stores single-channel videos")
        vid_dir = root / video.identifier
        save_video_frames(video.pixels, vid_dir / "frames")
        _write_png(vid_dir / "segmentation.png", seg.labels.astype(np.uint8))
        meta = {
            "format_version": CONTAINER_VERSION,
            "identifier": video.identifier,
            "frame_rate": video.frame_rate,
            "num_frames": video.num_frames,
            "height": video.frame_shape[0],
            "width": video.frame_shape[1],
            "label_set": {str(k): v for k, v in seg.label_set.items()},
        }
        (vid_dir / "meta.json").write_text(json.dumps(meta, indent=2))
        ids.append(video.identifier)
    manifest = {"format_version": CONTAINER_VERSION, "videos": ids, "splits": splits or {"train": ids}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def _load_frames(frame_dir: Path) -> np.ndarray:
    paths = sorted(frame_dir.glob("*.png"))
    if not paths:
        raise ValueError(f"no frames in {frame_dir}")
    frames = [_read_png(p) for p in paths]
    if any(f.shape != frames[0].shape or f.ndim != 2 for f in frames):
        raise ValueError(f"inconsistent frame shapes in {frame_dir}")
    if frames[0].dtype != np.uint8:
        raise ValueError(f"frames in {frame_dir} are not 8-bit")
    return np.stack(frames)


def _load_toy_entry(vid_dir: Path):
    meta = json.loads((vid_dir / "meta.json").read_text())
    if meta.get("format_version") != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {meta.get('format_version')!r}")
    frames = _load_frames(vid_dir / "frames")
    if frames.shape != (meta["num_frames"], meta["height"], meta["width"]):
        raise ValueError(f"frames {frames.shape} disagree with meta")
    labels = _read_png(vid_dir / "segmentation.png").astype(np.int64)
    if labels.shape != frames.shape[1:]:
        raise ValueError("segmentation shape disagrees with frames")
    label_set = {int(k): v for k, v in meta["label_set"].items()}
    video = VideoVolume(normalize(frames), frame_rate=float(meta["frame_rate"]), identifier=meta["identifier"])
    return video, SegmentationMap(labels, label_set)


def _load_camus_entry(patient_dir: Path):
    name = patient_dir.name
    frames = _load_frames(patient_dir / f"{name}_2CH_sequence")
    labels = _read_png(patient_dir / f"{name}_2CH_ED_gt.png").astype(np.int64)
    if labels.shape != frames.shape[1:]:
        raise ValueError("segmentation shape disagrees with frames")
    return VideoVolume(normalize(frames), identifier=name), SegmentationMap(labels, dict(CAMUS_LABELS))


def _load_echonet_entry(video_dir: Path, root: Path):
    name = video_dir.name
    frames = _load_frames(video_dir)
    mask = _read_png(root / "Masks" / f"{name}_ED.png")
    if mask.shape != frames.shape[1:]:
        raise ValueError("mask shape disagrees with frames")
    labels = (mask > 0).astype(np.int64)
    return VideoVolume(normalize(frames), identifier=name), SegmentationMap(labels, dict(ECHONET_LABELS))


def _echonet_splits(root: Path) -> dict:
    filelist = root / "FileList.csv"
    if not filelist.exists():
        return {}
    splits: dict[str, list[str]] = {}
    with filelist.open(newline="") as fh:
        for row in csv.DictReader(fh):
            name = Path(row.get("FileName", "")).stem
            splits.setdefault(row.get("Split", "train").lower(), []).append(name)
    return splits


def load_dataset(path, format: str = "toy-container") -> Dataset:
    """Read ``(VideoVolume, SegmentationMap)`` pairs from ``path``.

    Layouts (all frames 8-bit grayscale PNG, one file per frame):

    * ``toy-container``: as written by :func:`save_toy_container`.
    * ``camus-layout``: ``<patient>/<patient>_2CH_sequence/NNN.png`` with the
      end-diastolic labels (0-3) in ``<patient>/<patient>_2CH_ED_gt.png``.
    * ``echonet-layout``: ``Videos/<name>/NNN.png`` with the end-diastolic
      LV mask in ``Masks/<name>_ED.png`` and an optional ``FileList.csv``
      carrying ``FileName`` and ``Split`` columns.

    Broken entries are skipped and listed in ``Dataset.rejects``.
    """
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {format!r}")
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(root)

    splits: dict = {}
    if format == "toy-container":
        entries = sorted(p for p in root.iterdir() if p.is_dir())
        manifest = root / "manifest.json"
        if manifest.exists():
            try:
                splits = json.loads(manifest.read_text()).get("splits", {})
            except (json.JSONDecodeError, AttributeError):
                log.warning("unreadable manifest %s", manifest)
        loader = _load_toy_entry
    elif format == "camus-layout":
        entries = sorted(p for p in root.iterdir() if p.is_dir())
        loader = _load_camus_entry
    else:
        vids = root / "Videos"
        entries = sorted(p for p in vids.iterdir() if p.is_dir()) if vids.is_dir() else []
        splits = _echonet_splits(root)

        def loader(p):
            return _load_echonet_entry(p, root)

    items, rejects = [], []
    for entry in entries:
        try:
            items.append(loader(entry))
        except Exception as exc:  # corrupted or partial entries are skipped, not fatal
            rejects.append((str(entry), f"{type(exc).__name__}: {exc}"))
    if rejects:
        log.warning("skipped %d malformed entries under %s: %s", len(rejects), root, rejects)
    if not items:
        log.warning("no usable videos under %s", root)
    return Dataset(items, rejects, splits)
