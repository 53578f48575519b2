"""Command-line entry point: ``freeecho {make-toy,train,sample,evaluate,sweep-t}``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime abort.
Every command writes ``config.yaml`` (the effective config) and
``seed.json`` into its output directory. Input datasets and checkpoints are
only ever read.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, load_config
from .data import (ToyDatasetConfig, generate_toy_dataset, load_dataset, load_segmentation, save_gif,
                   save_toy_container, save_video_frames, take_first_frames)
from .denoiser import TorchDenoiser, load_checkpoint, wrap_preconditioned
from .evaluation import desk_image_extractor, desk_video_extractor, evaluate_method, format_table
from .pipeline import (METHODS, ClassifierFreeGenerator, FreeEchoGenerator, SDEditGenerator,
                       UnconditionalGenerator, _seg_key)
from .pseudo import IntensityHistogram, dataset_intensity_histogram
from .sampler import NonFiniteStateError
from .training import TrainingAborted, train, train_classifier_free
from .unet3d import build_unet3d

log = logging.getLogger("freeecho")


class UsageError(ValueError):
    pass


# -- shared helpers -----------------------------------------------------------


def _write_echo(out: Path, cfg: Config, command: str, seeds: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    (out / "seed.json").write_text(json.dumps({"command": command, "seed": cfg.seed, **seeds}, indent=2))


def _prepare_dataset(cfg: Config, path, split: str):
    ds = load_dataset(path, cfg.data.format)
    if split in ds.splits:
        ds = ds.split(split)
    elif ds.splits:
        log.warning("no %r split in %s; using every video", split, path)
    if not len(ds):
        raise UsageError(f"no usable videos in {path}")
    shape = (cfg.data.height, cfg.data.width)
    out = []
    for video, seg in ds:
        if video.frame_shape != shape:
            raise UsageError(f"{video.identifier}: frames {video.frame_shape} but config expects {shape}")
        out.append((take_first_frames(video, cfg.data.frames, cfg.data.loop), seg))
    return out


def _open_checkpoint(path, cfg: Config):
    if path is None:
        raise UsageError("this command needs --checkpoint")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint {p} not found")
    den, payload = load_checkpoint(p)
    shape = payload.get("frame_shape")
    if shape is not None and tuple(shape) != (cfg.data.height, cfg.data.width):
        raise UsageError(f"checkpoint trained on {tuple(shape)} frames, config says {(cfg.data.height, cfg.data.width)}")
    return den, payload


def _histogram(payload: dict) -> IntensityHistogram:
    h = payload.get("intensity_histogram")
    if h is None:
        raise UsageError("checkpoint carries no dataset intensity histogram (train with `freeecho train`)")
    return IntensityHistogram(np.asarray(h["bin_edges"]), np.asarray(h["masses"]))


def _generator(method: str, cfg: Config, payload: dict | None, denoiser, t_i: int | None = None):
    has_cond = bool(payload and payload["model_config"].get("with_condition_channel"))
    frames, shape = cfg.data.frames, (cfg.data.height, cfg.data.width)
    s = cfg.sampler
    t_i = s.t_i if t_i is None else t_i
    if method == "cls-free":
        if not has_cond:
            raise UsageError("cls-free needs a checkpoint trained with a condition channel")
        return ClassifierFreeGenerator(denoiser, frames, shape, cfg.schedule, s.solver, s.guidance_scale)
    if has_cond:
        raise UsageError(f"{method} needs an unconditional checkpoint; this one has a condition channel")
    if method == "free-echo":
        return FreeEchoGenerator(denoiser, _histogram(payload), frames, cfg.schedule, t_i, s.solver,
                                 epsilon=cfg.pseudo.epsilon)
    if method == "sdedit":
        return SDEditGenerator(denoiser, frames, cfg.schedule, t_i, s.solver)
    if method == "unconditional":
        return UnconditionalGenerator(denoiser, frames, shape, cfg.schedule, s.solver)
    raise UsageError(f"unknown method {method!r}; choose from {METHODS}")


class _OracleGenerator:
    """Returns the ground-truth clip of each test segmentation (plumbing check)."""

    method = "oracle"
    t_i = None

    def __init__(self, test_set):
        self.lookup = {_seg_key(seg): video.pixels for video, seg in test_set}

    def __call__(self, seg, seed):
        return self.lookup[_seg_key(seg)].copy()


# -- commands -----------------------------------------------------------------


def cmd_make_toy(cfg: Config, args) -> int:
    d = cfg.data
    if d.toy_test_videos >= d.toy_num_videos:
        raise UsageError("data.toy_test_videos must be smaller than data.toy_num_videos")
    out = Path(args.out)
    _write_echo(out, cfg, "make-toy", {})
    toy = ToyDatasetConfig(num_videos=d.toy_num_videos, frames=d.frames, height=d.height, width=d.width,
                           num_labels=d.toy_labels, seed=cfg.seed)
    ds = generate_toy_dataset(toy)
    ids = [v.identifier for v, _ in ds]
    n_train = len(ids) - d.toy_test_videos
    save_toy_container(ds, out, {"train": ids[:n_train], "test": ids[n_train:]})
    print(f"wrote {len(ids)} toy videos ({n_train} train / {d.toy_test_videos} test) to {out}")
    return 0


def cmd_train(cfg: Config, args) -> int:
    if args.data is None:
        raise UsageError("train needs --data")
    pairs = _prepare_dataset(cfg, args.data, "train")
    out = Path(args.out)
    _write_echo(out, cfg, "train", {"train_rng": [cfg.seed, 0], "dropout_rng": [cfg.seed, 1],
                                    "model_init_seed": cfg.seed})
    hist = dataset_intensity_histogram(pairs, bins=cfg.pseudo.bins, max_videos=cfg.pseudo.hist_max_videos,
                                       seed=cfg.seed)
    extra = {
        "intensity_histogram": {"bin_edges": hist.bin_edges.tolist(), "masses": hist.masses.tolist()},
        "label_set": {int(k): v for k, v in pairs[0][1].label_set.items()},
        "frames": cfg.data.frames,
        "frame_shape": [cfg.data.height, cfg.data.width],
    }
    net = build_unet3d(cfg.model, seed=cfg.seed)
    model = wrap_preconditioned(net, cfg.schedule)
    fn = train_classifier_free if cfg.model.with_condition_channel else train
    data = pairs if cfg.model.with_condition_channel else [v for v, _ in pairs]
    state = fn(data, model, cfg.train_config(), cfg.schedule, out_dir=out, resume_from=args.resume,
               checkpoint_extra=extra)
    print(f"trained {state.step} steps; running loss {state.initial_running_loss:.4g} -> {state.running_loss:.4g}; "
          f"checkpoints in {out}")
    return 0


def cmd_sample(cfg: Config, args) -> int:
    method = args.method
    den, payload = _open_checkpoint(args.checkpoint, cfg)
    label_set = payload.get("label_set")
    if method == "unconditional":
        if args.segmentation:
            log.warning("unconditional sampling ignores --segmentation")
        seg = None
    else:
        if not args.segmentation:
            raise UsageError(f"{method} needs --segmentation")
        seg = load_segmentation(args.segmentation, label_set)
        if seg.shape != (cfg.data.height, cfg.data.width):
            raise UsageError(f"segmentation {seg.shape} does not match config frame shape")
    gen = _generator(method, cfg, payload, TorchDenoiser(den))
    n = cfg.sampler.num_samples
    seeds = [cfg.seed * 1_000_003 + j for j in range(n)]
    out = Path(args.out)
    _write_echo(out, cfg, "sample", {"method": method, "sample_seeds": seeds,
                                     "checkpoint": str(args.checkpoint), "segmentation": args.segmentation})
    if hasattr(gen, "pseudo_video"):
        pseudo = gen.pseudo_video(seg)
        np.save(out / "pseudo.npy", pseudo.frames)
        save_video_frames(pseudo.frames, out / "pseudo" / "frames")
    videos = gen.batch(seg, seeds)
    for j, video in enumerate(videos):
        d = out / f"sample_{j:03d}"
        save_video_frames(video, d / "frames")
        np.save(d / "video.npy", video)
        if cfg.sampler.preview_gif:
            save_gif(video, d / "preview.gif")
    print(f"wrote {n} {method} sample(s) to {out}")
    return 0


def _test_set(cfg: Config, path):
    test = _prepare_dataset(cfg, path, "test")
    if cfg.eval.max_conditions is not None:
        test = test[: cfg.eval.max_conditions]
    return test


def _run_reports(cfg: Config, jobs, test, out: Path) -> list:
    img = desk_image_extractor(cfg.eval.extractor_seed)
    vid = desk_video_extractor(cfg.eval.extractor_seed)
    reports = []
    for name, gen in jobs:
        log.info("evaluating %s (t=%s) on %d conditions", name, gen.t_i, len(test))
        reports.append(evaluate_method(gen, test, cfg.eval.samples_per_condition, img, vid, seed=cfg.seed,
                                       method=name, step=gen.t_i))
    table = format_table(reports, with_l2=cfg.eval.with_l2)
    (out / "report.txt").write_text(table)
    (out / "reports.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    print(table, end="")
    return reports


def cmd_evaluate(cfg: Config, args) -> int:
    if args.data is None:
        raise UsageError("evaluate needs --data")
    methods = args.methods.split(",") if args.methods else list(cfg.eval.methods)
    test = _test_set(cfg, args.data)
    opened = {}
    jobs = []
    for m in methods:
        if m == "oracle":
            jobs.append((m, _OracleGenerator(test)))
            continue
        ck = args.cond_checkpoint if m == "cls-free" else args.checkpoint
        if ck is None:
            raise UsageError(f"{m} needs {'--cond-checkpoint' if m == 'cls-free' else '--checkpoint'}")
        if ck not in opened:
            opened[ck] = _open_checkpoint(ck, cfg)
        den, payload = opened[ck]
        jobs.append((m, _generator(m, cfg, payload, TorchDenoiser(den, batch_size=256))))
    out = Path(args.out)
    _write_echo(out, cfg, "evaluate", {"methods": methods, "eval_seed_base": cfg.seed * 1_000_003})
    _run_reports(cfg, jobs, test, out)
    return 0


def cmd_sweep_t(cfg: Config, args) -> int:
    if args.data is None:
        raise UsageError("sweep-t needs --data")
    t_values = sorted(int(t) for t in args.t_values.split(",")) if args.t_values else sorted(cfg.eval.t_values)
    bad = [t for t in t_values if not 1 <= t <= cfg.schedule.num_steps]
    if bad:
        raise UsageError(f"t values {bad} outside [1, {cfg.schedule.num_steps}]")
    den, payload = _open_checkpoint(args.checkpoint, cfg)
    td = TorchDenoiser(den, batch_size=256)
    jobs = [("free-echo", _generator("free-echo", cfg, payload, td, t)) for t in t_values]
    test = _test_set(cfg, args.data)
    out = Path(args.out)
    _write_echo(out, cfg, "sweep-t", {"t_values": t_values, "eval_seed_base": cfg.seed * 1_000_003})
    _run_reports(cfg, jobs, test, out)
    return 0


COMMANDS = {"make-toy": cmd_make_toy, "train": cmd_train, "sample": cmd_sample,
            "evaluate": cmd_evaluate, "sweep-t": cmd_sweep_t}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--preset", choices=("full", "desk"), help="base preset (default: file's, else full)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. training.learning_rate=1e-4 (repeatable)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="freeecho", description="Segmentation-conditioned echo video diffusion")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("make-toy", parents=[common], help="write a synthetic toy-echo dataset")
    t = sub.add_parser("train", parents=[common], help="train a denoiser")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    s = sub.add_parser("sample", parents=[common], help="generate clips for one segmentation")
    s.add_argument("--checkpoint")
    s.add_argument("--segmentation", help="label PNG or toy-container video directory")
    s.add_argument("--method", choices=METHODS, default="free-echo")
    e = sub.add_parser("evaluate", parents=[common], help="score methods on a test set")
    e.add_argument("--checkpoint", help="unconditional checkpoint (free-echo, sdedit, unconditional)")
    e.add_argument("--cond-checkpoint", help="condition-channel checkpoint (cls-free)")
    e.add_argument("--data", help="dataset directory (its test split if present)")
    e.add_argument("--methods", help="comma-separated; default from eval.methods")
    w = sub.add_parser("sweep-t", parents=[common], help="free-echo at several t_i")
    w.add_argument("--checkpoint")
    w.add_argument("--data")
    w.add_argument("--t-values", help="comma-separated; default from eval.t_values")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = load_config(args.config, overrides, args.preset)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingAborted, NonFiniteStateError, RuntimeError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
