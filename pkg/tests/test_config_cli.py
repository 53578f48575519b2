import hashlib
import json

import numpy as np
import pytest
import yaml

from freeecho.cli import main
from freeecho.config import ConfigError, load_config, parse_override, preset_dict

FAST = ["--preset", "desk", "--set", "data.toy_num_videos=6", "--set", "data.toy_test_videos=2",
        "--set", "training.batch_size=2", "--set", "training.total_iterations=2",
        "--set", "training.checkpoint_every=2", "--set", "training.log_every=1",
        "--set", "eval.samples_per_condition=2", "--set", "sampler.t_i=3", "--set", "eval.t_values=[2,3]"]


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-toy", "--out", str(root / "toy"), *FAST]) == 0
    assert main(["train", "--data", str(root / "toy"), "--out", str(root / "train"), *FAST]) == 0
    return root


# -- config -------------------------------------------------------------------


def test_defaults_and_desk_preset():
    cfg = load_config()
    assert cfg.schedule.num_steps == 64 and cfg.sampler.guidance_scale == 7.0 and cfg.pseudo.epsilon == 1e-3
    desk = load_config(preset="desk")
    assert (desk.data.frames, desk.data.height, desk.model.in_channels) == (8, 32, 1)


def test_overrides_and_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"preset": "desk", "training": {"learning_rate": 5e-4}}))
    cfg = load_config(path, ["seed=7", "eval.t_values=[4, 8]"])
    assert cfg.preset == "desk" and cfg.training.learning_rate == 5e-4
    assert cfg.seed == 7 and cfg.train_config().seed == 7 and cfg.eval.t_values == [4, 8]
    assert load_config(tmp_path / "c.yaml", preset="full").data.frames == 24


def test_round_trip(tmp_path):
    cfg = load_config(preset="desk", overrides=["sampler.solver=euler"])
    path = tmp_path / "again.yaml"
    path.write_text(cfg.to_yaml())
    assert load_config(path) == cfg


@pytest.mark.parametrize("override", ["training.lr=1", "nope=1", "sampler.t_i=65", "sampler.solver=rk4",
                                      "pseudo.epsilon=0", "training=3", "data.height=30"])
def test_invalid_configs(override):
    with pytest.raises(ConfigError):
        load_config(preset="desk", overrides=[override])


def test_parse_override_and_presets():
    assert parse_override("a.b=1e-4") == (["a", "b"], 1e-4)
    with pytest.raises(ConfigError):
        parse_override("novalue")
    with pytest.raises(ConfigError):
        preset_dict("huge")


def test_malformed_yaml(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1, 2")
    with pytest.raises(ConfigError):
        load_config(bad)


# -- CLI ----------------------------------------------------------------------


def test_unknown_key_exits_one_without_outputs(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["make-toy", "--out", str(out), "--set", "training.lr=1"]) == 1
    assert "unknown config key 'training.lr'" in capsys.readouterr().err
    assert not out.exists()


def test_make_toy_and_train_outputs(run):
    manifest = json.loads((run / "toy" / "manifest.json").read_text())
    assert len(manifest["videos"]) == 6
    train_dir = run / "train"
    assert (train_dir / "last.pt").is_file() and (train_dir / "checkpoint_0000002.pt").is_file()
    assert len((train_dir / "train_log.jsonl").read_text().splitlines()) == 2
    echoed = yaml.safe_load((train_dir / "config.yaml").read_text())
    assert echoed["training"]["total_iterations"] == 2
    seeds = json.loads((train_dir / "seed.json").read_text())
    assert seeds["command"] == "train" and seeds["seed"] == 0


def test_sample_is_seed_deterministic(run):
    seg = run / "toy" / "toy00005"
    args = ["sample", "--checkpoint", str(run / "train" / "last.pt"), "--segmentation", str(seg), *FAST,
            "--set", "sampler.num_samples=2", "--set", "sampler.preview_gif=true"]
    assert main([*args, "--out", str(run / "s1")]) == 0
    assert main([*args, "--out", str(run / "s2")]) == 0
    a = np.load(run / "s1" / "sample_001" / "video.npy")
    assert np.array_equal(a, np.load(run / "s2" / "sample_001" / "video.npy"))
    assert a.shape == (8, 32, 32) and np.abs(a).max() <= 1
    assert (run / "s1" / "sample_000" / "preview.gif").is_file()
    assert len(list((run / "s1" / "sample_000" / "frames").glob("*.png"))) == 8


def test_sample_at_t_zero_returns_pseudo_video(run):
    out = run / "s0"
    assert main(["sample", "--checkpoint", str(run / "train" / "last.pt"), "--segmentation",
                 str(run / "toy" / "toy00004"), "--out", str(out), *FAST, "--set", "sampler.t_i=0"]) == 0
    assert np.array_equal(np.load(out / "sample_000" / "video.npy"), np.load(out / "pseudo.npy"))


def test_evaluate_oracle_row_and_inputs_untouched(run, capsys):
    before = (tree_digest(run / "toy"), tree_digest(run / "train"))
    out = run / "ev"
    assert main(["evaluate", "--checkpoint", str(run / "train" / "last.pt"), "--data", str(run / "toy"),
                 "--methods", "oracle,free-echo,sdedit", "--out", str(out), *FAST]) == 0
    reports = {r["method"]: r for r in json.loads((out / "reports.json").read_text())}
    assert reports["oracle"]["ssim"] == 1.0 and reports["oracle"]["psnr_capped"]
    assert reports["free-echo"]["num_conditions"] == 2 and reports["free-echo"]["step"] == 3
    text = (out / "report.txt").read_text()
    assert "desk-randconv-img-s2024" in text and "desk-randconv-vid-s2024" in text
    assert text in capsys.readouterr().out
    assert before == (tree_digest(run / "toy"), tree_digest(run / "train"))


def test_sweep_t(run):
    out = run / "sweep"
    assert main(["sweep-t", "--checkpoint", str(run / "train" / "last.pt"), "--data", str(run / "toy"),
                 "--out", str(out), *FAST]) == 0
    assert [r["step"] for r in json.loads((out / "reports.json").read_text())] == [2, 3]


@pytest.mark.parametrize("argv", [
    ["sample", "--method", "cls-free", "--segmentation", "toy/toy00005"],
    ["sample", "--method", "free-echo"],
    ["sweep-t", "--t-values", "0,3"],
    ["evaluate", "--methods", "cls-free"],
    ["train"],
])
def test_usage_errors_exit_one(run, argv, capsys):
    argv = [a.replace("toy/", str(run / "toy") + "/") for a in argv]
    extra = ["--data", str(run / "toy")] if argv[0] in ("sweep-t", "evaluate") else []
    code = main([*argv, "--checkpoint", str(run / "train" / "last.pt"), *extra, "--out", str(run / "bad"), *FAST]
                if argv[0] != "train" else [*argv, "--out", str(run / "bad"), *FAST])
    assert code == 1
    assert capsys.readouterr().err.startswith("error:")


def test_missing_checkpoint_exits_one(run):
    assert main(["sample", "--checkpoint", str(run / "nope.pt"), "--segmentation", str(run / "toy" / "toy00005"),
                 "--out", str(run / "bad2"), *FAST]) == 1


def test_frame_shape_mismatch_exits_one(run):
    assert main(["sample", "--checkpoint", str(run / "train" / "last.pt"), "--segmentation",
                 str(run / "toy" / "toy00005"), "--out", str(run / "bad3"), *FAST,
                 "--set", "data.height=64", "--set", "data.width=64"]) == 1
