import hashlib

import numpy as np
import pytest

from poserefine import cli
from poserefine.imageio import read_ppm
from poserefine.synthdata import Dataset

SMALL = """
[scene]
frames = 6
width = 48
height = 48
occluders = []

[scene.camera]
focal = 80.0

[encoding]
K = 4
N = 1

[field]
channels = 8

[refine]
frames_per_batch = 2
pixels_per_frame = 8
iterations = 3
"""


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.ini").write_text(SMALL)
    assert cli.main(["synth", str(root / "ds"), "--config", str(root / "small.ini")]) == 0
    return root


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(directory).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_defaults_are_valid_without_a_file():
    cfg = cli.load_config()
    assert cfg.refine.lambda_reg == 0.1 and cfg.field_cfg.channels == 256 and cfg.render.samples_per_ray == 96
    assert cfg.refine.frames_per_batch == 128 and cfg.refine.pixels_per_frame == 32
    assert cfg.scene.frames == 60


def test_unknown_key_is_named(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[refine]\nlamda_reg = 0.2\n")
    assert cli.main(["synth", str(tmp_path / "out"), "--config", str(tmp_path / "bad.ini")]) == cli.EXIT_USAGE
    assert "lamda_reg" in capsys.readouterr().err
    (tmp_path / "bad2.ini").write_text("[renderer]\nsamples_per_ray = 3\n")
    assert cli.main(["synth", str(tmp_path / "out"), "--config", str(tmp_path / "bad2.ini")]) == cli.EXIT_USAGE
    assert "renderer" in capsys.readouterr().err


def test_bad_values_are_usage_errors(tmp_path):
    (tmp_path / "bad.ini").write_text("[refine]\nlambda_reg = -1\n")
    assert cli.main(["synth", str(tmp_path / "o"), "--config", str(tmp_path / "bad.ini")]) == cli.EXIT_USAGE
    assert cli.main(["refine", "x", "y", "--disable", "colour"]) == cli.EXIT_USAGE
    assert cli.main(["--threads", "0", "eval", "x"]) == cli.EXIT_USAGE


def test_snapshot_round_trips():
    cfg = cli.load_config(preset="desk")
    again = cli.apply_overrides(cli.RunConfig(), cfg.to_dict())
    assert again.to_ini() == cfg.to_ini()


def test_synth_same_seed_identical(tmp_path, small):
    args = ["--config", str(small / "small.ini"), "--seed", "7"]
    assert cli.main(["synth", str(tmp_path / "a")] + args) == 0
    assert cli.main(["synth", str(tmp_path / "b")] + args) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert "seed = 7" in (tmp_path / "a" / cli.SNAPSHOT).read_text()


def test_refine_zero_iterations_has_zero_delta(tmp_path, small):
    out = tmp_path / "r"
    assert cli.main(["refine", str(small / "ds"), str(out), "--config", str(small / "small.ini"),
                     "--iterations", "0"]) == 0
    text = (out / "metrics.txt").read_text()
    assert "delta_mm = 0.0" in text
    assert (out / "poses_refined.txt").read_bytes().splitlines()[1:] == \
        (small / "ds" / "poses_initial.txt").read_bytes().splitlines()[1:]


def test_refine_outputs_and_snapshot_rerun_identical(tmp_path, small):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["refine", str(small / "ds"), str(a), "--config", str(small / "small.ini"),
                     "--disable", "temporal", "--disable", "masking", "--seed", "3"]) == 0
    for name in ("poses_refined.txt", "loss.csv", "metrics.txt", cli.CHECKPOINT, cli.SNAPSHOT):
        assert (a / name).exists(), name
    snap = (a / cli.SNAPSHOT).read_text()
    assert "disable = ['masking', 'temporal']" in snap and "seed = 3" in snap
    assert cli.main(["refine", str(small / "ds"), str(b), "--config", str(a / cli.SNAPSHOT)]) == 0
    for name in ("poses_refined.txt", "loss.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_refine_missing_dataset_file_named(tmp_path, small, capsys):
    import shutil

    ds = tmp_path / "ds"
    shutil.copytree(small / "ds", ds)
    (ds / "images" / "frame_0002.ppm").unlink()
    assert cli.main(["refine", str(ds), str(tmp_path / "o"), "--config", str(small / "small.ini")]) == cli.EXIT_DATA
    assert "frame_0002.ppm" in capsys.readouterr().err


def test_refine_divergence_exit_code(tmp_path, small, monkeypatch):
    def diverge(ds, model, cfg, progress=None):
        from poserefine.refine import RefinementResult

        return RefinementResult(ds.initial, [], np.zeros(ds.frame_count, bool), diverged_at=0)

    monkeypatch.setattr(cli, "refine", diverge)
    assert cli.main(["refine", str(small / "ds"), str(tmp_path / "o"), "--config", str(small / "small.ini")]) == \
        cli.EXIT_DIVERGED


def test_eval_truth_prints_zero(small, capsys):
    assert cli.main(["eval", str(small / "ds"), str(small / "ds" / "poses_true.txt")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["poses", "p_mpjpe_mm"]
    assert lines[1].startswith("initial")
    assert lines[2].split()[1] == "0.000000"


def test_render_zero_checkpoint_is_grey(tmp_path, small):
    ds = Dataset.load(small / "ds")
    cfg = cli.load_config(small / "small.ini")
    model = cfg.model(ds.body, zero=True)
    cli.save_checkpoint(tmp_path / "zero.npz", model, cfg)
    assert cli.main(["render", str(small / "ds"), str(tmp_path / "zero.npz"), str(tmp_path / "r"),
                     "--frames", "1"]) == 0
    img = read_ppm(tmp_path / "r" / "render_0001.ppm")
    body = img.sum(-1) > 0
    assert body.any()
    # zero networks: colour 0.5 in every channel, scaled by the accumulated opacity
    np.testing.assert_allclose(img[body][:, 0], img[body][:, 1], atol=1 / 255)
    np.testing.assert_allclose(img[body][:, 1], img[body][:, 2], atol=1 / 255)
    assert img.max() <= 0.5 + 1 / 255


def test_render_rejects_foreign_body(tmp_path, small):
    ds = Dataset.load(small / "ds")
    cfg = cli.load_config(small / "small.ini")
    model = cfg.model(ds.body, zero=True)
    model.store.save(tmp_path / "ck.npz", meta={"body_hash": "0" * 16, "config": cfg.to_dict()})
    assert cli.main(["render", str(small / "ds"), str(tmp_path / "ck.npz"), str(tmp_path / "r")]) == cli.EXIT_DATA


def test_mask_with_identical_reference_keeps_segmentation(tmp_path, small):
    assert cli.main(["mask", str(small / "ds"), str(tmp_path / "m"), "--rendered", str(small / "ds" / "images")]) == 0
    from poserefine.imageio import read_mask

    ds = Dataset.load(small / "ds")
    for f in range(ds.frame_count):
        m = read_mask(tmp_path / "m" / f"mask_{f:04d}.pgm")
        seg = ds.segmentations[f]
        assert not (m & ~seg).any()
        assert m.sum() >= 0.9 * seg.sum()
    assert cli.main(["mask", str(small / "ds"), str(tmp_path / "m2")]) == cli.EXIT_USAGE


def test_threads_env_var(small, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    assert cli.main(["eval", str(small / "ds")]) == 0
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert cli.main(["eval", str(small / "ds")]) == cli.EXIT_USAGE
