"""Command-line entry point: synth, refine, render, mask and eval subcommands.

Configuration is sectioned INI text. Every key has a default, so no file is
needed; unknown sections or keys are rejected. Exit codes: 0 success, 1 usage
or configuration error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import ast
import configparser
import csv
import io
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .body import PoseSequence, load_pose_sequence, rasterize_silhouette
from .diffmath import ParamStore
from .encoding import EncodingConfig
from .fields import FieldConfig
from .imageio import read_ppm, write_ppm
from .masking import build_mask, padding_band, save_masks
from .pipeline import COMPONENTS, Ablation, NeuralBody, RenderConfig, render_image
from .refine import RefineConfig, compute_masks, joint_positions, p_mpjpe, refine, write_result
from .synthdata import CameraSpec, Dataset, SceneError, SceneSpec, SegCorruption, generate_scene

log = logging.getLogger(__name__)

THREADS_ENV = "POSEREFINE_THREADS"
CHECKPOINT = "checkpoint.npz"
SNAPSHOT = "config_resolved.ini"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageFailure(Exception):
    code = EXIT_USAGE


class DataFailure(Exception):
    code = EXIT_DATA


class Diverged(Exception):
    code = EXIT_DIVERGED


# ---------------------------------------------------------------- configuration


@dataclass
class MaskingSection:
    skip_threshold: float = 0.7
    refresh_interval: int = 500


@dataclass
class RunSection:
    seed: int = 0
    disable: tuple = ()


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    field_cfg: FieldConfig = field(default_factory=FieldConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    masking: MaskingSection = field(default_factory=MaskingSection)
    refine: RefineConfig = field(default_factory=RefineConfig)
    run: RunSection = field(default_factory=RunSection)

    # section name -> (attribute path, keys owned elsewhere and therefore not configurable here)
    SECTIONS = {
        "scene": (("scene",), {"camera", "corruption"}),
        "scene.camera": (("scene", "camera"), set()),
        "scene.corruption": (("scene", "corruption"), set()),
        "encoding": (("encoding",), set()),
        "field": (("field_cfg",), set()),
        "render": (("render",), set()),
        "masking": (("masking",), set()),
        "refine": (("refine",), {"skip_threshold", "mask_refresh_interval", "seed"}),
        "run": (("run",), set()),
    }

    def section(self, name):
        obj = self
        for attr in self.SECTIONS[name][0]:
            obj = getattr(obj, attr)
        return obj

    def set_section(self, name, value):
        path = self.SECTIONS[name][0]
        if len(path) == 1:
            setattr(self, path[0], value)
        else:
            setattr(self.section(path[0]), path[1], value)

    def keys(self, name):
        excluded = self.SECTIONS[name][1]
        return [f.name for f in fields(self.section(name)) if f.name not in excluded]

    def refine_config(self) -> RefineConfig:
        return replace(self.refine, skip_threshold=self.masking.skip_threshold,
                       mask_refresh_interval=self.masking.refresh_interval, seed=self.run.seed)

    def model(self, body, store=None, zero=False) -> NeuralBody:
        return NeuralBody(body, self.encoding, self.field_cfg, Ablation.disabling(self.run.disable), self.render,
                          seed=self.run.seed, store=store, zero=zero)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in self.SECTIONS:
            obj = self.section(name)
            cp[name] = {k: format_value(getattr(obj, k)) for k in self.keys(name)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self):
        return {name: {k: format_value(getattr(self.section(name), k)) for k in self.keys(name)}
                for name in self.SECTIONS}


def format_value(v):
    if isinstance(v, (list, tuple, dict)) or hasattr(v, "__dataclass_fields__"):
        from dataclasses import asdict, is_dataclass

        def plain(x):
            if is_dataclass(x):
                return {k: plain(val) for k, val in asdict(x).items()}
            if isinstance(x, (list, tuple)):
                return [plain(i) for i in x]
            if isinstance(x, dict):
                return {k: plain(val) for k, val in x.items()}
            return x

        return repr(plain(v))
    if v is None:
        return "none"
    return repr(v) if isinstance(v, (float, str)) and not isinstance(v, bool) else str(v)


def parse_value(text, default, section, key):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if text.lower() == "none":
            return None
        if isinstance(default, str):
            value = ast.literal_eval(text) if text[:1] in "'\"" else text
            return str(value)
        value = ast.literal_eval(text)
        if isinstance(default, float) or (default is None and isinstance(value, int)):
            return float(value)
        if isinstance(default, int):
            if isinstance(value, float) and value != int(value):
                raise ValueError(text)
            return int(value)
        if isinstance(default, tuple) and isinstance(value, (list, tuple)):
            return tuple(value)
        return value
    except (ValueError, SyntaxError) as exc:
        raise UsageFailure(f"[{section}] {key}: cannot parse {text!r}") from exc


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """``overrides`` maps section -> {key: text}; unknown names raise UsageFailure naming them."""
    for section, items in overrides.items():
        if section not in RunConfig.SECTIONS:
            raise UsageFailure(f"unknown config section [{section}]")
        obj = cfg.section(section)
        allowed = cfg.keys(section)
        changes = {}
        for key, text in items.items():
            if key not in allowed:
                raise UsageFailure(f"unknown config key {key!r} in section [{section}]")
            changes[key] = parse_value(text, getattr(obj, key), section, key) if isinstance(text, str) else text
        try:
            cfg.set_section(section, replace(obj, **changes))
        except (ValueError, TypeError, SceneError) as exc:
            raise UsageFailure(f"[{section}]: {exc}") from exc
    return cfg


# Desk-scale settings: same model and losses, sized so 5k iterations fit a desktop CPU.
PRESETS = {
    "full": {},
    "desk": {
        # one core, about ten minutes per 5k-iteration run on the default scene
        "encoding": {"N": "0"},
        "field": {"channels": "64"},
        "render": {"cull_distance": "0.1"},
        "refine": {"frames_per_batch": "1", "pixels_per_frame": "64", "lr_start": "0.005", "lr_end": "0.0002",
                   "pose_lr_mult": "0.2", "pose_warmup": "1000"},
        "masking": {"refresh_interval": "2500"},
    },
}


def load_config(path=None, preset="full") -> RunConfig:
    cfg = RunConfig()
    if preset not in PRESETS:
        raise UsageFailure(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    apply_overrides(cfg, PRESETS[preset])
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            read = cp.read(path)
        except configparser.Error as exc:
            raise UsageFailure(f"{path}: {exc}") from exc
        if not read:
            raise UsageFailure(f"config file not found: {path}")
        apply_overrides(cfg, {s: dict(cp[s]) for s in cp.sections()})
    return cfg


def write_snapshot(out_dir, cfg: RunConfig):
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / SNAPSHOT).write_text(cfg.to_ini())


# ---------------------------------------------------------------- helpers


def load_dataset(path) -> Dataset:
    try:
        return Dataset.load(path)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise DataFailure(str(exc)) from exc


def load_poses(path, dataset: Dataset) -> PoseSequence:
    try:
        seq = load_pose_sequence(path)
    except (OSError, ValueError) as exc:
        raise DataFailure(str(exc)) from exc
    if seq.rotations.shape != dataset.initial.rotations.shape:
        raise DataFailure(f"{path}: pose shape {seq.rotations.shape} does not match the dataset "
                          f"{dataset.initial.rotations.shape}")
    return seq


def save_checkpoint(path, model: NeuralBody, cfg: RunConfig):
    model.store.save(path, meta={"body_hash": model.body.hash(), "config": cfg.to_dict()})


def load_checkpoint(path, dataset: Dataset):
    """Rebuild the model stored in a checkpoint; rejects checkpoints made for another body."""
    try:
        store, meta = ParamStore.load_with_meta(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataFailure(f"cannot read checkpoint {path}: {exc}") from exc
    expected = dataset.manifest.get("body_hash", dataset.body.hash())
    if meta.get("body_hash") != expected or dataset.body.hash() != expected:
        raise DataFailure(f"checkpoint {path} was made for body {meta.get('body_hash')}, dataset has {expected}")
    cfg = apply_overrides(RunConfig(), meta.get("config", {}))
    return cfg.model(dataset.body, store=store), cfg


def parse_frames(text, count):
    if text is None:
        return list(range(count))
    try:
        frames = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageFailure(f"--frames expects comma-separated integers, got {text!r}") from exc
    bad = [f for f in frames if not 0 <= f < count]
    if bad:
        raise DataFailure(f"frames {bad} outside 0..{count - 1}")
    return frames


def current_poses(dataset: Dataset, model: NeuralBody | None, poses_path) -> PoseSequence:
    if poses_path is not None:
        return load_poses(poses_path, dataset)
    if model is not None and "pose_rot" in model.store:
        return PoseSequence(model.store["pose_rot"].copy(), dataset.initial.root_translation.copy())
    return dataset.initial


# ---------------------------------------------------------------- commands


@click.group()
@click.version_option(__version__)
@click.option("--threads", type=int, default=None,
              help=f"BLAS worker threads (default: ${THREADS_ENV} or 1). 1 is the reproducibility reference.")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.pass_context
def cli(ctx, threads, verbose):
    """Refine noisy articulated-body poses against video frames with a temporal neural field."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if threads is None:
        env = os.environ.get(THREADS_ENV, "1")
        try:
            threads = int(env)
        except ValueError as exc:
            raise UsageFailure(f"${THREADS_ENV} must be an integer, got {env!r}") from exc
    if threads < 1:
        raise UsageFailure("--threads must be at least 1")
    ctx.with_resource(threadpool_limits(limits=threads))


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                             help="INI configuration file.")
preset_option = click.option("--preset", type=click.Choice(sorted(PRESETS)), default="full", show_default=True,
                             help="Base settings before the config file is applied.")


@cli.command()
@click.argument("out_dir", type=click.Path(file_okay=False))
@config_option
@preset_option
@click.option("--seed", type=int, default=None, help="Scene seed (overrides [scene] seed).")
def synth(out_dir, config_path, preset, seed):
    """Render a synthetic scene with corrupted segmentation and perturbed poses."""
    cfg = load_config(config_path, preset)
    if seed is not None:
        apply_overrides(cfg, {"scene": {"seed": seed}})
    try:
        manifest = generate_scene(cfg.scene, out_dir)
    except SceneError as exc:
        raise DataFailure(str(exc)) from exc
    write_snapshot(out_dir, cfg)
    click.echo(f"wrote {manifest['frames']} frames to {out_dir} "
               f"(initial P-MPJPE {manifest['initial_p_mpjpe_mm']:.3f} mm)")


@cli.command("refine")
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@config_option
@preset_option
@click.option("--iterations", type=int, default=None, help="Override [refine] iterations.")
@click.option("--seed", type=int, default=None, help="Override [run] seed (network init and sampling).")
@click.option("--disable", multiple=True, type=click.Choice(COMPONENTS), help="Disable a component; repeatable.")
def refine_cmd(dataset_dir, out_dir, config_path, preset, iterations, seed, disable):
    """Jointly fit the neural body and refine the poses of a dataset."""
    cfg = load_config(config_path, preset)
    if iterations is not None:
        apply_overrides(cfg, {"refine": {"iterations": iterations}})
    if seed is not None:
        apply_overrides(cfg, {"run": {"seed": seed}})
    if disable:
        apply_overrides(cfg, {"run": {"disable": tuple(sorted(set(cfg.run.disable) | set(disable)))}})
    ds = load_dataset(dataset_dir)
    write_snapshot(out_dir, cfg)
    model = cfg.model(ds.body)

    def progress(it, vals):
        log.info("iteration %d  L_rgb %.5g  L_reg %.5g  L_all %.5g", it, *vals)

    result = refine(ds, model, cfg.refine_config(), progress)
    write_result(out_dir, result)
    save_checkpoint(Path(out_dir) / CHECKPOINT, model, cfg)
    if result.diverged_at is not None:
        raise Diverged(f"loss became non-finite at iteration {result.diverged_at}; partial results in {out_dir}")
    if result.p_mpjpe_initial is not None:
        click.echo(f"P-MPJPE {result.p_mpjpe_initial:.3f} -> {result.p_mpjpe_final:.3f} mm "
                   f"(delta {result.delta:+.3f})")
    else:
        click.echo(f"refined {ds.frame_count} frames in {result.seconds:.0f} s")


@cli.command()
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--frames", default=None, help="Comma-separated frame indices (default: all).")
@click.option("--poses", "poses_path", type=click.Path(dir_okay=False), default=None,
              help="Pose file (default: poses stored in the checkpoint, else the dataset's initial poses).")
def render(dataset_dir, checkpoint, out_dir, frames, poses_path):
    """Render frames of a dataset from a checkpoint."""
    ds = load_dataset(dataset_dir)
    model, _ = load_checkpoint(checkpoint, ds)
    seq = current_poses(ds, model, poses_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f in parse_frames(frames, ds.frame_count):
        img = render_image(model, ds.camera, seq.rotations, seq.root_translation, f)
        write_ppm(out / f"render_{f:04d}.ppm", img)
    click.echo(f"rendered to {out}")


@cli.command()
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Render the reference images from this checkpoint.")
@click.option("--rendered", "rendered_dir", type=click.Path(file_okay=False), default=None,
              help="Directory of reference images frame_NNNN.ppm or render_NNNN.ppm instead of a checkpoint.")
@click.option("--poses", "poses_path", type=click.Path(dir_okay=False), default=None,
              help="Pose file for the silhouettes (default as for render).")
@click.option("--skip-threshold", type=float, default=MaskingSection.skip_threshold, show_default=True)
def mask(dataset_dir, out_dir, checkpoint, rendered_dir, poses_path, skip_threshold):
    """Compute SSIM and final reliability masks for every frame."""
    if (checkpoint is None) == (rendered_dir is None):
        raise UsageFailure("give exactly one of --checkpoint or --rendered")
    ds = load_dataset(dataset_dir)
    model = load_checkpoint(checkpoint, ds)[0] if checkpoint is not None else None
    seq = current_poses(ds, model, poses_path)
    out = Path(out_dir)
    if model is not None:
        masks = compute_masks(ds, model, seq.rotations, seq.root_translation, skip_threshold)
    else:
        pad = padding_band((ds.camera.height, ds.camera.width), ds.padding_width)
        masks = []
        for f in range(ds.frame_count):
            candidates = [Path(rendered_dir) / f"{stem}_{f:04d}.ppm" for stem in ("render", "frame")]
            found = [p for p in candidates if p.exists()]
            if not found:
                raise DataFailure(f"no reference image for frame {f}: looked for {candidates[0]}")
            mesh = ds.body.mesh(ds.body.transforms(seq.rotations[f], seq.root_translation[f]))
            sil, _ = rasterize_silhouette(mesh, ds.camera)
            masks.append(build_mask(ds.images[f], read_ppm(found[0]), ds.segmentations[f], sil, pad, skip_threshold))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "masks.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "deviation", "skip", "threshold"])
        for f, m in enumerate(masks):
            save_masks(out, f, m)
            w.writerow([f, repr(float(m.deviation)), int(m.skip), repr(float(m.threshold))])
    click.echo(f"wrote masks for {len(masks)} frames ({sum(m.skip for m in masks)} skipped) to {out}")


@cli.command("eval")
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.argument("pose_files", nargs=-1, type=click.Path(dir_okay=False))
def eval_cmd(dataset_dir, pose_files):
    """Print P-MPJPE of the initial poses and of each given pose file."""
    ds = load_dataset(dataset_dir)
    if ds.truth is None:
        raise DataFailure(f"{dataset_dir} has no ground-truth poses")
    gt = joint_positions(ds.body, ds.truth)
    rows = [("initial", ds.initial)] + [(p, load_poses(p, ds)) for p in pose_files]
    width = max(len(name) for name, _ in rows)
    click.echo(f"{'poses':<{width}}  p_mpjpe_mm")
    for name, seq in rows:
        click.echo(f"{name:<{width}}  {p_mpjpe(joint_positions(ds.body, seq), gt):.6f}")


def main(argv=None):
    """Run the CLI and return its exit code (0 ok, 1 usage, 2 data, 3 divergence)."""
    try:
        cli.main(args=argv, prog_name="poserefine", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except (UsageFailure, DataFailure, Diverged) as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.code
    return EXIT_OK


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
