"""Image and bone-length losses, the joint field/pose optimisation loop and P-MPJPE."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import diffmath as dm
from .body import BodyModel, PoseSequence, bone_vectors, rasterize_silhouette, save_pose_sequence
from .masking import FrameMask, build_mask, padding_band
from .pipeline import NeuralBody, bounding_spheres, render_image, render_pixels

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, iteration, message):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class RefineConfig:
    lambda_reg: float = 0.1
    lr_start: float = 5e-4
    lr_end: float = 1e-5
    iterations: int = 5000
    frames_per_batch: int = 128
    pixels_per_frame: int = 32
    pose_lr_mult: float = 1.0
    pose_warmup: int = 0          # iterations at the start during which poses stay fixed
    refine_translation: bool = False
    mask_refresh_interval: int = 500
    skip_threshold: float = 0.7
    reg_mode: str = "length"      # "length" or "vector"
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")
        if not (self.lr_start > 0 and self.lr_end > 0) or self.lr_end > self.lr_start:
            raise ValueError("learning rates must be positive and non-increasing")
        if self.reg_mode not in ("length", "vector"):
            raise ValueError(f"reg_mode must be 'length' or 'vector', got {self.reg_mode!r}")
        if self.iterations < 0 or self.frames_per_batch < 1 or self.pixels_per_frame < 1:
            raise ValueError("iterations, frames_per_batch and pixels_per_frame must be positive")

    def learning_rate(self, it):
        """Exponential decay from lr_start at iteration 0 to lr_end at the last iteration."""
        if self.iterations <= 1:
            return self.lr_start
        return self.lr_start * (self.lr_end / self.lr_start) ** (it / (self.iterations - 1))


# ---------------------------------------------------------------- losses


def rgb_loss(rendered, observed) -> dm.Tensor:
    """Sum over pixels and channels of |C - I|."""
    rendered = dm.as_tensor(rendered)
    if rendered.shape[0] == 0:
        log.info("no pixels sampled; image loss is 0")
        return dm.constant(0.0)
    return dm.sum(dm.abs(rendered - np.asarray(observed, dtype=np.float64)))


def deviation_from_mean(values) -> dm.Tensor:
    """sum over all entries of (v - mean over frames)^2; frames on axis 0."""
    values = dm.as_tensor(values)
    dev = values - dm.mean(values, axis=0, keepdims=True)
    return dm.sum(dev * dev)


def bone_reg_loss(body: BodyModel, rotations, root_translation, mode="length") -> dm.Tensor:
    """Bone consistency across frames.

    ``length``: sum_b sum_f (|B_bf| - mean_f |B_bf|)^2. ``vector``: squared
    deviation of each bone vector from its mean vector over frames.
    """
    if mode not in ("length", "vector"):
        raise ValueError(f"unknown mode {mode!r}")
    vec, lengths, _ = bone_vectors(body.skeleton, rotations, root_translation, body.shape)
    return deviation_from_mean(lengths if mode == "length" else vec)


# ---------------------------------------------------------------- evaluation


def joint_positions(body: BodyModel, seq: PoseSequence, rotations=None) -> np.ndarray:
    """Joints plus the end points of leaf bones, (F, J, 3) in metres."""
    rot = seq.rotations if rotations is None else rotations
    tf = body.transforms(rot, seq.root_translation).numpy()
    sk = body.skeleton
    leaves = [b for b in range(sk.bone_count) if sk.primary_child[b] < 0]
    tips = sk.tips[leaves] * body.shape.length_scales[leaves, None]
    ends = np.einsum("fbij,bj->fbi", tf.R[:, leaves], tips) + tf.T[:, leaves]
    return np.concatenate([tf.T, ends], axis=1)


def procrustes_align(pred, gt):
    """Similarity transform (s, R, t) minimising |s R pred + t - gt|; pred, gt (J, 3)."""
    mp, mg = pred.mean(0), gt.mean(0)
    X, Y = pred - mp, gt - mg
    if np.linalg.matrix_rank(X, tol=1e-9) < 2 or np.linalg.matrix_rank(Y, tol=1e-9) < 2:
        raise ValueError("alignment needs at least 3 non-collinear joints")
    U, S, Vt = np.linalg.svd(X.T @ Y)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d])
    R = (U @ D @ Vt).T
    s = (S * np.diag(D)).sum() / (X * X).sum()
    return s, R, mg - s * R @ mp


def p_mpjpe(pred, gt) -> float:
    """Mean per-joint error in millimetres after per-frame similarity alignment; inputs in metres."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"joint arrays differ in shape: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.shape[1] < 3:
        raise ValueError("alignment needs at least 3 non-collinear joints")
    errs = []
    for p, g in zip(pred, gt):
        s, R, t = procrustes_align(p, g)
        aligned = s * p @ R.T + t
        errs.append(np.linalg.norm(aligned - g, axis=1).mean())
    return float(np.mean(errs) * 1000.0)


# ---------------------------------------------------------------- masks


def compute_masks(dataset, model: NeuralBody, rotations, root, skip_threshold=0.7, margin=6):
    """Render the current field around each segmentation and rebuild the reliability masks."""
    H, W = dataset.camera.height, dataset.camera.width
    pad = padding_band((H, W), dataset.padding_width)
    out = []
    for f in range(dataset.frame_count):
        seg = dataset.segmentations[f]
        region = ndimage.binary_dilation(seg, iterations=margin) if seg.any() else seg
        rendered = render_image(model, dataset.camera, rotations, root, f, pixel_mask=region)
        mesh = model.body.mesh(model.body.transforms(rotations[f], root[f]))
        sil, _ = rasterize_silhouette(mesh, dataset.camera)
        out.append(build_mask(dataset.images[f], rendered, seg, sil, pad, skip_threshold))
    return out


def initial_masks(dataset):
    segs = dataset.segmentations
    return [FrameMask(s.copy(), s.copy(), not s.any(), 0.0 if s.any() else 1.0) for s in segs]


# ---------------------------------------------------------------- loop


@dataclass
class RefinementResult:
    poses: PoseSequence
    history: list = field(default_factory=list)   # (iteration, L_rgb, L_reg, L_all)
    skip: np.ndarray | None = None
    p_mpjpe_initial: float | None = None
    p_mpjpe_final: float | None = None
    diverged_at: int | None = None
    seconds: float = 0.0

    @property
    def delta(self):
        if self.p_mpjpe_initial is None or self.p_mpjpe_final is None:
            return None
        return self.p_mpjpe_final - self.p_mpjpe_initial


def refine(dataset, model: NeuralBody, cfg: RefineConfig, progress=None, train_frames=None) -> RefinementResult:
    """Jointly optimise the field networks and the per-frame poses.

    ``train_frames`` restricts which frames supply pixels (windows still reach
    their neighbours); by default every frame is eligible.
    """
    t0 = time.time()
    store = model.store
    init = dataset.initial
    store.add("pose_rot", init.rotations.copy(), lr_mult=cfg.pose_lr_mult)
    if cfg.refine_translation:
        store.add("pose_root", init.root_translation.copy(), lr_mult=cfg.pose_lr_mult)
    rng = np.random.default_rng(cfg.seed)
    F = dataset.frame_count
    allowed = range(F) if train_frames is None else sorted(set(int(f) for f in train_frames))
    masks = initial_masks(dataset)
    history = []
    diverged = None
    root_const = init.root_translation
    # sampling bounds come from the initial poses so sample placement does not move with the parameters
    spheres = bounding_spheres(model, init.rotations, init.root_translation)

    def current_root(P=None):
        if cfg.refine_translation:
            return P["pose_root"] if P is not None else store["pose_root"]
        return root_const

    for it in range(cfg.iterations):
        if model.ablation.masking and it > 0 and cfg.mask_refresh_interval > 0 and it % cfg.mask_refresh_interval == 0:
            masks = compute_masks(dataset, model, store["pose_rot"], np.asarray(current_root()), cfg.skip_threshold)
        eligible = np.array([f for f in allowed if not masks[f].skip and masks[f].final_mask.any()])
        if len(eligible) == 0:
            log.warning("every frame is skipped at iteration %d; nothing to fit", it)
            frames_sel = np.zeros(0, dtype=np.int64)
        else:
            frames_sel = np.sort(rng.choice(eligible, size=min(cfg.frames_per_batch, len(eligible)), replace=False))
        frames, pixels, targets = [], [], []
        for f in frames_sel:
            jj, ii = np.nonzero(masks[f].final_mask)
            pick = rng.choice(len(jj), size=cfg.pixels_per_frame, replace=len(jj) < cfg.pixels_per_frame)
            frames.append(np.full(len(pick), f))
            pixels.append(np.stack([ii[pick] + 0.5, jj[pick] + 0.5], axis=-1))
            targets.append(dataset.images[f][jj[pick], ii[pick]])

        tape = dm.Tape()
        P = store.leaves(tape)
        rot = P["pose_rot"]
        root = current_root(P)
        if frames:
            out = render_pixels(model, dataset.camera, rot, root, np.concatenate(frames),
                                np.concatenate(pixels), P, rng, spheres)
            l_rgb = rgb_loss(out.rgb, np.concatenate(targets))
        else:
            l_rgb = dm.constant(0.0)
        l_reg = bone_reg_loss(model.body, rot, root, cfg.reg_mode)
        l_all = l_rgb + cfg.lambda_reg * l_reg
        vals = (float(l_rgb.data), float(l_reg.data), float(l_all.data))
        if not np.all(np.isfinite(vals)):
            diverged = it
            log.error("loss became non-finite at iteration %d", it)
            break
        grads = tape.backward(l_all) if l_all.tape is not None else {}
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            diverged = it
            log.error("gradient became non-finite at iteration %d", it)
            break
        tape.clear()
        frozen = ("pose_rot", "pose_root") if it < cfg.pose_warmup else ()
        store.step(grads, cfg.learning_rate(it), frozen)
        history.append((it,) + vals)
        if progress is not None and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            progress(it, vals)

    rot_final = store["pose_rot"].copy()
    root_final = np.asarray(current_root()).copy()
    result = RefinementResult(PoseSequence(rot_final, root_final), history,
                              np.array([m.skip for m in masks]), diverged_at=diverged)
    if dataset.truth is not None:
        gt = joint_positions(model.body, dataset.truth)
        result.p_mpjpe_initial = p_mpjpe(joint_positions(model.body, init), gt)
        result.p_mpjpe_final = p_mpjpe(joint_positions(model.body, result.poses), gt)
    result.seconds = time.time() - t0
    return result


def write_result(out_dir, result: RefinementResult):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_pose_sequence(out / "poses_refined.txt", result.poses)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "L_rgb", "L_reg", "L_all"])
        for it, a, b, c in result.history:
            w.writerow([it, repr(a), repr(b), repr(c)])
    lines = ["[metrics]"]
    for key, val in (("initial_p_mpjpe_mm", result.p_mpjpe_initial), ("final_p_mpjpe_mm", result.p_mpjpe_final),
                     ("delta_mm", result.delta)):
        lines.append(f"{key} = {'nan' if val is None else repr(float(val))}")
    lines.append(f"iterations = {len(result.history)}")
    lines.append(f"skipped_frames = {int(result.skip.sum()) if result.skip is not None else 0}")
    lines.append(f"diverged_at = {-1 if result.diverged_at is None else result.diverged_at}")
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
