"""Synthetic ground-truth scenes: a moving capsule body rendered by direct rasterization,
with occluders, corrupted segmentations and perturbed initial poses."""

from __future__ import annotations

import colorsys
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .body import (
    BodyModel,
    PoseSequence,
    body_from_dict,
    capsule_template,
    default_skeleton,
    load_pose_sequence,
    rasterize,
    save_pose_sequence,
)
from .imageio import read_mask, read_ppm, write_pgm, write_ppm
from .renderer import CameraModel

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class SceneError(ValueError):
    pass


@dataclass
class MotionScript:
    """Per-bone, per-axis sinusoids: angle = offset + amplitude * sin(2 pi frequency f + phase)."""

    offset: list
    amplitude: list
    frequency: list   # cycles per frame
    phase: list
    root_amplitude: list = field(default_factory=lambda: [0.05, 0.0, 0.0])
    root_frequency: float = 1 / 60

    def evaluate(self, frames: int, base_translation=(0.0, 0.0, 0.0)) -> PoseSequence:
        t = np.arange(frames)[:, None, None]
        off, amp, freq, ph = (np.asarray(v, dtype=np.float64) for v in
                              (self.offset, self.amplitude, self.frequency, self.phase))
        rot = off + amp * np.sin(2 * np.pi * freq * t + ph)
        ts = np.arange(frames)[:, None]
        root = np.asarray(base_translation) + np.asarray(self.root_amplitude) * np.sin(2 * np.pi * self.root_frequency * ts)
        return PoseSequence(rot, root)


def default_motion(bones=16) -> MotionScript:
    """A walk-like cycle of 30 frames on the default 16-bone rig."""
    off = np.zeros((bones, 3))
    amp = np.zeros((bones, 3))
    freq = np.full((bones, 3), 1 / 30)
    ph = np.zeros((bones, 3))
    amp[0, 1] = 0.25
    freq[0, 1] = 1 / 60                        # slow pelvis yaw
    amp[1] = (0.08, 0.15, 0.0)                 # spine
    amp[2, 0], ph[2, 0] = 0.1, 1.0             # neck nod
    amp[3, 1], freq[3, 1] = 0.3, 1 / 60        # head turn
    off[4, 2], amp[4, 1], amp[4, 2] = -0.9, 0.5, 0.15     # left upper arm, lowered and swinging
    off[5, 1], amp[5, 1] = 0.5, 0.35                       # left elbow
    off[7, 2], amp[7, 1], amp[7, 2] = 0.9, 0.5, 0.15      # right upper arm
    ph[7, 1], ph[7, 2] = np.pi, np.pi
    off[8, 1], amp[8, 1], ph[8, 1] = -0.5, 0.35, np.pi    # right elbow
    amp[10, 0] = 0.45                                      # hips
    amp[13, 0], ph[13, 0] = 0.45, np.pi
    off[11, 0], amp[11, 0], ph[11, 0] = 0.4, 0.35, -np.pi / 2   # knees bend backwards
    off[14, 0], amp[14, 0], ph[14, 0] = 0.4, 0.35, np.pi / 2
    amp[12, 0], amp[15, 0], ph[15, 0] = 0.2, 0.2, np.pi     # feet
    return MotionScript(off.tolist(), amp.tolist(), freq.tolist(), ph.tolist())


@dataclass
class Occluder:
    shape: str = "disk"            # "disk" or "rect"
    size: float = 12.0             # radius (disk) or half-extent (rect), pixels
    color: tuple = (0.95, 0.95, 0.95)
    start: tuple = (38.0, 50.0)    # pixel centre at the first active frame
    end: tuple = (90.0, 50.0)      # pixel centre at the last active frame
    frames: tuple = (20, 35)       # inclusive frame range

    def center(self, f):
        a, b = self.frames
        if not a <= f <= b:
            return None
        s = 0.0 if b == a else (f - a) / (b - a)
        return (1 - s) * np.asarray(self.start, dtype=np.float64) + s * np.asarray(self.end, dtype=np.float64)

    def coverage(self, f, height, width):
        c = self.center(f)
        out = np.zeros((height, width), dtype=bool)
        if c is None:
            return out
        jj, ii = np.mgrid[0:height, 0:width] + 0.5
        if self.shape == "disk":
            out = (ii - c[0]) ** 2 + (jj - c[1]) ** 2 <= self.size**2
        elif self.shape == "rect":
            out = (np.abs(ii - c[0]) <= self.size) & (np.abs(jj - c[1]) <= self.size)
        else:
            raise SceneError(f"unknown occluder shape {self.shape!r}")
        return out


@dataclass
class SegCorruption:
    dilation: int = 1             # pixels (negative values are not allowed; use erosion)
    erosion: int = 0
    extra_blobs: int = 1          # spurious disks added near the body per frame
    blob_radius: float = 4.0
    include_occluder: bool = True  # segmentation wrongly absorbs occluders near the person

    def is_clean(self):
        return self.dilation == 0 and self.erosion == 0 and self.extra_blobs == 0


@dataclass
class CameraSpec:
    eye: tuple = (0.0, 1.0, 4.0)
    target: tuple = (0.0, 0.9, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    focal: float = 220.0


@dataclass
class SceneSpec:
    frames: int = 60
    width: int = 128
    height: int = 128
    camera: CameraSpec = field(default_factory=CameraSpec)
    motion: MotionScript = field(default_factory=default_motion)
    texture: str = "bones"        # "bones" (flat per-bone colors) or "stripes"
    occluders: list = field(default_factory=lambda: [Occluder()])
    corruption: SegCorruption = field(default_factory=SegCorruption)
    padding_width: int = 4
    image_noise: float = 0.0
    perturbation: float = 0.15    # radians
    seed: int = 0
    temporal_len: int = 5

    def __post_init__(self):
        if self.frames < self.temporal_len:
            raise SceneError(f"scene needs at least {self.temporal_len} frames, got {self.frames}")
        if self.texture not in ("bones", "stripes"):
            raise SceneError(f"unknown texture {self.texture!r}")
        if self.perturbation < 0:
            raise SceneError("perturbation magnitude must be non-negative")
        self.occluders = [o if isinstance(o, Occluder) else Occluder(**o) for o in self.occluders]
        if isinstance(self.camera, dict):
            self.camera = CameraSpec(**self.camera)
        if isinstance(self.motion, dict):
            self.motion = MotionScript(**self.motion)
        if isinstance(self.corruption, dict):
            self.corruption = SegCorruption(**self.corruption)

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def make_camera(self) -> CameraModel:
        c = self.camera
        return CameraModel.look_at(c.eye, c.target, c.up, c.focal, c.focal, self.width, self.height)


def bone_palette(bones):
    cols = []
    for b in range(bones):
        h = (b * 0.618034) % 1.0
        v = 0.9 if b % 2 == 0 else 0.6
        cols.append(colorsys.hsv_to_rgb(h, 0.75, v))
    return np.array(cols)


def face_colors(body: BodyModel, texture="bones", stripe=0.06):
    owner = body.owner[body.faces[:, 0]]
    cols = bone_palette(body.bone_count)[owner]
    if texture == "stripes":
        axial = capsule_template(body.skeleton, body.shape)[3]
        h = axial[body.faces].mean(axis=1)
        dark = (np.floor(h / stripe).astype(int) % 2) == 1
        cols = np.where(dark[:, None], 0.45 * cols, cols)
    return cols


def render_body(body: BodyModel, vertices, camera: CameraModel, colors):
    """Flat-shaded render; returns (rgb image, silhouette)."""
    fid, _, _ = rasterize(vertices, body.faces, camera)
    sil = fid >= 0
    img = np.zeros((camera.height, camera.width, 3))
    img[sil] = colors[fid[sil]]
    return img, sil


def _disk(radius):
    r = int(np.ceil(radius))
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    return x * x + y * y <= radius * radius


def corrupt_segmentation(sil, occ, corruption: SegCorruption, rng):
    seg = sil & ~occ
    if corruption.include_occluder and occ.any() and sil.any():
        jj, ii = np.nonzero(ndimage.binary_dilation(sil, _disk(3)))
        box = np.zeros_like(sil)
        box[jj.min() : jj.max() + 1, ii.min() : ii.max() + 1] = True
        seg |= occ & box
    if corruption.dilation > 0:
        seg = ndimage.binary_dilation(seg, _disk(corruption.dilation))
    if corruption.erosion > 0:
        seg = ndimage.binary_erosion(seg, _disk(corruption.erosion))
    if corruption.extra_blobs and sil.any():
        jj, ii = np.nonzero(sil)
        H, W = sil.shape
        yy, xx = np.mgrid[0:H, 0:W]
        for _ in range(corruption.extra_blobs):
            k = rng.integers(len(jj))
            cy = jj[k] + rng.uniform(-8, 8)
            cx = ii[k] + rng.uniform(-8, 8)
            seg |= (yy - cy) ** 2 + (xx - cx) ** 2 <= corruption.blob_radius**2
    return seg


def perturb_poses(true: PoseSequence, magnitude: float, seed: int, drift_fraction=0.5) -> PoseSequence:
    """Per-component Gaussian noise of std ``magnitude`` plus a slow sinusoidal drift.

    Only rotations change, so bone lengths are preserved exactly.
    """
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    out = true.copy()
    if magnitude == 0:
        return out
    rng = np.random.default_rng(seed)
    F = true.frame_count
    shape = true.rotations.shape[1:]
    noise = rng.normal(0.0, magnitude, size=true.rotations.shape)
    amp = rng.normal(0.0, drift_fraction * magnitude, size=shape)
    cycles = rng.uniform(0.3, 1.0, size=shape)
    phase = rng.uniform(0, 2 * np.pi, size=shape)
    t = np.arange(F)[:, None, None] / F
    drift = amp * np.sin(2 * np.pi * cycles * t + phase)
    out.rotations = true.rotations + noise + drift
    return out


@dataclass
class Dataset:
    """In-memory view of a scene directory."""

    root: Path
    manifest: dict
    images: np.ndarray         # (F, H, W, 3)
    segmentations: np.ndarray  # (F, H, W) bool
    camera: CameraModel
    body: BodyModel
    initial: PoseSequence
    truth: PoseSequence | None

    @property
    def frame_count(self):
        return len(self.images)

    @property
    def padding_width(self):
        return int(self.manifest.get("padding_width", 0))

    @classmethod
    def load(cls, directory) -> Dataset:
        root = Path(directory)
        mpath = root / MANIFEST
        if not mpath.exists():
            raise FileNotFoundError(f"missing manifest {mpath}")
        m = json.loads(mpath.read_text())

        def need(rel):
            p = root / rel
            if not p.exists():
                raise FileNotFoundError(f"dataset file missing: {p}")
            return p

        images = np.stack([read_ppm(need(p)) for p in m["images"]])
        segs = np.stack([read_mask(need(p)) for p in m["segmentations"]])
        if len(images) != m["frames"] or len(segs) != m["frames"]:
            raise ValueError("manifest frame count does not match the image lists")
        camera = CameraModel.from_dict(json.loads(need(m["camera"]).read_text()))
        skel, shape = body_from_dict(json.loads(need(m["body"]).read_text()))
        initial = load_pose_sequence(need(m["initial_poses"]))
        truth = load_pose_sequence(need(m["true_poses"])) if m.get("true_poses") else None
        if initial.frame_count != m["frames"]:
            raise ValueError("initial pose count does not match the frame count")
        return cls(root, m, images, segs, camera, BodyModel(skel, shape), initial, truth)


def generate_scene(spec: SceneSpec, out_dir, body: BodyModel | None = None) -> dict:
    """Render the scene described by ``spec`` into ``out_dir``; returns the manifest."""
    from .refine import joint_positions, p_mpjpe

    out = Path(out_dir)
    body = body if body is not None else BodyModel(*default_skeleton())
    B = body.bone_count
    if np.asarray(spec.motion.offset).shape != (B, 3):
        raise SceneError(f"motion script covers {np.asarray(spec.motion.offset).shape[0]} bones, body has {B}")
    camera = spec.make_camera()
    truth = spec.motion.evaluate(spec.frames)
    colors = face_colors(body, spec.texture)
    H, W = spec.height, spec.width

    verts = body.skin(body.transforms(truth.rotations, truth.root_translation)).data  # (F, V, 3)
    uv, z = camera.project(verts)
    outside = (z <= 0) | (uv[..., 0] < 0) | (uv[..., 0] > W) | (uv[..., 1] < 0) | (uv[..., 1] > H)
    out_frames = outside.any(axis=1)
    if out_frames.mean() > 0.5:
        raise SceneError(f"body leaves the image in {int(out_frames.sum())} of {spec.frames} frames "
                         f"(first: {int(np.argmax(out_frames))}); move the camera back or shrink the motion")

    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "segmentation").mkdir(exist_ok=True)
    (out / "silhouette").mkdir(exist_ok=True)
    pad = np.zeros((H, W), dtype=bool)
    if spec.padding_width:
        from .masking import padding_band

        pad = padding_band((H, W), spec.padding_width)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.frames)
    images, segs, sils = [], [], []
    for f in range(spec.frames):
        rng = np.random.default_rng(seeds[f])
        img, sil = render_body(body, verts[f], camera, colors)
        occ_all = np.zeros((H, W), dtype=bool)
        for o in spec.occluders:
            occ = o.coverage(f, H, W)
            img[occ] = o.color
            occ_all |= occ
        seg = corrupt_segmentation(sil, occ_all, spec.corruption, rng)
        if spec.image_noise > 0:
            img = np.clip(img + rng.normal(0, spec.image_noise, img.shape), 0, 1)
        img[pad] = 0.0
        write_ppm(out / "images" / f"frame_{f:04d}.ppm", img)
        write_pgm(out / "segmentation" / f"seg_{f:04d}.pgm", seg)
        write_pgm(out / "silhouette" / f"sil_{f:04d}.pgm", sil)
        images.append(f"images/frame_{f:04d}.ppm")
        segs.append(f"segmentation/seg_{f:04d}.pgm")
        sils.append(f"silhouette/sil_{f:04d}.pgm")

    initial = perturb_poses(truth, spec.perturbation, spec.seed + 1)
    save_pose_sequence(out / "poses_true.txt", truth)
    save_pose_sequence(out / "poses_initial.txt", initial)
    (out / "camera.json").write_text(json.dumps(camera.to_dict(), indent=1, sort_keys=True))
    (out / "body.json").write_text(json.dumps(body.skeleton.to_dict(body.shape), indent=1, sort_keys=True))
    err = p_mpjpe(joint_positions(body, initial), joint_positions(body, truth))
    manifest = {
        "frames": spec.frames,
        "width": W,
        "height": H,
        "images": images,
        "segmentations": segs,
        "silhouettes": sils,
        "padding_width": spec.padding_width,
        "true_poses": "poses_true.txt",
        "initial_poses": "poses_initial.txt",
        "camera": "camera.json",
        "body": "body.json",
        "body_hash": body.hash(),
        "spec": spec.to_dict(),
        "spec_hash": spec.hash(),
        "initial_p_mpjpe_mm": round(float(err), 6),
        "frames_partly_outside": int(out_frames.sum()),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def rerender_frame(directory, frame: int) -> np.ndarray:
    """Re-render one frame of a saved scene from its manifest (for round-trip checks)."""
    ds = Dataset.load(directory)
    spec = SceneSpec(**{k: v for k, v in ds.manifest["spec"].items()})
    truth = ds.truth
    verts = ds.body.skin(ds.body.transforms(truth.rotations[frame], truth.root_translation[frame])).data
    img, _ = render_body(ds.body, verts, ds.camera, face_colors(ds.body, spec.texture))
    H, W = ds.camera.height, ds.camera.width
    for o in spec.occluders:
        img[o.coverage(frame, H, W)] = o.color
    if spec.image_noise > 0:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(spec.frames)[frame])
        # the segmentation corruption draws first from the same stream
        corrupt_segmentation(render_body(ds.body, verts, ds.camera, face_colors(ds.body))[1],
                             np.zeros((H, W), bool), spec.corruption, rng)
        img = np.clip(img + rng.normal(0, spec.image_noise, img.shape), 0, 1)
    if spec.padding_width:
        from .masking import padding_band

        img[padding_band((H, W), spec.padding_width)] = 0.0
    return img
