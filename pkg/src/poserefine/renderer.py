"""Pinhole camera, ray generation, stratified sampling and volumetric compositing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .imageio import write_ppm


@dataclass
class CameraModel:
    """Pinhole camera. World to camera is ``x_c = R @ x_w + t``; +z looks forward, +y is image-down.

    Pixel ``(i, j)`` (column, row) has its center at image coordinates ``(i + 0.5, j + 0.5)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9) or np.linalg.det(self.R) < 0:
            raise ValueError("extrinsic rotation is not a proper orthonormal matrix")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> CameraModel:
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(fx, fy, width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                   width, height, R, -R @ eye)

    def project(self, points: np.ndarray):
        """World points (..., 3) -> (pixel coords (..., 2), camera depth (...))."""
        pc = points @ self.R.T + self.t
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": self.R.tolist(), "t": self.t.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> CameraModel:
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.array(d["R"]), np.array(d["t"]))


def pixel_centers(camera: CameraModel) -> np.ndarray:
    """(H, W, 2) image coordinates of every pixel center."""
    jj, ii = np.mgrid[0 : camera.height, 0 : camera.width]
    return np.stack([ii + 0.5, jj + 0.5], axis=-1).astype(np.float64)


def generate_rays(camera: CameraModel, pixels):
    """Rays through image coordinates ``pixels`` (..., 2); returns (origins, unit directions)."""
    px = np.asarray(pixels, dtype=np.float64)
    u, v = px[..., 0], px[..., 1]
    if np.any((u < 0) | (u > camera.width) | (v < 0) | (v > camera.height)):
        raise ValueError(f"pixel outside the {camera.width}x{camera.height} image")
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ camera.R  # R^T applied to row vectors
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


def generate_ray(camera: CameraModel, pixel):
    o, d = generate_rays(camera, np.asarray(pixel, dtype=np.float64)[None])
    return o[0], d[0]


def bounding_sphere(points: np.ndarray, inflate=1.2):
    lo, hi = points.min(axis=0), points.max(axis=0)
    c = 0.5 * (lo + hi)
    r = np.sqrt(((points - c) ** 2).sum(-1).max())
    return c, r * inflate


def ray_sphere_bounds(origins, dirs, center, radius, min_near=1e-3):
    """Entry/exit depths of rays with a sphere; rays that miss get ``hit = False``."""
    oc = origins - center
    b = (dirs * oc).sum(-1)
    cc = (oc * oc).sum(-1) - radius * radius
    disc = b * b - cc
    hit = disc > 0
    s = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - s, min_near)
    far = -b + s
    hit &= far > near
    return near, far, hit


@dataclass
class RaySamples:
    depths: np.ndarray   # (R, S) strictly increasing
    deltas: np.ndarray   # (R, S)
    points: np.ndarray   # (R, S, 3)


def sample_along_rays(origins, dirs, near, far, count=96, rng=None, far_cap=None) -> RaySamples:
    """Stratified depths: one uniform draw per equal-width bin of [near, far).

    ``rng=None`` places every sample at its bin midpoint. The last delta runs to
    ``far_cap`` (defaults to ``far``).
    """
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if np.any(near <= 0) or np.any(near >= far):
        raise ValueError("sampling bounds need 0 < near < far")
    n = near.shape[0]
    if rng is None:
        u = np.full((n, count), 0.5)
    else:
        u = rng.random((n, count))
    width = (far - near)[:, None] / count
    t = near[:, None] + (np.arange(count)[None, :] + u) * width
    cap = far if far_cap is None else np.broadcast_to(np.asarray(far_cap, dtype=np.float64), far.shape)
    deltas = np.concatenate([np.diff(t, axis=1), (cap[:, None] - t[:, -1:])], axis=1)
    deltas = np.maximum(deltas, 1e-10)
    pts = np.asarray(origins)[:, None, :] + t[..., None] * np.asarray(dirs)[:, None, :]
    return RaySamples(t, deltas, pts)


def sample_along_ray(ray, near, far, count=96, rng=None, far_cap=None) -> RaySamples:
    o, d = ray
    s = sample_along_rays(np.asarray(o)[None], np.asarray(d)[None], near, far, count, rng, far_cap)
    return RaySamples(s.depths[0], s.deltas[0], s.points[0])


def composite(sigma, color, deltas, background=None):
    """Alpha-composite samples front to back.

    sigma (..., S), color (..., S, 3), deltas (..., S). Returns (rgb (..., 3),
    total weight W (...)). Accepts tensors; the result is differentiable.
    """
    sigma, color = dm.as_tensor(sigma), dm.as_tensor(color)
    tau = sigma * dm.as_tensor(deltas)
    before = dm.cumsum(tau, axis=-1) - tau
    trans = dm.exp(-before)
    alpha = 1.0 - dm.exp(-tau)
    w = trans * alpha
    rgb = dm.sum(dm.expand_dims(w, -1) * color, axis=-2)
    total = dm.sum(w, axis=-1)
    if background is not None:
        bg = np.asarray(background, dtype=np.float64)
        if np.any(bg != 0):
            rgb = rgb + dm.expand_dims(1.0 - total, -1) * bg
    return rgb, total


def composite_weights(sigma, deltas):
    """Per-sample weights Tr_i (1 - exp(-sigma_i delta_i)) as plain arrays."""
    tau = np.asarray(sigma) * np.asarray(deltas)
    trans = np.exp(-(np.cumsum(tau, axis=-1) - tau))
    return trans * (1.0 - np.exp(-tau)), trans


def save_render(path, image, camera: CameraModel, frame: int, extra=None) -> None:
    """Write an image as binary PPM with a JSON sidecar carrying camera and frame index."""
    path = Path(path)
    write_ppm(path, image)
    meta = {"frame": int(frame), "camera": camera.to_dict()}
    if extra:
        meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))
