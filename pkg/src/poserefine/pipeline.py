"""Differentiable rendering of pixels from a pose sequence through the neural body field.

Chain: pose -> bone transforms -> posed mesh -> encodings over the temporal
window -> opacity/color networks -> volumetric compositing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import diffmath as dm
from . import encoding as enc
from .body import BodyModel, BoneTransforms, bone_axes
from .fields import FieldConfig, FieldNetworks
from .renderer import CameraModel, bounding_sphere, composite, generate_rays, ray_sphere_bounds, sample_along_rays

LATENT_DIM = 32
COMPONENTS = ("masking", "point-enc", "vertex-enc", "temporal")


@dataclass
class Ablation:
    masking: bool = True
    point_enc: bool = True
    vertex_enc: bool = True
    temporal: bool = True

    @classmethod
    def disabling(cls, names) -> Ablation:
        a = cls()
        for n in names:
            if n not in COMPONENTS:
                raise ValueError(f"unknown component {n!r}; choose from {', '.join(COMPONENTS)}")
            setattr(a, n.replace("-", "_"), False)
        return a

    def disabled(self):
        return [n for n in COMPONENTS if not getattr(self, n.replace("-", "_"))]


@dataclass
class RenderConfig:
    samples_per_ray: int = 96
    sphere_inflate: float = 1.2
    cull_distance: float | None = 0.2   # samples farther than this from the mesh get sigma = 0
    background: tuple = (0.0, 0.0, 0.0)
    chunk_rays: int = 512


@dataclass
class NeuralBody:
    """Body model, encoding settings and the field networks they feed."""

    body: BodyModel
    enc_cfg: enc.EncodingConfig = field(default_factory=enc.EncodingConfig)
    field_cfg: FieldConfig = field(default_factory=FieldConfig)
    ablation: Ablation = field(default_factory=Ablation)
    render_cfg: RenderConfig = field(default_factory=RenderConfig)
    seed: int = 0
    store: dm.ParamStore | None = None
    zero: bool = False

    def __post_init__(self):
        if not self.ablation.temporal:
            self.field_cfg = replace(self.field_cfg, temporal_len=1)
        B = self.body.bone_count
        e = self.enc_cfg
        point_w = 3 * B if self.ablation.point_enc else 3
        self.point_width = e.embedded_width(point_w) if e.embed_point else point_w
        self.bone_width = e.embedded_width(2 * B) if e.embed_bone_local else 2 * B
        self.view_raw_width = point_w
        self.view_width = e.embedded_width(point_w) if e.embed_view else point_w
        self.input_dim = self.point_width + LATENT_DIM + self.bone_width
        rng = np.random.default_rng(self.seed)
        store = self.store if self.store is not None else dm.ParamStore()
        if "vertex_latent" not in store:
            lat = np.zeros((self.body.vertex_count, LATENT_DIM)) if self.zero else \
                rng.uniform(-1, 1, (self.body.vertex_count, LATENT_DIM))
            store.add("vertex_latent", lat)
        self.fields = FieldNetworks(self.field_cfg, self.input_dim, self.view_width, store=store, rng=rng,
                                    zero=self.zero)
        self.store = store

    @property
    def T(self):
        return self.field_cfg.temporal_len

    def window(self, f, frame_count):
        """Frame indices of the window centred on ``f``; edges replicate the end frames."""
        h = self.T // 2
        return np.clip(np.arange(f - h, f + h + 1), 0, frame_count - 1)

    def param(self, P, name):
        if P is not None and name in P:
            return P[name]
        return dm.as_tensor(self.store[name])


@dataclass
class RenderOutput:
    rgb: dm.Tensor        # (R, 3)
    weight: np.ndarray    # (R,) accumulated opacity
    samples: int          # samples evaluated by the networks


def _encode_group(model: NeuralBody, P, x, win, tf_enc, verts, centers, axes):
    """Opacity-network input (n, T, D) and embedding gate (n, T) for points of one window."""
    e, ab = model.enc_cfg, model.ablation
    n = x.shape[0]
    latents = model.param(P, "vertex_latent")
    if not ab.vertex_enc:
        latents = dm.constant(np.zeros((model.body.vertex_count, LATENT_DIM)))
    v, nearest = enc.encode_vertex(x, verts, latents, e)
    if ab.point_enc:
        p = enc.encode_point(x, tf_enc)
        gate = enc.cutoff(nearest, e)
    else:
        p = dm.constant(np.broadcast_to(x[:, None, :], (n, model.T, 3)))
        gate = dm.constant(np.ones((n, model.T)))
    if e.embed_point:
        p = enc.bounded_embedding(p, None, e, gate=gate)
    bl = enc.bone_local_encoding(x, centers, axes)
    if e.embed_bone_local:
        bl = enc.bounded_embedding(bl, None, e, gate=gate)
    return dm.concat([p, v, bl], axis=-1), gate


def bounding_spheres(model: NeuralBody, rotations, root) -> np.ndarray:
    """Per-frame (cx, cy, cz, radius) of the posed mesh, inflated by ``sphere_inflate``."""
    verts = model.body.skin(model.body.transforms(_np(rotations), _np(root))).data
    out = np.zeros((len(verts), 4))
    for f, v in enumerate(verts):
        c, r = bounding_sphere(v, model.render_cfg.sphere_inflate)
        out[f] = (*c, r)
    return out


def render_pixels(model: NeuralBody, camera: CameraModel, rotations, root, frames, pixels, P=None, rng=None,
                  spheres=None):
    """Render image coordinates ``pixels`` (R, 2) at centre frames ``frames`` (R,).

    ``rotations`` (F, B, 3) and ``root`` (F, 3) cover the whole sequence and may
    be tensors; only frames inside the needed windows are posed. ``rng=None``
    samples bin midpoints. ``spheres`` (F, 4) fixes the per-frame sampling
    bounds; by default they follow the current pose, which makes the sample
    positions themselves (not differentiated) depend on the pose.
    Returns a :class:`RenderOutput`.
    """
    rc = model.render_cfg
    rotations, root = dm.as_tensor(rotations), dm.as_tensor(root)
    frames = np.asarray(frames, dtype=np.int64)
    pixels = np.asarray(pixels, dtype=np.float64)
    F = rotations.shape[0]
    centers_f = np.unique(frames)
    windows = {int(f): model.window(f, F) for f in centers_f}
    needed = np.unique(np.concatenate(list(windows.values())))
    slot = {int(f): i for i, f in enumerate(needed)}
    tf = model.body.transforms(dm.take(rotations, needed, axis=0), dm.take(root, needed, axis=0))
    verts = model.body.skin(tf)
    tf_enc = tf.encoding_frame()
    bcent, baxis = bone_axes(model.body.skeleton, tf, model.body.shape)

    bg = np.asarray(rc.background, dtype=np.float64)
    n_rays = len(frames)
    S = rc.samples_per_ray
    inputs, gates, ray_ids, dense_maps, deltas_all, view_raw, dirs_all, ray_order = [], [], [], [], [], [], [], []
    view_win = []
    n_samples = 0
    n_hit = 0
    for f in centers_f:
        sel = np.nonzero(frames == f)[0]
        o, d = generate_rays(camera, pixels[sel])
        vf = verts.data[slot[int(f)]]
        if spheres is None:
            c, r = bounding_sphere(vf, rc.sphere_inflate)
        else:
            c, r = spheres[f, :3], spheres[f, 3]
        near, far, hit = ray_sphere_bounds(o, d, c, r)
        if not hit.any():
            continue
        sel, o, d, near, far = sel[hit], o[hit], d[hit], near[hit], far[hit]
        rs = sample_along_rays(o, d, near, far, S, rng)
        pts = rs.points.reshape(-1, 3)
        if rc.cull_distance is not None:
            dist, _ = cKDTree(vf).query(pts, k=1)
            keep = dist < rc.cull_distance
        else:
            keep = np.ones(len(pts), dtype=bool)
        dense = np.full(len(pts), -1, dtype=np.int64)
        kept = np.nonzero(keep)[0]
        dense[kept] = n_samples + np.arange(len(kept))
        dense_maps.append(dense.reshape(len(sel), S))
        deltas_all.append(rs.deltas)
        ray_order.append(sel)
        w_slots = np.array([slot[int(t)] for t in windows[int(f)]])
        if len(kept):
            x = pts[kept]
            w_tf = BoneTransforms(dm.take(tf_enc.R, w_slots, axis=0), dm.take(tf_enc.T, w_slots, axis=0))
            inp, gate = _encode_group(model, P, x, w_slots, w_tf, dm.take(verts, w_slots, axis=0),
                                      dm.take(bcent, w_slots, axis=0), dm.take(baxis, w_slots, axis=0))
            inputs.append(inp)
            gates.append(gate)
            ray_ids.append(n_hit + kept // S)
        n_samples += len(kept)
        n_hit += len(sel)
        view_win.append((d, w_slots))

    rgb_hit = None
    weight = np.zeros(n_rays)
    if n_hit:
        dense = np.concatenate(dense_maps, axis=0)
        dense[dense < 0] = n_samples  # points at an appended zero row
        deltas = np.concatenate(deltas_all, axis=0)
        if n_samples:
            sigma, color = _evaluate(model, P, tf_enc, inputs, gates, ray_ids, view_win)
            sigma = dm.concat([sigma, dm.constant(np.zeros(1))], axis=0)
            color = dm.concat([color, dm.constant(np.zeros((1, 3)))], axis=0)
        else:
            sigma, color = dm.constant(np.zeros(1)), dm.constant(np.zeros((1, 3)))
        rgb_hit, w_hit = composite(dm.take(sigma, dense, axis=0), dm.take(color, dense, axis=0), deltas, bg)
        order = np.concatenate(ray_order)
        weight[order] = w_hit.data
    # scatter hit rays back into request order; misses see the background
    full_index = np.full(n_rays, n_hit, dtype=np.int64)
    if n_hit:
        full_index[order] = np.arange(n_hit)
        table = dm.concat([rgb_hit, dm.constant(bg[None, :])], axis=0)
    else:
        table = dm.constant(bg[None, :])
    return RenderOutput(dm.take(table, full_index, axis=0), weight, n_samples)


def _evaluate(model: NeuralBody, P, tf_enc, inputs, gates, ray_ids, view_win):
    e, ab = model.enc_cfg, model.ablation
    inp = dm.concat(inputs, axis=0) if len(inputs) > 1 else inputs[0]
    gate = dm.concat(gates, axis=0) if len(gates) > 1 else gates[0]
    rid = np.concatenate(ray_ids)
    raw = []
    for d, w_slots in view_win:
        if ab.point_enc:
            w_tf = BoneTransforms(dm.take(tf_enc.R, w_slots, axis=0), dm.take(tf_enc.T, w_slots, axis=0))
            raw.append(enc.encode_view(d, BoneTransforms(w_tf.R, dm.constant(np.zeros(w_tf.T.shape)))))
        else:
            raw.append(dm.constant(np.broadcast_to(d[:, None, :], (len(d), model.T, 3))))
    view_raw = dm.concat(raw, axis=0) if len(raw) > 1 else raw[0]
    trig = enc.fourier_features(view_raw, e.N) if e.embed_view else None
    sigma, feat = model.fields.opacity_forward(inp, P)
    color = model.fields.color_forward_factored(feat, rid, view_raw, trig, gate, P)
    return sigma, color


def render_image(model: NeuralBody, camera: CameraModel, rotations, root, frame, pixel_mask=None):
    """Full-frame render without gradients; ``pixel_mask`` limits which pixels are evaluated."""
    H, W = camera.height, camera.width
    img = np.broadcast_to(np.asarray(model.render_cfg.background, dtype=np.float64), (H, W, 3)).copy()
    jj, ii = np.nonzero(np.ones((H, W), bool) if pixel_mask is None else pixel_mask)
    px = np.stack([ii + 0.5, jj + 0.5], axis=-1)
    step = model.render_cfg.chunk_rays
    for s in range(0, len(px), step):
        out = render_pixels(model, camera, dm.as_tensor(np.asarray(_np(rotations))), _np(root),
                            np.full(len(px[s : s + step]), frame), px[s : s + step])
        img[jj[s : s + step], ii[s : s + step]] = out.rgb.data
    return img


def _np(x):
    return x.data if isinstance(x, dm.Tensor) else np.asarray(x)
