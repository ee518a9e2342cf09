"""Capsule-rig articulated body: kinematics, skinned mesh, bone geometry, silhouettes.

Conventions: world y is up; the canonical rest pose is a T-pose facing +z.
Bone ``b`` rotates about its joint; its transform maps bone-local canonical
coordinates (rest position relative to the joint) into observation space as
``x = R_b @ x_local + T_b`` where ``T_b`` is the posed joint position.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .renderer import CameraModel

BLEND_WIDTH = 0.05  # metres of linear skin blending around each joint


@dataclass
class Skeleton:
    names: list[str]
    parent: np.ndarray        # (B,), root = -1
    rest_offsets: np.ndarray  # (B, 3) joint relative to parent joint; root row is its absolute rest position
    tips: np.ndarray          # (B, 3) end of the bone segment relative to its joint (scaled by the bone's own scale)
    primary_child: np.ndarray  # (B,), -1 when the segment end comes from ``tips``
    order: np.ndarray = field(init=False)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=int)
        self.rest_offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        self.tips = np.asarray(self.tips, dtype=np.float64)
        self.primary_child = np.asarray(self.primary_child, dtype=int)
        B = len(self.parent)
        if B < 2:
            raise ValueError("a skeleton needs at least two bones")
        if self.parent[0] != -1:
            raise ValueError("bone 0 must be the root (parent -1)")
        for b in range(1, B):
            if not 0 <= self.parent[b] < B:
                raise ValueError(f"bone {b} has invalid parent {self.parent[b]}")
        # every chain must reach the root without revisiting a bone
        order, placed = [0], {0}
        while len(order) < B:
            progressed = False
            for b in range(B):
                if b not in placed and self.parent[b] in placed:
                    order.append(b)
                    placed.add(b)
                    progressed = True
            if not progressed:
                raise ValueError("parent indices do not form a tree rooted at bone 0")
        self.order = np.array(order)

    @property
    def bone_count(self) -> int:
        return len(self.parent)

    def children(self, b):
        return [c for c in range(self.bone_count) if self.parent[c] == b]

    def to_dict(self, shape: BodyShape | None = None):
        bones = []
        for b in range(self.bone_count):
            entry = {
                "name": self.names[b],
                "parent": int(self.parent[b]),
                "offset": self.rest_offsets[b].tolist(),
                "tip": self.tips[b].tolist(),
                "primary_child": int(self.primary_child[b]),
            }
            if shape is not None:
                entry["radius"] = float(shape.radii[b])
                entry["length_scale"] = float(shape.length_scales[b])
            bones.append(entry)
        return {"bones": bones}


@dataclass
class BodyShape:
    radii: np.ndarray          # (B,) metres
    length_scales: np.ndarray  # (B,)

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=np.float64)
        self.length_scales = np.asarray(self.length_scales, dtype=np.float64)
        if np.any(self.radii <= 0):
            raise ValueError("capsule radii must be positive")
        if np.any((self.length_scales <= 0.5) | (self.length_scales >= 2.0)):
            raise ValueError("length scales must lie in (0.5, 2.0)")


@dataclass
class Pose:
    rotations: np.ndarray         # (B, 3) axis-angle
    root_translation: np.ndarray  # (3,)


@dataclass
class PoseSequence:
    rotations: np.ndarray         # (F, B, 3)
    root_translation: np.ndarray  # (F, 3)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)

    @property
    def frame_count(self):
        return self.rotations.shape[0]

    def frame(self, i) -> Pose:
        return Pose(self.rotations[i], self.root_translation[i])

    def copy(self) -> PoseSequence:
        return PoseSequence(self.rotations.copy(), self.root_translation.copy())


@dataclass
class BoneTransforms:
    R: object  # (..., B, 3, 3) array or Tensor
    T: object  # (..., B, 3)

    def numpy(self) -> BoneTransforms:
        return BoneTransforms(_np(self.R), _np(self.T))

    def encoding_frame(self) -> BoneTransforms:
        """Same rotations with translations ``R^T T``, so ``R^-1 x - T'`` is the bone-local point."""
        R, T = dm.as_tensor(self.R), dm.as_tensor(self.T)
        Tl = dm.matmul(dm.swapaxes(R, -1, -2), dm.expand_dims(T, -1))
        return BoneTransforms(R, dm.reshape(Tl, T.shape))


@dataclass
class Mesh:
    vertices: object            # (V, 3) or (..., V, 3)
    faces: np.ndarray           # (M, 3)
    skin_bones: np.ndarray      # (V, 3) bone slots
    skin_weights: np.ndarray    # (V, 3), rows sum to 1
    owner: np.ndarray           # (V,) bone whose capsule produced the vertex
    latents: np.ndarray | None = None  # (V, 32)


def _np(x):
    return x.data if isinstance(x, dm.Tensor) else np.asarray(x)


# ---------------------------------------------------------------- defaults


def default_skeleton() -> tuple[Skeleton, BodyShape]:
    """16-bone rig: pelvis, spine, neck, head, arms with hand stubs, legs with foot stubs."""
    spec = [
        # name, parent, offset, tip (leaves only), radius
        ("pelvis", -1, (0.0, 0.95, 0.0), None, 0.12),
        ("spine", 0, (0.0, 0.08, 0.0), None, 0.12),
        ("neck", 1, (0.0, 0.40, 0.0), None, 0.05),
        ("head", 2, (0.0, 0.08, 0.0), (0.0, 0.20, 0.0), 0.10),
        ("l_upper_arm", 1, (0.18, 0.34, 0.0), None, 0.05),
        ("l_lower_arm", 4, (0.28, 0.0, 0.0), None, 0.045),
        ("l_hand", 5, (0.25, 0.0, 0.0), (0.08, 0.0, 0.0), 0.04),
        ("r_upper_arm", 1, (-0.18, 0.34, 0.0), None, 0.05),
        ("r_lower_arm", 7, (-0.28, 0.0, 0.0), None, 0.045),
        ("r_hand", 8, (-0.25, 0.0, 0.0), (-0.08, 0.0, 0.0), 0.04),
        ("l_upper_leg", 0, (0.09, -0.05, 0.0), None, 0.07),
        ("l_lower_leg", 10, (0.0, -0.42, 0.0), None, 0.055),
        ("l_foot", 11, (0.0, -0.40, 0.0), (0.0, -0.02, 0.12), 0.045),
        ("r_upper_leg", 0, (-0.09, -0.05, 0.0), None, 0.07),
        ("r_lower_leg", 13, (0.0, -0.42, 0.0), None, 0.055),
        ("r_foot", 14, (0.0, -0.40, 0.0), (0.0, -0.02, 0.12), 0.045),
    ]
    return _build(spec)


def _build(spec):
    names = [s[0] for s in spec]
    parent = [s[1] for s in spec]
    offsets = np.array([s[2] for s in spec], dtype=np.float64)
    B = len(spec)
    tips = np.zeros((B, 3))
    primary = np.full(B, -1)
    for b, s in enumerate(spec):
        kids = [c for c in range(B) if parent[c] == b]
        if s[3] is not None or not kids:
            tips[b] = s[3] if s[3] is not None else (0.0, 0.05, 0.0)
        else:
            primary[b] = kids[0]
            tips[b] = offsets[kids[0]]
    skel = Skeleton(names, parent, offsets, tips, primary)
    shape = BodyShape(np.array([s[4] for s in spec]), np.ones(B))
    return skel, shape


def load_body_config(path) -> tuple[Skeleton, BodyShape]:
    data = json.loads(Path(path).read_text())
    return body_from_dict(data)


def body_from_dict(data) -> tuple[Skeleton, BodyShape]:
    bones = data["bones"]
    names = [b["name"] for b in bones]
    parent = [b["parent"] for b in bones]
    B = len(bones)
    offsets = np.array([b["offset"] for b in bones], dtype=np.float64)
    tips = np.zeros((B, 3))
    primary = np.full(B, -1)
    for i, b in enumerate(bones):
        kids = [c for c in range(B) if parent[c] == i]
        pc = b.get("primary_child", kids[0] if kids and "tip" not in b else -1)
        primary[i] = pc
        tips[i] = offsets[pc] if pc >= 0 else b.get("tip", (0.0, 0.05, 0.0))
    skel = Skeleton(names, parent, offsets, tips, primary)
    shape = BodyShape([b.get("radius", 0.05) for b in bones], [b.get("length_scale", 1.0) for b in bones])
    return skel, shape


def save_body_config(path, skeleton: Skeleton, shape: BodyShape) -> None:
    Path(path).write_text(json.dumps(skeleton.to_dict(shape), indent=1))


def body_hash(skeleton: Skeleton, shape: BodyShape) -> str:
    blob = json.dumps(skeleton.to_dict(shape), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- rotations


def _sinc_coeffs(t2):
    """A = sin(th)/th and B = (1 - cos th)/th^2 as functions of th^2, with derivatives."""
    small = t2 < 1e-6
    th = np.sqrt(np.where(small, 1.0, t2))
    s, c = np.sin(th), np.cos(th)
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, s / th)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - c) / np.where(small, 1.0, t2))
    da = np.where(small, -1 / 6 + t2 / 60 - t2 * t2 / 1680, (th * c - s) / (2 * th**3))
    db = np.where(small, -1 / 24 + t2 / 360 - t2 * t2 / 13440, (th * s - 2 * (1 - c)) / (2 * th**4))
    return a, b, da, db


# skew(r) as r @ _SKEW, reshaped to 3x3
_SKEW = np.zeros((3, 3, 3))
_SKEW[2, 1, 0], _SKEW[1, 2, 0] = 1.0, -1.0
_SKEW[0, 2, 1], _SKEW[2, 0, 1] = 1.0, -1.0
_SKEW[1, 0, 2], _SKEW[0, 1, 2] = 1.0, -1.0
_SKEW_FLAT = _SKEW.transpose(2, 0, 1).reshape(3, 9)


def axis_angle_to_matrix(r) -> dm.Tensor:
    """Rodrigues formula, differentiable. r (..., 3) -> (..., 3, 3)."""
    r = dm.as_tensor(r)
    t2 = dm.sum(r * r, axis=-1, keepdims=True)  # (..., 1)
    a, b, da, db = _sinc_coeffs(t2.data)
    A = dm.elementwise(t2, lambda _: a, lambda _: da)
    Bc = dm.elementwise(t2, lambda _: b, lambda _: db)
    lead = r.shape[:-1]
    K = dm.reshape(dm.matmul(r, _SKEW_FLAT), lead + (3, 3))
    rrT = dm.expand_dims(r, -1) * dm.expand_dims(r, -2)
    eye = np.eye(3)
    A = dm.reshape(A, lead + (1, 1))
    Bc = dm.reshape(Bc, lead + (1, 1))
    t2m = dm.reshape(t2, lead + (1, 1))
    return eye + A * K + Bc * (rrT - t2m * eye)


def rotation_matrix_np(r) -> np.ndarray:
    return axis_angle_to_matrix(np.asarray(r, dtype=np.float64)).data


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1) / 2, -1.0, 1.0)
    th = np.arccos(cos)
    v = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1)
    s = np.sin(th)
    small = s < 1e-8
    out = np.where(small[..., None], 0.5 * v, v * (th / np.where(small, 1.0, 2 * s))[..., None])
    return out


# ---------------------------------------------------------------- kinematics


def forward_kinematics(skeleton: Skeleton, rotations, root_translation, shape: BodyShape) -> BoneTransforms:
    """Compose local rotations along parent chains.

    ``rotations`` (..., B, 3) axis-angle, ``root_translation`` (..., 3); either
    may be a Tensor, in which case the result is differentiable.
    """
    rot = dm.as_tensor(rotations)
    root = dm.as_tensor(root_translation)
    B = skeleton.bone_count
    if rot.shape[-2:] != (B, 3):
        raise ValueError(f"expected rotations (..., {B}, 3), got {rot.shape}")
    local = axis_angle_to_matrix(rot)
    Rs, Ts = [None] * B, [None] * B
    for b in skeleton.order:
        Rl = local[..., b, :, :]
        p = skeleton.parent[b]
        if p < 0:
            Rs[b] = Rl
            Ts[b] = root + skeleton.rest_offsets[b]
        else:
            off = skeleton.rest_offsets[b] * shape.length_scales[b]
            Rs[b] = dm.matmul(Rs[p], Rl)
            Ts[b] = Ts[p] + dm.matmul(Rs[p], off)
    return BoneTransforms(dm.stack(Rs, axis=-3), dm.stack(Ts, axis=-2))


def canonical_joints(skeleton: Skeleton, shape: BodyShape) -> np.ndarray:
    B = skeleton.bone_count
    tf = forward_kinematics(skeleton, np.zeros((B, 3)), np.zeros(3), shape)
    return tf.T.data


def segment_vectors(skeleton: Skeleton, shape: BodyShape) -> np.ndarray:
    """Bone-local vector from each joint to the end of its capsule segment."""
    seg = skeleton.tips * shape.length_scales[:, None]
    for b in range(skeleton.bone_count):
        c = skeleton.primary_child[b]
        if c >= 0:
            seg[b] = skeleton.rest_offsets[c] * shape.length_scales[c]
    return seg


def bone_vectors(skeleton: Skeleton, rotations, root_translation, shape: BodyShape):
    """Child-joint minus parent-joint vectors for every non-root bone, and their lengths.

    Returns (vectors (..., B-1, 3), lengths (..., B-1), bone ids).
    """
    tf = forward_kinematics(skeleton, rotations, root_translation, shape)
    ids = np.arange(1, skeleton.bone_count)
    J = dm.as_tensor(tf.T)
    child = dm.take(J, ids, axis=-2)
    par = dm.take(J, skeleton.parent[ids], axis=-2)
    vec = child - par
    lengths = dm.sqrt(dm.sum(vec * vec, axis=-1))
    return vec, lengths, ids


def bone_axes(skeleton: Skeleton, transforms: BoneTransforms, shape: BodyShape):
    """Posed bone centers and segment axis vectors, both (..., B, 3)."""
    seg = segment_vectors(skeleton, shape)
    R, T = dm.as_tensor(transforms.R), dm.as_tensor(transforms.T)
    axis = dm.reshape(dm.matmul(R, seg[..., None]), T.shape)
    return T + 0.5 * axis, axis


# ---------------------------------------------------------------- mesh


def _ring_frame(d):
    d = d / np.linalg.norm(d)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return d, u, np.cross(d, u)


def capsule_template(skeleton: Skeleton, shape: BodyShape, around=8, along=6, cap_rings=2):
    """Canonical capsule mesh. Returns (vertices, faces, owner bone, axial coordinate, bone length)."""
    joints = canonical_joints(skeleton, shape)
    seg = segment_vectors(skeleton, shape)
    verts, faces, owner, axial = [], [], [], []
    ang = 2 * np.pi * np.arange(around) / around
    for b in range(skeleton.bone_count):
        L = np.linalg.norm(seg[b])
        d, u, w = _ring_frame(seg[b])
        r = shape.radii[b]
        rings = []  # (axial h, ring radius)
        lats = np.linspace(0, np.pi / 2, cap_rings + 2)[1:-1]
        for lat in lats[::-1]:
            rings.append((-r * np.cos(lat), r * np.sin(lat)))
        for h in np.linspace(0, L, along):
            rings.append((h, r))
        for lat in lats:
            rings.append((L + r * np.cos(lat), r * np.sin(lat)))
        base = sum(len(v) for v in verts)
        block = [joints[b] - r * d]
        hs = [-r]
        for h, rr in rings:
            for a in ang:
                block.append(joints[b] + h * d + rr * (np.cos(a) * u + np.sin(a) * w))
                hs.append(h)
        block.append(joints[b] + (L + r) * d)
        hs.append(L + r)
        n_r = len(rings)
        ring0 = base + 1
        for k in range(around):  # start pole fan
            faces.append((base, ring0 + (k + 1) % around, ring0 + k))
        for i in range(n_r - 1):
            a0, a1 = ring0 + i * around, ring0 + (i + 1) * around
            for k in range(around):
                k1 = (k + 1) % around
                faces.append((a0 + k, a0 + k1, a1 + k))
                faces.append((a0 + k1, a1 + k1, a1 + k))
        last = ring0 + (n_r - 1) * around
        end = base + len(block) - 1
        for k in range(around):
            faces.append((last + k, last + (k + 1) % around, end))
        verts.append(np.array(block))
        owner += [b] * len(block)
        axial += hs
    V = np.concatenate(verts)
    return V, np.array(faces, dtype=int), np.array(owner), np.array(axial), np.linalg.norm(seg, axis=1)


def skinning(skeleton: Skeleton, owner, axial, lengths):
    """Hard assignment to the owning bone, linearly blended within BLEND_WIDTH of each joint."""
    V = len(owner)
    bones = np.repeat(owner[:, None], 3, axis=1)
    weights = np.zeros((V, 3))
    for i in range(V):
        b, h, L = owner[i], axial[i], lengths[owner[i]]
        wp = wc = 0.0
        p = skeleton.parent[b]
        if p >= 0 and h < BLEND_WIDTH:
            wp = 0.5 * (1.0 - max(h, 0.0) / BLEND_WIDTH)
            bones[i, 1] = p
        c = skeleton.primary_child[b]
        if c >= 0 and h > L - BLEND_WIDTH:
            wc = 0.5 * (1.0 - max(L - h, 0.0) / BLEND_WIDTH)
            bones[i, 2] = c
        weights[i] = (1.0 - wp - wc, wp, wc)
    return bones, weights


@dataclass
class BodyModel:
    """Skeleton, shape and the derived canonical mesh with skinning data."""

    skeleton: Skeleton
    shape: BodyShape
    template: np.ndarray = field(init=False)
    faces: np.ndarray = field(init=False)
    owner: np.ndarray = field(init=False)
    skin_bones: np.ndarray = field(init=False)
    skin_weights: np.ndarray = field(init=False)
    local: np.ndarray = field(init=False)  # (V, 3 slots, 3) bone-local rest coordinates

    def __post_init__(self):
        V, F, owner, axial, lengths = capsule_template(self.skeleton, self.shape)
        self.template, self.faces, self.owner = V, F, owner
        self.skin_bones, self.skin_weights = skinning(self.skeleton, owner, axial, lengths)
        joints = canonical_joints(self.skeleton, self.shape)
        self.local = V[:, None, :] - joints[self.skin_bones]

    @classmethod
    def default(cls) -> BodyModel:
        return cls(*default_skeleton())

    @property
    def bone_count(self):
        return self.skeleton.bone_count

    @property
    def vertex_count(self):
        return len(self.template)

    def hash(self) -> str:
        return body_hash(self.skeleton, self.shape)

    def transforms(self, rotations, root_translation) -> BoneTransforms:
        return forward_kinematics(self.skeleton, rotations, root_translation, self.shape)

    def skin(self, transforms: BoneTransforms) -> dm.Tensor:
        """Posed vertex positions (..., V, 3) by linear blend skinning."""
        R, T = dm.as_tensor(transforms.R), dm.as_tensor(transforms.T)
        Rg = dm.take(R, self.skin_bones, axis=-3)  # (..., V, 3, 3, 3)
        Tg = dm.take(T, self.skin_bones, axis=-2)  # (..., V, 3, 3)
        moved = dm.reshape(dm.matmul(Rg, self.local[..., None]), Tg.shape) + Tg
        return dm.sum(moved * self.skin_weights[..., None], axis=-2)

    def mesh(self, transforms: BoneTransforms, latents=None) -> Mesh:
        return Mesh(self.skin(transforms), self.faces, self.skin_bones, self.skin_weights, self.owner, latents)


def pose_mesh(body: BodyModel, pose: Pose) -> Mesh:
    tf = body.transforms(pose.rotations, pose.root_translation)
    m = body.mesh(tf)
    m.vertices = _np(m.vertices)
    return m


# ---------------------------------------------------------------- rasterization


def rasterize(vertices, faces, camera: CameraModel, near=1e-3):
    """Z-buffered coverage of pixel centers.

    Returns (face id per pixel, -1 for empty; depth buffer; metadata).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    H, W = camera.height, camera.width
    face_id = np.full((H, W), -1, dtype=np.int64)
    zbuf = np.full((H, W), np.inf)
    meta = {"behind_camera": False, "skipped_faces": 0}
    if len(vertices) == 0 or len(faces) == 0:
        return face_id, zbuf, meta
    uv, z = camera.project(vertices)
    if np.all(z <= near):
        meta["behind_camera"] = True
        meta["skipped_faces"] = len(faces)
        return face_id, zbuf, meta
    tri_uv = uv[faces]  # (M, 3, 2)
    tri_z = z[faces]
    valid = np.all(tri_z > near, axis=1)
    meta["skipped_faces"] = int((~valid).sum())
    lo = np.floor(tri_uv.min(axis=1) - 0.5).astype(np.int64)
    hi = np.ceil(tri_uv.max(axis=1) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [W - 1, H - 1])
    valid &= np.all(hi >= lo, axis=1)
    for f in np.nonzero(valid)[0]:
        (x0, y0), (x1, y1) = lo[f], hi[f]
        a, b, c = tri_uv[f]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if area == 0:
            continue
        px = np.arange(x0, x1 + 1) + 0.5
        py = np.arange(y0, y1 + 1) + 0.5
        X, Y = np.meshgrid(px, py)
        w0 = (b[0] - X) * (c[1] - Y) - (b[1] - Y) * (c[0] - X)
        w1 = (c[0] - X) * (a[1] - Y) - (c[1] - Y) * (a[0] - X)
        w2 = (a[0] - X) * (b[1] - Y) - (a[1] - Y) * (b[0] - X)
        w0, w1, w2 = w0 / area, w1 / area, w2 / area
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        # perspective-correct depth
        iz = w0 / tri_z[f, 0] + w1 / tri_z[f, 1] + w2 / tri_z[f, 2]
        depth = 1.0 / iz
        sub_z = zbuf[y0 : y1 + 1, x0 : x1 + 1]
        sub_f = face_id[y0 : y1 + 1, x0 : x1 + 1]
        closer = inside & (depth < sub_z)
        sub_z[closer] = depth[closer]
        sub_f[closer] = f
    return face_id, zbuf, meta


def rasterize_silhouette(mesh: Mesh, camera: CameraModel):
    """Binary silhouette (H, W) and metadata (``behind_camera`` flag)."""
    face_id, _, meta = rasterize(_np(mesh.vertices), mesh.faces, camera)
    return face_id >= 0, meta


# ---------------------------------------------------------------- pose files


def save_pose_sequence(path, seq: PoseSequence) -> None:
    """One line per frame: index, root translation, then axis-angle triples per bone."""
    F, B, _ = seq.rotations.shape
    lines = [f"# pose-sequence frames={F} bones={B}"]
    for f in range(F):
        vals = [repr(float(v)) for v in seq.root_translation[f]]
        vals += [repr(float(v)) for v in seq.rotations[f].ravel()]
        lines.append(" ".join([str(f)] + vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_pose_sequence(path) -> PoseSequence:
    text = Path(path).read_text().splitlines()
    header = text[0]
    if not header.startswith("# pose-sequence"):
        raise ValueError(f"{path}: missing pose-sequence header")
    fields = dict(kv.split("=") for kv in header.split()[2:])
    F, B = int(fields["frames"]), int(fields["bones"])
    rows = [ln.split() for ln in text[1:] if ln.strip()]
    if len(rows) != F:
        raise ValueError(f"{path}: header says {F} frames, found {len(rows)}")
    rot = np.zeros((F, B, 3))
    root = np.zeros((F, 3))
    for row in rows:
        f = int(row[0])
        vals = np.array([float(v) for v in row[1:]])
        if vals.size != 3 + 3 * B:
            raise ValueError(f"{path}: frame {f} has {vals.size} values, expected {3 + 3 * B}")
        root[f] = vals[:3]
        rot[f] = vals[3:].reshape(B, 3)
    return PoseSequence(rot, root)
