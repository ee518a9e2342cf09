"""Per-bone point/view encodings, Gaussian-KNN vertex encoding, bone-local features
and the distance-gated positional embedding.

Shapes: sample points ``x`` are (N, 3); bone transforms may carry extra leading
frame axes ``L`` (e.g. the temporal window), giving outputs of shape
(N, *L, features). Inputs may be arrays or tensors; outputs are tensors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import diffmath as dm

log = logging.getLogger(__name__)


@dataclass
class EncodingConfig:
    K: int = 8               # nearest vertices
    s: float = 0.05          # Gaussian std, metres
    N: int = 5               # highest embedding frequency exponent
    alpha: float = 0.5       # cutoff offset, metres
    beta_slope: float = 100.0  # cutoff slope, 1/metres
    embed_point: bool = True
    embed_view: bool = True
    embed_bone_local: bool = False

    def __post_init__(self):
        if self.K < 1 or self.s <= 0 or self.N < 0:
            raise ValueError(f"invalid encoding config K={self.K}, s={self.s}, N={self.N}")

    def embedded_width(self, width: int) -> int:
        return width * (1 + 2 * (self.N + 1))


def _split(transforms):
    return dm.as_tensor(transforms.R), dm.as_tensor(transforms.T)


def _to_bone_frames(x, R, T):
    """R_b^-1 x - T_b for every bone; x (N, 3), R (*L, B, 3, 3) -> (N, *L, B, 3)."""
    x = dm.as_tensor(x)
    lead = R.shape[:-2]  # (*L, B)
    # M[i, (l, b, j)] = R[l, b, i, j], so x @ M is R^T x for all bones at once
    axes = (R.ndim - 2,) + tuple(range(R.ndim - 2)) + (R.ndim - 1,)
    M = dm.reshape(dm.transpose(R, axes), (3, -1))
    y = dm.reshape(dm.matmul(x, M), (x.shape[0],) + lead + (3,))
    return y - T


def encode_point(x, transforms) -> dm.Tensor:
    """Concatenation over bones of ``R_b^-1 x - T_b``; (N, 3) -> (N, *L, 3B)."""
    R, T = _split(transforms)
    x = dm.as_tensor(x)
    single = x.ndim == 1
    if single:
        x = dm.reshape(x, (1, 3))
    y = _to_bone_frames(x, R, T)
    out = dm.reshape(y, y.shape[:-2] + (-1,))
    return dm.reshape(out, out.shape[1:]) if single else out


def encode_view(a, transforms) -> dm.Tensor:
    """Same per-bone structure as :func:`encode_point`, applied to a unit direction."""
    ad = a.data if isinstance(a, dm.Tensor) else np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(np.atleast_2d(ad), axis=-1)
    if np.any(norms == 0):
        raise ValueError("view direction has zero length")
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError("view direction must be unit length")
    return encode_point(a, transforms)


def knn(points: np.ndarray, vertices: np.ndarray, K: int, brute=False):
    """K nearest vertices of each point, ties broken by lowest index.

    Returns (indices (N, K), distances (N, K)), sorted by distance.
    """
    if K > len(vertices):
        raise ValueError(f"K={K} exceeds vertex count {len(vertices)}")
    if brute:
        d2 = ((points[:, None, :] - vertices[None, :, :]) ** 2).sum(-1)
        idx = np.lexsort((np.broadcast_to(np.arange(len(vertices)), d2.shape), d2), axis=-1)[:, :K]
        return idx, np.sqrt(np.take_along_axis(d2, idx, axis=1))
    dist, idx = cKDTree(vertices).query(points, k=K)
    if K == 1:
        dist, idx = dist[:, None], idx[:, None]
    # stable order on exactly equal distances
    order = np.lexsort((idx, dist), axis=-1)
    return np.take_along_axis(idx, order, 1), np.take_along_axis(dist, order, 1)


def encode_vertex(x, vertices, latents, cfg: EncodingConfig, brute=False):
    """Gaussian-weighted sum of latents of the K nearest vertices.

    ``vertices`` is (V, 3) or (*L, V, 3); ``latents`` (V, D). Returns
    (encoding (N, *L, D), nearest-vertex distance (N, *L)) as tensors.
    """
    x = dm.as_tensor(x)
    verts = dm.as_tensor(vertices)
    lat = dm.as_tensor(latents)
    single = x.ndim == 1
    if single:
        x = dm.reshape(x, (1, 3))
    n = x.shape[0]
    V = verts.shape[-2]
    lead = verts.shape[:-2]
    vflat = dm.reshape(verts, (-1, 3))
    vd = vflat.data.reshape((-1, V, 3))
    idx = np.empty((n, len(vd), cfg.K), dtype=np.int64)
    for l, vs in enumerate(vd):
        nn, _ = knn(x.data, vs, cfg.K, brute=brute)
        idx[:, l] = nn + l * V
    u = dm.take(vflat, idx, axis=0)  # (N, L, K, 3)
    diff = dm.reshape(x, (n, 1, 1, 3)) - u
    d2 = dm.sum(diff * diff, axis=-1)  # (N, L, K)
    w = dm.exp(d2 * (-0.5 / cfg.s**2))
    enc = weighted_gather(w, lat, idx % V)
    nearest = dm.sqrt(d2[..., 0] + 1e-24)
    enc = dm.reshape(enc, (n,) + lead + (lat.shape[-1],))
    nearest = dm.reshape(nearest, (n,) + lead)
    if single:
        return dm.reshape(enc, enc.shape[1:]), dm.reshape(nearest, nearest.shape[1:])
    return enc, nearest


def weighted_gather(w, table, idx) -> dm.Tensor:
    """sum_k w[..., k] * table[idx[..., k]] as one primitive; w, idx (..., K), table (V, D)."""
    from scipy.sparse import csr_matrix

    w, table = dm.as_tensor(w), dm.as_tensor(table)
    K = idx.shape[-1]
    rows = int(np.prod(idx.shape[:-1]))
    V, D = table.shape
    flat_idx = idx.reshape(-1)
    mat = csr_matrix((w.data.reshape(-1), flat_idx, np.arange(0, rows * K + 1, K)), shape=(rows, V))
    out = (mat @ table.data).reshape(idx.shape[:-1] + (D,))

    def vjp(g):
        g2 = g.reshape(rows, D)
        gw = gt = None
        if w.tape is not None:
            gw = np.einsum("rkd,rd->rk", table.data[flat_idx].reshape(rows, K, D), g2).reshape(idx.shape)
        if table.tape is not None:
            gt = np.asarray(mat.T @ g2)
        return gw, gt

    return dm.primitive(out, (w, table), vjp)


def cutoff(nearest_distance, cfg: EncodingConfig) -> dm.Tensor:
    """D = sigmoid(beta * (distance - alpha))."""
    return dm.sigmoid((dm.as_tensor(nearest_distance) - cfg.alpha) * cfg.beta_slope)


def bounded_embedding(x, nearest_distance, cfg: EncodingConfig, gate=None) -> dm.Tensor:
    """[x, D sin(2^0 x), D cos(2^0 x), ..., D sin(2^N x), D cos(2^N x)] along the last axis.

    ``nearest_distance`` has the shape of ``x`` without its last axis. ``gate``
    overrides D (pass 1.0 for the classical ungated embedding).
    """
    x = dm.as_tensor(x)
    scalar = x.ndim == 0
    if scalar:
        x = dm.reshape(x, (1,))
    D = cutoff(nearest_distance, cfg) if gate is None else dm.as_tensor(gate)
    trig = fourier_features(x, cfg.N)
    trig = trig * dm.reshape(D, D.shape + (1,))
    return dm.concat([x, trig], axis=-1)


def fourier_features(x, N) -> dm.Tensor:
    """[sin(2^0 x), cos(2^0 x), ..., sin(2^N x), cos(2^N x)] blocks along the last axis.

    Higher octaves come from double-angle recurrences, so only one sin and one
    cos are evaluated per input value.
    """
    x = dm.as_tensor(x)
    s, c = np.sin(x.data), np.cos(x.data)
    sins, coss = [s], [c]
    for _ in range(N):
        s, c = 2.0 * s * c, 1.0 - 2.0 * s * s
        sins.append(s)
        coss.append(c)
    S, Cc = np.stack(sins, axis=-2), np.stack(coss, axis=-2)  # (..., N+1, C)
    out = np.stack([S, Cc], axis=-2).reshape(x.shape[:-1] + (-1,))
    freqs = (2.0 ** np.arange(N + 1))[:, None]

    def vjp(g):
        g = g.reshape(x.shape[:-1] + (N + 1, 2, x.shape[-1]))
        return (((g[..., 0, :] * Cc - g[..., 1, :] * S) * freqs).sum(axis=-2),)

    return dm.primitive(out, (x,), vjp)


def bone_local_encoding(x, centers, axes) -> dm.Tensor:
    """Per bone (distance to bone center, angle between bone axis and center->x).

    ``centers``/``axes`` (*L, B, 3); returns (N, *L, 2B) interleaved per bone.
    """
    x = dm.as_tensor(x)
    c, a = dm.as_tensor(centers), dm.as_tensor(axes)
    single = x.ndim == 1
    if single:
        x = dm.reshape(x, (1, 3))
    n = x.shape[0]
    xs = dm.reshape(x, (n,) + (1,) * (c.ndim - 1) + (3,))
    v = xs - c  # (N, *L, B, 3)
    dist = dm.sqrt(dm.sum(v * v, axis=-1) + 1e-24)
    if np.any(np.linalg.norm(a.data, axis=-1) == 0):
        log.warning("zero-length bone axis; its angle feature is set to 0")
    cross = dm.take(a, [1, 2, 0], -1) * dm.take(v, [2, 0, 1], -1) - dm.take(a, [2, 0, 1], -1) * dm.take(v, [1, 2, 0], -1)
    sin_part = dm.sqrt(dm.sum(cross * cross, axis=-1) + 1e-30)
    cos_part = dm.sum(dm.broadcast_to(a, v.shape) * v, axis=-1)
    angle = dm.atan2(sin_part, cos_part)
    valid = np.linalg.norm(a.data, axis=-1) > 0
    if not valid.all():
        angle = angle * valid.astype(np.float64)
    out = dm.stack([dist, angle], axis=-1)
    out = dm.reshape(out, out.shape[:-2] + (-1,))
    return dm.reshape(out, out.shape[1:]) if single else out
