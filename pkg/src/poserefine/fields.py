"""Temporal opacity network and view-dependent color network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm


@dataclass
class FieldConfig:
    channels: int = 256
    temporal_len: int = 5
    tcn_layers: int = 2
    tcn_window: int = 3
    opacity_mlp_layers: int = 2
    color_mlp_layers: int = 4

    def __post_init__(self):
        if self.temporal_len < 1 or self.temporal_len % 2 == 0:
            raise ValueError(f"temporal_len must be odd, got {self.temporal_len}")
        if self.temporal_len > 1 and 1 + self.tcn_layers * (self.tcn_window - 1) > self.temporal_len:
            raise ValueError("temporal convolutions reach beyond the window")
        if self.opacity_mlp_layers < 1 or self.color_mlp_layers < 1:
            raise ValueError("each head needs at least one layer")

    def windows(self):
        """Kernel width of each temporal layer; width 1 when the window is collapsed."""
        widths, t = [], self.temporal_len
        for _ in range(self.tcn_layers):
            w = min(self.tcn_window, t)
            widths.append(w)
            t = t - w + 1
        return widths, t


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FieldNetworks:
    """Parameters live in ``self.params``; forward passes take an optional dict of
    tensors (tape leaves) that shadows the stored arrays."""

    def __init__(self, cfg: FieldConfig, input_dim: int, view_dim: int, store: dm.ParamStore | None = None,
                 rng=None, zero=False):
        self.cfg = cfg
        self.input_dim = input_dim  # per-frame opacity input width
        self.view_dim = view_dim    # per-frame view input width
        self.params = store if store is not None else dm.ParamStore()
        rng = rng if rng is not None else np.random.default_rng(0)
        C = cfg.channels
        init = (lambda fan, shape: np.zeros(shape)) if zero else (lambda fan, shape: _uniform(rng, fan, shape))
        widths, _ = cfg.windows()
        cin = input_dim
        for i, w in enumerate(widths):
            self._add(f"tcn{i}.w", init(w * cin, (w * cin, C)))
            self._add(f"tcn{i}.b", init(w * cin, (C,)))
            cin = C
        for i in range(cfg.opacity_mlp_layers - 1):
            self._add(f"opacity{i}.w", init(C, (C, C)))
            self._add(f"opacity{i}.b", init(C, (C,)))
        self._add("opacity_head.w", init(C, (C, 1)))
        self._add("opacity_head.b", init(C, (1,)))
        cin = C + cfg.temporal_len * view_dim
        for i in range(cfg.color_mlp_layers):
            out = 3 if i == cfg.color_mlp_layers - 1 else C
            self._add(f"color{i}.w", init(cin, (cin, out)))
            self._add(f"color{i}.b", init(cin, (out,)))
            cin = C

    def _add(self, name, value):
        if name not in self.params:
            self.params.add(name, value)

    def names(self):
        return [n for n in self.params.names() if n.split(".")[0].rstrip("0123456789") in
                ("tcn", "opacity", "opacity_head", "color")]

    def _p(self, P, name):
        if P is not None and name in P:
            return P[name]
        return dm.as_tensor(self.params[name])

    def opacity_forward(self, enc_window, P=None):
        """(S, T, input_dim) window of encodings -> (sigma (S,), features (S, C))."""
        h = dm.as_tensor(enc_window)
        T = self.cfg.temporal_len
        if h.ndim != 3 or h.shape[1] != T:
            raise ValueError(f"expected a window of {T} frames, got shape {h.shape}")
        if h.shape[2] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} encoding channels, got {h.shape[2]}")
        widths, t_out = self.cfg.windows()
        for i, w in enumerate(widths):
            h = temporal_conv(h, self._p(P, f"tcn{i}.w"), self._p(P, f"tcn{i}.b"), w)
            h = dm.relu(h)
        h = h[:, t_out // 2, :]
        for i in range(self.cfg.opacity_mlp_layers - 1):
            h = dm.relu(dm.matmul(h, self._p(P, f"opacity{i}.w")) + self._p(P, f"opacity{i}.b"))
        features = h
        raw = dm.matmul(h, self._p(P, "opacity_head.w")) + self._p(P, "opacity_head.b")
        sigma = dm.softplus(dm.reshape(raw, (raw.shape[0],)))
        return sigma, features

    def color_forward(self, features, view, P=None):
        """features (S, C), flattened view window (S, T * view_dim) -> rgb (S, 3)."""
        features, view = dm.as_tensor(features), dm.as_tensor(view)
        C = self.cfg.channels
        if features.ndim != 2 or features.shape[1] != C:
            raise ValueError(f"expected features of width {C}, got shape {features.shape}")
        expect = self.cfg.temporal_len * self.view_dim
        if view.shape[-1] != expect:
            raise ValueError(f"expected view encodings of width {expect}, got {view.shape[-1]}")
        W0 = self._p(P, "color0.w")
        h = dm.matmul(features, W0[:C]) + dm.matmul(view, W0[C:]) + self._p(P, "color0.b")
        return self._color_tail(h, P)

    def color_forward_factored(self, features, ray_index, view_raw, view_trig, gate, P=None):
        """Color head with the view input kept per ray.

        The embedded view input of a sample is ``[w_t, D_t * trig_t]`` per
        frame t, where ``w_t``/``trig_t`` depend only on the ray. Its first-layer
        product therefore splits into per-ray matrices plus a per-sample gate,
        which gives the same result as :meth:`color_forward` on the expanded input.

        view_raw (R, T, r), view_trig (R, T, q) or None, gate (S, T), ray_index (S,).
        """
        features = dm.as_tensor(features)
        C = self.cfg.channels
        T = self.cfg.temporal_len
        W0 = self._p(P, "color0.w")
        Wv = dm.reshape(W0[C:], (T, self.view_dim, C))
        r = view_raw.shape[-1]
        h = dm.matmul(features, W0[:C]) + self._p(P, "color0.b")
        # (R, T, 1, r) @ (T, r, C) -> (R, T, 1, C)
        raw_proj = dm.matmul(dm.expand_dims(view_raw, -2), Wv[:, :r, :])
        raw_proj = dm.sum(dm.reshape(raw_proj, (view_raw.shape[0], T, C)), axis=1)
        h = h + dm.take(raw_proj, ray_index, axis=0)
        if view_trig is not None:
            trig_proj = dm.matmul(dm.expand_dims(view_trig, -2), Wv[:, r:, :])
            trig_proj = dm.reshape(trig_proj, (view_trig.shape[0], T, C))
            per_sample = dm.take(trig_proj, ray_index, axis=0) * dm.expand_dims(dm.as_tensor(gate), -1)
            h = h + dm.sum(per_sample, axis=1)
        return self._color_tail(h, P)

    def _color_tail(self, h, P):
        n = self.cfg.color_mlp_layers
        for i in range(n):
            if i > 0:
                h = dm.matmul(h, self._p(P, f"color{i}.w")) + self._p(P, f"color{i}.b")
            if i < n - 1:
                h = dm.relu(h)
        return dm.sigmoid(h)


def temporal_conv(x, w, b, width):
    """Valid 1D convolution over the frame axis, stride 1.

    x (S, T, Cin), w (width * Cin, Cout) with taps stacked frame-major -> (S, T - width + 1, Cout).
    """
    x = dm.as_tensor(x)
    S, T, Cin = x.shape
    n_out = T - width + 1
    if n_out < 1:
        raise ValueError(f"window {width} longer than sequence {T}")
    if width == 1:
        return dm.matmul(x, w) + b
    windows = dm.stack([dm.reshape(x[:, j : j + width, :], (S, width * Cin)) for j in range(n_out)], axis=1)
    return dm.matmul(windows, w) + b
