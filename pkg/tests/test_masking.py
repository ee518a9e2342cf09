import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poserefine.imageio import read_pgm
from poserefine.masking import (build_mask, gaussian_window, iou, otsu, otsu_split, otsu_threshold, padding_band,
                                save_masks, ssim_map, to_gray)


def naive_ssim(a, b, w, L=1.0):
    """Double-loop windowed SSIM with reflected borders."""
    a, b = to_gray(a), to_gray(b)
    r = w.shape[0] // 2
    pa, pb = np.pad(a, r, mode="symmetric"), np.pad(b, r, mode="symmetric")
    C1, C2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    out = np.zeros_like(a)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            x, y = pa[i : i + 2 * r + 1, j : j + 2 * r + 1], pb[i : i + 2 * r + 1, j : j + 2 * r + 1]
            mx, my = (w * x).sum(), (w * y).sum()
            vx, vy = (w * x * x).sum() - mx**2, (w * y * y).sum() - my**2
            cxy = (w * x * y).sum() - mx * my
            out[i, j] = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx**2 + my**2 + C1) * (vx + vy + C2))
    return out


def test_ssim_identical_is_one():
    img = np.random.default_rng(0).uniform(size=(20, 24, 3))
    np.testing.assert_allclose(ssim_map(img, img), 1.0, atol=1e-9)


def test_ssim_negative_patch():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(32, 32))
    s = ssim_map(img, 1.0 - img)
    assert s[10:22, 10:22].max() < 0


def test_ssim_resolution_mismatch():
    with pytest.raises(ValueError):
        ssim_map(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_matches_naive_oracle_100_instances():
    rng = np.random.default_rng(2)
    w = gaussian_window()
    for _ in range(100):
        h, wd = rng.integers(12, 20, size=2)
        a = rng.uniform(size=(h, wd, 3))
        b = np.clip(a + rng.normal(scale=rng.uniform(0.01, 0.5), size=a.shape), 0, 1)
        np.testing.assert_allclose(ssim_map(a, b), naive_ssim(a, b, w), atol=1e-9)


def test_gray_weights():
    assert to_gray(np.array([[[1.0, 0.0, 0.0]]]))[0, 0] == pytest.approx(0.299)


def scan_oracle(v, nbins=256):
    """Best between-class variance over every bin boundary, computed split by split."""
    lo, hi = v.min(), v.max()
    idx = np.clip(np.floor((v - lo) / (hi - lo) * nbins).astype(int), 0, nbins - 1)
    best, best_k = -1.0, None
    for k in range(1, nbins):
        up = idx >= k
        if up.all() or not up.any():
            continue
        w1 = up.mean()
        score = (1 - w1) * w1 * (v[~up].mean() - v[up].mean()) ** 2
        if score > best * (1 + 1e-12) + 1e-300:
            best, best_k = score, k
    return best, best_k


def test_otsu_bimodal_example():
    v = np.array([0, 0, 0, 1, 1, 1.0])
    t = otsu_threshold(v)
    assert 0 < t <= 1
    up, _ = otsu_split(v)
    assert up.tolist() == [False] * 3 + [True] * 3


def test_otsu_gaussian_mixture():
    rng = np.random.default_rng(3)
    v = np.concatenate([rng.normal(0.2, 0.05, 5000), rng.normal(0.8, 0.05, 5000)])
    assert 0.4 < otsu_threshold(v) < 0.6


def test_otsu_matches_exhaustive_scan_100_instances():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = rng.integers(20, 400)
        v = np.concatenate([rng.normal(rng.uniform(-1, 1), rng.uniform(0.05, 1), n),
                            rng.normal(rng.uniform(-1, 1), rng.uniform(0.05, 1), n // 2)])
        best, k = scan_oracle(v)
        res = otsu(v)
        assert res.bin_index == k
        up, _ = otsu_split(v)
        w1 = up.mean()
        assert (1 - w1) * w1 * (v[~up].mean() - v[up].mean()) ** 2 == pytest.approx(best, rel=1e-9)


def test_otsu_constant_input_flagged(caplog):
    res = otsu(np.full(10, 0.3))
    assert res.degenerate and res.threshold == 0.3
    up, _ = otsu_split(np.full(10, 0.3))
    assert up.all()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=60).filter(lambda x: len(set(x)) > 1))
def test_otsu_attains_maximum(values):
    v = np.array(values)
    best, k = scan_oracle(v)
    assert otsu(v).bin_index == k


def test_padding_band():
    P = padding_band((6, 8), 2)
    assert P[0].all() and P[:, -1].all() and not P[2:4, 2:6].any()
    assert not padding_band((6, 8), 0).any()


def body_scene(seed=5, size=48):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    seg = (np.abs(xx - size / 2) < 10) & (np.abs(yy - size / 2) < 16)
    texture = 0.5 + 0.3 * np.sin(xx / 2.0)[..., None] * np.array([1.0, 0.6, 0.2]) + 0.05 * rng.normal(size=(size, size, 3))
    img = np.where(seg[..., None], np.clip(texture, 0, 1), 0.0)
    return img, seg


def test_perfect_render_keeps_whole_seg():
    img, seg = body_scene()
    fm = build_mask(img, img, seg, seg)
    np.testing.assert_array_equal(fm.final_mask, seg)
    assert fm.deviation == 0 and not fm.skip


def test_injected_occluder_excluded():
    img, seg = body_scene()
    occ = np.zeros_like(seg)
    occ[18:28, 20:30] = True
    observed = img.copy()
    observed[occ] = 0.95
    fm = build_mask(observed, img, seg, seg)
    injected = occ & seg
    assert (~fm.final_mask[injected]).mean() >= 0.9
    assert np.all(fm.final_mask <= fm.ssim_mask)


def test_shrinking_occluder_never_shrinks_mask():
    img, seg = body_scene()
    big = np.zeros_like(seg)
    big[18:28, 20:30] = True
    small = np.zeros_like(seg)
    small[21:25, 23:27] = True
    m_big = build_mask(np.where(big[..., None], 0.95, img), img, seg, seg).final_mask
    m_small = build_mask(np.where(small[..., None], 0.95, img), img, seg, seg).final_mask
    assert m_small.sum() >= m_big.sum()


def test_disjoint_seg_is_skipped():
    img, seg = body_scene()
    rendered = np.roll(img, 30, axis=1)
    fm = build_mask(img, rendered, seg, np.roll(seg, 30, axis=1), padding_band(seg.shape, 2))
    assert fm.deviation > 0.9 and fm.skip


def test_empty_seg_skips():
    img, seg = body_scene()
    fm = build_mask(img, img, np.zeros_like(seg), seg)
    assert fm.skip and fm.deviation == 1.0


def test_silhouette_on_padding_removed():
    img, seg = body_scene()
    seg = seg.copy()
    seg[:3, 20:28] = True
    sil = seg.copy()
    pad = padding_band(seg.shape, 4)
    fm = build_mask(img, img, seg, sil, pad)
    assert not (fm.final_mask & sil & pad).any()
    assert fm.final_mask.sum() == (seg & ~(sil & pad)).sum()


def test_build_mask_pure_and_validates_shapes():
    img, seg = body_scene()
    rend = np.clip(img + 0.1, 0, 1)
    a, b = build_mask(img, rend, seg, seg), build_mask(img, rend, seg, seg)
    np.testing.assert_array_equal(a.final_mask, b.final_mask)
    with pytest.raises(ValueError):
        build_mask(img, rend, seg[:-1], seg)


def test_iou_and_save(tmp_path):
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert iou(a, a) == 1.0 and iou(a, ~a) == 0.0
    img, seg = body_scene()
    fm = build_mask(img, img, seg, seg)
    save_masks(tmp_path, 3, fm)
    np.testing.assert_array_equal(read_pgm(tmp_path / "mask_0003.pgm") > 0, fm.final_mask)
    assert (tmp_path / "ssim_mask_0003.pgm").exists()
