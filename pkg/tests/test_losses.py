import numpy as np
import pytest
import torch

from mgmatting.losses import (LossWeights, color_loss, composition_loss, l1_loss, laplacian_loss,
                              laplacian_pyramid, level_loss, total_loss)
from mgmatting.model import PyramidPrediction, prm_fuse

K1 = np.array([1, 4, 6, 4, 1], dtype=np.float64) / 16.0


def t(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a.transpose(2, 0, 1)[None]
    return torch.from_numpy(np.ascontiguousarray(a))


# --- numpy loop oracles -------------------------------------------------------


def oracle_masked_mean(err, mask):
    """err (H, W, C), mask (H, W): sum over mask pixels of channel-mean err / count."""
    total, count = 0.0, 0
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if mask[y, x]:
                total += err[y, x].mean()
                count += 1
    return total / max(count, 1)


def oracle_blur(img):
    h, w = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            s = 0.0
            for dy in range(-2, 3):
                for dx in range(-2, 3):
                    yy, xx = min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)
                    s += K1[dy + 2] * K1[dx + 2] * img[yy, xx]
            out[y, x] = s
    return out


def oracle_expand(coarse, h, w):
    """Zero-insertion on an unbounded grid (coarse values clamped at the border), then 4 x blur."""
    ch, cw = coarse.shape

    def z(py, px):
        if py % 2 or px % 2:
            return 0.0
        return coarse[min(max(py // 2, 0), ch - 1), min(max(px // 2, 0), cw - 1)]

    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = 4 * sum(K1[dy + 2] * K1[dx + 2] * z(y + dy, x + dx)
                                for dy in range(-2, 3) for dx in range(-2, 3))
    return out


def oracle_pyramid(img, levels):
    pyr, cur = [], img
    for _ in range(levels):
        down = oracle_blur(cur)[::2, ::2]
        pyr.append(cur - oracle_expand(down, *cur.shape))
        cur = down
    return pyr + [cur]


def oracle_laplacian_loss(pred, gt, mask, levels):
    pp, pg = oracle_pyramid(pred * mask, levels), oracle_pyramid(gt * mask, levels)
    return sum(2 ** k * np.abs(a - b).mean() for k, (a, b) in enumerate(zip(pp, pg)))


# --- term losses ------------------------------------------------------------------


def test_l1_trivial():
    a = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    m = torch.ones_like(a)
    assert l1_loss(a, a, m) == 0
    assert l1_loss(torch.ones_like(a), torch.zeros_like(a), m) == 1.0


def test_l1_matches_oracle():
    rng = np.random.default_rng(0)
    p, g = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
    m = (rng.uniform(size=(8, 8)) > 0.4).astype(float)
    got = l1_loss(t(p), t(g), t(m)).item()
    assert abs(got - oracle_masked_mean(np.abs(p - g)[..., None], m)) <= 1e-12


def test_l1_batch_is_mean_of_samples():
    rng = np.random.default_rng(1)
    p, g = torch.from_numpy(rng.uniform(size=(2, 1, 6, 6))), torch.from_numpy(rng.uniform(size=(2, 1, 6, 6)))
    m = torch.from_numpy((rng.uniform(size=(2, 1, 6, 6)) > 0.5).astype(float))
    both = l1_loss(p, g, m)
    each = [l1_loss(p[i:i + 1], g[i:i + 1], m[i:i + 1]) for i in range(2)]
    assert torch.allclose(both, sum(each) / 2, atol=1e-15)


def test_composition_trivial():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(8, 8))
    f, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    img = a[..., None] * f + (1 - a[..., None]) * b
    m = np.ones((8, 8))
    assert composition_loss(t(a), t(f), t(b), t(img), t(m)).item() <= 1e-7
    zero = composition_loss(t(np.zeros((8, 8))), t(f), t(b), t(f), t(m)).item()
    assert abs(zero - np.abs(b - f).mean()) <= 1e-12


def test_composition_matches_oracle():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(8, 8))
    f, b, img = (rng.uniform(size=(8, 8, 3)) for _ in range(3))
    m = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
    comp = a[..., None] * f + (1 - a[..., None]) * b
    want = oracle_masked_mean(np.abs(comp - img), m)
    assert abs(composition_loss(t(a), t(f), t(b), t(img), t(m)).item() - want) <= 1e-12


def test_laplacian_pyramid_matches_oracle():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(16, 12))
    got = laplacian_pyramid(t(x), 3)
    want = oracle_pyramid(x, 3)
    assert len(got) == 4
    for a, b in zip(got, want):
        assert np.abs(a[0, 0].numpy() - b).max() <= 1e-12


def test_laplacian_pyramid_reconstructs():
    x = t(np.random.default_rng(5).uniform(size=(16, 16)))
    from mgmatting.losses import _gauss_kernel, _upsample
    pyr = laplacian_pyramid(x, 3)
    cur = pyr[-1]
    k = _gauss_kernel(1, x)
    for band in reversed(pyr[:-1]):
        cur = band + _upsample(cur, band.shape[2:], k)
    assert torch.allclose(cur, x, atol=1e-12)


def test_laplacian_loss_matches_oracle():
    rng = np.random.default_rng(6)
    p, g = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    m = (rng.uniform(size=(16, 16)) > 0.3).astype(float)
    got = laplacian_loss(t(p), t(g), t(m), levels=3).item()
    assert abs(got - oracle_laplacian_loss(p, g, m, 3)) <= 1e-6


def test_laplacian_constant_offset():
    g = np.random.default_rng(7).uniform(0, 0.5, size=(16, 16))
    c = 0.25
    pp = laplacian_pyramid(t(g + c), 3)
    pg = laplacian_pyramid(t(g), 3)
    for a, b in zip(pp[:-1], pg[:-1]):
        assert torch.allclose(a, b, atol=1e-12)  # band-pass levels cancel the offset
    assert torch.allclose(pp[-1] - pg[-1], torch.full_like(pp[-1], c), atol=1e-12)
    got = laplacian_loss(t(g + c), t(g), t(np.ones((16, 16))), levels=3).item()
    assert abs(got - 2 ** 3 * c) <= 1e-12
    assert abs(got - oracle_laplacian_loss(g + c, g, np.ones((16, 16)), 3)) <= 1e-9


def test_laplacian_too_small():
    x = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    with pytest.raises(ValueError):
        laplacian_loss(x, x, x, levels=4)


def test_level_loss_is_sum_of_terms():
    rng = np.random.default_rng(8)
    p, g = t(rng.uniform(size=(16, 16))), t(rng.uniform(size=(16, 16)))
    f, b, img = (t(rng.uniform(size=(16, 16, 3))) for _ in range(3))
    m = t((rng.uniform(size=(16, 16)) > 0.5).astype(float))
    w = LossWeights(lap_levels=3)
    want = l1_loss(p, g, m) + composition_loss(p, f, b, img, m) + laplacian_loss(p, g, m, 3)
    assert torch.allclose(level_loss(p, g, m, f, b, img, w), want, atol=1e-15)


def test_empty_mask_zero_value_and_gradient():
    rng = np.random.default_rng(9)
    p = t(rng.uniform(size=(16, 16))).requires_grad_(True)
    g = t(rng.uniform(size=(16, 16)))
    f, b, img = (t(rng.uniform(size=(16, 16, 3))) for _ in range(3))
    loss = level_loss(p, g, torch.zeros_like(g), f, b, img, LossWeights(lap_levels=3))
    loss.backward()
    assert loss.item() == 0
    assert torch.all(p.grad == 0)


def test_losses_ignore_pixels_outside_mask():
    rng = np.random.default_rng(10)
    p, g = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    f, b, img = (t(rng.uniform(size=(16, 16, 3))) for _ in range(3))
    m = (rng.uniform(size=(16, 16)) > 0.5).astype(float)
    q = np.where(m == 1, p, rng.uniform(size=(16, 16)))
    w = LossWeights(lap_levels=3)
    a = level_loss(t(p), t(g), t(m), f, b, img, w)
    c = level_loss(t(q), t(g), t(m), f, b, img, w)
    assert a.item() == c.item()


def _pyramid(raws, masks):
    fused = [raws[0]]
    for lvl in (1, 2):
        fused.append(prm_fuse(raws[lvl], fused[-1], masks[lvl]))
    return PyramidPrediction(raw=list(raws), fused=fused, self_guidance=list(masks))


def _fixture(seed, size=8):
    rng = np.random.default_rng(seed)
    gt = t(rng.uniform(size=(size, size)))
    f, b = t(rng.uniform(size=(size, size, 3))), t(rng.uniform(size=(size, size, 3)))
    img = gt * f + (1 - gt) * b
    raws = [t(rng.uniform(0.05, 0.95, size=(size, size))) for _ in range(3)]
    masks = [torch.ones_like(gt)] + [t((rng.uniform(size=(size, size)) > 0.5).astype(float)) for _ in range(2)]
    return gt, f, b, img, raws, masks


def test_total_loss_zero_when_exact():
    gt, f, b, img, _, masks = _fixture(11)
    pyr = _pyramid([gt.clone() for _ in range(3)], masks)
    assert total_loss(pyr, gt, f, b, img, LossWeights(lap_levels=3)).item() <= 1e-15


def test_total_loss_level_weighting():
    gt, f, b, img, raws, masks = _fixture(12)
    w = LossWeights(lap_levels=3)
    pyr = _pyramid(raws, masks)
    total, (a, bb, c) = total_loss(pyr, gt, f, b, img, w, details=True)
    assert torch.allclose(total, a + 2 * bb + 3 * c, atol=1e-14)
    ones = torch.ones_like(gt)
    assert torch.allclose(a, level_loss(pyr.fused[0], gt, ones, f, b, img, w), atol=1e-15)
    assert torch.allclose(c, level_loss(pyr.fused[2], gt, masks[2], f, b, img, w), atol=1e-15)


def test_total_loss_ignores_provided_g0():
    gt, f, b, img, raws, masks = _fixture(13)
    w = LossWeights(lap_levels=3)
    masks_zero = [torch.zeros_like(gt)] + masks[1:]
    assert total_loss(_pyramid(raws, masks), gt, f, b, img, w).item() == \
        total_loss(_pyramid(raws, masks_zero), gt, f, b, img, w).item()


def finite_difference_check(seed, points, h=1e-6):
    """Relative errors of autograd vs central differences w.r.t. raw head outputs."""
    gt, f, b, img, raws, masks = _fixture(seed)
    w = LossWeights(lap_levels=3)
    raws = [r.requires_grad_(True) for r in raws]
    total_loss(_pyramid(raws, masks), gt, f, b, img, w).backward()
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(points):
        lvl, y, x = rng.integers(3), rng.integers(8), rng.integers(8)
        vals = []
        for sign in (1, -1):
            probe = [r.detach().clone() for r in raws]
            probe[lvl][0, 0, y, x] += sign * h
            vals.append(total_loss(_pyramid(probe, masks), gt, f, b, img, w).item())
        fd = (vals[0] - vals[1]) / (2 * h)
        an = raws[lvl].grad[0, 0, y, x].item()
        scale = max(abs(fd), abs(an))
        errors.append(0.0 if scale == 0 else abs(fd - an) / scale)
    return errors


def test_total_loss_gradient_finite_differences():
    errors = finite_difference_check(14, 40)
    assert max(errors) < 1e-3


def test_masks_are_not_differentiated():
    gt, f, b, img, raws, masks = _fixture(15)
    masks = [m.clone().requires_grad_(True) for m in masks]
    total_loss(_pyramid(raws, masks), gt, f, b, img, LossWeights(lap_levels=3)).backward()
    # gradient reaches masks only through the fusion, never through the loss masking
    assert masks[0].grad is None


def test_color_loss_full_vs_foreground_mask():
    rng = np.random.default_rng(16)
    a = t(rng.uniform(size=(16, 16)))
    fg, bg = t(rng.uniform(size=(16, 16, 3))), t(rng.uniform(size=(16, 16, 3)))
    img = a * fg + (1 - a) * bg
    ones = torch.ones_like(a)
    assert color_loss(fg, fg, a, bg, img, ones, lap_levels=3).item() <= 1e-12
    pred = fg.clone()
    pred[..., :4] = 0.0
    outside = torch.zeros_like(a)
    outside[..., 4:] = 1.0
    assert color_loss(pred, fg, a, bg, img, outside, lap_levels=3).item() < \
        color_loss(pred, fg, a, bg, img, ones, lap_levels=3).item()


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(level_weights=(1, -2, 3))
