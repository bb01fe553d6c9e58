import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mgmatting.guidance import dilate
from mgmatting.model import (PRN, CheckpointError, ColorNet, ColorNetConfig, PRNConfig, build_model,
                             load_model, predict_foreground, predict_pyramid, prm_fuse, refine,
                             save_checkpoint, self_guidance_from)

SMALL = PRNConfig(encoder_widths=(4, 8, 8, 8), head_width=4)
SMALL_COLOR = ColorNetConfig(encoder_widths=(4, 8, 8, 8))


def small_prn(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return PRN(SMALL).to(dtype).eval()


def rand_inputs(h=16, w=16, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, 3, h, w, generator=g, dtype=dtype), torch.rand(1, 1, h, w, generator=g, dtype=dtype)


def test_self_guidance_row_example():
    row = np.array([[0.0, 0.0, 0.5, 1.0, 1.0]])
    assert np.array_equal(self_guidance_from(row, 1), [[0, 0, 1, 0, 0]])
    assert np.array_equal(self_guidance_from(row, 3), [[0, 1, 1, 1, 0]])
    t = torch.from_numpy(row)[None, None]
    assert np.array_equal(self_guidance_from(t, 3)[0, 0].numpy(), [[0, 1, 1, 1, 0]])


def test_self_guidance_trivial_cases():
    binary = (np.random.default_rng(0).uniform(size=(9, 9)) > 0.5).astype(float)
    assert not self_guidance_from(binary, 7).any()
    assert np.all(self_guidance_from(np.full((6, 6), 0.5), 3) == 1)


def test_self_guidance_per_sample_kernels():
    a = torch.zeros(2, 1, 9, 9, dtype=torch.float64)
    a[:, :, 4, 4] = 0.5
    g = self_guidance_from(a, [1, 5])
    assert g[0].sum() == 1 and g[1].sum() == 25
    with pytest.raises(ValueError):
        self_guidance_from(a, [1, 3, 5])


def test_prm_fuse_trivial_masks():
    rng = np.random.default_rng(1)
    raw, prev = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
    assert np.array_equal(prm_fuse(raw, prev, np.ones((8, 8))), raw)
    assert np.array_equal(prm_fuse(raw, prev, np.zeros((8, 8))), prev)


def test_prm_fuse_shape_mismatch():
    with pytest.raises(ValueError):
        prm_fuse(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((4, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_prm_fuse_locality(seed):
    rng = np.random.default_rng(seed)
    raw, prev = rng.uniform(size=(10, 10)), rng.uniform(size=(10, 10))
    g = (rng.uniform(size=(10, 10)) > 0.5).astype(float)
    out = prm_fuse(raw, prev, g)
    assert np.array_equal(out[g == 0], prev[g == 0])
    assert np.array_equal(out[g == 1], raw[g == 1])


def test_forward_shapes_and_g0():
    model = small_prn()
    img, gd = rand_inputs(20, 27)  # not multiples of 8: padded then cropped
    pred = model(img, gd)
    for plane in pred.raw + pred.fused + pred.self_guidance:
        assert plane.shape == (1, 1, 20, 27)
    assert torch.all(pred.self_guidance[0] == 1)
    assert torch.equal(pred.fused[0], pred.raw[0])
    assert pred.alpha is pred.fused[-1]
    for plane in pred.raw + pred.fused:
        assert plane.min() >= 0 and plane.max() <= 1


def test_forward_fusion_follows_self_guidance():
    model = small_prn()
    pred = model(*rand_inputs(), dilation=(3, 1))
    for level, k in ((1, 3), (2, 1)):
        g = self_guidance_from(pred.fused[level - 1], k)
        assert torch.equal(pred.self_guidance[level], g)
        assert torch.equal(pred.fused[level], prm_fuse(pred.raw[level], pred.fused[level - 1], g))


def test_forward_override_passthrough():
    model = small_prn()
    img, gd = rand_inputs()
    zeros, ones = torch.zeros_like(gd), torch.ones_like(gd)
    p0 = model(img, gd, guidance_override=[zeros, zeros])
    assert torch.equal(p0.alpha, p0.raw[0])
    p1 = model(img, gd, guidance_override=[ones, ones])
    assert torch.equal(p1.alpha, p1.raw[2])


def test_forward_override_per_sample():
    model = small_prn()
    img, gd = rand_inputs()
    img, gd = img.repeat(2, 1, 1, 1), gd.repeat(2, 1, 1, 1)
    zeros = torch.zeros_like(gd)
    pred = model(img, gd, guidance_override=[zeros, zeros], override_samples=torch.tensor([True, False]))
    free = model(img[1:], gd[1:])
    assert torch.equal(pred.alpha[0], pred.raw[0][0])
    assert torch.allclose(pred.alpha[1], free.alpha[0], atol=1e-12)


def test_forward_channel_mismatch():
    model = small_prn()
    with pytest.raises(ValueError):
        model(torch.rand(1, 4, 8, 8, dtype=torch.float64), torch.rand(1, 1, 8, 8, dtype=torch.float64))


def test_forward_deterministic():
    model = small_prn()
    img, gd = rand_inputs()
    assert torch.equal(model(img, gd).alpha, model(img, gd).alpha)


def test_batch_stats_frozen_in_eval():
    model = small_prn()
    img, gd = rand_inputs()
    single = model(img, gd).alpha
    other = rand_inputs(seed=3)
    batched = model(torch.cat([img, other[0]]), torch.cat([gd, other[1]])).alpha
    assert torch.allclose(batched[0], single[0], atol=1e-12)


def _symmetrize(model):
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.weight.copy_((m.weight + m.weight.flip(-1)) / 2)


def test_horizontal_flip_equivariance():
    model = small_prn(seed=4)
    _symmetrize(model)
    img, gd = rand_inputs(16, 24, seed=5)
    a = model(img, gd)
    b = model(img.flip(-1), gd.flip(-1))
    for x, y in zip(a.fused, b.fused):
        assert torch.allclose(x, y.flip(-1), atol=1e-10)


def test_colornet_range_and_determinism():
    torch.manual_seed(0)
    net = ColorNet(SMALL_COLOR).to(torch.float64).eval()
    rng = np.random.default_rng(0)
    img, a = rng.uniform(size=(13, 17, 3)), rng.uniform(size=(13, 17))
    f1 = predict_foreground(net, img, a)
    assert f1.shape == (13, 17, 3)
    assert f1.min() >= 0 and f1.max() <= 1
    assert np.array_equal(f1, predict_foreground(net, img, a))


def test_refine_range_and_closure(tmp_path):
    model = small_prn()
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(16, 16, 3))
    for guidance in (np.zeros((16, 16)), np.ones((16, 16)), rng.uniform(size=(16, 16))):
        out = refine(img, guidance, model)
        assert out.shape == (16, 16) and out.min() >= 0 and out.max() <= 1
    again = refine(img, out, model)
    assert again.min() >= 0 and again.max() <= 1
    save_checkpoint(tmp_path / "m.bin", model)
    assert np.array_equal(refine(img, out, tmp_path / "m.bin"), again)


def test_predict_pyramid_override_numpy():
    model = small_prn()
    rng = np.random.default_rng(3)
    img, gd = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16))
    z = np.zeros((16, 16))
    pred = predict_pyramid(model, img, gd, guidance_override=[z, z])
    assert torch.equal(pred.alpha, pred.raw[0])


def test_checkpoint_round_trip(tmp_path):
    model = small_prn(seed=7)
    path = tmp_path / "prn.bin"
    save_checkpoint(path, model, {"iter": 3})
    loaded = load_model(path, kind="matte", config=SMALL)
    img, gd = rand_inputs()
    assert torch.equal(model(img, gd).alpha, loaded(img, gd).alpha)


def test_checkpoint_errors(tmp_path):
    model = small_prn()
    path = tmp_path / "prn.bin"
    save_checkpoint(path, model)
    with pytest.raises(CheckpointError):
        load_model(path, kind="color")
    with pytest.raises(CheckpointError):
        load_model(path, config=PRNConfig())
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "missing.bin")
    (tmp_path / "junk.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "junk.bin")
    torch.save({"format_version": 99}, tmp_path / "old.bin")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "old.bin")


def test_build_model_kinds():
    assert isinstance(build_model("matte", {"encoder_widths": [4, 8, 8, 8]}), PRN)
    assert isinstance(build_model("color", SMALL_COLOR), ColorNet)


def test_numpy_self_guidance_matches_dilate_of_predicate():
    rng = np.random.default_rng(8)
    a = rng.choice([0.0, 1.0, 0.3], size=(12, 12), p=[0.45, 0.45, 0.1])
    pred = ((a > 0) & (a < 1)).astype(float)
    assert np.array_equal(self_guidance_from(a, 5), dilate(pred, 5))
