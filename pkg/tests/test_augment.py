import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab import augment as aug
from flowlab.augment import AugmentRanges, AugmentSpec


def checker_image(h=32, w=48, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(3, h, w, generator=gen)


def smooth_image(h=96, w=128):
    ys, xs = torch.meshgrid(torch.arange(float(h)), torch.arange(float(w)), indexing="ij")
    return torch.stack(
        [
            0.5 + 0.3 * torch.sin(2 * math.pi * xs / 40) * torch.cos(2 * math.pi * ys / 32),
            0.5 + 0.25 * torch.cos(2 * math.pi * (xs + ys) / 56),
            0.5 + 0.2 * torch.sin(2 * math.pi * ys / 24),
        ]
    )


def smooth_flow(h=96, w=128):
    ys, xs = torch.meshgrid(torch.arange(float(h)), torch.arange(float(w)), indexing="ij")
    return torch.stack([1.5 + 0.01 * xs - 0.008 * ys, -0.8 + 0.006 * ys])


def random_record(h=32, w=48, seed=1):
    gen = torch.Generator().manual_seed(seed)
    img1 = torch.rand(3, h, w, generator=gen)
    img2 = torch.rand(3, h, w, generator=gen)
    ff = torch.randn(2, h, w, generator=gen)
    fb = torch.randn(2, h, w, generator=gen)
    mf = (torch.rand(h, w, generator=gen) > 0.3).float()
    mb = (torch.rand(h, w, generator=gen) > 0.3).float()
    return img1, img2, ff, fb, mf, mb


# ---------------------------------------------------------------------------
# identity and involution
# ---------------------------------------------------------------------------


def test_identity_spec_is_bitwise_identity():
    rec = random_record()
    out = aug.apply(AugmentSpec(), *rec)
    for got, want in zip(
        (out.img1, out.img2, out.flow_f, out.flow_b, out.mask_f, out.mask_b), rec
    ):
        assert torch.equal(got, want)


def test_full_canvas_crop_equals_no_crop():
    rec = random_record()
    out = aug.apply(AugmentSpec(crop=(0, 0, 32, 48)), *rec)
    assert torch.equal(out.img1, rec[0])
    assert torch.equal(out.flow_f, rec[2])


def test_hflip_twice_is_bitwise_identity():
    rec = random_record(seed=2)
    spec = AugmentSpec(hflip=True)
    once = aug.apply(spec, *rec)
    twice = aug.apply(
        spec, once.img1, once.img2, once.flow_f, once.flow_b, once.mask_f, once.mask_b
    )
    for got, want in zip(
        (twice.img1, twice.img2, twice.flow_f, twice.flow_b, twice.mask_f, twice.mask_b), rec
    ):
        assert torch.equal(got, want)


def test_vflip_twice_is_bitwise_identity():
    rec = random_record(seed=3)
    spec = AugmentSpec(vflip=True)
    once = aug.apply(spec, *rec)
    twice = aug.apply(
        spec, once.img1, once.img2, once.flow_f, once.flow_b, once.mask_f, once.mask_b
    )
    assert torch.equal(twice.img1, rec[0])
    assert torch.equal(twice.flow_b, rec[3])


# ---------------------------------------------------------------------------
# flow vector algebra
# ---------------------------------------------------------------------------


def test_hflip_negates_u_and_mirrors_columns():
    flow = torch.zeros(2, 8, 8)
    flow[0] = 3.0
    flow[1] = 1.0
    out = aug.apply_flow(AugmentSpec(hflip=True), flow)
    assert torch.allclose(out[0], torch.full((8, 8), -3.0))
    assert torch.allclose(out[1], torch.full((8, 8), 1.0))
    # column mirroring visible on a non-constant field
    ramp = torch.zeros(2, 4, 6)
    ramp[0] = torch.arange(6.0)
    out = aug.apply_flow(AugmentSpec(hflip=True), ramp)
    assert torch.equal(out[0], -ramp[0].flip(-1))


def test_vflip_negates_v_and_mirrors_rows():
    flow = torch.zeros(2, 8, 8)
    flow[0] = 3.0
    flow[1] = 1.0
    out = aug.apply_flow(AugmentSpec(vflip=True), flow)
    assert torch.allclose(out[0], torch.full((8, 8), 3.0))
    assert torch.allclose(out[1], torch.full((8, 8), -1.0))


def test_rotation_90_matches_coordinate_map_oracle():
    # out[y, x] = in[n-1-x, y] for a quarter turn about the canvas center,
    # and vectors rotate the same way: (u, v) -> (-v, u)
    n = 6
    g = torch.arange(n * n, dtype=torch.float32).reshape(1, n, n).repeat(3, 1, 1)
    spec = AugmentSpec(rotate_deg=90.0)
    out = aug.apply_image(spec, g)
    oracle = torch.empty_like(g)
    for y in range(n):
        for x in range(n):
            oracle[:, y, x] = g[:, n - 1 - x, y]
    assert (out - oracle).abs().max() <= 1e-9

    gen = torch.Generator().manual_seed(5)
    flow = torch.randn(2, n, n, generator=gen)
    fout = aug.apply_flow(spec, flow)
    foracle = torch.empty_like(flow)
    for y in range(n):
        for x in range(n):
            u, v = flow[0, n - 1 - x, y], flow[1, n - 1 - x, y]
            foracle[0, y, x] = -v
            foracle[1, y, x] = u
    assert (fout - foracle).abs().max() <= 1e-9


@given(
    theta=st.floats(-180.0, 180.0),
    u=st.floats(-5.0, 5.0),
    v=st.floats(-5.0, 5.0),
    scale=st.floats(0.5, 2.0),
)
@settings(max_examples=60, deadline=None)
def test_linear_part_preserves_rotated_scaled_norm(theta, u, v, scale):
    a = aug.linear_part(AugmentSpec(rotate_deg=theta, scale=scale))
    vec = torch.tensor([u, v], dtype=torch.float64)
    out = a @ vec
    assert out.norm().item() == pytest.approx(scale * vec.norm().item(), abs=1e-9)


def test_scale_multiplies_vectors():
    flow = torch.full((2, 8, 8), 2.0)
    out = aug.apply_flow(AugmentSpec(scale=1.1), flow)
    assert torch.allclose(out, torch.full((2, 8, 8), 2.2), atol=1e-6)


def test_crop_translates_positions_but_not_vectors():
    gen = torch.Generator().manual_seed(7)
    flow = torch.randn(2, 16, 20, generator=gen)
    spec = AugmentSpec(crop=(3, 5, 8, 12))
    out = aug.apply_flow(spec, flow)
    assert torch.equal(out, flow[:, 3:11, 5:17])


def test_crop_slices_images_exactly():
    img = checker_image()
    spec = AugmentSpec(crop=(4, 6, 16, 24))
    out = aug.apply_image(spec, img)
    assert torch.equal(out, img[:, 4:20, 6:30])


def test_crop_outside_canvas_rejected():
    img = checker_image(16, 16)
    with pytest.raises(ValueError):
        aug.apply_image(AugmentSpec(crop=(8, 8, 16, 16)), img)
    with pytest.raises(ValueError):
        aug.apply_image(AugmentSpec(crop=(-1, 0, 8, 8)), img)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def test_masks_stay_binary_under_rotation():
    gen = torch.Generator().manual_seed(11)
    mask = (torch.rand(32, 48, generator=gen) > 0.5).float()
    out = aug.apply_mask(AugmentSpec(rotate_deg=7.3, scale=1.05), mask)
    assert set(out.unique().tolist()) <= {0.0, 1.0}


def test_mask_zero_where_map_leaves_canvas():
    mask = torch.ones(32, 32)
    out = aug.apply_mask(AugmentSpec(rotate_deg=45.0), mask)
    # corners of the rotated sampling grid fall outside the source canvas
    assert out[0, 0] == 0 and out[0, -1] == 0 and out[-1, 0] == 0 and out[-1, -1] == 0
    assert out[16, 16] == 1


def test_flow_target_leaving_crop_keeps_its_mask():
    # every pixel moves 50px right, far outside an 8-wide crop window; the
    # correspondence is still real, so validity must survive the crop
    flow = torch.zeros(2, 16, 64)
    flow[0] = 50.0
    mask = torch.ones(16, 64)
    spec = AugmentSpec(crop=(0, 0, 16, 8))
    out_mask = aug.apply_mask(spec, mask)
    out_flow = aug.apply_flow(spec, flow)
    assert torch.equal(out_mask, torch.ones(16, 8))
    assert torch.allclose(out_flow[0], torch.full((16, 8), 50.0))


# ---------------------------------------------------------------------------
# photometric
# ---------------------------------------------------------------------------


def test_photometric_touches_images_only():
    rec = random_record(seed=13)
    spec = AugmentSpec(
        brightness_delta=0.05,
        contrast_gain=1.08,
        gamma=1.15,
        per_channel_gain=(1.03, 0.97, 1.01),
    )
    out = aug.apply(spec, *rec)
    assert not torch.equal(out.img1, rec[0])
    assert not torch.equal(out.img2, rec[1])
    assert torch.equal(out.flow_f, rec[2])
    assert torch.equal(out.flow_b, rec[3])
    assert torch.equal(out.mask_f, rec[4])
    assert torch.equal(out.mask_b, rec[5])


def test_photometric_output_stays_in_unit_range():
    img = checker_image()
    spec = AugmentSpec(brightness_delta=0.1, contrast_gain=1.1, gamma=0.8)
    out = aug.apply_image(spec, img)
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------------------
# warp coherence
# ---------------------------------------------------------------------------


def test_consistency_identity_is_zero():
    assert aug.consistency_check(AugmentSpec(), smooth_image(), smooth_flow()) == 0.0


def test_consistency_hflip_within_1e6():
    assert aug.consistency_check(AugmentSpec(hflip=True), smooth_image(), smooth_flow()) <= 1e-6


def test_consistency_rotation_scale_within_interpolation_error():
    spec = AugmentSpec(rotate_deg=7.0, scale=1.07)
    assert aug.consistency_check(spec, smooth_image(), smooth_flow()) <= 0.02


def test_consistency_composed_transform_on_smooth_fields():
    spec = AugmentSpec(hflip=True, vflip=True, rotate_deg=-9.0, scale=0.92, crop=(8, 8, 80, 112))
    assert aug.consistency_check(spec, smooth_image(), smooth_flow()) <= 0.02


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def test_sample_spec_deterministic_per_seed():
    a = aug.sample_spec(torch.Generator().manual_seed(42), 96, 128)
    b = aug.sample_spec(torch.Generator().manual_seed(42), 96, 128)
    c = aug.sample_spec(torch.Generator().manual_seed(43), 96, 128)
    assert a == b
    assert a != c


def test_sample_spec_respects_ranges():
    ranges = AugmentRanges()
    gen = torch.Generator().manual_seed(0)
    for _ in range(10_000):
        s = aug.sample_spec(gen, 96, 128, ranges)
        assert -ranges.rotate_max_deg <= s.rotate_deg <= ranges.rotate_max_deg
        assert ranges.scale_min <= s.scale <= ranges.scale_max
        assert abs(s.brightness_delta) <= ranges.brightness_max
        assert ranges.contrast_min <= s.contrast_gain <= ranges.contrast_max
        assert ranges.gamma_min <= s.gamma <= ranges.gamma_max
        assert all(abs(g - 1.0) <= ranges.channel_gain_max for g in s.per_channel_gain)
        top, left, ch, cw = s.crop
        assert ch % 8 == 0 and cw % 8 == 0
        assert 0 <= top and top + ch <= 96
        assert 0 <= left and left + cw <= 128


def test_sample_spec_visits_both_flip_states():
    gen = torch.Generator().manual_seed(1)
    specs = [aug.sample_spec(gen, 96, 128) for _ in range(200)]
    assert any(s.hflip for s in specs) and any(not s.hflip for s in specs)
    assert any(s.vflip for s in specs)


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------


def test_augmented_sample_is_constant():
    rec = random_record(seed=17)
    out = aug.apply(AugmentSpec(rotate_deg=3.0), *rec)
    assert out.constant
    for t in (out.img1, out.img2, out.flow_f, out.flow_b, out.mask_f, out.mask_b):
        assert not t.requires_grad


def test_apply_detaches_gradient_tracking_inputs():
    img1, img2, ff, fb, mf, mb = random_record(seed=19)
    ff = ff.clone().requires_grad_(True)
    out = aug.apply(AugmentSpec(), img1, img2, ff, fb, mf, mb)
    assert not out.flow_f.requires_grad


def test_augmented_sample_rejects_gradient_fields():
    rec = random_record(seed=23)
    out = aug.apply(AugmentSpec(), *rec)
    with pytest.raises(ValueError):
        aug.AugmentedSample(
            spec=out.spec,
            img1=out.img1,
            img2=out.img2,
            flow_f=out.flow_f.clone().requires_grad_(True),
            flow_b=out.flow_b,
            mask_f=out.mask_f,
            mask_b=out.mask_b,
        )
