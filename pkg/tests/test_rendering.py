import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from condnerf.config import RenderConfig
from condnerf.rendering import (CameraPose, CameraRanges, NeuralRenderer, generate, generate_rays,
                                neural_render, sample_camera, sample_cameras, stratified_depths,
                                volume_render)


def volume_render_oracle(sigmas, feats, deltas):
    """Sequential transmittance recurrence over plain floats."""
    m = len(feats[0])
    v = [0.0] * m
    trans = 1.0
    weights = []
    for s, f, dl in zip(sigmas, feats, deltas):
        w = trans * (1.0 - math.exp(-s * dl))
        weights.append(w)
        for k in range(m):
            v[k] += w * f[k]
        trans *= math.exp(-s * dl)
    return v, weights


def random_rays(g, n_s, m_f):
    sig = g.exponential(2.0, n_s)
    sig[g.random(n_s) < 0.2] = 0.0
    return sig, g.normal(size=(n_s, m_f)), g.uniform(0.01, 0.5, n_s)


# -- cameras ---------------------------------------------------------------

def test_degenerate_interval():
    for seed in range(5):
        assert sample_camera(CameraRanges(azimuth=(30, 30)), seed).azimuth == 30


def test_uniform_azimuth_mean():
    az, _, _ = sample_cameras(CameraRanges(azimuth=(0, 360)), 10_000, seed=0)
    assert abs(az.mean().item() - 180) < 5
    assert az.min() >= 0 and az.max() < 360


def test_camera_sampling_deterministic():
    assert sample_camera(CameraRanges(), 3) == sample_camera(CameraRanges(), 3)


def test_inverted_interval():
    with pytest.raises(ValueError):
        CameraRanges(azimuth=(10, 0))


def test_camera_to_world_is_rigid():
    m = CameraPose(33.0, 12.0, 2.5).camera_to_world()
    r = m[:3, :3]
    torch.testing.assert_close(r.T @ r, torch.eye(3, dtype=r.dtype), atol=1e-12, rtol=0)
    assert torch.linalg.det(r).item() == pytest.approx(1.0)


# -- rays ----------------------------------------------------------------

def test_center_ray_points_at_target():
    pose = CameraPose(40.0, 15.0, 3.0, (0.1, -0.2, 0.3))
    o, d = generate_rays(pose, 15, 15, 50.0)
    center = d[7 * 15 + 7]
    expected = torch.nn.functional.normalize(torch.tensor(pose.look_at, dtype=torch.float64) - o[0], dim=0)
    torch.testing.assert_close(center, expected, atol=1e-6, rtol=0)


def test_ray_count_and_norm():
    o, d = generate_rays(CameraPose(0.0, 0.0, 2.0), 16, 16, 50.0)
    assert d.shape == (256, 3) and o.shape == (256, 3)
    torch.testing.assert_close(d.norm(dim=-1), torch.ones(256, dtype=d.dtype), atol=1e-6, rtol=0)


def test_opposite_azimuths_give_antiparallel_center_rays():
    _, d1 = generate_rays(CameraPose(20.0, 0.0, 2.0), 1, 1, 50.0)
    _, d2 = generate_rays(CameraPose(200.0, 0.0, 2.0), 1, 1, 50.0)
    torch.testing.assert_close(d1[0], -d2[0], atol=1e-6, rtol=0)


def test_bad_fov():
    with pytest.raises(ValueError):
        generate_rays(CameraPose(0.0, 0.0, 2.0), 4, 4, 180.0)


# -- depths --------------------------------------------------------------

def test_unjittered_depths_are_bin_midpoints():
    t, dl = stratified_depths(1.0, 3.0, 4, jitter=False)
    torch.testing.assert_close(t, torch.tensor([1.25, 1.75, 2.25, 2.75], dtype=torch.float64))
    assert torch.all(dl > 0)
    assert abs(dl.sum().item() - 2.0) <= 1e-9


def test_single_sample():
    t, dl = stratified_depths(0.5, 2.0, 1, seed=3)
    assert 0.5 <= t.item() <= 2.0 and dl.item() == pytest.approx(1.5, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 64))
def test_jittered_depths_are_ascending(seed, n):
    t, dl = stratified_depths(0.5, 4.0, n, seed=seed, shape=(3,))
    assert t.shape == (3, n)
    assert torch.all(t[..., 1:] > t[..., :-1])
    assert torch.all(dl > 0)
    assert torch.all((t >= 0.5) & (t <= 4.0))
    torch.testing.assert_close(dl.sum(-1), torch.full((3,), 3.5, dtype=torch.float64), atol=1e-9, rtol=0)


def test_depth_range_validation():
    with pytest.raises(ValueError):
        stratified_depths(2.0, 1.0, 4)
    with pytest.raises(ValueError):
        stratified_depths(0.0, 1.0, 4)
    with pytest.raises(ValueError):
        stratified_depths(1.0, 2.0, 0)


# -- volume rendering ----------------------------------------------------

def test_zero_density_renders_zero():
    v = volume_render(torch.zeros(5, dtype=torch.float64), torch.randn(5, 3, dtype=torch.float64),
                      torch.full((5,), 0.1, dtype=torch.float64))
    assert torch.all(v == 0)


def test_ln2_single_sample():
    v = volume_render(torch.tensor([math.log(2)], dtype=torch.float64),
                      torch.tensor([[1.0, 0.0]], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
    torch.testing.assert_close(v, torch.tensor([0.5, 0.0], dtype=torch.float64), atol=1e-15, rtol=0)


def test_matches_oracle():
    g = np.random.default_rng(0)
    for _ in range(100):
        sig, f, dl = random_rays(g, 8, 3)
        v, w = volume_render(torch.tensor(sig), torch.tensor(f), torch.tensor(dl), return_weights=True)
        ov, ow = volume_render_oracle(sig, f.tolist(), dl)
        np.testing.assert_allclose(v.numpy(), ov, atol=1e-12, rtol=0)
        assert abs(w.sum().item() - (1 - math.exp(-(sig * dl).sum()))) <= 1e-9


def test_negative_density_rejected():
    with pytest.raises(ValueError):
        volume_render(torch.tensor([0.1, -0.1]), torch.zeros(2, 2), torch.ones(2))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_transmittance_properties(seed):
    g = np.random.default_rng(seed)
    sig, f, dl = random_rays(g, int(g.integers(1, 9)), 4)
    v, w = volume_render(torch.tensor(sig), torch.tensor(f), torch.tensor(dl), return_weights=True)
    tau = sig * dl
    trans = np.exp(-np.concatenate([[0.0], np.cumsum(tau)[:-1]]))
    assert np.all(np.diff(trans) <= 0) and np.all((trans > 0) & (trans <= 1))
    assert w.sum().item() <= 1 + 1e-12
    assert np.all(np.abs(v.numpy()) <= np.abs(f).max(0) + 1e-12)


def test_batched_volume_render():
    g = np.random.default_rng(1)
    sig, f, dl = (np.stack(a) for a in zip(*[random_rays(g, 6, 2) for _ in range(5)]))
    v = volume_render(torch.tensor(sig), torch.tensor(f), torch.tensor(dl))
    for i in range(5):
        np.testing.assert_allclose(v[i].numpy(), volume_render_oracle(sig[i], f[i].tolist(), dl[i])[0],
                                   atol=1e-12, rtol=0)


# -- neural renderer -----------------------------------------------------

def test_two_upsampling_stages_for_16_to_64():
    r = NeuralRenderer(128, 16, 64)
    assert len(r.blocks) == 2
    out = r(torch.randn(1, 128, 16, 16))
    assert out.shape == (1, 3, 64, 64)


def test_output_in_unit_interval():
    torch.manual_seed(0)
    r = NeuralRenderer(8, 4, 16, min_channels=4)
    out = r(50 * torch.randn(3, 8, 4, 4))
    assert torch.all((out >= 0) & (out <= 1))


def test_zero_features_give_constant_interior():
    torch.manual_seed(0)
    r = NeuralRenderer(8, 8, 32, min_channels=4).double()
    out = neural_render(torch.zeros(8, 8, 8, dtype=torch.float64), r)
    assert out.shape == (32, 32, 3)
    # each stage's two 3x3 convs reach 2 pixels into the border; 2 stages + rgb conv
    interior = out[8:-8, 8:-8]
    assert (interior - interior[0, 0]).abs().max() <= 1e-6


def test_renderer_checks_dims():
    r = NeuralRenderer(8, 4, 16)
    with pytest.raises(ValueError):
        r(torch.randn(1, 7, 4, 4))
    with pytest.raises(ValueError):
        NeuralRenderer(8, 4, 24)


# -- full pipeline ---------------------------------------------------------

def test_generate_is_deterministic_and_sized():
    from tests.test_scene import make_scene
    scene = make_scene(1)
    torch.manual_seed(0)
    renderer = NeuralRenderer(4, 4, 16, min_channels=4).double()
    cfg = RenderConfig(n_samples=6, jitter=True)
    cam = CameraPose(10.0, 5.0, 2.7)
    a = generate(scene, cam, renderer, cfg, seed=1, dtype=torch.float64)
    b = generate(scene, cam, renderer, cfg, seed=1, dtype=torch.float64)
    assert a.shape == (16, 16, 3)
    assert torch.equal(a, b)
    rotated = scene.with_object_poses(lambda p: p.rotated(0.0))
    assert torch.equal(generate(rotated, cam, renderer, cfg, seed=1, dtype=torch.float64), a)


def test_far_object_leaves_background_render_unchanged():
    from tests.test_scene import make_scene
    scene = make_scene(1)
    torch.manual_seed(0)
    renderer = NeuralRenderer(4, 4, 8, min_channels=4).double()
    cfg = RenderConfig(n_samples=8, jitter=False)
    cam = CameraPose(0.0, 0.0, 2.7)
    moved = scene.with_object_poses(lambda p: p.translated([50.0, 0.0, 0.0]))
    bg_only = type(scene)((scene.background,), scene.background_coord_scale)
    a = generate(moved, cam, renderer, cfg, dtype=torch.float64)
    b = generate(bg_only, cam, renderer, cfg, dtype=torch.float64)
    assert (a - b).abs().max() <= 1e-6
