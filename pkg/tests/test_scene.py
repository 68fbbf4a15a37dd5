import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from condnerf.conditioning import ConditionEncoder, sample_latents
from condnerf.fields import FeatureField, FieldSample, ObjectPose, encode_direction, encode_point
from condnerf.scene import (DENSITY_EPS, Entity, SceneGraph, compose, eval_entities, eval_scene,
                            replicate_object)


def compose_oracle(sigmas, feats):
    """Naive per-component loop over the density-weighted mean."""
    total = 0.0
    for s in sigmas:
        total += s
    m = len(feats[0])
    out = [0.0] * m
    if total > DENSITY_EPS:
        for k in range(m):
            acc = 0.0
            for s, f in zip(sigmas, feats):
                acc += s * f[k]
            out[k] = acc / total
    return total, out


def random_samples(g, n, m_f=4, zero_frac=0.2):
    sig = g.exponential(1.0, n)
    sig[g.random(n) < zero_frac] = 0.0
    return [FieldSample(torch.tensor(s), torch.tensor(g.normal(size=m_f))) for s in sig]


def test_single_entity_identity():
    s = FieldSample(torch.tensor(0.7, dtype=torch.float64), torch.tensor([1.0, -2.0], dtype=torch.float64))
    out = compose([s])
    assert torch.equal(out.sigma_total, s.sigma) and torch.equal(out.f_mean, s.f)


def test_equal_density_average():
    f1, f2 = torch.tensor([1.0, 3.0], dtype=torch.float64), torch.tensor([-1.0, 5.0], dtype=torch.float64)
    out = compose([FieldSample(torch.tensor(2.0, dtype=torch.float64), f1),
                   FieldSample(torch.tensor(2.0, dtype=torch.float64), f2)])
    torch.testing.assert_close(out.f_mean, (f1 + f2) / 2, atol=1e-15, rtol=0)


def test_three_entities_match_oracle():
    g = np.random.default_rng(0)
    for _ in range(50):
        samples = random_samples(g, 3, zero_frac=0.0)
        out = compose(samples)
        total, f = compose_oracle([s.sigma.item() for s in samples], [s.f.tolist() for s in samples])
        assert abs(out.sigma_total.item() - total) <= 1e-12
        np.testing.assert_allclose(out.f_mean.numpy(), f, atol=1e-12, rtol=0)


def test_zero_density_guard():
    samples = [FieldSample(torch.tensor(0.0, dtype=torch.float64), torch.randn(3, dtype=torch.float64))
               for _ in range(3)]
    out = compose(samples)
    assert out.sigma_total.item() == 0.0
    assert torch.all(out.f_mean == 0)


def test_mismatched_feature_dims():
    with pytest.raises(ValueError):
        compose([FieldSample(torch.tensor(1.0), torch.zeros(3)), FieldSample(torch.tensor(1.0), torch.zeros(4))])
    with pytest.raises(ValueError):
        compose([])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6))
def test_compose_properties(seed, n):
    g = np.random.default_rng(seed)
    samples = random_samples(g, n)
    out = compose(samples)
    assert torch.isfinite(out.f_mean).all()
    perm = g.permutation(n)
    out_p = compose([samples[i] for i in perm])
    assert torch.equal(out.sigma_total, out_p.sigma_total) and torch.equal(out.f_mean, out_p.f_mean)
    assert out.sigma_total.item() == pytest.approx(sum(s.sigma.item() for s in samples), abs=1e-12)
    if out.sigma_total > DENSITY_EPS and n > 1:
        feats = torch.stack([s.f for s in samples if s.sigma > 0])
        assert torch.all(out.f_mean <= feats.max(0).values + 1e-12)
        assert torch.all(out.f_mean >= feats.min(0).values - 1e-12)


# -- scene graphs -----------------------------------------------------------

def make_scene(n_objects=1, seed=0):
    torch.manual_seed(seed)
    obj_field = FeatureField(3, 2, 5, 5, 4, 16, 2, 1).double()
    bg_field = FeatureField(2, 2, 3, 3, 4, 8, 1, None).double()
    with torch.no_grad():
        obj_field.density_head.bias.fill_(1.0)
    obj_enc = ConditionEncoder(2, 5, 5).double()
    bg_enc = ConditionEncoder(2, 3, 3).double()
    c = torch.tensor([1.0, 0.0], dtype=torch.float64)
    ents = []
    for i in range(n_objects):
        z = sample_latents(1, 5, 5, seed=seed + i, dtype=torch.float64)[0]
        pose = ObjectPose.from_euler(0.5, [0.6 * i - 0.3, 0.0, 0.0], [0, 20 * i, 0])
        ents.append(Entity(obj_field, obj_enc, z, c, pose))
    zb = sample_latents(1, 3, 3, seed=99, dtype=torch.float64)[0]
    ents.append(Entity(bg_field, bg_enc, zb, c, ObjectPose.identity(), is_background=True))
    return SceneGraph(tuple(ents), background_coord_scale=4.0)


def points(n=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 3, generator=g, dtype=torch.float64) - 0.5
    d = torch.nn.functional.normalize(torch.randn(n, 3, generator=g, dtype=torch.float64), dim=-1)
    return x, d


def test_background_only_scene_equals_field():
    scene = make_scene(0)
    x, d = points()
    bg = scene.background
    c_s, c_a = bg.encodings()
    direct = bg.field(encode_point(x / 4.0, 2), encode_direction(d, 2), c_s.expand(len(x), -1),
                      c_a.expand(len(x), -1))
    out = eval_scene(scene, x, d)
    torch.testing.assert_close(out.sigma_total, direct.sigma, atol=1e-12, rtol=0)
    torch.testing.assert_close(out.f_mean, direct.f, atol=1e-12, rtol=0)


def test_object_order_does_not_matter():
    scene = make_scene(3)
    x, d = points()
    a = eval_scene(scene, x, d)
    ents = scene.entities
    b = eval_scene(SceneGraph((ents[2], ents[3], ents[0], ents[1]), scene.background_coord_scale), x, d)
    assert torch.equal(a.sigma_total, b.sigma_total) and torch.equal(a.f_mean, b.f_mean)


def test_points_outside_object_box_have_zero_density():
    scene = make_scene(1)
    far = torch.tensor([[3.0, 3.0, 3.0]], dtype=torch.float64)
    d = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
    obj_sample = eval_entities(scene, far, d)[0]
    assert obj_sample.sigma.item() == 0.0


def test_replicate_object_shares_decoder_and_doubles_density():
    scene = make_scene(1)
    src = scene.entities[0]
    dup = replicate_object(scene, 0, src.pose, src.condition, src.latents)
    assert len(dup) == 3
    assert dup.entities[2].field is src.field
    x, d = points()
    single = eval_entities(scene, x, d)[0]
    pair = compose([eval_entities(dup, x, d)[0], eval_entities(dup, x, d)[2]])
    torch.testing.assert_close(pair.sigma_total, 2 * single.sigma, atol=1e-12, rtol=0)
    mask = single.sigma > DENSITY_EPS
    torch.testing.assert_close(pair.f_mean[mask], single.f[mask], atol=1e-12, rtol=0)


def test_replicating_background_fails():
    scene = make_scene(1)
    with pytest.raises(ValueError):
        replicate_object(scene, 1, ObjectPose.identity())


def test_scene_validation():
    scene = make_scene(1)
    with pytest.raises(ValueError):
        SceneGraph((scene.entities[0],))
    with pytest.raises(ValueError):
        SceneGraph((scene.entities[1], scene.entities[1]))
    with pytest.raises(ValueError, match="identity"):
        scene.with_entity(1, pose=ObjectPose.from_euler(1.0, [1.0, 0, 0], [0, 0, 0]))
