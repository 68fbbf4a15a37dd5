import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from condnerf.conditioning import ConditionalEncodings
from condnerf.fields import (FeatureField, ObjectPose, encode_direction, encode_point, eval_field,
                             from_object_space, positional_encoding, rotation_matrix, to_object_space)


def pe_oracle(p: float, octaves: int) -> list[float]:
    out = []
    for k in range(octaves):
        out += [math.sin(2 ** k * math.pi * p), math.cos(2 ** k * math.pi * p)]
    return out


def test_pe_at_zero():
    out = positional_encoding(torch.tensor(0.0, dtype=torch.float64), 3)
    assert out.tolist() == [0, 1, 0, 1, 0, 1]


def test_pe_at_half():
    out = positional_encoding(torch.tensor(0.5, dtype=torch.float64), 1)
    torch.testing.assert_close(out, torch.tensor([1.0, 0.0], dtype=torch.float64), atol=1e-15, rtol=0)


def test_pe_matches_scalar_oracle():
    out = positional_encoding(torch.tensor(1 / 3, dtype=torch.float64), 4)
    np.testing.assert_allclose(out.numpy(), pe_oracle(1 / 3, 4), rtol=0, atol=1e-12)


def test_pe_rejects_zero_octaves():
    with pytest.raises(ValueError):
        positional_encoding(torch.tensor(0.1), 0)


@settings(max_examples=200, deadline=None)
@given(p=st.floats(-50, 50, allow_nan=False), octaves=st.integers(1, 10))
def test_pe_periodic_and_bounded(p, octaves):
    a = positional_encoding(torch.tensor(p, dtype=torch.float64), octaves)
    b = positional_encoding(torch.tensor(p + 2.0, dtype=torch.float64), octaves)
    assert torch.all(a.abs() <= 1)
    torch.testing.assert_close(a, b, atol=1e-9, rtol=0)


def test_encode_point_origin():
    out = encode_point(torch.zeros(3, dtype=torch.float64), 2)
    assert out.shape == (12,)
    assert out.tolist() == [0, 1] * 6


def test_encode_point_matches_oracle():
    x = [0.2, -0.4, 0.7]
    out = encode_point(torch.tensor(x, dtype=torch.float64), 3)
    expected = sum((pe_oracle(v, 3) for v in x), [])
    np.testing.assert_allclose(out.numpy(), expected, rtol=0, atol=1e-12)


def test_encode_direction_requires_unit_norm():
    with pytest.raises(ValueError):
        encode_direction(torch.tensor([1.0, 1.0, 0.0]), 2)
    assert encode_direction(torch.tensor([0.0, 0.6, 0.8], dtype=torch.float64), 2).shape == (12,)


# -- poses ---------------------------------------------------------------

def test_identity_pose():
    x = torch.randn(10, 3, dtype=torch.float64)
    assert torch.equal(to_object_space(x, ObjectPose.identity()), x)


def test_pure_translation():
    t = torch.tensor([0.3, -1.0, 2.0], dtype=torch.float64)
    pose = ObjectPose(torch.ones(3, dtype=torch.float64), t, torch.eye(3, dtype=torch.float64))
    x = torch.randn(10, 3, dtype=torch.float64)
    torch.testing.assert_close(to_object_space(x, pose), x - t, atol=0, rtol=0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_round_trip(seed):
    g = np.random.default_rng(seed)
    pose = ObjectPose.from_euler(g.uniform(0.2, 3, 3), g.normal(size=3), g.uniform(-180, 180, 3))
    x = torch.tensor(g.normal(size=(20, 3)))
    back = from_object_space(to_object_space(x, pose), pose)
    torch.testing.assert_close(back, x, atol=1e-9, rtol=0)


def test_to_object_space_formula():
    g = np.random.default_rng(0)
    s, t, e = g.uniform(0.5, 2, 3), g.normal(size=3), g.uniform(-90, 90, 3)
    pose = ObjectPose.from_euler(s, t, e)
    x = g.normal(size=3)
    r = rotation_matrix(e).numpy()
    expected = np.diag(1 / s) @ r.T @ (x - t)
    np.testing.assert_allclose(to_object_space(torch.tensor(x), pose).numpy(), expected, atol=1e-12)


def test_batched_pose_matches_per_item():
    g = np.random.default_rng(1)
    poses = [ObjectPose.from_euler(g.uniform(0.5, 2, 3), g.normal(size=3), g.uniform(-90, 90, 3))
             for _ in range(3)]
    batched = ObjectPose(torch.stack([p.scale for p in poses]), torch.stack([p.translation for p in poses]),
                         torch.stack([p.rotation for p in poses]))
    x = torch.tensor(g.normal(size=(3, 5, 3)))
    out = to_object_space(x, batched)
    for i, p in enumerate(poses):
        torch.testing.assert_close(out[i], to_object_space(x[i], p), atol=1e-12, rtol=0)


def test_invalid_pose():
    with pytest.raises(ValueError):
        ObjectPose(torch.tensor([1.0, -1.0, 1.0]), torch.zeros(3), torch.eye(3))
    with pytest.raises(ValueError):
        ObjectPose(torch.ones(3), torch.zeros(3), torch.diag(torch.tensor([1.0, 1.0, -1.0])))


# -- decoder ---------------------------------------------------------------

def small_field(**kw):
    args = dict(point_octaves=3, dir_octaves=2, dim_shape=5, dim_appearance=4, dim_feature=6,
                hidden=16, n_blocks=8, skip_at=4)
    args.update(kw)
    torch.manual_seed(0)
    field = FeatureField(**args).double()
    # Randomise the zero-initialised residual branches so every path is exercised.
    with torch.no_grad():
        for p in field.parameters():
            p.add_(0.1 * torch.randn_like(p))
    return field


def random_inputs(field, n, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 3, generator=g, dtype=torch.float64) * 2 - 1
    d = torch.nn.functional.normalize(torch.randn(n, 3, generator=g, dtype=torch.float64), dim=-1)
    enc = ConditionalEncodings(torch.randn(n, field.dim_shape, generator=g, dtype=torch.float64),
                               torch.randn(n, field.dim_appearance, generator=g, dtype=torch.float64))
    return encode_point(x, field.point_octaves), encode_direction(d, field.dir_octaves), enc


def test_density_ignores_direction_and_appearance():
    field = small_field()
    x_enc, d_enc, enc = random_inputs(field, 1)
    base = eval_field(field, x_enc, d_enc, enc)
    _, d2, enc2 = random_inputs(field, 1, seed=5)
    other = eval_field(field, x_enc, d2, ConditionalEncodings(enc.c_s, enc2.c_a))
    assert torch.equal(base.sigma, other.sigma)
    assert not torch.allclose(base.f, other.f)


def test_feature_dimension():
    field = FeatureField(dim_feature=128, hidden=32, n_blocks=2, skip_at=1)
    x = encode_point(torch.zeros(1, 3), 10)
    d = encode_direction(torch.tensor([[0.0, 0.0, 1.0]]), 4)
    out = field(x, d, torch.randn(1, 128), torch.randn(1, 128))
    assert out.f.shape == (1, 128)


def test_batch_sigma_nonnegative():
    field = small_field()
    x_enc, d_enc, enc = random_inputs(field, 4096)
    out = eval_field(field, x_enc, d_enc, enc)
    assert out.sigma.shape == (4096,) and out.f.shape == (4096, 6)
    assert torch.all(out.sigma >= 0) and torch.isfinite(out.f).all()


def test_dimension_mismatch():
    field = small_field()
    x_enc, d_enc, enc = random_inputs(field, 2)
    with pytest.raises(ValueError):
        eval_field(field, x_enc[:, :-1], d_enc, enc)
    with pytest.raises(ValueError):
        eval_field(field, x_enc, d_enc, ConditionalEncodings(enc.c_s[:, :-1], enc.c_a))


def test_field_gradients_match_finite_differences():
    field = small_field(n_blocks=2, skip_at=1)
    x_enc, d_enc, enc = random_inputs(field, 3, seed=2)
    # keep every density positive so the rectifier is differentiable at the sample
    with torch.no_grad():
        field.density_head.bias.fill_(5.0)
    x_enc = x_enc.clone().requires_grad_(True)
    g = torch.Generator().manual_seed(3)
    wf = torch.randn(3, 6, generator=g, dtype=torch.float64)

    def objective():
        out = field(x_enc, d_enc, enc.c_s, enc.c_a)
        return out.sigma.sum() + (wf * out.f).sum()

    params = [x_enc, field.embed_point.weight, field.blocks[0].fc_0.weight, field.feature_head.weight]
    grads = torch.autograd.grad(objective(), params)
    h = 1e-6
    for p, gr in zip(params, grads):
        direction = torch.randn(p.shape, generator=g, dtype=torch.float64)
        with torch.no_grad():
            p.add_(h * direction)
            up = objective().item()
            p.sub_(2 * h * direction)
            down = objective().item()
            p.add_(h * direction)
        fd = (up - down) / (2 * h)
        an = (gr * direction).sum().item()
        assert abs(fd - an) <= 1e-3 * max(abs(an), 1e-6)
