import math

import numpy as np
import pytest
import torch

from conftest import directional_fd_check
from fusion_field import FUSION_MODES, FusionField, attention_fuse, build_field
from tensor_core import ShapeMismatchError
from utils import default_config


def make_field(bounds, **kwargs):
    params = dict(geometry_res=(0.5, 0.25), appearance_res=(0.5, 0.25), init_std=0.5, seed=1)
    params.update(kwargs)
    return FusionField(bounds, **params)


def dense_attention(local: np.ndarray, global_feat: np.ndarray) -> np.ndarray:
    tokens = np.stack([local, global_feat])
    scores = tokens @ tokens.T / math.sqrt(tokens.shape[1])
    scores = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn = scores / scores.sum(axis=1, keepdims=True)
    return (attn @ tokens).mean(axis=0)


def dense_decoder(decoder, x: np.ndarray) -> np.ndarray:
    w1, b1 = decoder.hidden.weight.detach().numpy(), decoder.hidden.bias.detach().numpy()
    w2, b2 = decoder.out.weight.detach().numpy(), decoder.out.bias.detach().numpy()
    y = np.maximum(x @ w1.T + b1, 0.0) @ w2.T + b2
    return 1.0 / (1.0 + np.exp(-y)) if decoder.out_act == "sigmoid" else np.tanh(y)


def test_attention_identical_tokens(rng):
    v = torch.as_tensor(rng.standard_normal(48))
    assert torch.allclose(attention_fuse(v, v), v, atol=1e-12)


def test_attention_with_zero_global(rng):
    v = rng.standard_normal(48)
    out = attention_fuse(torch.as_tensor(v), torch.zeros(48)).numpy()
    a = np.dot(v, v) / math.sqrt(48)
    first = math.exp(a) / (math.exp(a) + 1.0)
    # вторая строка внимания: запрос нулевой → веса (0.5, 0.5)
    expected = 0.5 * (first + 0.5) * v
    assert np.allclose(out, expected, atol=1e-12)


def test_attention_matches_dense_oracle(rng):
    for _ in range(20):
        local, glob = rng.standard_normal(48) * 0.3, rng.standard_normal(48) * 0.3
        out = attention_fuse(torch.as_tensor(local), torch.as_tensor(glob)).numpy()
        assert np.allclose(out, dense_attention(local, glob), atol=1e-12)


def test_attention_is_convex_combination(rng):
    local = torch.as_tensor(rng.standard_normal((30, 48)))
    glob = torch.as_tensor(rng.standard_normal((30, 48)))
    out = attention_fuse(local, glob)
    lo, hi = torch.minimum(local, glob), torch.maximum(local, glob)
    assert bool(((out >= lo - 1e-12) & (out <= hi + 1e-12)).all())


def test_attention_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        attention_fuse(torch.zeros(48), torch.zeros(47))


def test_constructor_validation(unit_bounds):
    with pytest.raises(ValueError):
        make_field(unit_bounds, mode="transformer")
    with pytest.raises(ValueError):
        make_field(unit_bounds, omega=1.5)
    with pytest.raises(ShapeMismatchError):
        make_field(unit_bounds, bins=8)


def test_output_ranges_at_init(unit_bounds, rng):
    field = make_field(unit_bounds, init_std=0.01)
    color, sdf = field(torch.as_tensor(rng.uniform(-0.5, 1.5, (200, 3))))
    assert color.shape == (200, 3) and sdf.shape == (200,)
    assert bool(((color > 0) & (color < 1)).all())
    assert bool(((sdf > -1) & (sdf < 1)).all())


def test_matches_manual_composition(unit_bounds, rng):
    field = make_field(unit_bounds)
    pts = rng.uniform(0, 1, (15, 3))
    color, sdf = field(torch.as_tensor(pts))
    g = field.oneblob.encode(torch.as_tensor(pts)).numpy()
    la = field.planes.query(torch.as_tensor(pts), "appearance").detach().numpy()
    lg = field.planes.query(torch.as_tensor(pts), "geometry").detach().numpy()
    for i in range(len(pts)):
        c = 0.5 * dense_decoder(field.color_fused, dense_attention(la[i], g[i])) \
            + 0.5 * dense_decoder(field.color_local, la[i])
        s = 0.5 * dense_decoder(field.sdf_fused, dense_attention(lg[i], g[i])) \
            + 0.5 * dense_decoder(field.sdf_local, lg[i])
        assert np.allclose(color[i].detach().numpy(), c, atol=1e-12)
        assert float(sdf[i]) == pytest.approx(float(s[0]), abs=1e-12)


@pytest.mark.parametrize("omega, frozen_branch", [(1.0, "local"), (0.0, "fused")])
def test_omega_endpoints_select_branch(unit_bounds, rng, omega, frozen_branch):
    field = make_field(unit_bounds, omega=omega)
    pts = torch.as_tensor(rng.uniform(0, 1, (10, 3)))
    before = field(pts)
    with torch.no_grad():
        for dec in ((field.color_local, field.sdf_local) if frozen_branch == "local"
                    else (field.color_fused, field.sdf_fused)):
            for p in dec.parameters():
                p.add_(torch.randn_like(p))
    after = field(pts)
    assert torch.equal(before[0], after[0]) and torch.equal(before[1], after[1])


def test_omega_zero_reduces_to_plane_model(unit_bounds, rng):
    full = make_field(unit_bounds, omega=0.0)
    local = make_field(unit_bounds, mode="local_only")
    pts = torch.as_tensor(rng.uniform(0, 1, (20, 3)))
    for a, b in zip(full(pts), local(pts)):
        assert torch.equal(a, b)


def test_zero_planes_keep_global_branch_alive(unit_bounds):
    field = make_field(unit_bounds, omega=1.0)
    field.planes.zero_()
    xs = torch.linspace(0.1, 0.9, 50)
    pts = torch.stack([xs, torch.full_like(xs, 0.5), torch.full_like(xs, 0.5)], dim=1)
    color, sdf = field(pts)
    assert float(color.std(dim=0).max()) > 1e-6
    # гладкость: соседние значения близки
    assert float((sdf[1:] - sdf[:-1]).abs().max()) < 0.2


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_every_ablation_mode_runs(unit_bounds, rng, mode):
    field = make_field(unit_bounds, mode=mode)
    pts = torch.as_tensor(rng.uniform(0, 1, (8, 3)))
    color, sdf = field(pts)
    assert color.shape == (8, 3) and sdf.shape == (8,)
    assert bool(torch.isfinite(color).all() and torch.isfinite(sdf).all())
    groups = field.param_groups(lr_planes=1e-2, lr_decoders=1e-3)
    assert len(groups) == (1 if mode == "global_only" else 2)


def test_gradients_match_finite_differences(unit_bounds):
    rng = np.random.default_rng(7)
    for trial in range(50):
        field = make_field(unit_bounds, seed=trial)
        pts = torch.as_tensor(rng.uniform(0.05, 0.95, (3, 3)), dtype=torch.float64).requires_grad_(True)
        wc = torch.as_tensor(rng.standard_normal((3, 3)))
        ws = torch.as_tensor(rng.standard_normal(3))

        def objective():
            color, sdf = field(pts)
            return (color * wc).sum() + (sdf * ws).sum()

        directional_fd_check(objective, list(field.parameters()) + [pts], rng, eps=1e-6, rtol=1e-3, atol=1e-8)


def test_sdf_function_is_metric(unit_bounds, rng):
    field = make_field(unit_bounds)
    pts = rng.uniform(0, 1, (30, 3))
    metric = field.sdf_function(tr=0.06, chunk=7)(pts)
    _, s = field(torch.as_tensor(pts))
    assert np.allclose(metric, s.detach().numpy() * 0.06, atol=1e-15)


def test_build_field_from_config(unit_bounds):
    cfg = default_config("synthetic")
    field = build_field(cfg, unit_bounds)
    assert field.mode == cfg["model"]["mode"]
    assert field.omega == cfg["model"]["omega"]
    assert field.planes.out_dim == field.oneblob.out_dim == 48
