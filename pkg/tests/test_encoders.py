import numpy as np
import pytest
import torch

from encoders import PLANE_AXES, FeaturePlaneSet, OneBlobEncoder, as_bounds


def make_planes(bounds, seed=0):
    return FeaturePlaneSet(bounds, feature_dim=4, geometry_res=(0.5, 0.25), appearance_res=(0.5, 0.125),
                           init_std=1.0, seed=seed)


def bilinear_oracle(planes: FeaturePlaneSet, point: np.ndarray, kind: str, level: str) -> np.ndarray:
    res = planes.resolution[kind][level]
    lo = planes.bounds[0]
    total = np.zeros(planes.feature_dim)
    for name, (a, b) in PLANE_AXES.items():
        grid = planes.planes[planes.plane_key(kind, level, name)].detach().numpy()[0]
        ua, ub = (point[a] - lo[a]) / res, (point[b] - lo[b]) / res
        ia, ib = min(int(np.floor(ua)), grid.shape[2] - 2), min(int(np.floor(ub)), grid.shape[1] - 2)
        fa, fb = ua - ia, ub - ib
        total += ((1 - fa) * (1 - fb) * grid[:, ib, ia] + fa * (1 - fb) * grid[:, ib, ia + 1]
                  + (1 - fa) * fb * grid[:, ib + 1, ia] + fa * fb * grid[:, ib + 1, ia + 1])
    return total


def test_degenerate_bounds_rejected():
    with pytest.raises(ValueError):
        as_bounds([[0, 0, 0], [1, 0, 1]])
    with pytest.raises(ValueError):
        OneBlobEncoder([[0, 0, 0], [0, 0, 0]])


def test_oneblob_dimension_and_range(unit_bounds, rng):
    enc = OneBlobEncoder(unit_bounds, 16)
    out = enc.encode(torch.as_tensor(rng.uniform(0, 1, (100, 3))))
    assert out.shape == (100, 48)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_oneblob_symmetric_at_center(unit_bounds):
    enc = OneBlobEncoder(unit_bounds, 16)
    act = enc.encode(torch.tensor([[0.5, 0.5, 0.5]]))[0, :16].numpy()
    assert np.allclose(act, act[::-1], atol=1e-15)


def test_oneblob_peak_at_minimum(unit_bounds):
    enc = OneBlobEncoder(unit_bounds, 16)
    act = enc.encode(torch.tensor([[0.0, 0.0, 0.0]]))[0, :16].numpy()
    assert np.argmax(act) == 0
    assert np.all(np.diff(act) < 0)


def test_oneblob_matches_dense_kernel(rng):
    bounds = np.array([[-1.0, -2.0, 0.0], [3.0, 1.0, 2.5]])
    enc = OneBlobEncoder(bounds, 16)
    pts = rng.uniform(bounds[0], bounds[1], (20, 3))
    out = enc.encode(torch.as_tensor(pts)).numpy().reshape(20, 3, 16)
    centers = (np.arange(16) + 0.5) / 16
    x = (pts - bounds[0]) / (bounds[1] - bounds[0])
    expected = np.exp(-0.5 * ((x[..., None] - centers) * 16) ** 2)
    assert np.allclose(out, expected, atol=1e-12)


def test_oneblob_translation_covariant(unit_bounds, rng):
    shift = np.array([2.0, -1.0, 0.5])
    pts = rng.uniform(0, 1, (10, 3))
    a = OneBlobEncoder(unit_bounds).encode(torch.as_tensor(pts))
    b = OneBlobEncoder(unit_bounds + shift).encode(torch.as_tensor(pts + shift))
    assert torch.allclose(a, b, atol=1e-12)


def test_oneblob_clamps_out_of_bounds(unit_bounds):
    enc = OneBlobEncoder(unit_bounds)
    assert torch.equal(enc.encode(torch.tensor([[-0.5, 2.0, 0.3]])), enc.encode(torch.tensor([[0.0, 1.0, 0.3]])))


def test_plane_shapes_and_output_dim():
    bounds = np.array([[0.0, 0.0, 0.0], [1.0, 0.6, 0.3]])
    planes = FeaturePlaneSet(bounds, feature_dim=24, geometry_res=(0.24, 0.06), appearance_res=(0.24, 0.03))
    assert planes.out_dim == 48
    assert len(planes.planes) == 12
    # 1.0 / 0.06 → 17 ячеек → 18 узлов по x; 0.6 / 0.06 → 10 ячеек → 11 узлов по y
    assert planes.planes[planes.plane_key("geometry", "fine", "xy")].shape == (1, 24, 11, 18)
    out = planes.query(torch.rand(7, 3) * torch.tensor([1.0, 0.6, 0.3]), "geometry")
    assert out.shape == (7, 48)


def test_query_at_grid_node_sums_node_features(unit_bounds):
    planes = make_planes(unit_bounds)
    point = np.array([0.5, 0.5, 0.5])
    out = planes.query(torch.as_tensor(point[None]), "geometry")[0].detach().numpy()
    for level, idx, chunk in (("coarse", 1, out[:4]), ("fine", 2, out[4:])):
        expected = sum(
            planes.planes[planes.plane_key("geometry", level, name)].detach().numpy()[0, :, idx, idx]
            for name in PLANE_AXES
        )
        assert np.allclose(chunk, expected, atol=1e-12)


def test_query_constant_cell_gives_three_v(unit_bounds):
    planes = make_planes(unit_bounds)
    v = torch.tensor([0.1, -0.2, 0.3, 0.4])
    with torch.no_grad():
        for p in planes.planes.values():
            p.copy_(v.view(1, 4, 1, 1).expand_as(p))
    out = planes.query(torch.tensor([[0.375, 0.125, 0.625]]), "appearance")[0]
    assert torch.allclose(out[:4], 3 * v, atol=1e-12)
    assert torch.allclose(out[4:], 3 * v, atol=1e-12)


def test_query_matches_bilinear_oracle(unit_bounds, rng):
    planes = make_planes(unit_bounds, seed=3)
    pts = rng.uniform(0, 1, (25, 3))
    for kind in ("geometry", "appearance"):
        out = planes.query(torch.as_tensor(pts), kind).detach().numpy()
        for i, p in enumerate(pts):
            assert np.allclose(out[i, :4], bilinear_oracle(planes, p, kind, "coarse"), atol=1e-12)
            assert np.allclose(out[i, 4:], bilinear_oracle(planes, p, kind, "fine"), atol=1e-12)


def test_corner_gradients_equal_bilinear_weights(unit_bounds):
    planes = make_planes(unit_bounds)
    point = torch.tensor([[0.2, 0.35, 0.9]])
    planes.query(point, "geometry")[0, 0].backward()
    grad = planes.planes[planes.plane_key("geometry", "coarse", "xy")].grad[0, 0]
    fa, fb = 0.2 / 0.5, 0.35 / 0.5
    assert grad[0, 0] == pytest.approx((1 - fa) * (1 - fb))
    assert grad[0, 1] == pytest.approx(fa * (1 - fb))
    assert grad[1, 0] == pytest.approx((1 - fa) * fb)
    assert grad[1, 1] == pytest.approx(fa * fb)
    assert float(grad.sum()) == pytest.approx(1.0)


def test_query_is_lipschitz(unit_bounds, rng):
    planes = make_planes(unit_bounds)
    for _ in range(20):
        p = rng.uniform(0.05, 0.95, 3)
        delta = rng.standard_normal(3) * 1e-5
        a = planes.query(torch.as_tensor(p[None]), "geometry")
        b = planes.query(torch.as_tensor((p + delta)[None]), "geometry")
        assert float((a - b).abs().max()) < 1e3 * np.linalg.norm(delta)


def test_zero_clears_all_planes(unit_bounds):
    planes = make_planes(unit_bounds)
    planes.zero_()
    assert float(planes.query(torch.rand(5, 3), "geometry").abs().max()) == 0.0
