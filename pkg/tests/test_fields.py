import numpy as np
import pytest
import torch

from scsurf.errors import ParseError
from scsurf.fields import (
    AnalyticSdf,
    BoxSdf,
    Checkpoint,
    EncodingConfig,
    RadianceField,
    SdfField,
    SphereSdf,
    TorusSdf,
    UnionSdf,
    band_weights,
    encode,
    load_checkpoint,
    radiance_eval,
    save_checkpoint,
    sdf_eval,
)
from scsurf.geometry import Pose


# ---------------------------------------------------------------- encoding
def test_encode_dim_and_layout():
    cfg = EncodingConfig(num_freqs=4)
    x = torch.zeros(5, 3, dtype=torch.float64)
    out = encode(x, cfg)
    assert out.shape == (5, cfg.dim(3)) == (5, 3 + 3 * 2 * 4)
    # x=0: sin blocks 0, cos blocks 1 (fully active bands)
    np.testing.assert_allclose(out[:, 3:6].numpy(), 0.0)
    np.testing.assert_allclose(out[:, 6:9].numpy(), 1.0)


def test_encode_alpha_zero_kills_all_bands():
    cfg = EncodingConfig(num_freqs=4, alpha=0.0)
    x = torch.tensor([[0.3, -0.2, 0.9]], dtype=torch.float64)
    out = encode(x, cfg)
    np.testing.assert_allclose(out[:, :3].numpy(), x.numpy())
    np.testing.assert_allclose(out[:, 3:].numpy(), 0.0)


def test_encode_full_alpha_matches_unwindowed():
    x = torch.tensor([[0.3, -0.2, 0.9]], dtype=torch.float64)
    full = encode(x, EncodingConfig(num_freqs=4, alpha=4.0))
    default = encode(x, EncodingConfig(num_freqs=4, alpha=None))
    np.testing.assert_allclose(full.numpy(), default.numpy())
    w = band_weights(EncodingConfig(num_freqs=4, alpha=4.0))
    np.testing.assert_allclose(w.numpy(), 1.0)


def test_encode_band_ramp_is_continuous():
    # weight of band k just after activation grows like (eps*pi)^2/4
    eps = 1e-6
    w = band_weights(EncodingConfig(num_freqs=4, alpha=2.0 + eps))
    assert w[2] < 1e-11
    np.testing.assert_allclose(w[:2].numpy(), 1.0)
    assert w[3] == 0.0


def test_encoding_config_validation():
    with pytest.raises(ValueError):
        EncodingConfig(num_freqs=4, alpha=5.0)
    with pytest.raises(ValueError):
        EncodingConfig(num_freqs=-1)


# --------------------------------------------------------------- sdf field
@pytest.fixture(scope="module")
def small_field():
    return SdfField(
        EncodingConfig(num_freqs=6),
        hidden=64,
        feature_dim=32,
        rng=np.random.default_rng(11),
    )


def test_geometric_init_value_at_origin(small_field):
    v = float(small_field.sdf(torch.zeros(1, 3, dtype=torch.float64)).detach())
    assert abs(v + small_field.r0) <= 0.1 * small_field.r0


def test_geometric_init_zero_level_is_spherical():
    field = SdfField(EncodingConfig(6), hidden=256, feature_dim=64, rng=np.random.default_rng(42))
    rng = np.random.default_rng(1)
    dirs = rng.normal(size=(200, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = torch.tensor(dirs)
    lo = torch.full((200,), 0.01, dtype=torch.float64)
    hi = torch.full((200,), 1.2, dtype=torch.float64)
    with torch.no_grad():
        assert bool((field.sdf(dirs * 0.01) < 0).all())
        assert bool((field.sdf(dirs * 1.15) > 0).all())
        for _ in range(50):  # bisect the crossing radius along each direction
            mid = (lo + hi) / 2
            inside = field.sdf(dirs * mid[:, None]) < 0
            lo = torch.where(inside, mid, lo)
            hi = torch.where(inside, hi, mid)
    radii = ((lo + hi) / 2).numpy()
    assert abs(radii.mean() - field.r0) < 0.1
    assert radii.std() < 0.15


def test_init_is_deterministic_given_seed():
    a = SdfField(EncodingConfig(4), hidden=32, feature_dim=8, rng=np.random.default_rng(3))
    b = SdfField(EncodingConfig(4), hidden=32, feature_dim=8, rng=np.random.default_rng(3))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_sdf_gradient_matches_finite_differences(small_field):
    rng = np.random.default_rng(5)
    pts = torch.tensor(rng.uniform(-1.0, 1.0, size=(1000, 3)))
    _, grad = sdf_eval(small_field, pts)
    step = 1e-4
    checked = passed = 0
    with torch.no_grad():
        for axis in range(3):
            e = torch.zeros(3, dtype=torch.float64)
            e[axis] = step
            fd = (small_field.sdf(pts + e) - small_field.sdf(pts - e)) / (2 * step)
            ref = torch.clamp(fd.abs(), min=1e-6)
            rel = (grad[:, axis] - fd).abs() / ref
            checked += len(rel)
            passed += int((rel < 1e-3).sum())
    assert passed / checked >= 0.99, f"{passed}/{checked}"


def test_sdf_with_feature_shapes(small_field):
    x = torch.zeros(7, 3, dtype=torch.float64)
    val, feat = small_field.sdf_with_feature(x)
    assert val.shape == (7,)
    assert feat.shape == (7, small_field.feature_dim)


# ----------------------------------------------------------- radiance field
def test_radiance_output_in_unit_interval():
    rad = RadianceField(feature_dim=16, hidden=32, rng=np.random.default_rng(2))
    n = 50
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.normal(size=(n, 3)))
    v = torch.tensor(rng.normal(size=(n, 3)))
    v /= torch.linalg.norm(v, dim=-1, keepdim=True)
    nrm = torch.tensor(rng.normal(size=(n, 3)))
    feat = torch.tensor(rng.normal(size=(n, 16)))
    rgb = radiance_eval(rad, x, v, nrm, feat)
    assert rgb.shape == (n, 3)
    assert float(rgb.min()) >= 0.0 and float(rgb.max()) <= 1.0


def test_radiance_gradient_wrt_params_matches_fd():
    rad = RadianceField(feature_dim=8, hidden=16, num_layers=2, rng=np.random.default_rng(9))
    rng = np.random.default_rng(3)
    x = torch.tensor(rng.normal(size=(4, 3)) * 0.3)
    v = torch.tensor(rng.normal(size=(4, 3)))
    v /= torch.linalg.norm(v, dim=-1, keepdim=True)
    nrm = v.clone()
    feat = torch.tensor(rng.normal(size=(4, 8)))
    loss = radiance_eval(rad, x, v, nrm, feat).sum()
    loss.backward()
    step = 1e-6
    for p in rad.parameters():
        flat = p.detach().reshape(-1)
        idx = int(rng.integers(len(flat)))
        with torch.no_grad():
            orig = float(flat[idx])
            flat[idx] = orig + step
            hi = float(radiance_eval(rad, x, v, nrm, feat).sum())
            flat[idx] = orig - step
            lo = float(radiance_eval(rad, x, v, nrm, feat).sum())
            flat[idx] = orig
        fd = (hi - lo) / (2 * step)
        an = float(p.grad.reshape(-1)[idx])
        assert abs(an - fd) / max(abs(fd), 1e-6) < 1e-3


# ------------------------------------------------------ analytic primitives
def test_analytic_known_values():
    assert float(SphereSdf(1.0).sdf(torch.tensor([[2.0, 0.0, 0.0]]))) == pytest.approx(1.0)
    assert float(BoxSdf((1.0, 1.0, 1.0)).sdf(torch.tensor([[2.0, 2.0, 2.0]]))) == pytest.approx(
        np.sqrt(3.0)
    )
    assert float(BoxSdf((1.0, 1.0, 1.0)).sdf(torch.tensor([[0.5, 0.0, 0.0]]))) == pytest.approx(-0.5)
    torus_pt = torch.tensor([[0.6, 0.0, 0.2]], dtype=torch.float64)
    assert float(TorusSdf(0.6, 0.2).sdf(torus_pt)) == pytest.approx(0.0, abs=1e-12)
    union = UnionSdf([SphereSdf(0.5), BoxSdf((0.2, 0.2, 2.0))])
    pts = torch.tensor(np.random.default_rng(0).normal(size=(100, 3)))
    expected = torch.minimum(SphereSdf(0.5).sdf(pts), BoxSdf((0.2, 0.2, 2.0)).sdf(pts))
    np.testing.assert_allclose(union.sdf(pts).numpy(), expected.numpy())


def test_analytic_gradients_are_exact():
    shapes = [
        SphereSdf(0.7),
        BoxSdf((0.4, 0.5, 0.6)),
        TorusSdf(0.6, 0.2),
        UnionSdf([SphereSdf(0.5), TorusSdf(0.7, 0.1)]),
    ]
    rng = np.random.default_rng(8)
    pts = torch.tensor(rng.normal(size=(200, 3)), requires_grad=True)
    for shape in shapes:
        (g_auto,) = torch.autograd.grad(shape.sdf(pts).sum(), pts, retain_graph=False)
        g_exact = shape.gradient(pts.detach())
        np.testing.assert_allclose(g_auto.numpy(), g_exact.numpy(), atol=1e-12)
        # eikonal property away from the medial axis
        norms = torch.linalg.norm(g_exact, dim=-1).numpy()
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)
    pts.grad = None


def test_analytic_serialization_roundtrip():
    shape = UnionSdf([SphereSdf(0.5, (0.1, 0.0, 0.0)), BoxSdf((0.2, 0.3, 0.4)), TorusSdf(0.6, 0.2)])
    again = AnalyticSdf.from_dict(shape.to_dict())
    pts = torch.tensor(np.random.default_rng(1).normal(size=(50, 3)))
    np.testing.assert_allclose(again.sdf(pts).numpy(), shape.sdf(pts).numpy())
    with pytest.raises(ParseError):
        AnalyticSdf.from_dict({"kind": "cone"})


def test_sdf_eval_dispatches_to_exact_gradient():
    sphere = SphereSdf(1.0)
    x = torch.tensor([[0.0, 0.0, -2.0]])
    val, grad = sdf_eval(sphere, x)
    assert float(val) == pytest.approx(1.0)
    np.testing.assert_allclose(grad.numpy(), [[0.0, 0.0, -1.0]])


# -------------------------------------------------------------- checkpoints
def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(21)
    sdf = SdfField(EncodingConfig(4, alpha=2.5), hidden=32, feature_dim=8, rng=rng)
    rad = RadianceField(feature_dim=8, hidden=16, num_layers=2, dir_freqs=2, rng=rng)
    sharp = torch.tensor(0.37, dtype=torch.float64)
    poses = [
        Pose.identity(),
        Pose(torch.eye(3), torch.tensor([0.0, 0.0, 3.0]), delta=[0.01, 0, 0, 0, 0.02, 0]),
    ]
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, sdf, rad, sharp, poses, iteration=123)

    loaded = load_checkpoint(path)
    assert isinstance(loaded, Checkpoint)
    assert loaded.iteration == 123
    assert loaded.sdf.encoding == sdf.encoding
    for pa, pb in zip(sdf.parameters(), loaded.sdf.parameters()):
        assert torch.equal(pa, pb)
    for pa, pb in zip(rad.parameters(), loaded.radiance.parameters()):
        assert torch.equal(pa, pb)
    assert float(loaded.sharpness_raw) == 0.37
    assert len(loaded.poses) == 2
    np.testing.assert_allclose(loaded.poses[1].delta.detach().numpy(), [0.01, 0, 0, 0, 0.02, 0])
    x = torch.tensor(np.random.default_rng(2).normal(size=(10, 3)) * 0.5)
    np.testing.assert_allclose(loaded.sdf.sdf(x).detach().numpy(), sdf.sdf(x).detach().numpy())


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(ParseError):
        load_checkpoint(bad)
    bad.write_bytes(b"\x00\x01 not json\n")
    with pytest.raises(ParseError):
        load_checkpoint(bad)


def test_checkpoint_detects_truncation(tmp_path):
    sdf = SdfField(EncodingConfig(2), hidden=16, num_layers=2, skip_layer=None, feature_dim=4,
                   rng=np.random.default_rng(0))
    rad = RadianceField(feature_dim=4, hidden=8, num_layers=1, dir_freqs=1,
                        rng=np.random.default_rng(1))
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, sdf, rad, torch.tensor(0.3), [Pose.identity()], 0)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ParseError):
        load_checkpoint(path)
