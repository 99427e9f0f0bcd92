import json
from pathlib import Path

import numpy as np
import pytest
import torch

from scsurf.errors import InvariantViolation, MissingImage, ParseError
from scsurf.fields import SphereSdf, TorusSdf
from scsurf.geometry import Intrinsics, Sim3, cast_rays, look_at, project_points, se3_exp
from scsurf.scene_io import (
    AMBIENT,
    LIGHT_DIR,
    AnalyticRadiance,
    Image,
    ProceduralTexture,
    Scene,
    View,
    generate_synthetic,
    lambert_shade,
    load_scene,
    save_scene,
    sphere_trace,
    sphere_trace_render,
)
from scsurf.utils import as_tensor, substream

SMALL = dict(n_views=3, image_size=48, n_correspondences=24, pixel_margin=6.0, seed=7)


def _dir_bytes(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------
def test_image_rejects_out_of_range_values():
    bad = np.full((4, 4, 3), 1.5)
    with pytest.raises(InvariantViolation):
        Image.from_array(bad)
    with pytest.raises(InvariantViolation):
        Image.from_array(np.full((4, 4, 3), -0.1))


def test_image_rejects_shape_mismatch():
    with pytest.raises(InvariantViolation):
        Image(width=8, height=4, rgb=np.zeros((8, 8, 3)))


def test_png_round_trip_is_exact_after_quantization(tmp_path):
    rng = substream(3, "png")
    img = Image.from_array(rng.random((12, 17, 3)))
    img.save_png(tmp_path / "a.png")
    back = Image.load_png(tmp_path / "a.png")
    quantized = np.rint(img.rgb * 255.0) / 255.0
    np.testing.assert_array_equal(back.rgb, quantized)
    assert np.abs(back.rgb - img.rgb).max() <= 0.5 / 255.0 + 1e-12


def test_load_png_missing_file_raises(tmp_path):
    with pytest.raises(MissingImage):
        Image.load_png(tmp_path / "nope.png")


# --------------------------------------------------------------------------
# texture, shading, tracing
# --------------------------------------------------------------------------
def test_texture_values_stay_inside_band():
    tex = ProceduralTexture()
    pts = as_tensor(substream(5, "tex").uniform(-1, 1, size=(500, 3)))
    c = tex.colors(pts)
    assert float(c.min()) >= tex.base - tex.amp - 1e-12
    assert float(c.max()) <= tex.base + tex.amp + 1e-12


def test_lambert_shade_range_and_orientation():
    n = as_tensor(np.stack([LIGHT_DIR, -LIGHT_DIR]))
    s = lambert_shade(n)
    assert abs(float(s[0]) - 1.0) < 1e-12  # facing the light
    assert abs(float(s[1]) - AMBIENT) < 1e-12  # facing away: ambient floor
    rng = substream(6, "shade")
    dirs = rng.normal(size=(200, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    s = lambert_shade(as_tensor(dirs))
    assert float(s.min()) >= AMBIENT - 1e-12
    assert float(s.max()) <= 1.0 + 1e-12


def test_sphere_trace_depth_and_miss():
    sphere = SphereSdf(1.0)
    origins = as_tensor([[0.0, 0.0, -3.0], [0.0, 0.0, -3.0]])
    dirs = as_tensor([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    t, hit = sphere_trace(sphere, origins, dirs)
    assert bool(hit[0]) and not bool(hit[1])
    assert abs(float(t[0]) - 2.0) < 1e-4


def test_render_silhouette_radius_matches_pinhole_geometry():
    radius, dist = 0.5, 3.0
    intr = Intrinsics(fx=131.9, fy=131.9, cx=48.0, cy=48.0, width=96, height=96)
    pose = look_at((dist * 0.6, dist * 0.64, dist * 0.48), (0.0, 0.0, 0.0), trainable=False)
    eye_dist = float(np.linalg.norm([dist * 0.6, dist * 0.64, dist * 0.48]))
    img = sphere_trace_render(SphereSdf(radius), ProceduralTexture(), pose, intr,
                              background=(1.0, 1.0, 1.0))
    hit = np.any(img.rgb != 1.0, axis=-1)
    est_radius = np.sqrt(hit.sum() / np.pi)
    expected = intr.fx * radius / eye_dist
    assert abs(est_radius - expected) <= 1.0


def test_render_empty_shape_gives_uniform_background():
    intr = Intrinsics(fx=60.0, fy=60.0, cx=24.0, cy=24.0, width=48, height=48)
    pose = look_at((3.0, 0.0, 1.0), (0.0, 0.0, 0.0), trainable=False)
    img = sphere_trace_render([], ProceduralTexture(), pose, intr, background=(0.2, 0.3, 0.4))
    assert np.array_equal(img.rgb, np.broadcast_to([0.2, 0.3, 0.4], (48, 48, 3)))


def test_render_is_pure():
    intr = Intrinsics(fx=60.0, fy=60.0, cx=24.0, cy=24.0, width=48, height=48)
    pose = look_at((2.5, 0.7, 0.9), (0.0, 0.0, 0.0), trainable=False)
    a = sphere_trace_render(SphereSdf(0.6), ProceduralTexture(), pose, intr)
    b = sphere_trace_render(SphereSdf(0.6), ProceduralTexture(), pose, intr)
    assert np.array_equal(a.rgb, b.rgb)


def test_analytic_radiance_shades_texture():
    rad = AnalyticRadiance()
    x = as_tensor([[0.1, 0.2, 0.3]])
    n = as_tensor([LIGHT_DIR])
    got = rad(x, None, n)
    expected = ProceduralTexture().colors(x) * 1.0
    assert torch.allclose(got, expected, atol=1e-12)


# --------------------------------------------------------------------------
# synthetic generation
# --------------------------------------------------------------------------
def test_zero_noise_keeps_ground_truth_poses():
    scene = generate_synthetic(SphereSdf(0.5), noise_sigma=0.0, **SMALL)
    for view in scene.views:
        assert view.pose_gt is not None
        assert torch.equal(view.pose.rotation, view.pose_gt.rotation)
        assert torch.equal(view.pose.translation, view.pose_gt.translation)
        assert view.pose.delta.requires_grad
        assert float(view.pose.delta.detach().abs().max()) == 0.0


def test_noise_perturbs_poses_but_keeps_gt():
    scene = generate_synthetic(SphereSdf(0.5), noise_sigma=0.15, **SMALL)
    moved = 0
    for view in scene.views:
        diff = float((view.pose.rotation - view.pose_gt.rotation).abs().max())
        moved += diff > 1e-3
    assert moved == len(scene.views)


def test_generated_correspondences_reproject_under_half_pixel():
    scene = generate_synthetic(SphereSdf(0.5), noise_sigma=0.15, **SMALL)
    assert len(scene.correspondences) == SMALL["n_correspondences"]
    gt = [v.pose_gt for v in scene.views]
    intr = scene.views[0].intrinsics
    for e in scene.correspondences:
        origins, dirs = cast_rays(as_tensor(e.pixel_i)[None], gt[e.view_i], intr)
        t, hit = sphere_trace(scene.gt_shape, origins, dirs, max_steps=4096)
        assert bool(hit[0])
        point = origins[0] + t[0] * dirs[0]
        for view, pix in ((e.view_i, e.pixel_i), (e.view_j, e.pixel_j)):
            back, ok = project_points(point[None], gt[view], intr)
            assert bool(ok[0])
            assert float(torch.linalg.norm(back[0] - as_tensor(pix))) < 0.5


def test_generation_rejects_shape_outside_unit_sphere():
    with pytest.raises(InvariantViolation):
        generate_synthetic(SphereSdf(1.5), **SMALL)


def test_generation_rejects_single_view():
    with pytest.raises(InvariantViolation):
        generate_synthetic(SphereSdf(0.5), n_views=1)


def test_fixed_seed_gives_byte_identical_directories(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        scene = generate_synthetic(TorusSdf(0.6, 0.2), noise_sigma=0.15, **SMALL)
        save_scene(scene, d, write_gt_mesh=False)
    files_a, files_b = _dir_bytes(a), _dir_bytes(b)
    assert set(files_a) == set(files_b)
    for name in files_a:
        assert files_a[name] == files_b[name], f"{name} differs between runs"


# --------------------------------------------------------------------------
# persistence round trip
# --------------------------------------------------------------------------
@pytest.fixture(scope="module")
def saved_scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    scene = generate_synthetic(SphereSdf(0.5), noise_sigma=0.15, **SMALL)
    rot = se3_exp(np.array([0.2, -0.1, 0.3, 0.0, 0.0, 0.0])).rotation.numpy()
    scene.bounds = Sim3(scale=1.7, rotation=rot, translation=np.array([0.3, -0.2, 0.5]))
    save_scene(scene, d, write_gt_mesh=False)
    return d, scene


def test_round_trip_preserves_all_fields(saved_scene):
    d, scene = saved_scene
    back = load_scene(d)
    assert len(back.views) == len(scene.views)
    for va, vb in zip(scene.views, back.views):
        assert vb.intrinsics == va.intrinsics
        np.testing.assert_allclose(
            vb.pose.matrix().numpy(), va.pose.matrix().numpy(), atol=1e-12
        )
        np.testing.assert_allclose(
            vb.pose_gt.matrix().numpy(), va.pose_gt.matrix().numpy(), atol=1e-12
        )
        assert vb.pose.delta.requires_grad
        # PNG quantization is the only loss in the image path
        np.testing.assert_array_equal(vb.image.rgb, np.rint(va.image.rgb * 255.0) / 255.0)
    assert len(back.correspondences) == len(scene.correspondences)
    for ea, eb in zip(scene.correspondences, back.correspondences):
        assert (eb.view_i, eb.view_j) == (ea.view_i, ea.view_j)
        np.testing.assert_array_equal(eb.pixel_i, ea.pixel_i)  # repr floats: exact
        np.testing.assert_array_equal(eb.pixel_j, ea.pixel_j)
        assert eb.confidence == ea.confidence
    assert isinstance(back.gt_shape, SphereSdf)
    assert back.gt_shape.radius == scene.gt_shape.radius


def test_round_trip_preserves_bounds_exactly(saved_scene):
    d, scene = saved_scene
    back = load_scene(d)
    np.testing.assert_array_equal(back.bounds.matrix(), scene.bounds.matrix())


def test_bounds_denormalization_is_exact_inverse(saved_scene):
    _, scene = saved_scene
    rng = substream(9, "sim3")
    pts = rng.normal(size=(200, 3))
    round_trip = scene.bounds.inverse().apply(scene.bounds.apply(pts))
    assert np.abs(round_trip - pts).max() < 1e-12


def test_save_is_rewritable_and_stable(saved_scene, tmp_path):
    d, scene = saved_scene
    again = tmp_path / "again"
    save_scene(scene, again, write_gt_mesh=False)
    files_a, files_b = _dir_bytes(Path(d)), _dir_bytes(again)
    assert files_a == files_b


# --------------------------------------------------------------------------
# load-time validation
# --------------------------------------------------------------------------
def _mutate_scene_json(src: Path, dst: Path, fn):
    dst.mkdir(parents=True, exist_ok=True)
    for p in src.iterdir():
        if p.is_file():
            (dst / p.name).write_bytes(p.read_bytes())
    doc = json.loads((dst / "scene.json").read_text())
    fn(doc)
    (dst / "scene.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return dst


def test_missing_scene_json_raises(tmp_path):
    with pytest.raises(ParseError):
        load_scene(tmp_path)


def test_invalid_json_raises_with_path(saved_scene, tmp_path):
    d, _ = saved_scene
    broken = _mutate_scene_json(Path(d), tmp_path / "broken", lambda doc: None)
    (broken / "scene.json").write_text("{ not json")
    with pytest.raises(ParseError) as exc:
        load_scene(broken)
    assert "scene.json" in str(exc.value)


def test_wrong_format_string_raises(saved_scene, tmp_path):
    d, _ = saved_scene

    def fn(doc):
        doc["format"] = "something.else.v9"

    with pytest.raises(ParseError):
        load_scene(_mutate_scene_json(Path(d), tmp_path / "fmt", fn))


def test_single_view_scene_raises(saved_scene, tmp_path):
    d, _ = saved_scene

    def fn(doc):
        doc["views"] = doc["views"][:1]

    with pytest.raises(InvariantViolation):
        load_scene(_mutate_scene_json(Path(d), tmp_path / "one", fn))


def test_scene_constructor_rejects_single_view():
    img = Image.constant(8, 8)
    intr = Intrinsics(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=8, height=8)
    pose = look_at((3.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    with pytest.raises(InvariantViolation):
        Scene(views=[View(image=img, intrinsics=intr, pose=pose)])


def test_matches_bad_view_index_raises_with_line(saved_scene, tmp_path):
    d, _ = saved_scene
    dst = _mutate_scene_json(Path(d), tmp_path / "badidx", lambda doc: None)
    matches = dst / "matches.txt"
    text = matches.read_text().rstrip("\n")
    matches.write_text(text + "\n99 0 10.0 10.0 20.0 20.0 1.0\n")
    n_lines = len(text.splitlines()) + 1
    with pytest.raises(ParseError) as exc:
        load_scene(dst)
    assert exc.value.line == n_lines
    assert "99" in str(exc.value)


def test_matches_malformed_line_raises_with_line(saved_scene, tmp_path):
    d, _ = saved_scene
    dst = _mutate_scene_json(Path(d), tmp_path / "short", lambda doc: None)
    (dst / "matches.txt").write_text("# header\n0 1 10.0 10.0 20.0\n")
    with pytest.raises(ParseError) as exc:
        load_scene(dst)
    assert exc.value.line == 2


@pytest.mark.parametrize(
    "line",
    [
        "0 1 ten 10.0 20.0 20.0 1.0",  # unparsable number
        "0 1 nan 10.0 20.0 20.0 1.0",  # non-finite
        "0 0 10.0 10.0 20.0 20.0 1.0",  # self pair
        "0 1 10.0 10.0 500.0 20.0 1.0",  # pixel outside image
    ],
)
def test_matches_rejects_bad_content(saved_scene, tmp_path, line):
    d, _ = saved_scene
    dst = _mutate_scene_json(Path(d), tmp_path / f"bad{abs(hash(line)) % 1000}", lambda doc: None)
    (dst / "matches.txt").write_text(line + "\n")
    with pytest.raises(ParseError):
        load_scene(dst)


def test_missing_matches_file_raises(saved_scene, tmp_path):
    d, _ = saved_scene
    dst = _mutate_scene_json(Path(d), tmp_path / "nomatches", lambda doc: None)
    (dst / "matches.txt").unlink()
    with pytest.raises(ParseError):
        load_scene(dst)


def test_missing_image_file_raises(saved_scene, tmp_path):
    d, _ = saved_scene
    dst = _mutate_scene_json(Path(d), tmp_path / "noimg", lambda doc: None)
    (dst / "view_000.png").unlink()
    with pytest.raises(MissingImage):
        load_scene(dst)


def test_image_intrinsics_size_mismatch_raises(saved_scene, tmp_path):
    d, _ = saved_scene

    def fn(doc):
        doc["views"][0]["intrinsics"]["w"] = 64

    with pytest.raises(InvariantViolation):
        load_scene(_mutate_scene_json(Path(d), tmp_path / "size", fn))


def test_truncated_pose_raises(saved_scene, tmp_path):
    d, _ = saved_scene

    def fn(doc):
        doc["views"][0]["pose_c2w"] = doc["views"][0]["pose_c2w"][:12]

    with pytest.raises(ParseError):
        load_scene(_mutate_scene_json(Path(d), tmp_path / "pose", fn))
