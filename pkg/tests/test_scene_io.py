import json
from pathlib import Path

import numpy as np
import pytest

from mcsplat.core import GaussianSet
from mcsplat.render import Camera
from mcsplat.scene_io import (CheckpointFormatError, ConfigError, SceneDataset, SceneLoadError, TrainConfig,
                              camera_extent, config_to_text, initialize, load_checkpoint, load_point_cloud,
                              load_config, load_scene, parse_config, save_checkpoint, save_image, save_point_cloud, write_scene)
from plyfile import PlyData, PlyElement

from conftest import TEST_IMAGE


def _views(rng, n=3, size=(10, 8)):
    views = []
    for i in range(n):
        eye = rng.normal(size=3) * 3 + np.array([0, 0, -4.0])
        cam = Camera.look_at(eye, [0, 0, 0], [0, -1, 0], 9.5 + i, 10.0, *size)
        img = rng.integers(0, 256, (size[1], size[0], 3)) / 255.0
        views.append((cam, img))
    return views


def test_single_image_scene():
    ds = load_scene(TEST_IMAGE, mode="2d")
    assert len(ds.views) == 1 and ds.dim == 2
    cam, img = ds.views[0]
    assert cam.is_identity and img.shape == (64, 64, 3)
    assert img.min() >= 0 and img.max() <= 1


def test_manifest_round_trip(tmp_path, rng):
    views = _views(rng)
    center, radius = camera_extent([c for c, _ in views])
    pts = rng.normal(size=(7, 3))
    ds = SceneDataset(views, points=pts, point_colors=rng.integers(0, 256, (7, 3)) / 255.0,
                      center=center, radius=radius)
    write_scene(ds, tmp_path)
    back = load_scene(tmp_path, mode="3d")
    assert len(back.views) == 3
    for (c0, i0), (c1, i1) in zip(views, back.views):
        np.testing.assert_allclose(c1.R, c0.R, atol=1e-9)
        np.testing.assert_allclose(c1.t, c0.t, atol=1e-9)
        assert (c1.fx, c1.fy, c1.cx, c1.cy) == (c0.fx, c0.fy, c0.cx, c0.cy)
        np.testing.assert_array_equal(i1, i0)
    np.testing.assert_allclose(back.center, center, atol=1e-9)
    assert back.radius == pytest.approx(radius, abs=1e-9)
    np.testing.assert_allclose(back.points, pts, atol=1e-6)


def test_camera_angle_manifest(tmp_path):
    save_image(np.zeros((4, 6, 3)), tmp_path / "a.png")
    c2w = np.eye(4)
    c2w[:3, 3] = [0, 0, 2]
    (tmp_path / "transforms.json").write_text(json.dumps(
        {"camera_angle_x": 2 * np.arctan(0.5), "frames": [{"file_path": "a", "transform_matrix": c2w.tolist()}]}))
    ds = load_scene(tmp_path, mode="3d")
    cam = ds.views[0][0]
    assert cam.fx == pytest.approx(6.0)
    # OpenGL camera looks down -z; in OpenCV convention the world origin is in front
    assert (cam.R @ np.zeros(3) + cam.t)[2] > 0
    assert ds.radius > 0


@pytest.mark.parametrize("content,match", [("{", "malformed"), ('{"frames": [{"file_path": "x.png"}]}', "transform_matrix")])
def test_bad_manifest(tmp_path, content, match):
    (tmp_path / "transforms.json").write_text(content)
    with pytest.raises(SceneLoadError, match=match):
        load_scene(tmp_path, mode="3d")


def test_missing_files(tmp_path):
    with pytest.raises(SceneLoadError):
        load_scene(tmp_path / "nope.png", mode="2d")
    (tmp_path / "transforms.json").write_text(json.dumps(
        {"camera_angle_x": 1.0, "frames": [{"file_path": "gone.png", "transform_matrix": np.eye(4).tolist()}]}))
    with pytest.raises(SceneLoadError, match="not found"):
        load_scene(tmp_path, mode="3d")


def test_sixteen_bit_rejected(tmp_path):
    from PIL import Image
    Image.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(SceneLoadError, match="bit depth"):
        load_scene(tmp_path / "deep.png", mode="2d")


def _dataset(radius=2.0):
    cam = Camera.look_at([0, 0, -4.0], [0, 0, 0], [0, -1, 0], 10, 10, 8, 8)
    return SceneDataset([(cam, np.zeros((8, 8, 3)))], center=np.array([1.0, -1.0, 0.5]), radius=radius)


def test_extent_multiplier_scales_box():
    ds = _dataset()
    spans = []
    for m in (1.0, 3.0):
        g = initialize(ds, TrainConfig(init_count=5000, max_gaussians=5000, extent_multiplier=m), np.random.default_rng(0))
        spans.append(g.positions.max(0) - g.positions.min(0))
        assert np.all(np.abs(g.positions - ds.center) <= m * ds.radius)
    np.testing.assert_allclose(spans[1] / spans[0], 3.0, rtol=0.01)


def test_initial_parameters():
    g = initialize(_dataset(), TrainConfig(init_count=50, max_gaussians=80), np.random.default_rng(0))
    np.testing.assert_allclose(g.opacities, 0.1, atol=1e-12)
    assert np.all(g.rotations == [1, 0, 0, 0])
    assert np.all(g.raw_scales[:, 0] == g.raw_scales[:, 1])
    from scipy.spatial.distance import cdist
    d = np.sort(cdist(g.positions, g.positions), axis=1)[:, 3]
    np.testing.assert_allclose(g.scales[:, 0], d, rtol=1e-12)
    assert g.capacity == 80


def test_point_cloud_init_is_exact():
    ds = _dataset()
    ds.points = np.random.default_rng(1).normal(size=(10, 3))
    ds.point_colors = np.full((10, 3), 0.25)
    g = initialize(ds, TrainConfig(init_count=10, max_gaussians=10, init_mode="point-cloud"), np.random.default_rng(0))
    np.testing.assert_array_equal(g.positions, ds.points)


def test_point_cloud_required():
    with pytest.raises(ConfigError):
        initialize(_dataset(), TrainConfig(init_count=10, max_gaussians=10, init_mode="point-cloud"),
                   np.random.default_rng(0))


def test_seeded_init_replays():
    cfg = TrainConfig(init_count=100, max_gaussians=100)
    a = initialize(_dataset(), cfg, np.random.default_rng(9))
    b = initialize(_dataset(), cfg, np.random.default_rng(9))
    for k in a.params():
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def _f32_set(rng, n=5, degree=0):
    k = (degree + 1) ** 2
    arrs = dict(positions=rng.normal(size=(n, 3)), raw_scales=rng.normal(size=(n, 3)), rotations=rng.normal(size=(n, 4)),
                raw_opacities=rng.normal(size=n), colors=rng.normal(size=(n, k, 3)))
    arrs = {k2: v.astype(np.float32).astype(np.float64) for k2, v in arrs.items()}
    return GaussianSet(**arrs, capacity=n + 3, sh_degree=degree, dim=3)


@pytest.mark.parametrize("degree", [0, 1, 3])
def test_checkpoint_round_trip(tmp_path, rng, degree):
    g = _f32_set(rng, degree=degree)
    save_checkpoint(g, tmp_path / "g.ply")
    back = load_checkpoint(tmp_path / "g.ply")
    assert back.sh_degree == degree and back.capacity == g.capacity
    for k in g.params():
        np.testing.assert_array_equal(getattr(back, k), getattr(g, k))


def test_checkpoint_schema(tmp_path, rng):
    save_checkpoint(_f32_set(rng, n=1), tmp_path / "one.ply")
    ply = PlyData.read(str(tmp_path / "one.ply"))
    props = ply["vertex"].properties
    assert len(props) == 17
    assert all(p.val_dtype in ("f4", "float32", "float") for p in props)
    assert [p.name for p in props][:9] == ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    assert not ply.text and ply.byte_order == "<"


def test_unknown_layout(tmp_path):
    arr = np.zeros(2, dtype=[("x", "<f4"), ("y", "<f4"), ("weird", "<f4")])
    PlyData([PlyElement.describe(arr, "vertex")]).write(str(tmp_path / "bad.ply"))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "bad.ply")
    (tmp_path / "junk.ply").write_bytes(b"not a ply")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "junk.ply")


def test_point_cloud_io(tmp_path, rng):
    pts = rng.normal(size=(6, 3)).astype(np.float32).astype(np.float64)
    cols = rng.integers(0, 256, (6, 3)) / 255.0
    save_point_cloud(pts, cols, tmp_path / "p.ply")
    p, c = load_point_cloud(tmp_path / "p.ply")
    np.testing.assert_array_equal(p, pts)
    np.testing.assert_array_equal(c, cols)


def test_config_round_trip():
    cfg = TrainConfig(mode="2d", max_gaussians=512, init_count=256, lambda_noise=100.0, deterministic=True,
                      position_lr_scale=640.0, seed=3)
    text = config_to_text(cfg)
    assert parse_config(text) == cfg
    assert parse_config(config_to_text(parse_config(text))) == cfg


@pytest.mark.parametrize("text", ["cadence: 0", "extent_multiplier: 0", "init_count: 10\nmax_gaussians: 5",
                                  "bogus_key: 1", "mode: 4d", "relocate: 3"])
def test_config_validation(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_shipped_image_preset_matches_library():
    from mcsplat.scene_io import IMAGE_PRESET
    path = Path(__file__).parents[1] / "configs" / "image64.yaml"
    assert load_config(path) == TrainConfig(**IMAGE_PRESET)
