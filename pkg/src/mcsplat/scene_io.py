"""Datasets, initialization, configuration files and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image
from plyfile import PlyData, PlyElement
from scipy.spatial import cKDTree

from .core import GaussianSet, raw_from_opacity, sh_coeff_count
from .mcmc import OptimizerState
from .render import Camera
from .sh import SH_C0


class SceneLoadError(IOError):
    pass


class CheckpointFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class SceneDataset:
    views: list  # list of (Camera, image HxWx3 in [0, 1])
    points: np.ndarray | None = None
    point_colors: np.ndarray | None = None
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0
    dim: int = 3

    @property
    def cameras(self) -> list:
        return [c for c, _ in self.views]

    @property
    def images(self) -> list:
        return [im for _, im in self.views]


# "clustered" restricts the random cube to its lower corner (one quadrant in 2D)
INIT_MODES = ("random", "point-cloud", "clustered")

# Settings for fitting a single small image (64x64, 512 Gaussians, 2000 steps).
# The scene defaults assume metric units and 30k steps; in pixel units the noise
# is rescaled, regularizers are averaged and positions move 10 image widths per
# unit of base learning rate.
IMAGE_PRESET = {
    "mode": "2d",
    "max_gaussians": 512,
    "init_count": 512,
    "iterations": 2000,
    "extent_multiplier": 1.0,
    "reg_reduction": "mean",
    "lambda_noise": 100.0,
    "position_lr_scale": 640.0,
    "color_lr": 0.01,
    "scale_lr": 0.01,
}


@dataclass
class TrainConfig:
    mode: str = "3d"
    max_gaussians: int = 300_000
    init_count: int = 100_000
    init_mode: str = "random"
    extent_multiplier: float = 3.0
    init_opacity: float = 0.1
    lambda_dssim: float = 0.2
    lambda_opacity: float = 0.01
    lambda_scale: float = 0.01
    reg_reduction: str = "sum"
    lambda_noise: float = 5e5
    noise_k: float = 100.0
    noise_t: float = 0.005
    noise_printed_sign: bool = False
    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    # None: use the scene extent radius
    position_lr_scale: float | None = None
    scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    opacity_lr: float = 5e-2
    color_lr: float = 2.5e-3
    live_threshold: float = 0.005
    relocate: bool = True
    grow: bool = True
    cadence: int = 100
    warmup: int = 500
    growth_rate: float = 0.05
    iterations: int = 30_000
    log_every: int = 50
    seed: int = 0
    deterministic: bool = False
    sh_degree: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("2d", "3d"):
            raise ConfigError(f"mode must be '2d' or '3d', got {self.mode!r}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if not self.max_gaussians >= self.init_count >= 1:
            raise ConfigError("need max_gaussians >= init_count >= 1")
        if self.cadence < 1:
            raise ConfigError("cadence must be >= 1")
        if self.extent_multiplier <= 0:
            raise ConfigError("extent_multiplier must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        sh_coeff_count(self.sh_degree)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def config_to_text(config: TrainConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(config), sort_keys=True)


def parse_config(text: str) -> TrainConfig:
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a flat key/value mapping")
    return config_from_dict(data)


def config_from_dict(data: dict) -> TrainConfig:
    unknown = set(data) - set(_CONFIG_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    defaults = TrainConfig()
    kw = {}
    for key, value in data.items():
        ref = getattr(defaults, key)
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{key}: nested values are not allowed")
        if value is None or ref is None or isinstance(ref, str):
            kw[key] = value
        elif isinstance(ref, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key}: expected true/false")
            kw[key] = value
        elif isinstance(ref, int):
            kw[key] = int(value)
        else:
            kw[key] = float(value)
    return TrainConfig(**kw)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def save_config(config: TrainConfig, path) -> None:
    Path(path).write_text(config_to_text(config))


# ---------------------------------------------------------------------------
# images and scenes


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise SceneLoadError(f"image not found: {path}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:  # PIL raises several unrelated types
        raise SceneLoadError(f"cannot decode image {path}: {exc}") from exc
    if img.mode in ("I", "I;16", "I;16B", "I;16L", "F", "1"):
        raise SceneLoadError(f"unsupported bit depth / mode {img.mode!r} in {path}")
    if img.mode == "RGBA":
        arr = np.asarray(img, dtype=np.float64) / 255.0
        return arr[..., :3] * arr[..., 3:4]
    return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def camera_extent(cameras) -> tuple[np.ndarray, float]:
    """Centroid of camera centers and the largest distance from it."""
    centers = np.array([c.center for c in cameras])
    center = centers.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centers - center, axis=1)))
    return center, (radius if radius > 0 else 1.0)


def image_dataset(image: np.ndarray) -> SceneDataset:
    H, W = image.shape[:2]
    cam = Camera.identity(W, H)
    center = np.array([(W - 1) / 2.0, (H - 1) / 2.0, 0.0])
    return SceneDataset(views=[(cam, image)], center=center, radius=max(W, H) / 2.0, dim=2)


_GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


def _camera_from_frame(c2w, fx, fy, cx, cy, W, H) -> Camera:
    c2w = np.asarray(c2w, dtype=np.float64)
    if c2w.shape != (4, 4):
        raise SceneLoadError("transform_matrix must be 4x4")
    c2w_cv = c2w @ _GL_TO_CV
    R = c2w_cv[:3, :3].T
    t = -R @ c2w_cv[:3, 3]
    return Camera(R, t, fx, fy, cx, cy, W, H)


def camera_to_c2w(cam: Camera) -> np.ndarray:
    c2w = np.eye(4)
    c2w[:3, :3] = cam.R.T
    c2w[:3, 3] = cam.center
    return c2w @ _GL_TO_CV


def _manifest_path(path: Path) -> Path:
    if path.is_dir():
        for name in ("transforms.json", "transforms_train.json"):
            if (path / name).exists():
                return path / name
        raise SceneLoadError(f"no transforms manifest in {path}")
    return path


def load_cameras(manifest, load_images: bool = True):
    """Parse a transforms manifest. Returns (views, manifest dict, base directory)."""
    manifest = _manifest_path(Path(manifest))
    if not manifest.exists():
        raise SceneLoadError(f"manifest not found: {manifest}")
    try:
        meta = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise SceneLoadError(f"malformed manifest {manifest}: {exc}") from exc
    if not isinstance(meta, dict) or not isinstance(meta.get("frames"), list):
        raise SceneLoadError(f"malformed manifest {manifest}: missing 'frames' list")
    base = manifest.parent
    views = []
    for i, frame in enumerate(meta["frames"]):
        merged = {**meta, **frame}
        try:
            rel = frame["file_path"]
            c2w = frame["transform_matrix"]
        except KeyError as exc:
            raise SceneLoadError(f"frame {i} lacks {exc.args[0]!r}") from exc
        img_path = base / rel
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        image = load_image(img_path) if load_images else None
        if image is not None:
            H, W = image.shape[:2]
        else:
            try:
                W, H = int(merged["w"]), int(merged["h"])
            except KeyError as exc:
                raise SceneLoadError(f"frame {i}: image size unknown without the image") from exc
        if "fl_x" in merged:
            fx = float(merged["fl_x"])
            fy = float(merged.get("fl_y", fx))
        elif "camera_angle_x" in merged:
            fx = 0.5 * W / math.tan(0.5 * float(merged["camera_angle_x"]))
            fy = 0.5 * H / math.tan(0.5 * float(merged["camera_angle_y"])) if "camera_angle_y" in merged else fx
        else:
            raise SceneLoadError(f"frame {i}: no field of view (camera_angle_x or fl_x)")
        cx = float(merged.get("cx", W / 2.0 - 0.5))
        cy = float(merged.get("cy", H / 2.0 - 0.5))
        views.append((_camera_from_frame(c2w, fx, fy, cx, cy, W, H), image))
    return views, meta, base


def load_scene(path, mode: str = "3d", point_cloud=None) -> SceneDataset:
    """2D mode: a single image. 3D mode: a transforms manifest (file or directory)."""
    path = Path(path)
    if not path.exists():
        raise SceneLoadError(f"scene path not found: {path}")
    if mode == "2d":
        return image_dataset(load_image(path))
    if mode != "3d":
        raise SceneLoadError(f"unknown scene mode {mode!r}")
    views, meta, base = load_cameras(path)
    if not views:
        raise SceneLoadError("manifest contains no frames")
    center, radius = camera_extent([c for c, _ in views])
    points = colors = None
    if point_cloud is None and "ply_file_path" in meta:
        point_cloud = base / meta["ply_file_path"]
    if point_cloud is not None:
        points, colors = load_point_cloud(point_cloud)
    return SceneDataset(views=views, points=points, point_colors=colors, center=center, radius=radius, dim=3)


def write_scene(dataset: SceneDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (cam, image) in enumerate(dataset.views):
        name = f"r_{i:03d}.png"
        save_image(image, directory / name)
        frames.append({
            "file_path": name,
            "transform_matrix": camera_to_c2w(cam).tolist(),
            "fl_x": cam.fx, "fl_y": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "w": cam.width, "h": cam.height,
        })
    meta = {"frames": frames}
    if dataset.points is not None:
        save_point_cloud(dataset.points, dataset.point_colors, directory / "points3d.ply")
        meta["ply_file_path"] = "points3d.ply"
    out = directory / "transforms.json"
    out.write_text(json.dumps(meta, indent=2))
    return out


def load_point_cloud(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise SceneLoadError(f"point cloud not found: {path}")
    try:
        v = PlyData.read(str(path))["vertex"]
    except Exception as exc:
        raise SceneLoadError(f"cannot read point cloud {path}: {exc}") from exc
    names = v.data.dtype.names
    for req in ("x", "y", "z"):
        if req not in names:
            raise SceneLoadError(f"point cloud lacks property {req!r}")
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    if all(c in names for c in ("red", "green", "blue")):
        rgb = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64)
        if v["red"].dtype == np.uint8:
            rgb /= 255.0
    else:
        rgb = np.full((pts.shape[0], 3), 0.5)
    return pts, rgb


def save_point_cloud(points, colors, path) -> None:
    colors = np.full((len(points), 3), 0.5) if colors is None else colors
    arr = np.empty(len(points), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                       ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    arr["x"], arr["y"], arr["z"] = np.asarray(points, dtype=np.float32).T
    rgb = np.clip(np.rint(np.asarray(colors) * 255), 0, 255).astype(np.uint8)
    arr["red"], arr["green"], arr["blue"] = rgb.T
    PlyData([PlyElement.describe(arr, "vertex")]).write(str(path))


# ---------------------------------------------------------------------------
# initialization


def _knn_scale(positions: np.ndarray, dims: int, k: int = 3) -> np.ndarray:
    pts = positions[:, :dims]
    n = pts.shape[0]
    if n < 2:
        return np.ones(n)
    kk = min(k, n - 1)
    dist, _ = cKDTree(pts).query(pts, k=kk + 1)
    return np.maximum(dist[:, kk], 1e-7)


def initialize(dataset: SceneDataset, config: TrainConfig, rng: np.random.Generator) -> GaussianSet:
    """Random cube or point-cloud initialization.

    Opacity starts at ``init_opacity``, rotations at identity and every Gaussian
    is isotropic with scale equal to the distance to its 3rd nearest neighbour.
    """
    n = config.init_count
    dims = dataset.dim
    half = config.extent_multiplier * dataset.radius

    def random_block(m):
        pos = np.zeros((m, 3))
        hi = 0.0 if config.init_mode == "clustered" else half
        pos[:, :dims] = dataset.center[:dims] + rng.uniform(-half, hi, size=(m, dims))
        return pos, rng.uniform(0.0, 1.0, size=(m, 3))

    if config.init_mode == "point-cloud":
        if dataset.points is None:
            raise ConfigError("point-cloud initialization requested but the scene has no point cloud")
        pts = dataset.points
        cols = dataset.point_colors if dataset.point_colors is not None else np.full((len(pts), 3), 0.5)
        if len(pts) > n:
            pick = np.sort(rng.choice(len(pts), size=n, replace=False))
            positions, rgb = pts[pick].copy(), cols[pick].copy()
        else:
            extra_pos, extra_rgb = random_block(n - len(pts))
            positions = np.concatenate([pts, extra_pos])
            rgb = np.concatenate([cols, extra_rgb])
        if dims == 2:
            positions[:, 2] = 0.0
    else:
        positions, rgb = random_block(n)

    k = sh_coeff_count(config.sh_degree)
    colors = np.zeros((n, k, 3))
    colors[:, 0, :] = (rgb - 0.5) / SH_C0
    raw_scale = np.log(_knn_scale(positions, dims))
    return GaussianSet(
        positions=np.ascontiguousarray(positions, dtype=np.float64),
        raw_scales=np.repeat(raw_scale[:, None], 3, axis=1),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        raw_opacities=np.full(n, raw_from_opacity(config.init_opacity)),
        colors=colors,
        capacity=config.max_gaussians,
        sh_degree=config.sh_degree,
        dim=dims,
    )


# ---------------------------------------------------------------------------
# checkpoints


def _ply_fields(sh_degree: int) -> list[str]:
    n_rest = 3 * (sh_coeff_count(sh_degree) - 1)
    return (["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
            + [f"f_rest_{i}" for i in range(n_rest)]
            + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])


def save_checkpoint(gaussians: GaussianSet, path) -> None:
    """Binary little-endian PLY in the usual splat layout, float32 per property.

    f_rest is stored channel-major; opacity and scales are raw (pre-activation).
    Normals are written as zeros for viewer compatibility.
    """
    names = _ply_fields(gaussians.sh_degree)
    names = names[:3] + ["nx", "ny", "nz"] + names[3:]
    n = len(gaussians)
    rest = np.transpose(gaussians.colors[:, 1:, :], (0, 2, 1)).reshape(n, -1)
    cols = np.concatenate([
        gaussians.positions, np.zeros((n, 3)), gaussians.colors[:, 0, :], rest, gaussians.raw_opacities[:, None],
        gaussians.raw_scales, gaussians.rotations], axis=1).astype("<f4")
    arr = np.empty(n, dtype=[(name, "<f4") for name in names])
    for i, name in enumerate(names):
        arr[name] = cols[:, i]
    comments = [f"mcsplat dim {gaussians.dim}", f"mcsplat capacity {gaussians.capacity}"]
    PlyData([PlyElement.describe(arr, "vertex")], text=False, byte_order="<",
            comments=comments).write(str(path))


def load_checkpoint(path) -> GaussianSet:
    path = Path(path)
    try:
        ply = PlyData.read(str(path))
        v = ply["vertex"]
    except Exception as exc:
        raise CheckpointFormatError(f"cannot parse checkpoint {path}: {exc}") from exc
    names = list(v.data.dtype.names)
    # normals appear in some exporters and carry no information
    names_core = [nm for nm in names if nm not in ("nx", "ny", "nz")]
    n_rest = sum(nm.startswith("f_rest_") for nm in names_core)
    degree = {0: 0, 9: 1, 24: 2, 45: 3}.get(n_rest)
    if degree is None or names_core != _ply_fields(degree):
        raise CheckpointFormatError(f"unrecognized property layout in {path}: {names}")
    meta = {}
    for c in ply.comments:
        parts = c.split()
        if len(parts) == 3 and parts[0] == "mcsplat":
            meta[parts[1]] = int(parts[2])
    n = len(v.data)

    def col(name):
        return np.asarray(v[name], dtype=np.float64)

    k = sh_coeff_count(degree)
    colors = np.zeros((n, k, 3))
    colors[:, 0, :] = np.stack([col(f"f_dc_{i}") for i in range(3)], axis=1)
    if k > 1:
        rest = np.stack([col(f"f_rest_{i}") for i in range(3 * (k - 1))], axis=1)
        colors[:, 1:, :] = rest.reshape(n, 3, k - 1).transpose(0, 2, 1)
    return GaussianSet(
        positions=np.stack([col("x"), col("y"), col("z")], axis=1),
        raw_scales=np.stack([col(f"scale_{i}") for i in range(3)], axis=1),
        rotations=np.stack([col(f"rot_{i}") for i in range(4)], axis=1),
        raw_opacities=col("opacity"),
        colors=colors,
        capacity=max(meta.get("capacity", n), n),
        sh_degree=degree,
        dim=meta.get("dim", 3),
    )


def save_training_state(path, gaussians: GaussianSet, opt: OptimizerState, iteration: int,
                        rng_states: dict) -> None:
    """Full-precision parameters, Adam moments and RNG states for exact resume."""
    arrays = {f"param_{k}": v for k, v in gaussians.params().items()}
    arrays.update({f"m_{k}": v for k, v in opt.m.items()})
    arrays.update({f"v_{k}": v for k, v in opt.v.items()})
    meta = {"iteration": iteration, "adam_step": opt.step, "capacity": gaussians.capacity,
            "sh_degree": gaussians.sh_degree, "dim": gaussians.dim, "rng": rng_states}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    # fixed member timestamps keep the archive byte-identical across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.asarray(arrays[name]), allow_pickle=False)


def load_training_state(path):
    """Returns (GaussianSet, OptimizerState, iteration, rng_states)."""
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            params = {k[6:]: data[k] for k in data.files if k.startswith("param_")}
            m = {k[2:]: data[k] for k in data.files if k.startswith("m_")}
            v = {k[2:]: data[k] for k in data.files if k.startswith("v_")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"cannot read training state {path}: {exc}") from exc
    gaussians = GaussianSet(**params, capacity=meta["capacity"], sh_degree=meta["sh_degree"], dim=meta["dim"])
    opt = OptimizerState(m=m, v=v, step=meta["adam_step"])
    return gaussians, opt, meta["iteration"], meta["rng"]
