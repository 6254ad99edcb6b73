"""Projection, depth-ordered alpha compositing and the analytic reverse pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _raster
from .core import GaussianSet, Gradients, assemble_covariance, quat_to_rotmat
from .sh import color_backward, eval_color_with_grad

ALPHA_CLAMP = 0.999
ALPHA_SKIP = 1.0 / 255.0
T_MIN = 1e-4
BLUR = 0.3
NEAR = 0.2
SIGMA_CUTOFF = 3.0


class ContractViolation(RuntimeError):
    pass


class DegenerateCovarianceError(ValueError):
    pass


class CameraMode(str, Enum):
    PINHOLE = "pinhole3D"
    IDENTITY = "identity2D"


@dataclass
class Camera:
    """World-to-camera rigid transform plus pinhole intrinsics (pixels)."""

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    mode: CameraMode = CameraMode.PINHOLE

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.mode = CameraMode(self.mode)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")

    @classmethod
    def identity(cls, width: int, height: int) -> "Camera":
        return cls(np.eye(3), np.zeros(3), 1.0, 1.0, 0.0, 0.0, width, height, CameraMode.IDENTITY)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """OpenCV-style camera (x right, y down, z forward) at ``eye`` facing ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(R, -R @ eye, fx, fy, cx, cy, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def is_identity(self) -> bool:
        return self.mode is CameraMode.IDENTITY


@dataclass(frozen=True)
class Projected2DGaussian:
    mean: np.ndarray
    cov: np.ndarray
    depth: float
    index: int


@dataclass
class Projection:
    """Visible Gaussians in composite order (depth, then source index)."""

    index: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return self.index.shape[0]

    def __getitem__(self, i) -> Projected2DGaussian:
        return Projected2DGaussian(self.means[i], self.covs[i], float(self.depths[i]), int(self.index[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _inverse_2x2(covs: np.ndarray) -> np.ndarray:
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0.0):
        raise DegenerateCovarianceError("2D covariance is not positive definite")
    inv = np.empty_like(covs)
    inv[:, 0, 0] = c / det
    inv[:, 1, 1] = a / det
    inv[:, 0, 1] = inv[:, 1, 0] = -b / det
    return inv


def project(gaussians: GaussianSet, cam: Camera, blur: float = BLUR, near: float = NEAR) -> Projection:
    cov3d = assemble_covariance(gaussians.raw_scales, gaussians.rotations) if len(gaussians) else np.zeros((0, 3, 3))
    n = len(gaussians)
    if cam.is_identity:
        keep = np.arange(n)
        means = gaussians.positions[:, :2].copy()
        covs = cov3d[:, :2, :2].copy()
        depths = keep.astype(np.float64)
        cache = {"cov3d": cov3d}
    else:
        t_cam = gaussians.positions @ cam.R.T + cam.t
        keep = np.flatnonzero(t_cam[:, 2] > near)
        tc = t_cam[keep]
        tx, ty, tz = tc[:, 0], tc[:, 1], tc[:, 2]
        means = np.stack([cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy], axis=1)
        J = np.zeros((keep.size, 2, 3))
        J[:, 0, 0] = cam.fx / tz
        J[:, 0, 2] = -cam.fx * tx / (tz * tz)
        J[:, 1, 1] = cam.fy / tz
        J[:, 1, 2] = -cam.fy * ty / (tz * tz)
        cov_cam = cam.R @ cov3d[keep] @ cam.R.T
        covs = J @ cov_cam @ np.swapaxes(J, 1, 2)
        depths = tz
        cache = {"cov3d": cov3d, "t_cam": tc, "J": J, "cov_cam": cov_cam}
    covs = covs + blur * np.eye(2)
    order = np.lexsort((keep, depths))
    keep = keep[order]
    means = means[order]
    covs = covs[order]
    depths = depths[order]
    for key in ("t_cam", "J", "cov_cam"):
        if key in cache:
            cache[key] = cache[key][order]
    conics = _inverse_2x2(covs) if keep.size else np.zeros((0, 2, 2))
    return Projection(keep, means, covs, conics, depths, cache)


def alpha_at(g: Projected2DGaussian, opacity: float, x) -> float:
    """Per-sample alpha with the clamp/skip conventions used by the compositor."""
    cov = np.asarray(g.cov, dtype=np.float64)
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if not det > 0.0:
        raise DegenerateCovarianceError("singular 2D covariance")
    d = np.asarray(x, dtype=np.float64) - g.mean
    maha = d @ np.linalg.solve(cov, d)
    alpha = min(opacity * np.exp(-0.5 * maha), ALPHA_CLAMP)
    return 0.0 if alpha < ALPHA_SKIP else float(alpha)


def footprint_extent(covs: np.ndarray, opacities: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Half extents of the box outside which a Gaussian is never composited.

    At least 3 sigma; widened where the alpha-skip level lies further out so
    that the cutoff never drops a sample the skip rule would keep.
    """
    with np.errstate(divide="ignore"):
        skip_radius = np.sqrt(np.maximum(2.0 * np.log(np.maximum(opacities, 1e-300) / ALPHA_SKIP), 0.0))
    k = np.maximum(SIGMA_CUTOFF, skip_radius)
    return k * np.sqrt(covs[:, 0, 0]), k * np.sqrt(covs[:, 1, 1])


@dataclass
class RenderOutput:
    image: np.ndarray
    transmittance: np.ndarray
    n_contrib: np.ndarray
    last: np.ndarray
    ctx: dict = field(default_factory=dict, repr=False)


def _kernel_inputs(projection: Projection, opacities: np.ndarray):
    conics = np.stack([projection.conics[:, 0, 0], projection.conics[:, 0, 1],
                       projection.conics[:, 1, 1]], axis=1) if len(projection) else np.zeros((0, 3))
    rx, ry = footprint_extent(projection.covs, opacities)
    return np.ascontiguousarray(projection.means), conics, rx, ry


def _check_sorted(projection: Projection) -> None:
    d = projection.depths
    if d.size < 2:
        return
    dd = np.diff(d)
    ties = dd == 0
    if np.any(dd < 0) or np.any(np.diff(projection.index)[ties] <= 0):
        raise ContractViolation("composite input is not sorted by (depth, index)")


def composite(projection: Projection, opacities: np.ndarray, colors: np.ndarray, cam: Camera,
              tiled: bool = True, check_sorted: bool = True) -> RenderOutput:
    """Front-to-back blending of already projected, depth-sorted Gaussians.

    ``opacities`` and ``colors`` are aligned with ``projection`` entries.
    """
    if check_sorted:
        _check_sorted(projection)
    opacities = np.ascontiguousarray(opacities, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(-1, 3)
    means, conics, rx, ry = _kernel_inputs(projection, opacities)
    W, H = int(cam.width), int(cam.height)
    if tiled:
        offsets, ids = _raster.bin_tiles(means, rx, ry, W, H, _raster.TILE)
        image, T, n_contrib, last = _raster.forward_tiled(
            offsets, ids, means, conics, opacities, colors, rx, ry, W, H, _raster.TILE,
            ALPHA_CLAMP, ALPHA_SKIP, T_MIN)
    else:
        image, T = _raster.forward_sequential(
            means, conics, opacities, colors, rx, ry, W, H, ALPHA_CLAMP, ALPHA_SKIP, T_MIN)
        offsets = ids = None
        n_contrib = last = np.zeros((H, W), dtype=np.int64)
    ctx = {"projection": projection, "opacities": opacities, "colors": colors, "means": means,
           "conics": conics, "rx": rx, "ry": ry, "offsets": offsets, "ids": ids, "cam": cam}
    return RenderOutput(image, T, n_contrib, last, ctx)


def view_directions(gaussians: GaussianSet, cam: Camera, index: np.ndarray) -> np.ndarray | None:
    if cam.is_identity:
        dirs = np.zeros((index.size, 3))
        dirs[:, 2] = 1.0
        return dirs
    return gaussians.positions[index] - cam.center


def render(gaussians: GaussianSet, cam: Camera, tiled: bool = True) -> RenderOutput:
    projection = project(gaussians, cam)
    idx = projection.index
    opac = gaussians.opacities[idx]
    dirs = view_directions(gaussians, cam, idx)
    rgb, color_ctx = eval_color_with_grad(gaussians.colors[idx], dirs)
    out = composite(projection, opac, rgb, cam, tiled=tiled)
    out.ctx["gaussians"] = gaussians
    out.ctx["color_ctx"] = color_ctx
    return out


def _rotation_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=1)
    w, x, y, z = (q / norm[:, None]).T
    G = dR
    dw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2]
              - y * G[:, 2, 0] + x * G[:, 2, 1])
    dx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
              - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    dy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
              + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    dz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
              - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    dq_hat = np.stack([dw, dx, dy, dz], axis=1)
    q_hat = q / norm[:, None]
    radial = np.sum(dq_hat * q_hat, axis=1, keepdims=True)
    return (dq_hat - radial * q_hat) / norm[:, None]


def covariance_backward(raw_scales: np.ndarray, rotations: np.ndarray, d_cov: np.ndarray):
    """Chain dL/dSigma (symmetric) to raw scales and raw quaternions."""
    R = quat_to_rotmat(rotations)
    s = np.exp(raw_scales)
    M = R * s[:, None, :]
    dM = 2.0 * d_cov @ M
    d_s = np.sum(dM * R, axis=1)
    dR = dM * s[:, None, :]
    return d_s * s, _rotation_backward(rotations, dR)


def render_backward(output: RenderOutput, grad_image: np.ndarray) -> Gradients:
    """Gradients of sum(grad_image * image) w.r.t. every Gaussian parameter."""
    ctx = output.ctx
    gaussians: GaussianSet = ctx["gaussians"]
    cam: Camera = ctx["cam"]
    projection: Projection = ctx["projection"]
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != output.image.shape:
        raise ContractViolation(f"gradient shape {grad_image.shape} != image shape {output.image.shape}")
    if ctx["offsets"] is None:
        raise ContractViolation("backward needs a tiled forward pass")
    grads = Gradients.zeros_like(gaussians)
    if len(projection) == 0:
        return grads
    g9 = _raster.backward_tiled(
        ctx["offsets"], ctx["ids"], output.last, grad_image, ctx["means"], ctx["conics"],
        ctx["opacities"], ctx["colors"], ctx["rx"], ctx["ry"], int(cam.width), int(cam.height),
        _raster.TILE, ALPHA_CLAMP, ALPHA_SKIP)
    idx = projection.index
    d_mean = g9[:, 0:2]
    Gq = np.empty((idx.size, 2, 2))
    Gq[:, 0, 0] = g9[:, 2]
    Gq[:, 0, 1] = Gq[:, 1, 0] = g9[:, 3]
    Gq[:, 1, 1] = g9[:, 4]
    Q = projection.conics
    d_cov2 = -Q @ Gq @ Q
    d_opac = g9[:, 5]
    d_rgb = g9[:, 6:9]

    d_pos = np.zeros((idx.size, 3))
    if cam.is_identity:
        d_pos[:, :2] = d_mean
        d_cov3 = np.zeros((idx.size, 3, 3))
        d_cov3[:, :2, :2] = d_cov2
    else:
        c = projection.cache
        tx, ty, tz = c["t_cam"].T
        J = c["J"]
        W = cam.R
        d_cov3 = W.T @ (np.swapaxes(J, 1, 2) @ d_cov2 @ J) @ W
        dJ = 2.0 * d_cov2 @ J @ c["cov_cam"]
        fx, fy = cam.fx, cam.fy
        dt = np.zeros((idx.size, 3))
        dt[:, 0] = fx / tz * d_mean[:, 0] - fx / tz**2 * dJ[:, 0, 2]
        dt[:, 1] = fy / tz * d_mean[:, 1] - fy / tz**2 * dJ[:, 1, 2]
        dt[:, 2] = (-(fx * tx * d_mean[:, 0] + fy * ty * d_mean[:, 1]) / tz**2
                    - fx / tz**2 * dJ[:, 0, 0] + 2 * fx * tx / tz**3 * dJ[:, 0, 2]
                    - fy / tz**2 * dJ[:, 1, 1] + 2 * fy * ty / tz**3 * dJ[:, 1, 2])
        d_pos = dt @ W

    d_coeffs, d_dirs = color_backward(ctx["color_ctx"], d_rgb)
    if not cam.is_identity and gaussians.sh_degree > 0:
        d_pos = d_pos + d_dirs

    d_raw_s, d_rot = covariance_backward(gaussians.raw_scales[idx], gaussians.rotations[idx], d_cov3)
    o = ctx["opacities"]
    grads.positions[idx] = d_pos
    grads.raw_scales[idx] = d_raw_s
    grads.rotations[idx] = d_rot
    grads.raw_opacities[idx] = d_opac * o * (1.0 - o)
    grads.colors[idx] = d_coeffs
    return grads
