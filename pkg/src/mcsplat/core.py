"""Gaussian parameter storage and the raw <-> physical parameter mappings."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

LIVE_THRESHOLD = 0.005


class InvalidParameterError(ValueError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def opacity_from_raw(raw):
    return sigmoid(raw)


def raw_from_opacity(o):
    return logit(o)


def scale_from_raw(raw):
    return np.exp(raw)


def raw_from_scale(s):
    return np.log(s)


def sh_coeff_count(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise InvalidParameterError(f"SH degree must be in [0, 3], got {degree}")
    return (degree + 1) ** 2


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for quaternions (w, x, y, z), normalized on the fly.

    Accepts shape (4,) or (N, 4).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=1)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise InvalidParameterError("quaternion with zero or non-finite norm")
    w, x, y, z = (q / norm[:, None]).T
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[:, 0, 1] = 2.0 * (x * y - w * z)
    R[:, 0, 2] = 2.0 * (x * z + w * y)
    R[:, 1, 0] = 2.0 * (x * y + w * z)
    R[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[:, 1, 2] = 2.0 * (y * z - w * x)
    R[:, 2, 0] = 2.0 * (x * z - w * y)
    R[:, 2, 1] = 2.0 * (y * z + w * x)
    R[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R[0] if single else R


def assemble_covariance(raw_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(raw_scale)^2) R^T.

    Works on a single Gaussian ((3,), (4,)) or a batch ((N, 3), (N, 4)).
    """
    raw_scale = np.asarray(raw_scale, dtype=np.float64)
    R = quat_to_rotmat(rotation)
    M = R * np.exp(raw_scale)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class GaussianSet:
    """Structure-of-arrays parameter block.

    All arrays share the leading dimension ``len(self)``; ``capacity`` bounds it.
    ``dim`` is 2 for image fitting (z pinned to 0) and 3 for scenes.
    """

    positions: np.ndarray
    raw_scales: np.ndarray
    rotations: np.ndarray
    raw_opacities: np.ndarray
    colors: np.ndarray
    capacity: int
    sh_degree: int = 0
    dim: int = 3

    PARAM_GROUPS = ("positions", "raw_scales", "rotations", "raw_opacities", "colors")

    def __post_init__(self):
        n = self.positions.shape[0]
        k = sh_coeff_count(self.sh_degree)
        expected = {
            "positions": (n, 3),
            "raw_scales": (n, 3),
            "rotations": (n, 4),
            "raw_opacities": (n,),
            "colors": (n, k, 3),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidParameterError(f"{name} has shape {arr.shape}, expected {shape}")
        if n > self.capacity:
            raise InvalidParameterError(f"{n} Gaussians exceed capacity {self.capacity}")
        if self.dim not in (2, 3):
            raise InvalidParameterError(f"dim must be 2 or 3, got {self.dim}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls, capacity: int, sh_degree: int = 0, dim: int = 3) -> "GaussianSet":
        k = sh_coeff_count(sh_degree)
        return cls(
            positions=np.zeros((0, 3)),
            raw_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            raw_opacities=np.zeros(0),
            colors=np.zeros((0, k, 3)),
            capacity=capacity,
            sh_degree=sh_degree,
            dim=dim,
        )

    @classmethod
    def from_physical(cls, positions, scales, opacities, colors=None, rotations=None,
                      capacity=None, sh_degree=0, dim=3) -> "GaussianSet":
        positions = np.asarray(positions, dtype=np.float64)
        n = positions.shape[0]
        if positions.shape[1] == 2:
            positions = np.concatenate([positions, np.zeros((n, 1))], axis=1)
            dim = 2
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        k = sh_coeff_count(sh_degree)
        if colors is None:
            colors = np.zeros((n, k, 3))
        colors = np.asarray(colors, dtype=np.float64)
        if colors.ndim == 2:
            full = np.zeros((n, k, 3))
            full[:, 0, :] = colors
            colors = full
        return cls(
            positions=positions.copy(),
            raw_scales=raw_from_scale(np.array(scales)),
            rotations=np.array(rotations, dtype=np.float64),
            raw_opacities=np.atleast_1d(raw_from_opacity(np.asarray(opacities, dtype=np.float64))),
            colors=colors.copy(),
            capacity=n if capacity is None else capacity,
            sh_degree=sh_degree,
            dim=dim,
        )

    @property
    def opacities(self) -> np.ndarray:
        return np.atleast_1d(opacity_from_raw(self.raw_opacities))

    @property
    def scales(self) -> np.ndarray:
        return scale_from_raw(self.raw_scales)

    def covariances(self) -> np.ndarray:
        return assemble_covariance(self.raw_scales, self.rotations)

    def copy(self) -> "GaussianSet":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in self.PARAM_GROUPS:
            kw[name] = kw[name].copy()
        return GaussianSet(**kw)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_GROUPS}

    def append(self, other: dict[str, np.ndarray]) -> None:
        n_new = other["positions"].shape[0]
        if len(self) + n_new > self.capacity:
            raise InvalidParameterError("append would exceed capacity")
        for name in self.PARAM_GROUPS:
            setattr(self, name, np.concatenate([getattr(self, name), other[name]], axis=0))


@dataclass(frozen=True)
class LivenessMask:
    live: np.ndarray
    threshold: float = LIVE_THRESHOLD

    @property
    def dead(self) -> np.ndarray:
        return ~self.live

    @property
    def live_indices(self) -> np.ndarray:
        return np.flatnonzero(self.live)

    @property
    def dead_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.live)

    def __len__(self) -> int:
        return self.live.shape[0]


def classify_liveness(gaussians: GaussianSet, threshold: float = LIVE_THRESHOLD) -> LivenessMask:
    if not 0.0 < threshold < 1.0:
        raise InvalidParameterError(f"threshold must lie in (0, 1), got {threshold}")
    return LivenessMask(live=gaussians.opacities >= threshold, threshold=threshold)


@dataclass
class Gradients:
    """Per-parameter gradients mirroring the GaussianSet groups."""

    positions: np.ndarray
    raw_scales: np.ndarray
    rotations: np.ndarray
    raw_opacities: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros_like(cls, gaussians: GaussianSet) -> "Gradients":
        return cls(**{name: np.zeros_like(arr) for name, arr in gaussians.params().items()})

    def items(self):
        return ((name, getattr(self, name)) for name in GaussianSet.PARAM_GROUPS)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.items())
