"""Real spherical-harmonic color evaluation (degrees 0-3) and its adjoint."""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


class InvalidInputError(ValueError):
    pass


def _unit(dirs):
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    norm = np.linalg.norm(dirs, axis=1)
    if np.any(norm == 0.0):
        raise InvalidInputError("zero view direction")
    return dirs / norm[:, None], norm


def sh_basis(dirs: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Basis values (N, K) at unit directions and their Jacobian (N, K, 3)."""
    n = dirs.shape[0]
    k = (degree + 1) ** 2
    Y = np.zeros((n, k))
    dY = np.zeros((n, k, 3))
    Y[:, 0] = SH_C0
    if degree == 0:
        return Y, dY
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    Y[:, 1] = -SH_C1 * y
    Y[:, 2] = SH_C1 * z
    Y[:, 3] = -SH_C1 * x
    dY[:, 1, 1] = -SH_C1
    dY[:, 2, 2] = SH_C1
    dY[:, 3, 0] = -SH_C1
    if degree == 1:
        return Y, dY
    xx, yy, zz = x * x, y * y, z * z
    Y[:, 4] = SH_C2[0] * x * y
    dY[:, 4] = SH_C2[0] * np.stack([y, x, 0 * z], axis=1)
    Y[:, 5] = SH_C2[1] * y * z
    dY[:, 5] = SH_C2[1] * np.stack([0 * x, z, y], axis=1)
    Y[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    dY[:, 6] = SH_C2[2] * np.stack([-2.0 * x, -2.0 * y, 4.0 * z], axis=1)
    Y[:, 7] = SH_C2[3] * x * z
    dY[:, 7] = SH_C2[3] * np.stack([z, 0 * y, x], axis=1)
    Y[:, 8] = SH_C2[4] * (xx - yy)
    dY[:, 8] = SH_C2[4] * np.stack([2.0 * x, -2.0 * y, 0 * z], axis=1)
    if degree == 2:
        return Y, dY
    Y[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    dY[:, 9] = SH_C3[0] * np.stack([6.0 * x * y, 3.0 * xx - 3.0 * yy, 0 * z], axis=1)
    Y[:, 10] = SH_C3[1] * x * y * z
    dY[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=1)
    Y[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    dY[:, 11] = SH_C3[2] * np.stack([-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z], axis=1)
    Y[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    dY[:, 12] = SH_C3[3] * np.stack([-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy], axis=1)
    Y[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    dY[:, 13] = SH_C3[4] * np.stack([4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z], axis=1)
    Y[:, 14] = SH_C3[5] * z * (xx - yy)
    dY[:, 14] = SH_C3[5] * np.stack([2.0 * x * z, -2.0 * y * z, xx - yy], axis=1)
    Y[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    dY[:, 15] = SH_C3[6] * np.stack([3.0 * xx - 3.0 * yy, -6.0 * x * y, 0 * z], axis=1)
    return Y, dY


def _degree_of(coeffs: np.ndarray) -> int:
    k = coeffs.shape[1]
    degree = int(round(np.sqrt(k))) - 1
    if (degree + 1) ** 2 != k or degree > 3:
        raise InvalidInputError(f"{k} coefficients do not match any SH degree <= 3")
    return degree


def eval_color(coeffs: np.ndarray, dirs: np.ndarray | None = None) -> np.ndarray:
    """RGB = clamp(sum_k coeff_k Y_k(dir) + 0.5, 0).

    ``coeffs`` has shape (N, K, 3) or (K, 3). Directions are normalized here;
    they are ignored at degree 0.
    """
    return eval_color_with_grad(coeffs, dirs)[0]


def eval_color_with_grad(coeffs, dirs=None):
    """Color plus the pieces needed by :func:`color_backward`."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    single = coeffs.ndim == 2
    if single:
        coeffs = coeffs[None]
    degree = _degree_of(coeffs)
    n = coeffs.shape[0]
    if degree == 0:
        unit = np.zeros((n, 3))
        unit[:, 2] = 1.0
        norm = np.ones(n)
        if dirs is not None:
            unit, norm = _unit(dirs)
    else:
        if dirs is None:
            raise InvalidInputError("view directions required for SH degree > 0")
        unit, norm = _unit(dirs)
    Y, dY = sh_basis(unit, degree)
    raw = np.einsum("nk,nkc->nc", Y, coeffs) + 0.5
    rgb = np.maximum(raw, 0.0)
    ctx = (Y, dY, unit, norm, raw > 0.0, coeffs)
    return (rgb[0] if single else rgb), ctx


def color_backward(ctx, grad_rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. coefficients (N, K, 3) and un-normalized directions (N, 3)."""
    Y, dY, unit, norm, active, coeffs = ctx
    g = np.where(active, grad_rgb, 0.0)
    d_coeffs = Y[:, :, None] * g[:, None, :]
    d_unit = np.einsum("nc,nkc,nkd->nd", g, coeffs, dY)
    # project out the radial component of the normalization
    radial = np.sum(d_unit * unit, axis=1, keepdims=True)
    d_dirs = (d_unit - radial * unit) / norm[:, None]
    return d_coeffs, d_dirs
