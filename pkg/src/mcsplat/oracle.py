"""Slow, independent reference computations.

Nothing here calls into the renderer, loss or relocation code; everything is
re-derived from the defining formulas in extended precision. The only shared
pieces are the plain data containers (GaussianSet, Camera).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import mpmath
import numpy as np

LD = np.longdouble

ALPHA_CLAMP = 0.999
ALPHA_SKIP = 1.0 / 255.0
BLUR = 0.3
NEAR = 0.2
Y00 = 0.28209479177387814


def _rotation(q) -> np.ndarray:
    """Columns are q e_i q* computed with explicit quaternion products."""
    q = np.asarray(q, dtype=LD)
    q = q / np.sqrt(np.sum(q * q))

    def mul(a, b):
        return np.array([
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ], dtype=LD)

    conj = q * np.array([1, -1, -1, -1], dtype=LD)
    cols = []
    for i in range(3):
        e = np.zeros(4, dtype=LD)
        e[i + 1] = 1
        cols.append(mul(mul(q, e), conj)[1:])
    return np.stack(cols, axis=1)


def _gaussians_2d(gaussians, cam):
    """(mean, cov, depth, index, opacity, rgb) tuples for every visible Gaussian."""
    out = []
    for i in range(len(gaussians)):
        R = _rotation(gaussians.rotations[i])
        s = np.exp(np.asarray(gaussians.raw_scales[i], dtype=LD))
        cov3 = R @ np.diag(s * s) @ R.T
        mu = np.asarray(gaussians.positions[i], dtype=LD)
        if cam.is_identity:
            mean = mu[:2]
            cov = cov3[:2, :2]
            depth = LD(i)
        else:
            W = np.asarray(cam.R, dtype=LD)
            p = W @ mu + np.asarray(cam.t, dtype=LD)
            if p[2] <= NEAR:
                continue
            fx, fy = LD(cam.fx), LD(cam.fy)
            mean = np.array([fx * p[0] / p[2] + LD(cam.cx), fy * p[1] / p[2] + LD(cam.cy)])
            jac = np.array([[fx / p[2], 0, -fx * p[0] / p[2] ** 2],
                            [0, fy / p[2], -fy * p[1] / p[2] ** 2]], dtype=LD)
            cov = jac @ W @ cov3 @ W.T @ jac.T
            depth = p[2]
        cov = cov + LD(BLUR) * np.eye(2, dtype=LD)
        raw_o = LD(gaussians.raw_opacities[i])
        o = 1 / (1 + np.exp(-raw_o))
        rgb = np.maximum(Y00 * np.asarray(gaussians.colors[i, 0], dtype=LD) + LD(0.5), 0)
        out.append((mean, cov, depth, i, o, rgb))
    out.sort(key=lambda g: (g[2], g[3]))
    return out


def naive_composite(gaussians, cam) -> np.ndarray:
    """Per-pixel front-to-back blending with no tiling, footprint cutoff or early exit.

    Degree-0 colors only.
    """
    H, W = int(cam.height), int(cam.width)
    ys, xs = np.mgrid[0:H, 0:W]
    pix = np.stack([xs, ys], axis=-1).astype(LD)
    image = np.zeros((H, W, 3), dtype=LD)
    T = np.ones((H, W), dtype=LD)
    for mean, cov, _, _, o, rgb in _gaussians_2d(gaussians, cam):
        a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
        det = a * c - b * b
        d = pix - mean
        maha = (c * d[..., 0] ** 2 - 2 * b * d[..., 0] * d[..., 1] + a * d[..., 1] ** 2) / det
        alpha = np.minimum(o * np.exp(-maha / 2), LD(ALPHA_CLAMP))
        alpha = np.where(alpha < LD(ALPHA_SKIP), LD(0), alpha)
        image += (alpha * T)[..., None] * rgb
        T = T * (1 - alpha)
    return image.astype(np.float64)


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every entry of ``x`` (restored afterwards)."""
    grad = np.zeros(x.shape)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def finite_diff_grad(gaussians, loss, h: float = 1e-6) -> dict:
    """Central differences of ``loss(gaussians)`` for every parameter group."""
    out = {}
    for name in ("positions", "raw_scales", "rotations", "raw_opacities", "colors"):
        arr = getattr(gaussians, name)
        out[name] = central_difference(lambda: loss(gaussians), arr, h)
    return out


def _compose_profile(x, o, var, n_copies, o_copy, var_copy):
    """1D profiles of the original Gaussian and of N stacked copies (unit color)."""
    x = np.asarray(x, dtype=LD)
    old = LD(o) * np.exp(-x * x / (2 * LD(var)))
    g = LD(o_copy) * np.exp(-x * x / (2 * LD(var_copy)))
    new = np.zeros_like(x)
    T = np.ones_like(x)
    for _ in range(n_copies):
        new += g * T
        T *= 1 - g
    return old, new


def slice_integral(o, var, n_copies, o_copy, var_copy, samples: int = 100_001, half_width: float = 8.0):
    """Trapezoid integrals of the original and N-copy profiles over +-8 sigma."""
    sigma = math.sqrt(max(var, var_copy))
    x = np.linspace(-half_width * sigma, half_width * sigma, samples, dtype=LD)
    old, new = _compose_profile(x, o, var, n_copies, o_copy, var_copy)
    dx = x[1] - x[0]

    def trap(y):
        return float(dx * (np.sum(y) - (y[0] + y[-1]) / 2))

    return trap(old), trap(new)


def closed_form_integral(o, var) -> float:
    return float(o * math.sqrt(2 * math.pi * var))


def split_parameters(o_old, n):
    """Per-copy opacity and covariance factor, via the collapsed binomial sum.

    sum_i sum_k C(i-1, k) (...) = sum_j C(N, j) (-1)^(j-1) o^j / sqrt(j).
    """
    with mpmath.workdps(50):
        o_old_m = mpmath.mpf(o_old)
        o_new = 1 - (1 - o_old_m) ** (mpmath.mpf(1) / n)
        total = mpmath.fsum(mpmath.binomial(n, j) * (-1) ** (j - 1) * o_new**j / mpmath.sqrt(j)
                            for j in range(1, n + 1))
        f = o_old_m**2 / total**2
        return float(o_new), float(f)


def compare_cloning(o_old, var_old, n, ours=None, samples: int = 20_001) -> dict:
    """RMSE of the N-copy profile against the original for three clone rules.

    naive copies everything, center-corrected only fixes the opacity, ours also
    rescales the variance. ``ours`` may pass an externally computed
    (o_new, factor) pair.
    """
    o_center = 1 - (1 - o_old) ** (1.0 / n)
    if ours is None:
        ours = split_parameters(o_old, n)
    o_ours, factor = ours
    x = np.linspace(-8 * math.sqrt(var_old), 8 * math.sqrt(var_old), samples)
    result = {}
    for name, (oc, vc) in {"naive": (o_old, var_old), "center": (o_center, var_old),
                           "ours": (o_ours, factor * var_old)}.items():
        old, new = _compose_profile(x, o_old, var_old, n, oc, vc)
        result[name] = float(np.sqrt(np.mean((new - old) ** 2)))
    return result


def _window(size=11, sigma=1.5):
    x = np.arange(size, dtype=LD) - size // 2
    w = np.exp(-x * x / (2 * LD(sigma) ** 2))
    return w / w.sum()


def ssim_direct(a, b, c1=1e-4, c2=9e-4) -> float:
    """Windowed SSIM with edge replication, accumulated offset by offset."""
    a = np.asarray(a, dtype=LD)
    b = np.asarray(b, dtype=LD)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W = a.shape[:2]
    w = _window()
    r = w.size // 2
    rows, cols = np.arange(H), np.arange(W)
    mu_a = np.zeros(a.shape, dtype=LD)
    mu_b = np.zeros_like(mu_a)
    e_aa = np.zeros_like(mu_a)
    e_bb = np.zeros_like(mu_a)
    e_ab = np.zeros_like(mu_a)
    for di in range(-r, r + 1):
        ri = np.clip(rows + di, 0, H - 1)
        for dj in range(-r, r + 1):
            cj = np.clip(cols + dj, 0, W - 1)
            wt = w[di + r] * w[dj + r]
            pa = a[ri][:, cj]
            pb = b[ri][:, cj]
            mu_a += wt * pa
            mu_b += wt * pb
            e_aa += wt * pa * pa
            e_bb += wt * pb * pb
            e_ab += wt * pa * pb
    va = e_aa - mu_a**2
    vb = e_bb - mu_b**2
    cab = e_ab - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
    return float(np.mean(smap))


def l1_direct(a, b) -> float:
    a = np.asarray(a, dtype=LD)
    b = np.asarray(b, dtype=LD)
    return float(np.sum(np.abs(a - b)) / a.size)


@dataclass
class AdamReference:
    """Textbook Adam, one parameter array."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, p: np.ndarray, g: np.ndarray, lr=None) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(p)
            self.v = np.zeros_like(p)
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * (g * g)
        bc1 = 1 - self.beta1**self.t
        bc2 = 1 - self.beta2**self.t
        return p - (lr / bc1) * (self.m / (np.sqrt(self.v) / np.sqrt(bc2) + self.eps))
