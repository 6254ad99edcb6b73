"""Photometric loss, Gaussian-count regularizers and image metrics."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import GaussianSet, Gradients

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class ShapeMismatchError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_opacity: float = 0.01
    lambda_scale: float = 0.01
    # "sum" follows the written objective; "mean" divides both penalties by the Gaussian count
    reg_reduction: str = "sum"

    def __post_init__(self):
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")
        if self.lambda_opacity < 0 or self.lambda_scale < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.reg_reduction not in ("sum", "mean"):
            raise ValueError("reg_reduction must be 'sum' or 'mean'")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    l1: float
    dssim: float
    reg_opacity: float
    reg_scale: float


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


@lru_cache(maxsize=16)
def _blur_matrix(n: int) -> np.ndarray:
    """1D 'same' Gaussian filtering with edge replication as an n x n matrix."""
    w = gaussian_window()
    half = w.size // 2
    B = np.zeros((n, n))
    rows = np.arange(n)
    for k, wk in enumerate(w):
        cols = np.clip(rows + k - half, 0, n - 1)
        np.add.at(B, (rows, cols), wk)
    B.setflags(write=False)
    return B


def _blur(x: np.ndarray) -> np.ndarray:
    Bh = _blur_matrix(x.shape[0])
    Bw = _blur_matrix(x.shape[1])
    return np.einsum("ij,jkc,lk->ilc", Bh, x, Bw, optimize=True)


def _blur_adjoint(y: np.ndarray) -> np.ndarray:
    Bh = _blur_matrix(y.shape[0])
    Bw = _blur_matrix(y.shape[1])
    return np.einsum("ji,jkc,kl->ilc", Bh, y, Bw, optimize=True)


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _ssim_with_grad(a: np.ndarray, b: np.ndarray, want_grad: bool):
    a = _as_hwc(a)
    b = _as_hwc(b)
    _check_shapes(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidInputError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape[:2]}")
    mu_a, mu_b = _blur(a), _blur(b)
    e_aa, e_bb, e_ab = _blur(a * a), _blur(b * b), _blur(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num1 = 2.0 * mu_a * mu_b + SSIM_C1
    num2 = 2.0 * cov + SSIM_C2
    den1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    den2 = var_a + var_b + SSIM_C2
    smap = (num1 * num2) / (den1 * den2)
    value = float(smap.mean())
    if not want_grad:
        return value, None
    scale = 1.0 / smap.size
    dd = den1 * den2
    d_mu_a = (2.0 * mu_b * num2 - 2.0 * mu_b * num1) / dd - smap * (2.0 * mu_a / den1 - 2.0 * mu_a / den2)
    d_e_aa = -smap / den2
    d_e_ab = 2.0 * num1 / dd
    grad = (_blur_adjoint(scale * d_mu_a)
            + 2.0 * a * _blur_adjoint(scale * d_e_aa)
            + b * _blur_adjoint(scale * d_e_ab))
    return value, grad


def ssim(a, b) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    return _ssim_with_grad(a, b, want_grad=False)[0]


def ssim_grad(a, b) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to ``a``."""
    value, grad = _ssim_with_grad(a, b, want_grad=True)
    return value, grad.reshape(np.shape(a))


def psnr(rendered, target) -> float:
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(rendered, target)
    mse = float(np.mean((rendered - target) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _image_terms(rendered, target, lambda_dssim):
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(rendered, target)
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lambda_dssim) * np.sign(diff) / diff.size
    dssim = 0.0
    if lambda_dssim > 0.0:
        s, s_grad = ssim_grad(rendered, target)
        dssim = 1.0 - s
        grad = grad - lambda_dssim * s_grad
    elif min(rendered.shape[:2]) >= SSIM_WINDOW:
        dssim = 1.0 - ssim(rendered, target)
    value = (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim
    return value, grad, l1, dssim


def loss_orig(rendered, target, lambda_dssim: float = 0.2) -> tuple[float, np.ndarray]:
    """(1 - lambda) * mean|C - C_gt| + lambda * (1 - SSIM); returns value and dL/dC."""
    value, grad, _, _ = _image_terms(rendered, target, lambda_dssim)
    return value, grad


def regularizers(gaussians: GaussianSet, weights: LossWeights) -> tuple[float, float, Gradients]:
    """Opacity and scale penalties plus their parameter gradients.

    For Sigma = R diag(s^2) R^T the square roots of the eigenvalues are the
    scales themselves, so the covariance penalty is a plain sum of scales.
    """
    grads = Gradients.zeros_like(gaussians)
    n = len(gaussians)
    if n == 0:
        return 0.0, 0.0, grads
    norm = 1.0 / n if weights.reg_reduction == "mean" else 1.0
    o = gaussians.opacities
    s = gaussians.scales
    reg_o = weights.lambda_opacity * norm * float(np.sum(np.abs(o)))
    reg_s = weights.lambda_scale * norm * float(np.sum(np.abs(s)))
    grads.raw_opacities[:] = weights.lambda_opacity * norm * o * (1.0 - o)
    grads.raw_scales[:] = weights.lambda_scale * norm * s
    return reg_o, reg_s, grads


def loss_total(rendered, target, gaussians: GaussianSet, weights: LossWeights = LossWeights()):
    """Photometric loss plus regularizers.

    Returns (LossBreakdown, dL/dC, regularizer Gradients). Photometric gradients
    still have to be pulled back through the renderer by the caller.
    """
    value, grad, l1, dssim = _image_terms(rendered, target, weights.lambda_dssim)
    reg_o, reg_s, reg_grads = regularizers(gaussians, weights)
    breakdown = LossBreakdown(value + reg_o + reg_s, l1, dssim, reg_o, reg_s)
    return breakdown, grad, reg_grads
