"""Adam-preconditioned Langevin update with opacity-gated position noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GaussianSet, Gradients, assemble_covariance, sigmoid

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseParams:
    lambda_noise: float = 5e5
    k: float = 100.0
    t: float = 0.005
    # True evaluates sigmoid(-k (t - o)) literally, which favours opaque Gaussians
    printed_sign: bool = False

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        if not 0.0 < self.t < 1.0:
            raise ValueError("t must lie in (0, 1)")
        if self.lambda_noise < 0:
            raise ValueError("lambda_noise must be non-negative")


@dataclass(frozen=True)
class LrSchedule:
    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    total_steps: int = 30_000
    # positions live in scene units; rates are multiplied by the scene extent
    spatial_scale: float = 1.0
    scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    opacity_lr: float = 5e-2
    color_lr: float = 2.5e-3
    color_rest_divisor: float = 20.0

    def __post_init__(self):
        rates = (self.position_lr_init, self.position_lr_final, self.scale_lr, self.rotation_lr,
                 self.opacity_lr, self.color_lr, self.spatial_scale)
        if min(rates) <= 0:
            raise ValueError("learning rates must be positive")

    def position_lr(self, step: int) -> float:
        """Geometric interpolation from the initial to the final rate."""
        frac = min(max(step, 0), self.total_steps) / max(self.total_steps, 1)
        a, b = self.position_lr_init, self.position_lr_final
        return self.spatial_scale * a * (b / a) ** frac

    def rates(self, step: int, sh_degree: int = 0) -> dict:
        colors = self.color_lr
        if sh_degree > 0:
            k = (sh_degree + 1) ** 2
            colors = np.full((k, 1), self.color_lr / self.color_rest_divisor)
            colors[0] = self.color_lr
        return {
            "positions": self.position_lr(step),
            "raw_scales": self.scale_lr,
            "rotations": self.rotation_lr,
            "raw_opacities": self.opacity_lr,
            "colors": colors,
        }


@dataclass
class OptimizerState:
    """First/second moments per parameter group and the Adam step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_set(cls, gaussians: GaussianSet) -> "OptimizerState":
        params = gaussians.params()
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})

    def copy(self) -> "OptimizerState":
        return OptimizerState({k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()}, self.step)

    def reset(self, indices) -> None:
        for buf in (self.m, self.v):
            for arr in buf.values():
                arr[indices] = 0.0

    def append_zeros(self, n: int) -> None:
        for buf in (self.m, self.v):
            for name, arr in buf.items():
                buf[name] = np.concatenate([arr, np.zeros((n,) + arr.shape[1:])], axis=0)


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                lr, step: int) -> None:
    """One in-place Adam step; ``step`` is the 1-based count after increment."""
    m *= ADAM_BETA1
    m += (1.0 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1.0 - ADAM_BETA2) * (grad * grad)
    bc1 = 1.0 - ADAM_BETA1**step
    bc2 = 1.0 - ADAM_BETA2**step
    denom = np.sqrt(v) / np.sqrt(bc2) + ADAM_EPS
    param -= (lr / bc1) * (m / denom)


def noise_gate(opacity, k: float = 100.0, t: float = 0.005, printed_sign: bool = False):
    """~1 for transparent Gaussians, ~0 for opaque ones, 0.5 at opacity == t."""
    opacity = np.asarray(opacity, dtype=np.float64)
    arg = -k * (t - opacity) if printed_sign else -k * (opacity - t)
    return sigmoid(arg)


def position_noise(gaussians: GaussianSet, lr_now: float, params: NoiseParams,
                   rng: np.random.Generator) -> np.ndarray:
    """lr * gate(o) * Sigma @ eta per Gaussian, eta ~ N(0, I)."""
    n = len(gaussians)
    eta = rng.standard_normal((n, 3))
    if n == 0:
        return eta
    cov = assemble_covariance(gaussians.raw_scales, gaussians.rotations)
    gate = np.atleast_1d(noise_gate(gaussians.opacities, params.k, params.t, params.printed_sign))
    eps = lr_now * gate[:, None] * np.einsum("nij,nj->ni", cov, eta)
    if gaussians.dim == 2:
        eps[:, 2] = 0.0
    return eps


def check_finite(grads: Gradients) -> None:
    for name, g in grads.items():
        bad = ~np.isfinite(g)
        if np.any(bad):
            rows = np.unique(np.nonzero(bad)[0])
            raise NonFiniteGradientError(
                f"non-finite gradient in {name} at {rows.size} Gaussians (first: {rows[:5].tolist()})")


def sgld_step(gaussians: GaussianSet, grads: Gradients, opt: OptimizerState, sched: LrSchedule,
              noise: NoiseParams, step: int, rng: np.random.Generator) -> np.ndarray:
    """Adam on every group, then positions += lambda_noise * eps. Mutates in place.

    Noise is drawn from the pre-update parameters. Returns the noise added.
    """
    check_finite(grads)
    lr_pos = sched.position_lr(step)
    eps = position_noise(gaussians, lr_pos, noise, rng)
    opt.step += 1
    rates = sched.rates(step, gaussians.sh_degree)
    for name, g in grads.items():
        adam_update(getattr(gaussians, name), g, opt.m[name], opt.v[name], rates[name], opt.step)
    if noise.lambda_noise != 0.0:
        gaussians.positions += noise.lambda_noise * eps
    if gaussians.dim == 2:
        gaussians.positions[:, 2] = 0.0
    return eps
