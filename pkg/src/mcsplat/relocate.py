"""Relocation of dead Gaussians onto live ones, and gradual growth.

A target with opacity ``o`` that receives ``N - 1`` extra copies hands all
``N`` members the opacity ``1 - (1 - o)^(1/N)`` (same composited value at the
center) and a covariance scaled so that the integral along any line through
the center is unchanged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import LIVE_THRESHOLD, GaussianSet, LivenessMask, logit
from .mcmc import OptimizerState

log = logging.getLogger(__name__)

N_MAX = 51
OPACITY_FLOOR = LIVE_THRESHOLD + 1e-4
OPACITY_CEIL = 1.0 - 1e-7
MAX_REDRAWS = 16


class InvalidInputError(ValueError):
    pass


class DegenerateRelocationError(ArithmeticError):
    pass


class ContractViolation(RuntimeError):
    pass


def _binomial_table(n_max: int) -> np.ndarray:
    table = np.zeros((n_max, n_max), dtype=np.longdouble)
    for i in range(n_max):
        for k in range(i + 1):
            table[i, k] = np.longdouble(math.comb(i, k))
    return table


_BINOM = _binomial_table(N_MAX)


def relocated_opacity(o_old, n: int, clamp: bool = True):
    """Per-copy opacity so that N stacked copies composite to ``o_old`` at the center."""
    if n < 1:
        raise InvalidInputError(f"N must be >= 1, got {n}")
    o_old = np.asarray(o_old, dtype=np.float64)
    o_new = -np.expm1(np.log1p(-o_old) / n)
    if clamp:
        o_new = np.clip(o_new, OPACITY_FLOOR, OPACITY_CEIL)
    return o_new if o_new.ndim else float(o_new)


def _denominator_sum(o_new: np.ndarray, n: int) -> np.ndarray:
    """sum_{i=1..N} sum_{k=0..i-1} C(i-1, k) (-1)^k o_new^(k+1) / sqrt(k+1)."""
    o = np.asarray(o_new, dtype=np.longdouble)[..., None]
    k = np.arange(n, dtype=np.longdouble)
    sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0).astype(np.longdouble)
    terms = sign * o ** (k + 1) / np.sqrt(k + 1)
    per_k = _BINOM[:n, :n].sum(axis=0)  # sum over i of C(i-1, k)
    return np.sum(terms * per_k, axis=-1)


def relocated_covariance_factor(o_old, n: int, o_new=None):
    """Multiplier f with Sigma_new = f * Sigma_old (scales multiply by sqrt(f))."""
    if n < 1:
        raise InvalidInputError(f"N must be >= 1, got {n}")
    if n > N_MAX:
        raise InvalidInputError(f"N = {n} exceeds N_MAX = {N_MAX}")
    o_old = np.asarray(o_old, dtype=np.float64)
    if o_new is None:
        o_new = relocated_opacity(o_old, n)
    denom = _denominator_sum(o_new, n)
    if np.any(denom <= 0):
        raise DegenerateRelocationError(f"non-positive denominator for N={n}")
    f = np.asarray(np.longdouble(1) * o_old**2 / denom**2, dtype=np.float64)
    return f if f.ndim else float(f)


@dataclass
class RelocationPlan:
    """Dead-to-target assignments; ``counts[t]`` is the N of target ``t``."""

    sources: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    no_live: bool = False

    def __len__(self) -> int:
        return self.sources.size

    @property
    def counts(self) -> dict[int, int]:
        uniq, c = np.unique(self.targets, return_counts=True)
        return {int(t): int(k) + 1 for t, k in zip(uniq, c)}


def sample_targets(live_idx: np.ndarray, weights: np.ndarray, n_draws: int,
                   rng: np.random.Generator, existing: np.ndarray | None = None):
    """Multinomial draws over live Gaussians, re-drawing picks whose N would exceed N_MAX.

    Returns (targets, n_dropped). Dropped draws are marked -1.
    """
    probs = weights / weights.sum()
    load = np.zeros(live_idx.size, dtype=np.int64) if existing is None else existing.copy()
    picks = rng.choice(live_idx.size, size=n_draws, p=probs)
    out = np.full(n_draws, -1, dtype=np.int64)
    for d in range(n_draws):
        p = picks[d]
        tries = 0
        while load[p] + 1 >= N_MAX and tries < MAX_REDRAWS:
            p = rng.choice(live_idx.size, p=probs)
            tries += 1
        if load[p] + 1 >= N_MAX:
            continue
        load[p] += 1
        out[d] = p
    return out, load


def build_plan(mask: LivenessMask, opacities: np.ndarray, rng: np.random.Generator) -> RelocationPlan:
    """Each dead Gaussian independently picks a live target with probability proportional to opacity."""
    dead = mask.dead_indices
    live = mask.live_indices
    if dead.size == 0:
        return RelocationPlan()
    if live.size == 0:
        log.warning("no live Gaussians; relocation skipped")
        return RelocationPlan(dropped=dead, no_live=True)
    picks, _ = sample_targets(live, np.asarray(opacities)[live], dead.size, rng)
    ok = picks >= 0
    return RelocationPlan(sources=dead[ok], targets=live[picks[ok]], dropped=dead[~ok])


def _split_values(gaussians: GaussianSet, targets: np.ndarray, counts: np.ndarray):
    """New raw opacity and raw-scale offset for each target given its N."""
    o_old = gaussians.opacities[targets]
    new_raw_o = np.empty(targets.size)
    log_sqrt_f = np.empty(targets.size)
    for n in np.unique(counts):
        sel = counts == n
        o_new = relocated_opacity(o_old[sel], int(n))
        f = relocated_covariance_factor(o_old[sel], int(n), o_new=o_new)
        new_raw_o[sel] = logit(o_new)
        log_sqrt_f[sel] = 0.5 * np.log(f)
    return new_raw_o, log_sqrt_f


def _apply_moves(gaussians: GaussianSet, sources: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Copy target parameters onto sources and apply the split update. Returns unique targets."""
    uniq, inverse, c = np.unique(targets, return_inverse=True, return_counts=True)
    counts = c + 1
    new_raw_o, log_sqrt_f = _split_values(gaussians, uniq, counts)
    # snapshot: every update reads pre-move values
    raw_s = gaussians.raw_scales[uniq] + log_sqrt_f[:, None]
    pos = gaussians.positions[uniq].copy()
    rot = gaussians.rotations[uniq].copy()
    col = gaussians.colors[uniq].copy()
    gaussians.raw_opacities[uniq] = new_raw_o
    gaussians.raw_scales[uniq] = raw_s
    gaussians.positions[sources] = pos[inverse]
    gaussians.rotations[sources] = rot[inverse]
    gaussians.colors[sources] = col[inverse]
    gaussians.raw_opacities[sources] = new_raw_o[inverse]
    gaussians.raw_scales[sources] = raw_s[inverse]
    return uniq


def apply_plan(gaussians: GaussianSet, opt: OptimizerState, plan: RelocationPlan) -> None:
    """Apply a plan in place. Target moments are zeroed; sources keep theirs."""
    if len(plan) == 0:
        return
    live = gaussians.opacities >= LIVE_THRESHOLD
    if np.any(live[plan.sources]) or not np.all(live[plan.targets]):
        raise ContractViolation("plan does not match current liveness")
    if np.intersect1d(plan.sources, plan.targets).size:
        raise ContractViolation("an index is both source and target")
    uniq = _apply_moves(gaussians, plan.sources, plan.targets)
    opt.reset(uniq)


def grow_step(gaussians: GaussianSet, opt: OptimizerState, current_live: int, cap: int,
              rate: float, rng: np.random.Generator) -> int:
    """Activate up to ceil(rate * current_live) new Gaussians by splitting live ones.

    New slots are appended (bounded by both ``cap`` and the set's capacity) and
    placed with the same split update as relocation. Returns the number added.
    """
    if cap > gaussians.capacity:
        raise InvalidInputError(f"cap {cap} exceeds capacity {gaussians.capacity}")
    n_add = min(math.ceil(rate * current_live), cap - current_live, gaussians.capacity - len(gaussians))
    if n_add <= 0:
        return 0
    o = gaussians.opacities
    live = np.flatnonzero(o >= LIVE_THRESHOLD)
    if live.size == 0:
        return 0
    picks, _ = sample_targets(live, o[live], n_add, rng)
    picks = picks[picks >= 0]
    if picks.size == 0:
        return 0
    n_add = picks.size
    start = len(gaussians)
    gaussians.append({
        "positions": np.zeros((n_add, 3)),
        "raw_scales": np.zeros((n_add, 3)),
        "rotations": np.tile([1.0, 0.0, 0.0, 0.0], (n_add, 1)),
        "raw_opacities": np.zeros(n_add),
        "colors": np.zeros((n_add,) + gaussians.colors.shape[1:]),
    })
    opt.append_zeros(n_add)
    uniq = _apply_moves(gaussians, np.arange(start, start + n_add), live[picks])
    opt.reset(uniq)
    return n_add
