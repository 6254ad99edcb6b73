"""Training loop: view sampling, render, loss, Langevin step, relocation and growth."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import relocate
from .core import GaussianSet, classify_liveness
from .loss import LossWeights, loss_total, psnr, ssim
from .mcmc import LrSchedule, NoiseParams, NonFiniteGradientError, OptimizerState, sgld_step
from .render import render, render_backward
from .scene_io import (SceneDataset, TrainConfig, initialize, load_training_state, save_checkpoint,
                       save_training_state)

log = logging.getLogger(__name__)

STREAMS = ("init", "noise", "plan", "views")


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; ``last_good`` holds the most recent finite state."""

    def __init__(self, message: str, last_good: GaussianSet | None, iteration: int):
        super().__init__(message)
        self.last_good = last_good
        self.iteration = iteration


@dataclass(frozen=True)
class MetricRow:
    iteration: int
    wall_ms: float
    loss_total: float
    loss_l1: float
    loss_dssim: float
    reg_opacity: float
    reg_scale: float
    live_count: int
    psnr_train_view: float


LOG_FIELDS = tuple(f.name for f in fields(MetricRow))


def format_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([r.iteration, f"{r.wall_ms:.3f}"] + [repr(float(x)) for x in astuple(r)[2:7]]
                   + [r.live_count, repr(float(r.psnr_train_view))])
    return buf.getvalue()


def read_log(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        return [MetricRow(int(d["iteration"]), float(d["wall_ms"]), float(d["loss_total"]), float(d["loss_l1"]),
                          float(d["loss_dssim"]), float(d["reg_opacity"]), float(d["reg_scale"]),
                          int(d["live_count"]), float(d["psnr_train_view"]))
                for d in csv.DictReader(fh)]


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(STREAMS, children)}


def loss_weights(config: TrainConfig) -> LossWeights:
    return LossWeights(config.lambda_dssim, config.lambda_opacity, config.lambda_scale, config.reg_reduction)


def noise_params(config: TrainConfig) -> NoiseParams:
    return NoiseParams(config.lambda_noise, config.noise_k, config.noise_t, config.noise_printed_sign)


def lr_schedule(config: TrainConfig, dataset: SceneDataset) -> LrSchedule:
    scale = config.position_lr_scale if config.position_lr_scale is not None else dataset.radius
    return LrSchedule(config.position_lr_init, config.position_lr_final, max(config.iterations, 1), scale,
                      config.scale_lr, config.rotation_lr, config.opacity_lr, config.color_lr)


@dataclass
class TrainResult:
    gaussians: GaussianSet
    log: list
    opt: OptimizerState
    iteration: int
    streams: dict = field(repr=False, default_factory=dict)


class Trainer:
    """Stateful loop so that a run can be stopped, checkpointed and resumed exactly."""

    def __init__(self, dataset: SceneDataset, config: TrainConfig, seed: int | None = None,
                 gaussians: GaussianSet | None = None):
        if not dataset.views:
            raise ValueError("dataset has no views")
        self.dataset = dataset
        self.config = config
        self.streams = make_streams(config.seed if seed is None else seed)
        self.gaussians = initialize(dataset, config, self.streams["init"]) if gaussians is None else gaussians
        self.opt = OptimizerState.for_set(self.gaussians)
        self.iteration = 0
        self.log: list[MetricRow] = []
        self.weights = loss_weights(config)
        self.noise = noise_params(config)
        self.schedule = lr_schedule(config, dataset)
        self._t0 = time.perf_counter()
        self._last_good = self.gaussians.copy()

    # -- persistence --------------------------------------------------------

    def rng_states(self) -> dict:
        return {k: g.bit_generator.state for k, g in self.streams.items()}

    def save_state(self, ply_path) -> Path:
        """Write the PLY checkpoint plus a full-precision sidecar; returns the sidecar path."""
        ply_path = Path(ply_path)
        save_checkpoint(self.gaussians, ply_path)
        sidecar = ply_path.with_suffix(".state.npz")
        save_training_state(sidecar, self.gaussians, self.opt, self.iteration, self.rng_states())
        return sidecar

    @classmethod
    def resume(cls, dataset: SceneDataset, config: TrainConfig, sidecar) -> "Trainer":
        gaussians, opt, iteration, rng = load_training_state(sidecar)
        t = cls(dataset, config, gaussians=gaussians)
        t.opt = opt
        t.iteration = iteration
        for name, state in rng.items():
            t.streams[name].bit_generator.state = state
        t._last_good = gaussians.copy()
        return t

    # -- loop ---------------------------------------------------------------

    def _elapsed_ms(self) -> float:
        return 0.0 if self.config.deterministic else (time.perf_counter() - self._t0) * 1e3

    def sample_view(self) -> int:
        """One training view, uniformly at random."""
        return int(self.streams["views"].integers(len(self.dataset.views)))

    def step(self) -> None:
        cfg = self.config
        self.iteration += 1
        it = self.iteration
        view = self.sample_view()
        cam, target = self.dataset.views[view]
        out = render(self.gaussians, cam)
        breakdown, grad_image, reg_grads = loss_total(out.image, target, self.gaussians, self.weights)
        if not math.isfinite(breakdown.total):
            raise TrainingAborted(f"non-finite loss at iteration {it}", self._last_good, it)
        grads = render_backward(out, grad_image)
        for name, g in reg_grads.items():
            getattr(grads, name)[...] += g
        try:
            sgld_step(self.gaussians, grads, self.opt, self.schedule, self.noise, it - 1, self.streams["noise"])
        except NonFiniteGradientError as exc:
            raise TrainingAborted(str(exc), self._last_good, it) from exc

        if (cfg.relocate or cfg.grow) and it > cfg.warmup and it % cfg.cadence == 0 and it < cfg.iterations:
            self._relocate_and_grow()

        if it % cfg.log_every == 0 or it == cfg.iterations:
            live = int(np.count_nonzero(self.gaussians.opacities >= cfg.live_threshold))
            # the last row scores the returned parameters, not the pre-step render
            image = render(self.gaussians, cam).image if it == cfg.iterations else out.image
            self.log.append(MetricRow(it, self._elapsed_ms(), breakdown.total, breakdown.l1, breakdown.dssim,
                                      breakdown.reg_opacity, breakdown.reg_scale, live,
                                      psnr(image, target)))
            self._last_good = self.gaussians.copy()

    def _relocate_and_grow(self) -> None:
        cfg = self.config
        rng = self.streams["plan"]
        if cfg.relocate:
            mask = classify_liveness(self.gaussians, cfg.live_threshold)
            plan = relocate.build_plan(mask, self.gaussians.opacities, rng)
            relocate.apply_plan(self.gaussians, self.opt, plan)
        if cfg.grow:
            relocate.grow_step(self.gaussians, self.opt, len(self.gaussians), cfg.max_gaussians,
                               cfg.growth_rate, rng)

    def run(self, until: int | None = None, callback=None) -> TrainResult:
        """Advance to iteration ``until`` (default: the configured total)."""
        stop = self.config.iterations if until is None else min(until, self.config.iterations)
        while self.iteration < stop:
            self.step()
            if callback is not None:
                callback(self)
        return TrainResult(self.gaussians, self.log, self.opt, self.iteration, self.streams)


def train(dataset: SceneDataset, config: TrainConfig, seed: int | None = None) -> TrainResult:
    """Run the full schedule; returns the final set and the metric log."""
    return Trainer(dataset, config, seed).run()


@dataclass
class EvalReport:
    psnr: list
    ssim: list

    @property
    def mean_psnr(self) -> float | None:
        return float(np.mean(self.psnr)) if self.psnr else None

    @property
    def mean_ssim(self) -> float | None:
        return float(np.mean(self.ssim)) if self.ssim else None


def evaluate(gaussians: GaussianSet, views) -> EvalReport:
    """Per-view PSNR / SSIM. ``views`` is a dataset or a list of (camera, image)."""
    if isinstance(views, SceneDataset):
        views = views.views
    p, s = [], []
    for cam, target in views:
        img = render(gaussians, cam).image
        p.append(psnr(img, target))
        s.append(ssim(img, target) if min(img.shape[:2]) >= 11 else float("nan"))
    return EvalReport(p, s)
