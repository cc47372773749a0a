"""Stage 2 (schedule-weighted denoiser finetuning) and the alternating two-stage driver."""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from fewstep.core import (
    InvalidParameterError,
    NoiseRange,
    RunConfig,
    Schedule,
    init_params_from_reference,
    rho_schedule,
    schedule_from_params,
    stream,
    weights_from_schedule,
)
from fewstep.denoiser import GaussianMixture, gmm_sample
from fewstep.optim import Adam
from fewstep.sched_opt import LossReport, NonFiniteError, disc_loss, draw_noise, run_stage1
from fewstep.sampler import sample

# log-normal training noise distribution of EDM
P_MEAN, P_STD = -1.2, 1.2


def _require_trainable(h):
    if getattr(h, "kind", None) != "trainable-mlp":
        raise TypeError("stage-2 finetuning needs a trainable denoiser")


def edm_sigmas(rng: np.random.Generator, count: int) -> np.ndarray:
    return np.exp(P_MEAN + P_STD * rng.standard_normal(count))


def edm_weight(sigma, sigma_data: float):
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def ub_loss(h, s: Schedule, x, rng: np.random.Generator, weights: str = "learned", lambda_override=None):
    """Single-level estimate of the weighted denoising bound and its theta-gradient.

    Each sample draws a level ``t`` uniformly from the N-1 weighted levels and
    contributes ``lambda_t ||D(x + sigma_t eps, sigma_t) - x||^2``. With
    ``weights="original"`` the level is instead a log-normal noise level with the
    EDM loss weight. Returns ``(loss, grad, levels)``.
    """
    _require_trainable(h)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    if weights == "learned":
        lam = weights_from_schedule(s).lambdas if lambda_override is None else np.asarray(lambda_override)
        t = rng.integers(0, s.n_steps - 1, size=B)
        sig, w = s.sigmas[t], lam[t]
    elif weights == "original":
        t = np.full(B, -1)
        sig = edm_sigmas(rng, B)
        w = edm_weight(sig, h.spec.sigma_data)
    else:
        raise InvalidParameterError(f"unknown weighting {weights!r}")
    eps = rng.standard_normal(x.shape)
    loss, grad = h.loss_and_grad(x + sig[:, None] * eps, sig, x, w)
    return loss, grad, t


def jensen_bound(h, s: Schedule, x, eps, eps_target):
    """Per-sample discretization loss and its weighted-denoising upper bound.

    Both sides use the same data and noise. The bound is
    ``sum_t lambda_t ||D(x_t, sigma_t) - x||^2 + sigma_min^2 ||eps - eps'||^2``
    along the sampler's own iterates ``x_t``. It drops the cross term
    ``2 sigma_min <sum_t lambda_t (D_t - x), eps - eps'>``, which is of order
    sigma_min but not zero on average; with ``eps == eps'`` it holds per sample.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    est = disc_loss(h, s, x, eps=eps, eps_target=eps_target)
    traj = sample(h, s, x + s.sigma_max * eps)[1]
    lam = weights_from_schedule(s).lambdas
    err = np.sum((traj.denoised[:-1] - x[None]) ** 2, axis=2)  # (N-1, B)
    bound = lam @ err + s.sigma_min**2 * np.sum((eps - eps_target) ** 2, axis=1)
    return est.per_sample, bound


@dataclass
class FinetuneState:
    denoiser: object
    schedule: Schedule
    opt: Adam
    iteration: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=1000))


def stage2_step(state: FinetuneState, x, cfg: RunConfig, rng, lambda_override=None) -> FinetuneState:
    h = state.denoiser
    loss, grad, _ = ub_loss(h, state.schedule, x, rng, cfg.weights, lambda_override)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFiniteError(
            "non-finite stage-2 loss",
            {"iteration": state.iteration, "loss": loss, "sigmas": state.schedule.sigmas.tolist()},
        )
    h.theta -= state.opt.update(grad)
    state.iteration += 1
    state.history.append(loss)
    return state


def pretrain(h, gmm: GaussianMixture, rng, iters: int = 3000, batch_size: int = 256, lr: float = 3e-3):
    """Plain denoiser training with log-normal noise levels and EDM weights."""
    _require_trainable(h)
    opt = Adam(lr)
    losses = []
    for _ in range(iters):
        x = gmm_sample(gmm, batch_size, rng)
        sig = edm_sigmas(rng, batch_size)
        y = x + sig[:, None] * rng.standard_normal(x.shape)
        loss, grad = h.loss_and_grad(y, sig, x, edm_weight(sig, h.spec.sigma_data))
        h.theta -= opt.update(grad)
        losses.append(loss)
    return losses


@dataclass
class Problem:
    gmm: GaussianMixture
    n_steps: int = 5
    range: NoiseRange = field(default_factory=NoiseRange)
    rho: float = 7.0


@dataclass
class TwoStageResult:
    schedule: Schedule
    denoiser: object
    history: list
    outer_iters: int
    converged: bool


def _batches(gmm, cfg, rng):
    while True:
        yield gmm_sample(gmm, cfg.batch_size, rng)


def run_two_stage(cfg: RunConfig, problem: Problem, denoiser, monitor_size: int = 1024) -> TwoStageResult:
    """Alternate Stage 1 and Stage 2 from a rho warm start until converged or out of budget.

    ``denoiser`` is modified in place by Stage 2. Convergence: the mean of the
    last ``cfg.conv_window`` monitor losses differs from the preceding window's
    by less than ``cfg.conv_tol`` (relative).
    """
    if cfg.stage2_iters > 0:
        _require_trainable(denoiser)
    data_rng = stream(cfg.seed, "data")
    s1_rng = stream(cfg.seed, "stage1")
    s2_rng = stream(cfg.seed, "stage2")
    mon_rng = stream(cfg.seed, "eval")

    mon_x = gmm_sample(problem.gmm, monitor_size, mon_rng)
    mon_eps, mon_eps_t = draw_noise(mon_rng, mon_x.shape, cfg.shared_noise)

    p = init_params_from_reference(rho_schedule(problem.range, problem.n_steps, problem.rho))
    opt_v = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    opt_theta = Adam(cfg.theta_lr, cfg.beta1, cfg.beta2, cfg.eps)
    fresh = _batches(problem.gmm, cfg, data_rng)
    history, monitor = [], []
    converged = False
    outer = 0
    for outer in range(cfg.outer_iters):
        if cfg.fresh_batches:
            batches = fresh
        else:
            batches = itertools.repeat(next(fresh))
        try:
            if cfg.stage1_iters:
                theta_before = getattr(denoiser, "theta", None)
                theta_before = None if theta_before is None else theta_before.copy()
                p, hist1, opt_v = run_stage1(denoiser, p, cfg, batches, s1_rng, opt_v, outer)
                history += hist1
                if theta_before is not None:
                    assert np.array_equal(theta_before, denoiser.theta), "stage 1 touched theta"
            s = schedule_from_params(p)
            if cfg.stage2_iters:
                state = FinetuneState(denoiser, s, opt_theta)
                for it in range(cfg.stage2_iters):
                    stage2_step(state, next(batches), cfg, s2_rng)
                    history.append(LossReport(2, outer, it, -1, np.nan, state.history[-1], np.nan, s.sigmas))
                assert state.schedule is s and np.array_equal(s.sigmas, schedule_from_params(p).sigmas)
        except NonFiniteError as exc:
            exc.dump.update(outer=outer)
            raise
        mon = disc_loss(denoiser, s, mon_x, eps=mon_eps, eps_target=mon_eps_t)
        monitor.append(mon.value)
        history.append(LossReport(0, outer, 0, -1, mon.value, np.nan, mon.stderr, s.sigmas))
        w = cfg.conv_window
        if len(monitor) >= 2 * w:
            recent, prev = np.mean(monitor[-w:]), np.mean(monitor[-2 * w : -w])
            if abs(recent - prev) < cfg.conv_tol * abs(prev):
                converged = True
                break
    return TwoStageResult(schedule_from_params(p), denoiser, history, outer + 1, converged)


def export_weight_scheme(s: Schedule) -> list[tuple]:
    """Rows ``(t, sigma_t, lambda_t, active_weight_t)``.

    The active weight folds in the uniform 1/(N-1) probability with which
    Stage 2 draws each weighted level.
    """
    lam = weights_from_schedule(s).lambdas
    k = lam.size
    return [(t, float(s.sigmas[t]), float(lam[t]), float(lam[t] / k)) for t in range(k)]
