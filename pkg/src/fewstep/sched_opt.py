"""Stage 1: Monte-Carlo discretization loss of a schedule and its gradients.

For data ``x`` and independent standard normals ``eps``, ``eps'`` the per-sample loss is

    || sum_i lambda_i D(x_i, sigma_i) + (sigma_min/sigma_max) x_0 - (x + sigma_min eps') ||^2

with ``x_0 = x + sigma_max eps`` and ``x_i`` the Euler iterates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fewstep.core import (
    InvalidParameterError,
    RunConfig,
    Schedule,
    ScheduleParams,
    schedule_from_params,
    schedule_jacobian,
    weights_from_schedule,
    weights_jacobian,
)
from fewstep.optim import Adam
from fewstep.sampler import Trajectory, sample, unrolled_sample

FULL_UNROLL_MAX_STEPS = 64


class NonFiniteError(FloatingPointError):
    """A loss or gradient became non-finite; ``dump`` carries the offending state."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class DiscLossEstimate:
    value: float
    stderr: float
    mc_batch: int
    estimator_kind: str | None = None
    grad_v: np.ndarray | None = None
    grad_sigma: np.ndarray | None = None
    per_sample: np.ndarray | None = field(default=None, repr=False)


@dataclass
class LossReport:
    stage: int
    outer: int
    iteration: int
    level: int
    disc_loss: float
    diff_loss: float
    stderr: float
    sigmas: np.ndarray

    def row(self) -> list:
        return [
            self.stage,
            self.outer,
            self.iteration,
            self.level,
            repr(float(self.disc_loss)),
            repr(float(self.diff_loss)),
            repr(float(self.stderr)),
            *(repr(float(s)) for s in self.sigmas),
        ]


def draw_noise(rng: np.random.Generator, shape, shared: bool = False):
    eps = rng.standard_normal(shape)
    eps_target = eps if shared else rng.standard_normal(shape)
    return eps, eps_target


def _mean_stderr(per_sample: np.ndarray) -> tuple[float, float]:
    n = per_sample.size
    se = float(per_sample.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(per_sample.mean()), se


def _noise(x, rng, eps, eps_target, shared):
    if eps is None:
        if rng is None:
            raise InvalidParameterError("need either an rng or explicit noise")
        eps, eps_target = draw_noise(rng, x.shape, shared)
    elif eps_target is None:
        eps_target = eps
    return eps, eps_target


def disc_terms(h, s: Schedule, x, eps, eps_target):
    """Trajectory, target and per-sample residual for fixed noise."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x0 = x + s.sigma_max * eps
    traj = sample(h, s, x0)[1]
    last = unrolled_sample(h, s, x0, traj)
    target = x + s.sigma_min * eps_target
    return traj, target, last - target


def disc_loss(h, s: Schedule, x, rng=None, *, eps=None, eps_target=None, shared_noise=False):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise InvalidParameterError("empty batch")
    eps, eps_target = _noise(x, rng, eps, eps_target, shared_noise)
    _, _, resid = disc_terms(h, s, x, eps, eps_target)
    per = np.sum(resid**2, axis=1)
    value, se = _mean_stderr(per)
    return DiscLossEstimate(value, se, x.shape[0], per_sample=per)


def _full_sigma_grad(h, traj: Trajectory, resid, eps, eps_target):
    """Reverse accumulation through the Euler recursion; returns dL/dsigma (N,)."""
    sig = traj.schedule.sigmas
    n = sig.size
    B = resid.shape[0]
    gsig = np.zeros(n)
    g = 2.0 * resid / B  # dL/dx_{N-1}, L the batch mean
    gsig[-1] -= np.sum(g * eps_target)
    for i in range(n - 2, -1, -1):
        xi, di = traj.iterates[i], traj.denoised[i]
        r = sig[i + 1] / sig[i]
        gr = np.sum(g * (xi - di))
        gsig[i + 1] += gr / sig[i]
        gsig[i] -= gr * sig[i + 1] / sig[i] ** 2
        gx_d, gs_d = h.vjp(xi, sig[i], (1.0 - r) * g)
        gsig[i] += np.sum(gs_d)
        g = r * g + gx_d
    gsig[0] += np.sum(g * eps)
    return gsig


def disc_loss_grad_full(h, p: ScheduleParams, x, rng=None, *, eps=None, eps_target=None, shared_noise=False):
    if p.n_steps > FULL_UNROLL_MAX_STEPS:
        raise InvalidParameterError(
            f"full unroll is limited to {FULL_UNROLL_MAX_STEPS} steps, got {p.n_steps}"
        )
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps, eps_target = _noise(x, rng, eps, eps_target, shared_noise)
    s = schedule_from_params(p)
    traj, _, resid = disc_terms(h, s, x, eps, eps_target)
    per = np.sum(resid**2, axis=1)
    value, se = _mean_stderr(per)
    gsig = _full_sigma_grad(h, traj, resid, eps, eps_target)
    return DiscLossEstimate(
        value, se, x.shape[0], "full-unroll", schedule_jacobian(p).T @ gsig, gsig, per
    )


def disc_loss_grad_efficient(
    h, p: ScheduleParams, x, rng=None, *, eps=None, eps_target=None, shared_noise=False, lambda_override=None
):
    """Per-level gradient ``2 lambda_t <x_last - target, dD(x_t, sigma_t)/dsigma_t>``.

    Only the direct sigma-sensitivity of each denoiser call is kept; the
    dependence of the weights and of later iterates on ``sigma_t`` is dropped.
    ``lambda_override`` replaces the weights (test hook).
    """
    if p.n_steps < 3:
        raise InvalidParameterError("the per-level estimator needs at least three levels")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps, eps_target = _noise(x, rng, eps, eps_target, shared_noise)
    s = schedule_from_params(p)
    traj, _, resid = disc_terms(h, s, x, eps, eps_target)
    per = np.sum(resid**2, axis=1)
    value, se = _mean_stderr(per)
    lam = weights_from_schedule(s).lambdas if lambda_override is None else np.asarray(lambda_override)
    gsig = np.zeros(s.n_steps)
    for t in range(s.n_steps - 1):
        if lam[t] == 0.0:
            continue
        dD = h.sigma_grad(traj.iterates[t], s.sigmas[t])
        gsig[t] = 2.0 * lam[t] * np.mean(np.sum(resid * dD, axis=1))
    return DiscLossEstimate(value, se, x.shape[0], "efficient", schedule_jacobian(p).T @ gsig, gsig, per)


def disc_loss_grad_fd(
    h, p: ScheduleParams, x, rng=None, *, eps=None, eps_target=None, shared_noise=False, step=1e-5
):
    """Central differences over ``v`` with the noise held fixed."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps, eps_target = _noise(x, rng, eps, eps_target, shared_noise)
    base = disc_loss(h, schedule_from_params(p), x, eps=eps, eps_target=eps_target)
    grad = np.zeros(p.v.size)
    for k in range(p.v.size):
        e = np.zeros(p.v.size)
        e[k] = step
        up = disc_loss(h, schedule_from_params(p.with_v(p.v + e)), x, eps=eps, eps_target=eps_target)
        dn = disc_loss(h, schedule_from_params(p.with_v(p.v - e)), x, eps=eps, eps_target=eps_target)
        grad[k] = (up.value - dn.value) / (2 * step)
    return DiscLossEstimate(base.value, base.stderr, x.shape[0], "finite-diff", grad, None, base.per_sample)


ESTIMATORS = {
    "full-unroll": disc_loss_grad_full,
    "efficient": disc_loss_grad_efficient,
    "finite-diff": disc_loss_grad_fd,
}


def diff_loss_grad(h, s: Schedule, x, eps_levels, levels):
    """Weighted denoising loss ``sum_t lambda_t E||D(x + sigma_t eps, sigma_t) - x||^2``.

    ``eps_levels[t]`` is the noise used at level ``t``. Returns the loss and its
    gradient with respect to all N noise levels, including the weights' dependence.
    """
    sig = s.sigmas
    lam = weights_from_schedule(s).lambdas
    jlam = weights_jacobian(s)
    B = x.shape[0]
    total = 0.0
    gsig = np.zeros(sig.size)
    for t in levels:
        y = x + sig[t] * eps_levels[t]
        resid = h(y, sig[t]) - x
        mse = float(np.mean(np.sum(resid**2, axis=1)))
        gx, gs = h.vjp(y, sig[t], 2.0 * resid / B)
        dmse = float(np.sum(gx * eps_levels[t]) + np.sum(gs))
        total += lam[t] * mse
        gsig += jlam[t] * mse
        gsig[t] += lam[t] * dmse
    return total, gsig


def _check_finite(what, arr, dump):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what}", dump)


def stage1_step(h, p: ScheduleParams, x, cfg: RunConfig, rng, opt: Adam, level=None):
    """One adaptive-moment update of ``v`` on ``diff + gamma * disc``.

    ``level=None`` uses the weighted denoising loss summed over every weighted
    level; an integer restricts it to that single level.
    Returns the new parameters and the loss estimate taken before the update.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s = schedule_from_params(p)
    levels = range(s.n_steps - 1) if level is None else [level]
    eps_levels = {t: rng.standard_normal(x.shape) for t in levels}
    diff, gsig_diff = diff_loss_grad(h, s, x, eps_levels, levels)
    gv = schedule_jacobian(p).T @ gsig_diff
    est = ESTIMATORS[cfg.estimator](h, p, x, rng, shared_noise=cfg.shared_noise)
    dump = {"v": p.v.tolist(), "sigmas": s.sigmas.tolist(), "level": level}
    _check_finite("disc loss", est.value, dump)
    if cfg.gamma > 0:
        gv = gv + cfg.gamma * est.grad_v
    _check_finite("schedule gradient", gv, dict(dump, grad=gv.tolist()))
    new = p.with_v(opt.step(p.v, gv)) if p.v.size else p
    return new, est, diff


def run_stage1(h, p: ScheduleParams, cfg: RunConfig, batches, rng, opt: Adam | None = None, outer=0, iters=None):
    """Stage-1 iterations; ``batches`` yields one data batch per iteration.

    Each iteration sweeps the weighted levels with one update per level, or makes
    a single aggregated update when ``cfg.per_level_updates`` is off.
    """
    opt = opt or Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    iters = cfg.stage1_iters if iters is None else iters
    for it in range(iters):
        x = next(batches)
        levels = range(p.n_steps - 1) if cfg.per_level_updates else [None]
        for lv in levels:
            s_before = schedule_from_params(p).sigmas
            p, est, diff = stage1_step(h, p, x, cfg, rng, opt, lv)
            history.append(
                LossReport(1, outer, it, -1 if lv is None else lv, est.value, diff, est.stderr, s_before)
            )
    return p, history, opt
