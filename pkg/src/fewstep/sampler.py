"""Deterministic Euler sampling of dx/dsigma = (x - D(x, sigma)) / sigma.

One Euler step from ``sigma_cur`` to ``sigma_next`` is the convex combination

    x_next = (sigma_next / sigma_cur) * x + (1 - sigma_next / sigma_cur) * D(x, sigma_cur)

and the returned sample is the denoiser output at the last scheduled level.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from fewstep.core import InvalidParameterError, NoiseRange, Schedule, weights_from_schedule


class DiscretizationWarning(RuntimeWarning):
    """The dense reference solve did not pass its step-doubling check."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Iterates ``x[i]`` at ``sigmas[i]`` and denoiser outputs ``d[i] = D(x[i], sigmas[i])``.

    Arrays have shape (N, B, d).
    """

    iterates: np.ndarray
    denoised: np.ndarray
    x0: np.ndarray
    schedule: Schedule

    @property
    def final(self) -> np.ndarray:
        return self.denoised[-1]


def euler_step(x, sigma_cur: float, sigma_next: float, d_out):
    if not (sigma_cur > sigma_next > 0):
        raise InvalidParameterError("euler_step needs sigma_cur > sigma_next > 0")
    r = sigma_next / sigma_cur
    return r * np.asarray(x) + (1.0 - r) * np.asarray(d_out)


def sample(h, s: Schedule, x0):
    """Run N-1 Euler steps down ``s`` from ``x0`` (the sigma_max-level state)."""
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    sig = s.sigmas
    xs, ds = [], []
    for i in range(sig.size):
        d = h(x, sig[i])
        xs.append(x)
        ds.append(d)
        if i + 1 < sig.size:
            x = euler_step(x, sig[i], sig[i + 1], d)
    traj = Trajectory(np.stack(xs), np.stack(ds), xs[0], s)
    final = traj.final
    if np.ndim(x0) == 1:
        final = final[0]
    return final, traj


def unrolled_sample(h, s: Schedule, x0, traj: Trajectory | None = None):
    """sigma_min-level iterate as the weighted sum of denoiser outputs.

    Evaluates ``sum_i lambda_i d_i + (sigma_min / sigma_max) x0``; the denoiser
    outputs come from ``traj`` or from a fresh forward pass.
    """
    if traj is None:
        traj = sample(h, s, x0)[1]
    w = weights_from_schedule(s)
    x0b = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    out = np.tensordot(w.lambdas, traj.denoised[:-1], axes=1) + w.initial_coeff * x0b
    return out[0] if np.ndim(x0) == 1 else out


def _rk4(h, x, grid):
    # integrate in u = log(sigma): dx/du = x - D(x, e^u)
    u = np.log(grid)
    f = lambda x, uu: x - h(x, np.exp(uu))
    for u0, u1 in zip(u[:-1], u[1:]):
        du = u1 - u0
        k1 = f(x, u0)
        k2 = f(x + 0.5 * du * k1, u0 + 0.5 * du)
        k3 = f(x + 0.5 * du * k2, u0 + 0.5 * du)
        k4 = f(x + du * k3, u1)
        x = x + du / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def integrate(h, grid, x0, method: str = "rk4"):
    """State at ``grid[-1]`` starting from ``x0`` at ``grid[0]`` (grid descending)."""
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if method == "rk4":
        return _rk4(h, x, np.asarray(grid))
    if method == "euler":
        for a, b in zip(grid[:-1], grid[1:]):
            x = euler_step(x, a, b, h(x, a))
        return x
    raise InvalidParameterError(f"unknown method {method!r}")


def reference_solve(
    h,
    rng: NoiseRange,
    x0,
    fine_steps: int = 1000,
    method: str = "rk4",
    rtol: float = 1e-4,
    check: bool = True,
):
    """Dense log-spaced solve from sigma_max to sigma_min, then the final denoise.

    With ``check`` the solve is repeated at twice the resolution; a relative change
    above ``rtol`` emits a DiscretizationWarning. The finer result is returned.
    """
    if fine_steps < 1000:
        raise InvalidParameterError("fine_steps must be at least 1000")

    def solve(n):
        grid = np.geomspace(rng.sigma_max, rng.sigma_min, n)
        grid[0], grid[-1] = rng.sigma_max, rng.sigma_min
        return h(integrate(h, grid, x0, method), rng.sigma_min)

    out = solve(fine_steps)
    if check:
        finer = solve(2 * fine_steps)
        rel = np.linalg.norm(finer - out) / max(np.linalg.norm(finer), 1e-300)
        if rel >= rtol:
            warnings.warn(
                f"reference solve changed by {rel:.2e} (relative) on step doubling",
                DiscretizationWarning,
                stacklevel=2,
            )
        out = finer
    return out[0] if np.ndim(x0) == 1 else out


def backward_euler_residual(
    traj: Trajectory,
    h,
    fine_steps: int = 1000,
    rel_step: float = 1e-4,
) -> np.ndarray:
    """Backward-Euler residuals of the denoised sequence, shape (B, N-2).

    For interior steps ``i = 1..N-2`` this is

        || (d_i - d_{i-1}) - (1/sigma_{i+1} - 1/sigma_i) * dtau/du(sigma_i) ||

    where ``tau(u) = D(x(sigma), sigma)`` along the dense reference trajectory
    from the same initial state and ``u = 1/sigma``; the slope is a central
    difference at ``sigma_i * (1 +- rel_step)``.
    """
    sig = traj.schedule.sigmas
    n = sig.size
    if n < 3:
        raise InvalidParameterError("need at least three levels")
    x = traj.x0
    out = np.zeros((x.shape[0], n - 2))
    per_unit = fine_steps / np.log(sig[0] / sig[-1])
    cur = sig[0]
    for i in range(1, n - 1):
        hi, lo = sig[i] * (1 + rel_step), sig[i] * (1 - rel_step)
        m = max(int(np.ceil(np.log(cur / hi) * per_unit)), 4)
        x = integrate(h, np.geomspace(cur, hi, m + 1), x)
        x_lo = integrate(h, np.geomspace(hi, lo, 9), x)
        tau_hi, tau_lo = h(x, hi), h(x_lo, lo)
        slope = (tau_lo - tau_hi) / (1.0 / lo - 1.0 / hi)
        step = 1.0 / sig[i + 1] - 1.0 / sig[i]
        back = traj.denoised[i] - traj.denoised[i - 1]
        out[:, i - 1] = np.linalg.norm(back - step * slope, axis=1)
        x, cur = x_lo, lo
    return out
