"""Sample-quality metrics: paired global error against a dense reference and two-sample distances."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import wasserstein_distance

from fewstep.core import InvalidParameterError, NoiseRange, Schedule, stream
from fewstep.denoiser import GaussianMixture, gmm_sample
from fewstep.sampler import reference_solve, sample

MIN_BATCH = 64


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("SCHED_OPT_THREADS", "1")))
    except ValueError:
        return 1


def _chunked(fn, x, threads):
    # deterministic: fixed chunk boundaries, results concatenated in order
    if threads <= 1 or x.shape[0] < 2 * threads:
        return fn(x)
    parts = np.array_split(x, threads)
    with ThreadPoolExecutor(threads) as pool:
        return np.concatenate(list(pool.map(fn, parts)))


def generate(h, s: Schedule, x0) -> np.ndarray:
    return _chunked(lambda z: sample(h, s, z)[0], np.atleast_2d(x0), n_threads())


def reference(h, rng: NoiseRange, x0, fine_steps: int = 1000) -> np.ndarray:
    return _chunked(lambda z: reference_solve(h, rng, z, fine_steps), np.atleast_2d(x0), n_threads())


def initial_noise(s_or_range, count: int, dim: int, seed: int) -> np.ndarray:
    """Generative-mode starting states ``sigma_max * eps`` from the eval stream."""
    return s_or_range.sigma_max * stream(seed, "eval").standard_normal((count, dim))


def global_error(h, s: Schedule, x0=None, *, count: int = 256, seed: int = 0, ref=None):
    """Mean and standard error of ``||sample(x0) - reference(x0)||^2`` over shared ``x0``."""
    if x0 is None:
        if count < 2:
            raise InvalidParameterError("need at least two seeds")
        x0 = initial_noise(s, count, h.dim, seed)
    x0 = np.atleast_2d(x0)
    if ref is None:
        ref = reference(h, s.range, x0)
    err = np.sum((generate(h, s, x0) - ref) ** 2, axis=1)
    return float(err.mean()), float(err.std(ddof=1) / np.sqrt(err.size)), err


def energy_distance(x, y) -> float:
    """V-statistic ``2 E||X-Y|| - E||X-X'|| - E||Y-Y'||`` (zero for identical batches)."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    if x.shape[0] < MIN_BATCH or y.shape[0] < MIN_BATCH:
        raise InvalidParameterError(f"energy distance needs at least {MIN_BATCH} samples per batch")
    xy = cdist(x, y).mean()
    xx = cdist(x, x).mean()
    yy = cdist(y, y).mean()
    return float(max(2 * xy - xx - yy, 0.0))


def sliced_wasserstein(x, y, n_proj: int = 64, seed: int = 0) -> float:
    """Mean 1-Wasserstein distance over random one-dimensional projections."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    dirs = np.random.default_rng(seed).standard_normal((n_proj, x.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([wasserstein_distance(x @ u, y @ u) for u in dirs]))


@dataclass
class EvalReport:
    schedule_id: str
    n_steps: int
    mean_global_error: float
    global_error_stderr: float
    energy_distance: float
    sliced_wasserstein: float
    sample_count: int
    seed: int
    denoiser_id: str = ""

    def rows(self) -> list[list]:
        base = [self.schedule_id, self.n_steps]
        return [
            base + ["global_error", repr(self.mean_global_error), repr(self.global_error_stderr), self.seed],
            base + ["energy_distance", repr(self.energy_distance), "", self.seed],
            base + ["sliced_wasserstein", repr(self.sliced_wasserstein), "", self.seed],
        ]


CSV_HEADER = ["schedule_id", "n_steps", "metric", "value", "stderr", "seed"]


def compare_schedules(
    schedules: dict,
    h,
    gmm: GaussianMixture,
    count: int = 512,
    seed: int = 0,
    denoiser_id: str = "",
) -> list[EvalReport]:
    """One report per schedule; all share initial noise, reference solves and data draws."""
    if not schedules:
        raise InvalidParameterError("no schedules to compare")
    first = next(iter(schedules.values()))
    if any(s.range != first.range for s in schedules.values()):
        raise InvalidParameterError("schedules must share one noise range")
    x0 = initial_noise(first, count, h.dim, seed)
    ref = reference(h, first.range, x0)
    truth = gmm_sample(gmm, count, stream(seed, "data"))
    out = []
    for name, s in schedules.items():
        gen = generate(h, s, x0)
        err = np.sum((gen - ref) ** 2, axis=1)
        out.append(
            EvalReport(
                name,
                s.n_steps,
                float(err.mean()),
                float(err.std(ddof=1) / np.sqrt(count)),
                energy_distance(gen, truth),
                sliced_wasserstein(gen, truth, seed=seed),
                count,
                seed,
                denoiser_id,
            )
        )
    return out
