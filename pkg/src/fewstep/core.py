"""Schedules, step weights and run configuration.

Index convention used throughout the package: noise levels are stored in
descending order, ``sigmas[0] == sigma_max`` and ``sigmas[N-1] == sigma_min``.
``N`` counts denoiser evaluations per sample.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import softmax


class InvalidParameterError(ValueError):
    """Raised when a schedule, parameter vector or config violates its invariants."""


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named phase (data, init, stage1, stage2, eval)."""
    key = zlib.crc32(name.encode())
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NoiseRange:
    sigma_min: float = 0.002
    sigma_max: float = 80.0

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max) or not np.isfinite(self.sigma_max):
            raise InvalidParameterError(
                f"need 0 < sigma_min < sigma_max, got [{self.sigma_min}, {self.sigma_max}]"
            )


@dataclass(frozen=True, eq=False)
class Schedule:
    """Strictly decreasing noise levels with ``sigmas[0] = sigma_max``."""

    sigmas: np.ndarray

    def __post_init__(self):
        s = _frozen(self.sigmas)
        if s.ndim != 1 or s.size < 2:
            raise InvalidParameterError("a schedule needs at least two noise levels")
        if not np.all(np.isfinite(s)) or s[-1] <= 0:
            raise InvalidParameterError("noise levels must be finite and positive")
        if not np.all(np.diff(s) < 0):
            raise InvalidParameterError(f"noise levels must strictly decrease: {s}")
        object.__setattr__(self, "sigmas", s)

    @property
    def n_steps(self) -> int:
        return int(self.sigmas.size)

    @property
    def range(self) -> NoiseRange:
        return NoiseRange(float(self.sigmas[-1]), float(self.sigmas[0]))

    @property
    def sigma_min(self) -> float:
        return float(self.sigmas[-1])

    @property
    def sigma_max(self) -> float:
        return float(self.sigmas[0])

    def __len__(self) -> int:
        return self.n_steps

    def __eq__(self, other) -> bool:
        return isinstance(other, Schedule) and np.array_equal(self.sigmas, other.sigmas)

    def __hash__(self) -> int:
        return hash(self.sigmas.tobytes())

    def to_dict(self) -> dict:
        return {
            "sigma": [float(v) for v in self.sigmas],
            "range": {"min": self.sigma_min, "max": self.sigma_max},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Schedule":
        try:
            sched = cls(np.asarray(doc["sigma"], dtype=np.float64))
            rng = doc["range"]
            lo, hi = float(rng["min"]), float(rng["max"])
        except (KeyError, TypeError) as exc:
            raise InvalidParameterError(f"malformed schedule document: {exc}") from exc
        if lo != sched.sigma_min or hi != sched.sigma_max:
            raise InvalidParameterError("schedule endpoints disagree with its declared range")
        return sched

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips exactly
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Schedule":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class ScheduleParams:
    """Unconstrained vector ``v`` (length N-2) behind a softmax-increment schedule."""

    v: np.ndarray
    range: NoiseRange
    n_steps: int

    def __post_init__(self):
        v = _frozen(self.v).reshape(-1)
        if self.n_steps < 2:
            raise InvalidParameterError("n_steps must be at least 2")
        if v.size != self.n_steps - 2:
            raise InvalidParameterError(f"expected {self.n_steps - 2} parameters, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise InvalidParameterError("schedule parameters must be finite")
        object.__setattr__(self, "v", v)

    def with_v(self, v) -> "ScheduleParams":
        return ScheduleParams(v, self.range, self.n_steps)


@dataclass(frozen=True, eq=False)
class StepWeights:
    """Convex weights of the denoiser outputs in the unrolled Euler sampler.

    ``lambdas[i]`` multiplies ``D(x_i, sigma_i)`` for ``i = 0..N-2`` and
    ``initial_coeff`` multiplies the initial state; together they sum to one.
    """

    lambdas: np.ndarray
    initial_coeff: float

    def __post_init__(self):
        object.__setattr__(self, "lambdas", _frozen(self.lambdas))


@dataclass
class RunConfig:
    gamma: float = 1.0
    batch_size: int = 256
    stage1_iters: int = 500
    stage2_iters: int = 0
    outer_iters: int = 1
    seed: int = 0
    lr: float = 1e-2
    theta_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    estimator: str = "full-unroll"
    weights: str = "learned"
    shared_noise: bool = False
    # one update per scheduled level inside a Stage-1 iteration
    per_level_updates: bool = True
    # False: one data batch per outer iteration, shared by both stages
    fresh_batches: bool = True
    conv_window: int = 50
    conv_tol: float = 1e-4

    def __post_init__(self):
        if self.gamma < 0:
            raise InvalidParameterError("gamma must be nonnegative")
        if self.batch_size < 1 or self.outer_iters < 1:
            raise InvalidParameterError("batch_size and outer_iters must be positive")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise InvalidParameterError("stage lengths must be nonnegative")
        if self.lr < 0 or self.theta_lr < 0:
            raise InvalidParameterError("step sizes must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise InvalidParameterError("invalid moment decay rates or epsilon")
        if self.estimator not in ("efficient", "full-unroll", "finite-diff"):
            raise InvalidParameterError(f"unknown estimator {self.estimator!r}")
        if self.weights not in ("learned", "original"):
            raise InvalidParameterError(f"unknown weighting {self.weights!r}")
        if not 0 <= self.seed < 2**64:
            raise InvalidParameterError("seed must fit in 64 unsigned bits")

    def to_dict(self) -> dict:
        return asdict(self)


def weights_from_schedule(s: Schedule) -> StepWeights:
    sig = s.sigmas
    inv = s.sigma_min / sig
    return StepWeights(np.diff(inv), float(inv[0]))


def weights_jacobian(s: Schedule) -> np.ndarray:
    """d lambdas / d sigmas, shape (N-1, N); sigma_min is the last column."""
    sig = s.sigmas
    n = sig.size
    e = n - 1
    jac = np.zeros((n - 1, n))
    for t in range(n - 1):
        # lambda_t = sig_e / sig_{t+1} - sig_e / sig_t
        jac[t, t] += sig[e] / sig[t] ** 2
        jac[t, e] -= 1.0 / sig[t]
        if t + 1 != e:
            jac[t, t + 1] -= sig[e] / sig[t + 1] ** 2
            jac[t, e] += 1.0 / sig[t + 1]
    return jac


def _increments(p: ScheduleParams) -> np.ndarray:
    return softmax(np.concatenate([p.v, [1.0]]))


def schedule_from_params(p: ScheduleParams) -> Schedule:
    w = _increments(p)
    lo, hi = p.range.sigma_min, p.range.sigma_max
    # tail sums, accumulated from the small end for precision near sigma_min
    tail = np.cumsum(w[::-1])[::-1]
    sig = lo + (hi - lo) * tail
    sig = np.append(sig, lo)
    sig[0] = hi
    return Schedule(sig)


def schedule_jacobian(p: ScheduleParams) -> np.ndarray:
    """d sigmas / d v, shape (N, N-2). Endpoint rows are zero."""
    n = p.n_steps
    w = _increments(p)
    span = p.range.sigma_max - p.range.sigma_min
    # d w_j / d v_k = w_j (delta_jk - w_k), k over the free entries only
    dw = (np.diag(w) - np.outer(w, w))[:, : n - 2]
    jac = np.zeros((n, n - 2))
    tail = np.cumsum(dw[::-1], axis=0)[::-1]
    jac[1 : n - 1] = span * tail[1 : n - 1]
    return jac


def init_params_from_reference(ref: Schedule) -> ScheduleParams:
    lo, hi = ref.sigma_min, ref.sigma_max
    inc = -np.diff(ref.sigmas) / (hi - lo)
    if not np.all(inc > 0):
        raise InvalidParameterError("reference schedule increments must be positive")
    z = np.log(inc)
    # softmax is shift invariant; pin the trailing logit to the constant 1
    v = z[:-1] - z[-1] + 1.0
    return ScheduleParams(v, NoiseRange(lo, hi), ref.n_steps)


def rho_schedule(rng: NoiseRange, n_steps: int, rho: float = 7.0) -> Schedule:
    if rho <= 0:
        raise InvalidParameterError("rho must be positive")
    if n_steps < 2:
        raise InvalidParameterError("n_steps must be at least 2")
    ramp = np.arange(n_steps) / (n_steps - 1)
    a, b = rng.sigma_max ** (1 / rho), rng.sigma_min ** (1 / rho)
    sig = (a + ramp * (b - a)) ** rho
    sig[0], sig[-1] = rng.sigma_max, rng.sigma_min
    return Schedule(sig)


def uniform_schedule(rng: NoiseRange, n_steps: int) -> Schedule:
    """Evenly spaced noise levels (linear in sigma)."""
    if n_steps < 2:
        raise InvalidParameterError("n_steps must be at least 2")
    sig = np.linspace(rng.sigma_max, rng.sigma_min, n_steps)
    sig[0], sig[-1] = rng.sigma_max, rng.sigma_min
    return Schedule(sig)


def log_schedule(rng: NoiseRange, n_steps: int) -> Schedule:
    """Geometrically spaced noise levels."""
    sig = np.geomspace(rng.sigma_max, rng.sigma_min, n_steps)
    sig[0], sig[-1] = rng.sigma_max, rng.sigma_min
    return Schedule(sig)
