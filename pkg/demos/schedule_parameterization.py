"""Schedules as softmax increments, and the step weights they induce."""

import numpy as np

from fewstep import NoiseRange, ScheduleParams, rho_schedule, schedule_from_params, uniform_schedule
from fewstep.core import init_params_from_reference, weights_from_schedule

np.set_printoptions(precision=4, suppress=True)
rng = NoiseRange(0.002, 80.0)

# baseline families
for name, s in [("rho=7", rho_schedule(rng, 8)), ("uniform", uniform_schedule(rng, 8))]:
    print(f"{name:8s}", s.sigmas)

# any real vector v is a valid schedule: endpoints pinned, increments positive
v = np.random.default_rng(0).normal(scale=2.0, size=6)
s = schedule_from_params(ScheduleParams(v, rng, 8))
print("random v ->", s.sigmas)

# logits equal to the pinned trailing entry give equal increments
print("v = 1    ->", schedule_from_params(ScheduleParams(np.ones(6), rng, 8)).sigmas)

# warm start from rho=7 and back
p = init_params_from_reference(rho_schedule(rng, 8))
print("rho=7 params:", p.v)
print("round trip max rel error:", np.max(np.abs(schedule_from_params(p).sigmas / rho_schedule(rng, 8).sigmas - 1)))

# the Euler sample is a convex combination of denoiser outputs and x0
w = weights_from_schedule(rho_schedule(rng, 8))
print("lambdas:", w.lambdas)
print("sum(lambda) + sigma_min/sigma_max =", w.lambdas.sum() + w.initial_coeff)
