"""Stage 1: learn a five-step schedule by descending the discretization loss.

The discretization loss compares the sampler's output from x + sigma_max eps with
the data point x itself. Its minimizer over samplers is the posterior mean of x
given the starting state, which is not what the probability-flow ODE computes, so
a lower loss need not mean a smaller global error. This script shows both numbers.
"""

import numpy as np

from fewstep import NoiseRange, RunConfig, rho_schedule, sample, uniform_schedule
from fewstep.core import init_params_from_reference, schedule_from_params
from fewstep.denoiser import GMMDenoiser, gmm_sample, two_gaussians
from fewstep.evaluation import initial_noise, reference
from fewstep.sched_opt import disc_loss, draw_noise, run_stage1

np.set_printoptions(precision=4, suppress=True)
gmm = two_gaussians()
h = GMMDenoiser(gmm)
rng = NoiseRange()


def batches(seed):
    data = np.random.default_rng(seed)
    while True:
        yield gmm_sample(gmm, 256, data)


def learn(**kw):
    cfg = RunConfig(stage1_iters=300, **kw)
    p, hist, _ = run_stage1(h, init_params_from_reference(rho_schedule(rng, 5)), cfg, batches(0), np.random.default_rng(1))
    return schedule_from_params(p), hist


learned, hist = learn()
curve = [np.mean([r.disc_loss for r in hist if r.iteration == i]) for i in range(0, 300, 50)]
print("disc loss every 50 iterations:", np.round(curve, 3))

ev = np.random.default_rng(2)
x = gmm_sample(gmm, 8192, ev)
eps, eps_t = draw_noise(ev, x.shape)
x0 = initial_noise(rng, 512, 2, seed=3)
ref = reference(h, rng, x0)
runs = {
    "rho=7": rho_schedule(rng, 5),
    "uniform": uniform_schedule(rng, 5),
    "learned (gamma=1)": learned,
    "learned (gamma=0)": learn(gamma=0.0)[0],
}
for name, s in runs.items():
    ld = disc_loss(h, s, x, eps=eps, eps_target=eps_t).value
    ge = np.mean(np.sum((sample(h, s, x0)[0] - ref) ** 2, axis=1))
    print(f"{name:18s} disc loss {ld:6.3f}   global error {ge:6.3f}   sigmas {s.sigmas}")
