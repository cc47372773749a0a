"""Euler sampling with the exact posterior-mean denoiser of a Gaussian mixture."""

import numpy as np

from fewstep import NoiseRange, rho_schedule, sample, uniform_schedule
from fewstep.denoiser import GMMDenoiser, gmm_sample, two_gaussians
from fewstep.evaluation import energy_distance, global_error, initial_noise, reference

gmm = two_gaussians(separation=2.0, scale=0.5, dim=2)
h = GMMDenoiser(gmm)
rng = NoiseRange()

# the denoiser pulls a noisy point toward the nearer mode as sigma shrinks
y = np.array([[1.0, 0.3]])
for sigma in (80.0, 5.0, 1.0, 0.1, 0.002):
    print(f"D(y, {sigma:6.3f}) = {h(y, sigma)[0]}   posterior weights {h.posterior_weights(y, sigma)[0]}")

# few-step samples against a dense reference solve from the same starting noise
x0 = initial_noise(rng, 512, 2, seed=0)
ref = reference(h, rng, x0)
truth = gmm_sample(gmm, 512, np.random.default_rng(1))
print("\n steps  schedule   global error      energy distance")
for n in (3, 5, 10, 20):
    for name, s in [("rho=7", rho_schedule(rng, n)), ("uniform", uniform_schedule(rng, n))]:
        mean, se, _ = global_error(h, s, x0, ref=ref)
        ed = energy_distance(sample(h, s, x0)[0], truth)
        print(f"{n:5d}  {name:8s}  {mean:7.4f} +- {se:.4f}   {ed:.4f}")
