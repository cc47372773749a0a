"""How a schedule turns into per-level weights for denoiser finetuning."""

import numpy as np

from fewstep import NoiseRange, rho_schedule, uniform_schedule
from fewstep.core import log_schedule
from fewstep.finetune import P_MEAN, P_STD, edm_weight, export_weight_scheme

rng = NoiseRange()
for name, s in [("rho=7", rho_schedule(rng, 10)), ("uniform", uniform_schedule(rng, 10)), ("log", log_schedule(rng, 10))]:
    print(f"\n{name}:  t   sigma      lambda     active weight")
    for t, sigma, lam, act in export_weight_scheme(s):
        print(f"       {t:2d}  {sigma:9.4f}  {lam:.3e}  {act:.3e}")

# for contrast: the default training weighting over a log-normal noise distribution
sig = np.exp(P_MEAN + P_STD * np.array([-2.0, -1.0, 0.0, 1.0, 2.0]))
print("\nlog-normal training sigmas:", np.round(sig, 4))
print("their loss weights:       ", np.round(edm_weight(sig, 0.5), 3))
