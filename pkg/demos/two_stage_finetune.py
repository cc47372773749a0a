"""Alternate schedule learning and schedule-weighted finetuning of a small MLP denoiser."""

import numpy as np

from fewstep import NoiseRange, RunConfig, rho_schedule, sample
from fewstep.denoiser import MlpDenoiser, MlpSpec, gmm_sample, two_gaussians
from fewstep.evaluation import energy_distance, initial_noise
from fewstep.finetune import Problem, pretrain, run_two_stage

gmm = two_gaussians()
rng = NoiseRange()

# an imperfect "pretrained" model: short plain denoiser training
base = MlpDenoiser(MlpSpec(dim=2, hidden=[64, 64]), rng=np.random.default_rng(0))
losses = pretrain(base, gmm, np.random.default_rng(1), iters=1500)
print(f"pretraining loss: first {np.mean(losses[:50]):.3f}, last {np.mean(losses[-50:]):.3f}")

x0 = initial_noise(rng, 2048, 2, seed=5)
truth = gmm_sample(gmm, 2048, np.random.default_rng(6))
prob = Problem(gmm, n_steps=5)
common = dict(outer_iters=2, seed=5)
variants = {
    "stage 1 only": RunConfig(stage1_iters=150, **common),
    "stage 2 only": RunConfig(stage1_iters=0, stage2_iters=300, **common),
    "two stage": RunConfig(stage1_iters=150, stage2_iters=300, **common),
    "original weights": RunConfig(stage1_iters=150, stage2_iters=300, weights="original", **common),
}
print(f"{'pretrained, rho=7':18s} energy distance {energy_distance(sample(base, rho_schedule(rng, 5), x0)[0], truth):.4f}")
for name, cfg in variants.items():
    h = base.copy()
    res = run_two_stage(cfg, prob, h)
    ed = energy_distance(sample(h, res.schedule, x0)[0], truth)
    print(f"{name:18s} energy distance {ed:.4f}   sigmas {np.round(res.schedule.sigmas, 4)}")
