"""Few-step PF-ODE sampler optimization: learned schedules and schedule-aware denoiser finetuning."""

from fewstep.core import (
    NoiseRange,
    RunConfig,
    Schedule,
    ScheduleParams,
    StepWeights,
    init_params_from_reference,
    stream,
    rho_schedule,
    schedule_from_params,
    schedule_jacobian,
    uniform_schedule,
    weights_from_schedule,
)
from fewstep.denoiser import (
    GaussianMixture,
    GMMDenoiser,
    MlpDenoiser,
    MlpSpec,
    denoise,
    denoise_sigma_grad,
    gmm_sample,
    mlp_forward_backward,
)
from fewstep.sampler import (
    Trajectory,
    euler_step,
    reference_solve,
    sample,
    backward_euler_residual,
    unrolled_sample,
)

__version__ = "0.1.0"

__all__ = [
    "NoiseRange",
    "RunConfig",
    "Schedule",
    "ScheduleParams",
    "StepWeights",
    "init_params_from_reference",
    "stream",
    "rho_schedule",
    "schedule_from_params",
    "schedule_jacobian",
    "uniform_schedule",
    "weights_from_schedule",
    "GaussianMixture",
    "GMMDenoiser",
    "MlpDenoiser",
    "MlpSpec",
    "denoise",
    "denoise_sigma_grad",
    "gmm_sample",
    "mlp_forward_backward",
    "Trajectory",
    "euler_step",
    "reference_solve",
    "sample",
    "backward_euler_residual",
    "unrolled_sample",
]
