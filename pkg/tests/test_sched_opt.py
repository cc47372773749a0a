
import numpy as np
import pytest

from fewstep.core import (
    InvalidParameterError,
    NoiseRange,
    RunConfig,
    Schedule,
    ScheduleParams,
    init_params_from_reference,
    rho_schedule,
    schedule_from_params,
)
from fewstep.denoiser import GMMDenoiser, gmm_sample, single_gaussian, two_gaussians
from fewstep.optim import Adam
from fewstep.sched_opt import (
    FULL_UNROLL_MAX_STEPS,
    NonFiniteError,
    diff_loss_grad,
    disc_loss,
    disc_loss_grad_efficient,
    disc_loss_grad_fd,
    disc_loss_grad_full,
    run_stage1,
    stage1_step,
)

R = NoiseRange()


class Const:
    dim = 2

    def __init__(self, c):
        self.c = np.asarray(c, dtype=float)

    def __call__(self, x, sigma):
        return np.broadcast_to(self.c, np.shape(x)).copy()

    def sigma_grad(self, x, sigma):
        return np.zeros(np.shape(x))

    def vjp(self, x, sigma, g):
        return np.zeros(np.shape(x)), np.zeros(np.shape(x)[0])


def _batches(gmm, size, rng):
    while True:
        yield gmm_sample(gmm, size, rng)


class NanDenoiser(Const):
    def __call__(self, x, sigma):
        return np.full(np.shape(x), np.nan)


def test_two_point_schedule_closed_form(rng):
    mu, s, d = np.array([0.3, -1.0, 2.0]), 0.8, 3
    h = GMMDenoiser(single_gaussian(mu, s, dim=d))
    sched = Schedule([5.0, 0.5])
    x = gmm_sample(h.gmm, 20000, rng)
    eps, eps_t = rng.normal(size=x.shape), rng.normal(size=x.shape)
    est = disc_loss(h, sched, x, eps=eps, eps_target=eps_t)
    r, a0 = 0.5 / 5.0, s**2 / (s**2 + 25.0)
    k = r + (1 - r) * a0
    per = np.sum(((k - 1) * (x - mu) + 5.0 * k * eps - 0.5 * eps_t) ** 2, axis=1)
    np.testing.assert_allclose(est.per_sample, per, rtol=1e-11)
    expect = d * ((k - 1) ** 2 * s**2 + k**2 * 25.0 + 0.25)
    assert abs(est.value - expect) < 4 * est.stderr


def test_point_mass_floor(rng):
    # the sampler lands on mu + sigma_min eps for any schedule, leaving 2 sigma_min^2 d
    h = GMMDenoiser(single_gaussian([1.0, -1.0], 1e-6, dim=2))
    x = gmm_sample(h.gmm, 4096, rng)
    for n in (2, 5, 40):
        est = disc_loss(h, rho_schedule(R, n), x, rng)
        assert abs(est.value - 2 * R.sigma_min**2 * 2) < 3 * est.stderr + 1e-12


def test_shared_noise_point_mass_is_exact_zero(rng):
    h = GMMDenoiser(single_gaussian([1.0, -1.0], 1e-9, dim=2))
    x = gmm_sample(h.gmm, 1, rng)
    est = disc_loss(h, Schedule([80.0, 0.002]), x, rng, shared_noise=True)
    # residual is x - mu, of the order of the 1e-9 data spread
    assert est.value < 1e-16 and est.mc_batch == 1


def test_dense_schedule_single_gaussian_limit(rng):
    # dense Euler approaches the exact flow map: s^2 (k-1)^2 + k^2 sigma_max^2 + sigma_min^2 per dim
    s, r = 1.0, NoiseRange(0.002, 10.0)
    h = GMMDenoiser(single_gaussian(0.0, s, dim=1))
    x = gmm_sample(h.gmm, 20000, rng)
    est = disc_loss(h, rho_schedule(r, 60), x, rng)
    k = np.sqrt((s**2 + r.sigma_min**2) / (s**2 + r.sigma_max**2))
    expect = s**2 * (k - 1) ** 2 + k**2 * r.sigma_max**2 + r.sigma_min**2
    assert abs(est.value - expect) < 4 * est.stderr + 0.01 * expect


def test_disc_loss_needs_noise_source(oracle2d):
    with pytest.raises(InvalidParameterError):
        disc_loss(oracle2d, rho_schedule(R, 3), np.zeros((2, 2)))


@pytest.mark.parametrize(
    "gmm,n",
    [(single_gaussian(0.5, 1.0, dim=1), 4), (two_gaussians(2.0, 0.5, dim=2), 5), (two_gaussians(2.0, 0.5, dim=1), 8)],
)
def test_full_unroll_matches_finite_differences(gmm, n):
    rng = np.random.default_rng(n)
    h = GMMDenoiser(gmm)
    p = ScheduleParams(rng.normal(scale=0.5, size=n - 2), R, n)
    x = gmm_sample(gmm, 64, rng)
    eps, eps_t = rng.normal(size=x.shape), rng.normal(size=x.shape)
    full = disc_loss_grad_full(h, p, x, eps=eps, eps_target=eps_t)
    fd = disc_loss_grad_fd(h, p, x, eps=eps, eps_target=eps_t)
    np.testing.assert_allclose(full.grad_v, fd.grad_v, rtol=1e-4, atol=1e-6 * np.abs(fd.grad_v).max())
    assert full.value == fd.value


def test_full_unroll_with_mlp(pretrained2d, rng):
    p = init_params_from_reference(rho_schedule(R, 5))
    x = gmm_sample(two_gaussians(), 32, rng)
    eps, eps_t = rng.normal(size=x.shape), rng.normal(size=x.shape)
    full = disc_loss_grad_full(pretrained2d, p, x, eps=eps, eps_target=eps_t)
    fd = disc_loss_grad_fd(pretrained2d, p, x, eps=eps, eps_target=eps_t)
    np.testing.assert_allclose(full.grad_v, fd.grad_v, rtol=1e-4, atol=1e-6 * np.abs(fd.grad_v).max())


def test_point_mass_gradient_vanishes(rng):
    h = GMMDenoiser(single_gaussian([0.5, 0.5], 1e-9, dim=2))
    p = ScheduleParams(rng.normal(size=4), R, 6)
    est = disc_loss_grad_full(h, p, gmm_sample(h.gmm, 128, rng), rng)
    assert np.max(np.abs(est.grad_v)) < 1e-10


def test_full_unroll_cost_guard(oracle2d):
    n = FULL_UNROLL_MAX_STEPS + 1
    p = ScheduleParams(np.zeros(n - 2), R, n)
    with pytest.raises(InvalidParameterError):
        disc_loss_grad_full(oracle2d, p, np.zeros((2, 2)), np.random.default_rng(0))


def test_efficient_constant_denoiser_has_zero_gradient(rng):
    p = ScheduleParams(rng.normal(size=3), R, 5)
    est = disc_loss_grad_efficient(Const([1.0, 2.0]), p, rng.normal(size=(16, 2)), rng)
    assert np.all(est.grad_v == 0) and est.estimator_kind == "efficient"


def test_efficient_lambda_override(oracle2d, rng):
    p = init_params_from_reference(rho_schedule(R, 6))
    x = gmm_sample(oracle2d.gmm, 64, rng)
    eps, eps_t = rng.normal(size=x.shape), rng.normal(size=x.shape)
    base = disc_loss_grad_efficient(oracle2d, p, x, eps=eps, eps_target=eps_t)
    from fewstep.core import weights_from_schedule

    lam = weights_from_schedule(schedule_from_params(p)).lambdas.copy()
    lam[2] = 0.0
    hooked = disc_loss_grad_efficient(oracle2d, p, x, eps=eps, eps_target=eps_t, lambda_override=lam)
    assert hooked.grad_sigma[2] == 0.0
    keep = [0, 1, 3, 4]
    np.testing.assert_array_equal(hooked.grad_sigma[keep], base.grad_sigma[keep])


def test_efficient_versus_full_alignment(oracle2d, rng, capsys):
    p = init_params_from_reference(rho_schedule(R, 5))
    x = gmm_sample(oracle2d.gmm, 512, rng)
    eps, eps_t = rng.normal(size=x.shape), rng.normal(size=x.shape)
    a = disc_loss_grad_efficient(oracle2d, p, x, eps=eps, eps_target=eps_t).grad_v
    b = disc_loss_grad_full(oracle2d, p, x, eps=eps, eps_target=eps_t).grad_v
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    with capsys.disabled():
        print(f"\n  efficient vs full-unroll cosine similarity at rho=7, N=5: {cos:+.3f}")
    assert np.isfinite(cos)


def test_diff_loss_gradient_matches_finite_differences(oracle2d, rng):
    p = ScheduleParams(rng.normal(scale=0.3, size=3), R, 5)
    x = gmm_sample(oracle2d.gmm, 64, rng)
    eps_levels = {t: rng.normal(size=x.shape) for t in range(4)}
    from fewstep.core import schedule_jacobian

    _, gsig = diff_loss_grad(oracle2d, schedule_from_params(p), x, eps_levels, range(4))
    gv = schedule_jacobian(p).T @ gsig
    step = 1e-6
    fd = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = step
        up = diff_loss_grad(oracle2d, schedule_from_params(p.with_v(p.v + e)), x, eps_levels, range(4))[0]
        dn = diff_loss_grad(oracle2d, schedule_from_params(p.with_v(p.v - e)), x, eps_levels, range(4))[0]
        fd[k] = (up - dn) / (2 * step)
    np.testing.assert_allclose(gv, fd, rtol=1e-5, atol=1e-9)


def test_stage1_zero_lr_is_noop(oracle2d, rng):
    p = init_params_from_reference(rho_schedule(R, 5))
    cfg = RunConfig(lr=0.0)
    new, est, diff = stage1_step(oracle2d, p, gmm_sample(oracle2d.gmm, 64, rng), cfg, rng, Adam(0.0))
    assert np.array_equal(new.v, p.v) and np.isfinite(est.value) and np.isfinite(diff)


def test_stage1_gamma_zero_uses_only_denoising_term(oracle2d):
    p = init_params_from_reference(rho_schedule(R, 5))
    x = gmm_sample(oracle2d.gmm, 64, np.random.default_rng(1))
    cfg = RunConfig(gamma=0.0)
    rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
    opt_a = Adam(cfg.lr)
    new, _, _ = stage1_step(oracle2d, p, x, cfg, rng_a, opt_a, level=None)
    eps_levels = {t: rng_b.standard_normal(x.shape) for t in range(4)}
    from fewstep.core import schedule_jacobian

    _, gsig = diff_loss_grad(oracle2d, schedule_from_params(p), x, eps_levels, range(4))
    expect = Adam(cfg.lr).step(p.v, schedule_jacobian(p).T @ gsig)
    np.testing.assert_array_equal(new.v, expect)


def test_stage1_aborts_on_nan(rng):
    p = init_params_from_reference(rho_schedule(R, 4))
    with pytest.raises(NonFiniteError) as info:
        stage1_step(NanDenoiser([0.0, 0.0]), p, rng.normal(size=(8, 2)), RunConfig(), rng, Adam(0.01))
    assert "v" in info.value.dump and "sigmas" in info.value.dump


def test_stage1_reduces_disc_loss_on_1d_toy():
    gmm = two_gaussians(2.0, 0.5, dim=1)
    h = GMMDenoiser(gmm)
    data = np.random.default_rng(0)
    cfg = RunConfig(stage1_iters=200)
    p0 = init_params_from_reference(rho_schedule(R, 5))
    batches = _batches(gmm, cfg.batch_size, data)
    p, hist, _ = run_stage1(h, p0, cfg, batches, np.random.default_rng(1))
    per_iter = np.array([np.mean([r.disc_loss for r in hist if r.iteration == i]) for i in range(200)])
    ma = np.convolve(per_iter, np.ones(20) / 20, mode="valid")
    assert ma[-1] < ma[0]
    # paired evaluation on a large common batch
    ev = np.random.default_rng(2)
    x = gmm_sample(gmm, 8192, ev)
    eps, eps_t = ev.normal(size=x.shape), ev.normal(size=x.shape)
    a = disc_loss(h, schedule_from_params(p), x, eps=eps, eps_target=eps_t).per_sample
    b = disc_loss(h, schedule_from_params(p0), x, eps=eps, eps_target=eps_t).per_sample
    d = a - b
    assert d.mean() + 3 * d.std(ddof=1) / np.sqrt(d.size) < 0


def test_stage1_history_rows(oracle2d):
    cfg = RunConfig(stage1_iters=2)
    data = np.random.default_rng(0)
    batches = _batches(oracle2d.gmm, 16, data)
    p0 = init_params_from_reference(rho_schedule(R, 4))
    _, hist, _ = run_stage1(oracle2d, p0, cfg, batches, np.random.default_rng(1))
    assert [(r.iteration, r.level) for r in hist] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
    cfg = RunConfig(stage1_iters=2, per_level_updates=False)
    _, hist, _ = run_stage1(oracle2d, p0, cfg, batches, np.random.default_rng(1))
    assert [r.level for r in hist] == [-1, -1]
    assert len(hist[0].row()) == 7 + 4
