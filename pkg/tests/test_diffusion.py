import math

import numpy as np
import pytest

from styledit import numerics as nx
from styledit.denoiser import ConditioningTriple, Denoiser, ReducedDenoiser
from styledit.diffusion import (
    FINAL_CLAMP,
    ancestral_step,
    build_schedule,
    ddpm_loss,
    forward_diffuse,
    gaussian_log_prob,
    recorded_log_prob,
    sample_trajectory,
    trajectory_log_prob,
)
from styledit.guidance import GuidanceScales
from styledit.synth import make_dataset

SCHED = build_schedule(50, 1e-4, 0.1)


def test_two_step_schedule():
    s = build_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.beta, [0.1, 0.2])
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], rtol=0, atol=1e-15)
    assert s.posterior_std[0] == 0.0
    assert s.posterior_std[1] == pytest.approx(math.sqrt(0.1 / 0.28 * 0.2), abs=1e-15)


@pytest.mark.parametrize("T,lo,hi", [(2, 0.1, 0.2), (50, 1e-4, 0.1), (10, 0.3, 0.3), (100, 1e-4, 0.02)])
def test_schedule_sanity(T, lo, hi):
    s = build_schedule(T, lo, hi)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert s.posterior_std[0] == 0.0


def test_default_schedule_ends_near_noise():
    assert 1.0 - SCHED.alpha_bar[-1] >= 0.9


@pytest.mark.parametrize("args", [(1, 0.1, 0.2), (5, 0.0, 0.1), (5, 0.2, 0.1), (5, 0.1, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_forward_diffuse_examples():
    s = build_schedule(2, 0.1, 0.2)
    assert forward_diffuse(np.ones(1), 2, np.zeros(1), s)[0] == pytest.approx(0.848528137, abs=1e-9)
    n = np.array([0.3, -1.0])
    np.testing.assert_allclose(forward_diffuse(np.zeros(2), 2, n, s), math.sqrt(0.28) * n)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(2), 3, n, s)


def test_forward_diffuse_moments():
    t, x0 = 30, 0.7
    noise = np.random.default_rng(0).standard_normal(10_000)
    xt = forward_diffuse(np.full(10_000, x0), t, noise, SCHED)
    mu, var = math.sqrt(SCHED.alpha_bar[t - 1]) * x0, 1 - SCHED.alpha_bar[t - 1]
    se_mean = math.sqrt(var / 10_000)
    se_var = var * math.sqrt(2 / 9_999)
    assert abs(xt.mean() - mu) < 3 * se_mean
    assert abs(xt.var(ddof=1) - var) < 3 * se_var


def test_ancestral_step_examples():
    s = build_schedule(2, 0.1, 0.2)
    x, mean, std = ancestral_step(np.zeros(3), np.zeros(3), 2, s, np.random.default_rng(0))
    assert not mean.any() and std > 0
    _, mean, _ = ancestral_step(np.ones(1), np.ones(1), 2, s, np.random.default_rng(0))
    assert mean[0] == pytest.approx((1 - 0.2 / math.sqrt(0.28)) / math.sqrt(0.8), abs=1e-15)
    x, mean, std = ancestral_step(np.ones(2), np.full(2, 0.5), 1, s, None)
    assert std == 0.0 and np.array_equal(x, mean)
    with pytest.raises(ValueError):
        ancestral_step(np.ones(2), np.ones(2), 0, s, None)


def test_gaussian_log_prob_examples():
    assert float(gaussian_log_prob(np.zeros(2), np.zeros(2), 1.0)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    assert float(gaussian_log_prob(np.array([1.0, 0.0]), np.zeros(2), 0.5)) == pytest.approx(
        -math.log(2 * math.pi) - 2 * math.log(0.5) - 2.0, abs=1e-12
    )
    assert float(gaussian_log_prob(np.array([1.0, 0.0]), np.zeros(2), 0.5)) == pytest.approx(-2.451583, abs=1e-6)
    vals = [float(gaussian_log_prob(np.array([r, 0.0]), np.zeros(2), 0.7)) for r in np.linspace(0, 3, 10)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        gaussian_log_prob(np.zeros(2), np.zeros(2), 0.0)


def test_gaussian_log_prob_gradient_in_mean():
    x = np.array([0.3, -1.2, 2.0])
    sigma = 0.7
    mu = np.array([0.1, 0.0, -0.4])
    _, g = nx.reverse_gradient(lambda p: gaussian_log_prob(x, p["mu"], sigma), {"mu": mu})
    np.testing.assert_allclose(g["mu"], (x - mu) / sigma**2, rtol=1e-12)


@pytest.fixture(scope="module")
def trajectory():
    model = Denoiser()
    params = model.init_params(1)
    ex = make_dataset(1, 3)[0]
    cond = ConditioningTriple(ex.input_image, ex.style_image, ex.instruction)
    return model, params, cond, sample_trajectory(model, params, cond, 42, GuidanceScales(), SCHED)


def test_trajectory_records(trajectory):
    model, params, cond, tr = trajectory
    assert len(tr.steps) == SCHED.T
    steps = tr.steps
    for a, b in zip(steps, steps[1:]):
        assert np.array_equal(a.action, b.state)
        assert a.t == b.t + 1
    assert all(s.std == SCHED.posterior_std[s.t - 1] for s in steps)
    assert steps[-1].t == 1 and np.array_equal(steps[-1].action, steps[-1].mean)
    again = sample_trajectory(model, params, cond, 42, GuidanceScales(), SCHED)
    assert np.array_equal(again.states, tr.states) and np.array_equal(again.means, tr.means)


def test_trajectory_density_matches_noise_oracle(trajectory):
    model, params, _, tr = trajectory
    lp = trajectory_log_prob(model, params, tr, SCHED)
    assert lp.shape == (SCHED.T - 1,)
    np.testing.assert_allclose(lp, recorded_log_prob(tr), rtol=0, atol=1e-10)


def test_trajectory_density_sensitive_to_params(trajectory):
    model, params, _, tr = trajectory
    moved = params.copy()
    moved["out.b"] = moved["out.b"] + 1e-3
    assert not np.array_equal(trajectory_log_prob(model, moved, tr, SCHED), trajectory_log_prob(model, params, tr, SCHED))


def test_trajectory_schedule_mismatch(trajectory):
    model, params, _, tr = trajectory
    with pytest.raises(ValueError):
        trajectory_log_prob(model, params, tr, build_schedule(50, 1e-4, 0.05))


def test_final_samples_are_clamped_and_finite():
    net = ReducedDenoiser(image_shape=(4, 4, 3), steps=50)
    p = net.init_params(0)
    rng = np.random.default_rng(0)
    cond = ConditioningTriple(rng.uniform(-1, 1, (4, 4, 3)), rng.uniform(-1, 1, (4, 4, 3)), 1)
    for seed in range(100):
        out = sample_trajectory(net, p, cond, seed, GuidanceScales(), SCHED).clamped_final()
        assert np.isfinite(out).all() and np.abs(out).max() <= FINAL_CLAMP


class _Oracle:
    """Predicts the noise that ddpm_loss draws, by replaying its rng."""

    image_shape = (16, 16, 3)

    def __init__(self, noise):
        self.noise = noise

    def forward_batch(self, params, x, t, inp, sty, instr):
        return nx.add(self.noise, nx.mul(params["z"], np.zeros_like(self.noise)))


def test_ddpm_loss_perfect_and_zero_predictors():
    batch = make_dataset(8, 1)
    n = len(batch)
    rng = np.random.default_rng(5)
    rng.integers(1, SCHED.T + 1, size=n)
    noise = rng.standard_normal((n, 16, 16, 3))
    loss = nx.evaluate(lambda p: ddpm_loss(_Oracle(noise), p, batch, SCHED, np.random.default_rng(5)), {"z": np.zeros((n, 16, 16, 3))})
    assert float(loss) == 0.0

    big = make_dataset(64, 2)
    zero = _Oracle(np.zeros((64, 16, 16, 3)))
    loss = float(nx.evaluate(lambda p: ddpm_loss(zero, p, big, SCHED, np.random.default_rng(0)), {"z": np.zeros((64, 16, 16, 3))}))
    # mean of 49152 squared unit normals: sd sqrt(2 / 49152)
    assert abs(loss - 1.0) < 4 * math.sqrt(2 / (64 * 768))


def test_ddpm_loss_nonnegative_and_rejects_empty():
    model = Denoiser()
    p = model.init_params(0)
    assert float(nx.evaluate(lambda q: ddpm_loss(model, q, make_dataset(3, 0), SCHED, np.random.default_rng(1)), p)) >= 0
    with pytest.raises(ValueError):
        ddpm_loss(model, p, [], SCHED, np.random.default_rng(1))
