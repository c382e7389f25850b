"""DDPM schedule, forward noising, ancestral sampling with full trajectory
records, and per-step Gaussian policy densities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .denoiser import ConditioningTriple, apply_pattern, stack_conditions
from .guidance import DEFAULT_DROPOUT, GuidanceScales, dropout_pattern, eps_batch

FINAL_CLAMP = 1.5
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_std: np.ndarray

    # arrays are indexed by t - 1

    def key(self) -> tuple:
        return (self.T, self.beta.tobytes())

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")


def build_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    std = np.zeros(T)
    std[1:] = np.sqrt((1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:])
    return NoiseSchedule(T, beta, alpha, alpha_bar, std)


def forward_diffuse(x0: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    sched.check_t(t)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != image shape {x0.shape}")
    ab = sched.alpha_bar[t - 1]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def posterior_mean(x_t, eps_hat, t: np.ndarray, sched: NoiseSchedule):
    """Ancestral mean (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t) for a
    stack of states; ``eps_hat`` may be recorded."""
    t = np.asarray(t)
    sched.check_t(t)
    full = np.shape(x_t)
    shape = (len(t),) + (1,) * (len(full) - 1)
    coef = np.broadcast_to((sched.beta[t - 1] / np.sqrt(1.0 - sched.alpha_bar[t - 1])).reshape(shape), full)
    inv_sqrt_alpha = np.broadcast_to((1.0 / np.sqrt(sched.alpha[t - 1])).reshape(shape), full)
    return nx.mul(inv_sqrt_alpha, nx.sub(x_t, nx.mul(coef, eps_hat)))


def ancestral_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule, rng: np.random.Generator | None):
    """One DDPM ancestral step. Returns (x_{t-1}, mean, std); no noise is drawn at t = 1."""
    sched.check_t(t)
    mean = posterior_mean(x_t[None], eps_hat[None], np.array([t]), sched)[0]
    std = float(sched.posterior_std[t - 1])
    if t == 1:
        return mean.copy(), mean, 0.0
    return mean + std * rng.standard_normal(x_t.shape), mean, std


def gaussian_log_prob(x, mean, std: float):
    """Isotropic Gaussian log-density summed over all coordinates."""
    if not std > 0:
        raise ValueError(f"Gaussian std must be positive, got {std}")
    d = np.size(nx.value_of(x))
    sq = nx.sum_(nx.square(nx.sub(x, mean)))
    return nx.add_const(nx.scale(sq, -0.5 / std**2), -d * (0.5 * _LOG_2PI + math.log(std)))


def gaussian_log_prob_rows(x, mean, std: np.ndarray):
    """Per-row log-densities for stacked samples; each row has its own std."""
    std = np.asarray(std, dtype=float)
    if np.any(std <= 0):
        raise ValueError("Gaussian std must be positive")
    n = nx.value_of(x).shape[0]
    d = int(np.prod(nx.value_of(x).shape[1:]))
    sq = nx.sum_(nx.reshape(nx.square(nx.sub(x, mean)), (n, d)), axis=1)
    return nx.add(nx.mul(sq, -0.5 / std**2), -d * (0.5 * _LOG_2PI + np.log(std)))


@dataclass
class StepRecord:
    t: int
    state: np.ndarray
    mean: np.ndarray
    std: float
    action: np.ndarray


@dataclass(eq=False)
class Trajectory:
    """Denoising record. ``states[k]`` is x_{T-k}; step k maps states[k] to states[k+1]."""

    seed: int
    stream: int
    cond: ConditioningTriple
    states: np.ndarray = field(repr=False)
    means: np.ndarray = field(repr=False)
    stds: np.ndarray = field(repr=False)
    timesteps: np.ndarray = field(repr=False)
    scales: GuidanceScales
    guided: bool
    schedule_key: tuple = field(repr=False)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def clamped_final(self) -> np.ndarray:
        return np.clip(self.states[-1], -FINAL_CLAMP, FINAL_CLAMP)

    @property
    def steps(self) -> list[StepRecord]:
        return [
            StepRecord(int(self.timesteps[k]), self.states[k], self.means[k], float(self.stds[k]), self.states[k + 1])
            for k in range(len(self.timesteps))
        ]

    def stochastic_steps(self) -> np.ndarray:
        """Step indices k whose timestep is >= 2 (the ones with a density)."""
        return np.nonzero(self.timesteps >= 2)[0]


def initial_noise(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    return np.random.default_rng([int(seed)]).standard_normal(shape)


def noise_stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1, int(stream)])


def rollout(
    model,
    params,
    x_T: np.ndarray,
    conds: list[ConditioningTriple],
    seeds: list[int],
    streams: list[int],
    scales: GuidanceScales,
    sched: NoiseSchedule,
    guided: bool = True,
) -> list[Trajectory]:
    """Sample a batch of trajectories in lock-step; trajectory i uses its own
    noise stream (seeds[i], streams[i]) so results do not depend on batching order."""
    n = x_T.shape[0]
    shape = x_T.shape[1:]
    inp, sty, instr = stack_conditions(conds, shape)
    rngs = [noise_stream(s, k) for s, k in zip(seeds, streams)]
    T = sched.T
    states = np.empty((n, T + 1) + shape)
    means = np.empty((n, T) + shape)
    states[:, 0] = x_T
    x = x_T.copy()
    for k in range(T):
        t = T - k
        eps = eps_batch(model, params, x, np.full(n, t), inp, sty, instr, scales, guided)
        mean = posterior_mean(x, eps, np.full(n, t), sched)
        if t > 1:
            z = np.stack([r.standard_normal(shape) for r in rngs])
            x = mean + sched.posterior_std[t - 1] * z
        else:
            x = mean.copy()
        means[:, k] = mean
        states[:, k + 1] = x
    timesteps = np.arange(T, 0, -1)
    stds = sched.posterior_std[timesteps - 1].copy()
    return [
        Trajectory(int(seeds[i]), int(streams[i]), conds[i], states[i], means[i], stds, timesteps, scales, guided, sched.key())
        for i in range(n)
    ]


def sample_trajectory(
    model,
    params,
    cond: ConditioningTriple,
    seed: int,
    scales: GuidanceScales,
    sched: NoiseSchedule,
    guided: bool = True,
    stream: int = 0,
) -> Trajectory:
    x_T = initial_noise(seed, model.image_shape)
    return rollout(model, params, x_T[None], [cond], [seed], [stream], scales, sched, guided)[0]


def step_log_probs(model, params, states, actions, t, inp, sty, instr, scales, sched: NoiseSchedule, guided: bool = True):
    """log pi(action | state) for stacked (state, t) with t >= 2; recordable in ``params``."""
    t = np.asarray(t)
    if np.any(t < 2):
        raise ValueError("the t = 1 step is deterministic and has no density")
    eps = eps_batch(model, params, states, t, inp, sty, instr, scales, guided)
    mean = posterior_mean(states, eps, t, sched)
    return gaussian_log_prob_rows(actions, mean, sched.posterior_std[t - 1])


def trajectory_log_prob(model, params, traj: Trajectory, sched: NoiseSchedule, scales: GuidanceScales | None = None, guided: bool | None = None) -> np.ndarray:
    """Per-step log-densities of the recorded actions under ``params`` (T - 1 entries)."""
    if traj.schedule_key != sched.key():
        raise ValueError("trajectory was recorded with a different noise schedule")
    scales = traj.scales if scales is None else scales
    guided = traj.guided if guided is None else guided
    ks = traj.stochastic_steps()
    n = len(ks)
    inp, sty, instr = stack_conditions([traj.cond] * n, traj.states.shape[1:])
    return np.asarray(
        step_log_probs(model, params, traj.states[ks], traj.states[ks + 1], traj.timesteps[ks], inp, sty, instr, scales, sched, guided)
    )


def recorded_log_prob(traj: Trajectory) -> np.ndarray:
    """Densities implied by the stored (mean, std) alone: standard-normal density
    of z = (action - mean) / std, with the change-of-variables term."""
    out = []
    for k in traj.stochastic_steps():
        std = traj.stds[k]
        z = (traj.states[k + 1] - traj.means[k]) / std
        out.append(float(np.sum(-0.5 * _LOG_2PI - 0.5 * z * z) - z.size * math.log(std)))
    return np.array(out)


def ddpm_loss(model, params, examples, sched: NoiseSchedule, rng: np.random.Generator, dropout=DEFAULT_DROPOUT):
    """Noise-prediction MSE on a batch of edit examples with nested conditioning dropout."""
    if len(examples) == 0:
        raise ValueError("empty batch")
    n = len(examples)
    x0 = np.stack([ex.target for ex in examples])
    t = rng.integers(1, sched.T + 1, size=n)
    noise = rng.standard_normal(x0.shape)
    ab = sched.alpha_bar[t - 1].reshape(n, 1, 1, 1)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    inp = np.stack([ex.input_image for ex in examples])
    sty = np.stack([ex.style_image for ex in examples])
    instr = np.array([ex.instruction for ex in examples], dtype=np.int64)
    for i in range(n):
        pattern = dropout_pattern(rng, dropout)
        a, b, c = apply_pattern(pattern, inp[i : i + 1], sty[i : i + 1], instr[i : i + 1])
        inp[i], sty[i], instr[i] = a[0], b[0], c[0]
    pred = model.forward_batch(params, x_t, t, inp, sty, instr)
    return nx.mean(nx.square(nx.sub(pred, noise)))


def pretrain(
    model,
    params,
    dataset,
    sched: NoiseSchedule,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    dropout=DEFAULT_DROPOUT,
    on_step=None,
):
    """Denoising pretraining with Adam. Returns (params, per-step losses)."""
    opt = nx.Adam(lr)
    state = opt.init_state(params)
    rng = np.random.default_rng([int(seed), 401])
    losses = []
    for step in range(steps):
        idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
        batch = [dataset[i] for i in idx]
        loss_rng = np.random.default_rng([int(seed), 402, step])
        loss, grads = nx.reverse_gradient(lambda p: ddpm_loss(model, p, batch, sched, loss_rng, dropout), params)
        params, state, _ = opt.step(params, grads, state)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
    return params, losses
