"""Self-play preference post-training with a per-timestep DPO loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import numerics as nx
from .denoiser import ConditioningTriple, stack_conditions
from .diffusion import NoiseSchedule, Trajectory, initial_noise, rollout, step_log_probs
from .guidance import GuidanceScales
from .numerics import ParamStore
from .scoring import ScoreConfig, ScoreReport, combine_and_rank, score_samples
from .synth import CONCEPTS, make_dataset

LN2 = math.log(2.0)


@dataclass(frozen=True)
class TrainerConfig:
    beta_dpo: float = 1.0
    lr: float = 2e-4
    momentum: float = 0.9
    clip_norm: float = 1.0
    batch_pairs: int = 8
    subsample: int = 8
    logratio_clamp: float = 20.0
    scales: GuidanceScales = field(default_factory=GuidanceScales)
    guided: bool = True
    seed: int = 0
    concepts: tuple[str, ...] = CONCEPTS
    bank_seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.beta_dpo > 0:
            raise ValueError("beta_dpo must be positive")
        if self.batch_pairs < 2:
            raise ValueError("batch needs at least two pairs")
        if self.subsample < 1:
            raise ValueError("timestep subsample must be at least 1")

    def check_schedule(self, sched: NoiseSchedule) -> None:
        if self.subsample > sched.T - 1:
            raise ValueError(f"timestep subsample {self.subsample} exceeds the {sched.T - 1} stochastic steps")


def bradley_terry_prob(r_w: float, r_l: float) -> float:
    """P(w preferred over l) = e^{r_w} / (e^{r_w} + e^{r_l}), overflow-free."""
    return float(expit(r_w - r_l))


@dataclass(eq=False)
class PreferencePair:
    cond: ConditioningTriple
    seed: int
    trajectories: tuple[Trajectory, Trajectory]
    in_mask: np.ndarray | None = None
    style_mask: np.ndarray | None = None
    winner_index: int | None = None
    reports: tuple[ScoreReport, ScoreReport] | None = None

    @property
    def winner(self) -> Trajectory:
        return self.trajectories[self._w()]

    @property
    def loser(self) -> Trajectory:
        return self.trajectories[1 - self._w()]

    def _w(self) -> int:
        if self.winner_index is None:
            raise ValueError("pair has not been ranked")
        return self.winner_index


def generate_pairs(model, params, conds, seeds, scales, sched, guided: bool = True) -> list[PreferencePair]:
    """Two trajectories per conditioning from one shared x_T, with noise streams 0 and 1."""
    x_T = np.stack([initial_noise(s, model.image_shape) for s in seeds])
    x_T = np.repeat(x_T, 2, axis=0)
    trajs = rollout(
        model, params, x_T, [c for c in conds for _ in range(2)], [s for s in seeds for _ in range(2)], [0, 1] * len(seeds), scales, sched, guided
    )
    pairs = []
    for i, (c, s) in enumerate(zip(conds, seeds)):
        a, b = trajs[2 * i], trajs[2 * i + 1]
        if not np.array_equal(a.states[0], b.states[0]):
            raise AssertionError("pair trajectories do not share their initial state")
        pairs.append(PreferencePair(c, int(s), (a, b)))
    return pairs


def generate_pair(model, params, cond, seed, scales, sched, guided: bool = True) -> PreferencePair:
    return generate_pairs(model, params, [cond], [seed], scales, sched, guided)[0]


def rank_pairs(pairs: list[PreferencePair], score_cfg: ScoreConfig):
    """Score every sample, normalise over the pooled 2N batch and set winners.
    Returns the N x 2 raw structural and semantic losses."""
    gens, inputs, styles, m_in, m_sty = [], [], [], [], []
    for p in pairs:
        for tr in p.trajectories:
            gens.append(tr.clamped_final())
            inputs.append(p.cond.input_image)
            styles.append(p.cond.style_image)
            m_in.append(p.in_mask)
            m_sty.append(p.style_mask)
    struct, sem = score_samples(gens, inputs, styles, m_in, m_sty, score_cfg)
    struct, sem = struct.reshape(-1, 2), sem.reshape(-1, 2)
    winners, reports = combine_and_rank(struct, sem, score_cfg)
    for p, w, r in zip(pairs, winners, reports):
        p.winner_index = int(w)
        p.reports = (r[0], r[1])
    return struct, sem


def dpo_timestep_loss(logp_theta_w, logp_ref_w, logp_theta_l, logp_ref_l, beta: float, clamp: float | None = 20.0):
    """-log sigmoid(beta * (winner log-ratio - loser log-ratio)), as softplus(-x)."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    margin = nx.scale(nx.sub(nx.sub(logp_theta_w, logp_ref_w), nx.sub(logp_theta_l, logp_ref_l)), beta)
    if clamp is not None:
        margin = nx.clip(margin, -clamp, clamp)
    return nx.softplus(nx.neg(margin))


def sample_timestep_indices(rng: np.random.Generator, sched: NoiseSchedule, k: int | None) -> np.ndarray:
    """Step indices (into a trajectory record) with t in 2..T; all of them when k is None."""
    stochastic = np.arange(sched.T - 1)  # step index k has t = T - k >= 2
    if k is None or k >= len(stochastic):
        return stochastic
    return np.sort(rng.choice(stochastic, size=k, replace=False))


def _pair_terms(model, params, ref_params, pair: PreferencePair, ks: np.ndarray, sched, scales, guided, beta, clamp):
    w, l = pair.winner, pair.loser
    n = len(ks)
    states = np.concatenate([w.states[ks], l.states[ks]])
    actions = np.concatenate([w.states[ks + 1], l.states[ks + 1]])
    t = np.concatenate([w.timesteps[ks], l.timesteps[ks]])
    inp, sty, instr = stack_conditions([pair.cond] * (2 * n), states.shape[1:])
    lp = step_log_probs(model, params, states, actions, t, inp, sty, instr, scales, sched, guided)
    lr = step_log_probs(model, ref_params, states, actions, t, inp, sty, instr, scales, sched, guided)
    lr = nx.value_of(lr)
    return dpo_timestep_loss(
        nx.getitem(lp, slice(0, n)), lr[:n], nx.getitem(lp, slice(n, 2 * n)), lr[n:], beta, clamp
    )


def dpo_loss_and_grad(model, params, ref_params, pairs, step_indices, sched, scales, guided, beta, clamp=20.0):
    """Mean per-timestep DPO loss over pairs and their sampled steps, with its gradient.

    Gradients are accumulated pair by pair to bound memory; the result is the
    gradient of the mean over all (pair, step) terms.
    """
    total_terms = sum(len(ks) for ks in step_indices)
    loss = 0.0
    grad = None
    for pair, ks in zip(pairs, step_indices):
        weight = 1.0 / total_terms

        def f(p, pair=pair, ks=ks):
            return nx.scale(nx.sum_(_pair_terms(model, p, ref_params, pair, ks, sched, scales, guided, beta, clamp)), weight)

        v, g = nx.reverse_gradient(f, params)
        loss += v
        grad = g if grad is None else ParamStore({k: grad[k] + g[k] for k in grad})
    return loss, grad


def dpo_loss_value(model, params, ref_params, pairs, step_indices, sched, scales, guided, beta, clamp=20.0) -> float:
    terms = [
        np.asarray(_pair_terms(model, params, ref_params, p, ks, sched, scales, guided, beta, clamp)) for p, ks in zip(pairs, step_indices)
    ]
    return float(np.concatenate(terms).mean())


@dataclass
class TrainState:
    params: ParamStore
    ref_params: ParamStore
    opt_state: dict
    step: int = 0


@dataclass
class StepReport:
    step: int
    dpo_loss: float
    struct_mean: float
    sem_mean: float
    raw_total_mean: float
    win_margin_mean: float
    win_margin_min: float
    grad_norm: float

    def as_row(self) -> dict:
        return dict(self.__dict__)


def make_optimizer(cfg: TrainerConfig):
    if cfg.optimizer == "adam":
        return nx.Adam(cfg.lr, b1=cfg.momentum, clip_norm=cfg.clip_norm)
    return nx.MomentumSGD(cfg.lr, cfg.momentum, cfg.clip_norm)


def init_train_state(params: ParamStore, cfg: TrainerConfig) -> TrainState:
    return TrainState(params.copy(), params.copy(), make_optimizer(cfg).init_state(params), 0)


def step_tasks(cfg: TrainerConfig, step: int, size: tuple[int, int, int]):
    seed = int(np.random.SeedSequence([cfg.seed, 503, step]).generate_state(1)[0])
    return make_dataset(cfg.batch_pairs, seed, cfg.concepts, bank_seed=cfg.bank_seed, size=size[0]), seed


def posttrain_step(model, state: TrainState, cfg: TrainerConfig, sched: NoiseSchedule, score_cfg: ScoreConfig = ScoreConfig(), tasks=None):
    """One self-play DPO update. Returns (new state, report); the reported DPO
    loss is the pre-update value."""
    cfg.check_schedule(sched)
    if not state.params.same_layout(state.ref_params):
        raise ValueError("policy and reference parameters have different architectures")
    model.check_params(state.params)
    if tasks is None:
        tasks, task_seed = step_tasks(cfg, state.step, model.image_shape)
    else:
        task_seed = int(np.random.SeedSequence([cfg.seed, 509, state.step]).generate_state(1)[0])
    conds = [ConditioningTriple(ex.input_image, ex.style_image, ex.instruction) for ex in tasks]
    seeds = [int(np.random.SeedSequence([task_seed, i]).generate_state(1)[0]) for i in range(len(tasks))]
    pairs = generate_pairs(model, state.params, conds, seeds, cfg.scales, sched, cfg.guided)
    for p, ex in zip(pairs, tasks):
        p.in_mask, p.style_mask = ex.region_mask, ex.style_mask
    struct, sem = rank_pairs(pairs, score_cfg)

    rng = np.random.default_rng([cfg.seed, 521, state.step])
    step_indices = [sample_timestep_indices(rng, sched, cfg.subsample) for _ in pairs]
    loss, grads = dpo_loss_and_grad(
        model, state.params, state.ref_params, pairs, step_indices, sched, cfg.scales, cfg.guided, cfg.beta_dpo, cfg.logratio_clamp
    )
    params, opt_state, gnorm = make_optimizer(cfg).step(state.params, grads, state.opt_state)
    margins = np.array([p.reports[1 - p.winner_index].total - p.reports[p.winner_index].total for p in pairs])
    report = StepReport(
        state.step,
        loss,
        float(struct.mean()),
        float(sem.mean()),
        float((struct + score_cfg.alpha * sem).mean()),
        float(margins.mean()),
        float(margins.min()),
        gnorm,
    )
    return TrainState(params, state.ref_params, opt_state, state.step + 1), report


def kl_proxy_report(model, params, ref_params, probes: list[Trajectory], sched: NoiseSchedule) -> float:
    """Mean of log pi_theta - log pi_ref over every stochastic step of the probe trajectories."""
    if not probes:
        raise ValueError("no probe trajectories")
    from .diffusion import trajectory_log_prob

    diffs = [trajectory_log_prob(model, params, tr, sched) - trajectory_log_prob(model, ref_params, tr, sched) for tr in probes]
    return float(np.concatenate(diffs).mean())
