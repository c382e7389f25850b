"""Three-way classifier-free guidance and the nested conditioning-dropout policy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .denoiser import PATTERNS, ConditioningTriple, apply_pattern, stack_conditions

DEFAULT_DROPOUT = (0.05, 0.05, 0.05)


@dataclass(frozen=True)
class GuidanceScales:
    s_in: float = 1.5
    s_sty: float = 3.0
    s_t: float = 7.5

    def __post_init__(self):
        for name in ("s_in", "s_sty", "s_t"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"guidance scale {name} must be finite and >= 0, got {v}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.s_in, self.s_sty, self.s_t)


def cfg_batch(model, params, z, t, inp, sty, instr, scales: GuidanceScales):
    """Guided noise estimate for N stacked full conditionings.

    The four nested patterns are evaluated in a single forward pass over a 4N batch.
    """
    n = z.shape[0]
    parts = [apply_pattern(p, inp, sty, instr) for p in PATTERNS]
    e = model.forward_batch(
        params,
        np.concatenate([z] * 4),
        np.concatenate([np.asarray(t)] * 4),
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
    )
    e_null, e_in, e_insty, e_full = (nx.getitem(e, slice(k * n, (k + 1) * n)) for k in range(4))
    out = nx.add(e_null, nx.scale(nx.sub(e_in, e_null), scales.s_in))
    out = nx.add(out, nx.scale(nx.sub(e_insty, e_in), scales.s_sty))
    return nx.add(out, nx.scale(nx.sub(e_full, e_insty), scales.s_t))


def cfg_estimate(model, params, z_t: np.ndarray, t: int, cond: ConditioningTriple, scales: GuidanceScales):
    if cond.pattern != "full":
        raise ValueError(f"guided estimate needs a full conditioning, got pattern {cond.pattern!r}")
    inp, sty, instr = stack_conditions([cond], z_t.shape)
    return nx.getitem(cfg_batch(model, params, z_t[None], np.array([t]), inp, sty, instr, scales), 0)


def eps_batch(model, params, z, t, inp, sty, instr, scales: GuidanceScales, guided: bool = True):
    if guided:
        return cfg_batch(model, params, z, t, inp, sty, instr, scales)
    return model.forward_batch(params, z, np.asarray(t), inp, sty, instr)


def _check_probs(probs) -> tuple[float, float, float]:
    probs = tuple(float(p) for p in probs)
    if len(probs) != 3 or any(not math.isfinite(p) or p < 0 for p in probs) or sum(probs) > 1:
        raise ValueError(f"dropout probabilities must be three non-negative numbers summing to at most 1, got {probs}")
    return probs


def dropout_pattern(rng: np.random.Generator, probs=DEFAULT_DROPOUT) -> str:
    """Draw one of the nested patterns: all-null, input-only, input-style with the
    given probabilities, full otherwise."""
    p = _check_probs(probs)
    u = rng.random()
    acc = 0.0
    for pattern, pk in zip(PATTERNS[:3], p):
        acc += pk
        if u < acc:
            return pattern
    return "full"
