"""Programmatic feedback: structural and semantic losses, per-batch advantages
and pairwise ranking. Both losses are lower-is-better."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ScoreConfig:
    alpha: float = 1.0
    lam: float = 0.5
    eps_adv: float = 1e-8

    def __post_init__(self):
        if not (self.alpha >= 0 and self.lam >= 0 and self.eps_adv > 0):
            raise ValueError(f"invalid score config: alpha={self.alpha}, lambda={self.lam}, eps={self.eps_adv}")


@dataclass(frozen=True)
class ScoreReport:
    struct_loss: float
    sem_loss: float
    adv_struct: float
    adv_sem: float
    total: float

    @property
    def raw_total(self) -> float:
        return self.struct_loss + self.sem_loss


def depth_proxy(image: np.ndarray) -> np.ndarray:
    """Gradient magnitude of the channel mean; forward differences, zero on the last row/column."""
    if image.ndim != 3 or image.shape[-1] < 1:
        raise ValueError(f"expected an H x W x C image, got {image.shape}")
    g = image.mean(axis=-1)
    dx = np.zeros_like(g)
    dy = np.zeros_like(g)
    dx[:, :-1] = g[:, 1:] - g[:, :-1]
    dy[:-1, :] = g[1:, :] - g[:-1, :]
    return np.sqrt(dx * dx + dy * dy)


def semantic_embed(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-channel mean and population std over the masked pixels; zeros for an empty mask."""
    inside = mask > 0
    c = image.shape[-1]
    if not inside.any():
        return np.zeros(2 * c)
    px = image[inside]
    return np.concatenate([px.mean(axis=0), px.std(axis=0)])


@dataclass(frozen=True)
class Scorer:
    """Structure extractor and region encoder used by the losses."""

    structure: Callable[[np.ndarray], np.ndarray] = depth_proxy
    embed: Callable[[np.ndarray, np.ndarray], np.ndarray] = semantic_embed


DEFAULT_SCORER = Scorer()


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"cosine distance of vectors with lengths {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


def structural_score(i_in: np.ndarray, i_gen: np.ndarray, scorer: Scorer = DEFAULT_SCORER) -> float:
    if i_in.shape != i_gen.shape:
        raise ValueError(f"structural score on mismatched shapes {i_in.shape} vs {i_gen.shape}")
    return float(np.abs(scorer.structure(i_in) - scorer.structure(i_gen)).mean())


def reconstruction_term(i_gen: np.ndarray, i_in: np.ndarray, m_in: np.ndarray) -> float:
    """Out-of-mask squared error averaged over every pixel and channel."""
    keep = (1.0 - m_in)[..., None]
    return float(np.mean(keep * (i_in - i_gen) ** 2))


def semantic_score(
    i_gen: np.ndarray,
    i_in: np.ndarray,
    i_sty: np.ndarray,
    m_in: np.ndarray,
    m_sty: np.ndarray,
    lam: float = 0.5,
    scorer: Scorer = DEFAULT_SCORER,
) -> float:
    if i_gen.shape != i_in.shape or m_in.shape != i_in.shape[:2] or m_sty.shape != i_sty.shape[:2]:
        raise ValueError(
            f"semantic score shapes: gen {i_gen.shape}, input {i_in.shape}, style {i_sty.shape}, "
            f"masks {m_in.shape}, {m_sty.shape}"
        )
    d = cosine_distance(scorer.embed(i_gen, m_in), scorer.embed(i_sty, m_sty))
    return d + lam * reconstruction_term(i_gen, i_in, m_in)


def batch_advantages(losses, eps: float = 1e-8) -> np.ndarray:
    losses = np.asarray(losses, dtype=float)
    if losses.ndim != 1 or losses.size < 2:
        raise ValueError(f"advantages need a batch of at least 2 losses, got shape {losses.shape}")
    d = losses - losses.mean()
    d -= d.mean()  # second pass removes the rounding left by the first
    return d / math.sqrt((d * d).mean() + eps)


def combine_and_rank(struct_losses, sem_losses, config: ScoreConfig = ScoreConfig()):
    """Rank each pair of samples.

    ``struct_losses`` and ``sem_losses`` are N x 2 (pair, member). Advantages are
    normalised over all 2N samples jointly. Returns (winner index per pair,
    N x 2 nested list of ScoreReport).
    """
    s = np.asarray(struct_losses, dtype=float)
    m = np.asarray(sem_losses, dtype=float)
    if s.shape != m.shape or s.ndim != 2 or s.shape[1] != 2:
        raise ValueError(f"expected matching N x 2 loss arrays, got {s.shape} and {m.shape}")
    a_s = batch_advantages(s.ravel(), config.eps_adv).reshape(s.shape)
    a_m = batch_advantages(m.ravel(), config.eps_adv).reshape(m.shape)
    total = a_s + config.alpha * a_m
    winners = np.zeros(len(s), dtype=np.int64)
    reports = []
    for i in range(len(s)):
        if total[i, 1] < total[i, 0] or (total[i, 1] == total[i, 0] and s[i, 1] < s[i, 0]):
            winners[i] = 1
        reports.append([ScoreReport(s[i, k], m[i, k], a_s[i, k], a_m[i, k], total[i, k]) for k in range(2)])
    return winners, reports


def score_samples(gens, inputs, styles, in_masks, style_masks, config: ScoreConfig = ScoreConfig(), scorer: Scorer = DEFAULT_SCORER):
    """Raw (structural, semantic) losses for stacked samples."""
    struct = np.array([structural_score(i, g, scorer) for i, g in zip(inputs, gens)])
    sem = np.array(
        [semantic_score(g, i, s, mi, ms, config.lam, scorer) for g, i, s, mi, ms in zip(gens, inputs, styles, in_masks, style_masks)]
    )
    return struct, sem
