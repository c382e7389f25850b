"""Shared fixtures: a tiny task family for the reduced network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from styledit.denoiser import ConditioningTriple, ReducedDenoiser
from styledit.diffusion import build_schedule

TINY_SHAPE = (2, 2, 1)


@dataclass
class TinyTask:
    input_image: np.ndarray
    style_image: np.ndarray
    instruction: int
    region_mask: np.ndarray
    style_mask: np.ndarray

    @property
    def cond(self) -> ConditioningTriple:
        return ConditioningTriple(self.input_image, self.style_image, self.instruction)


def tiny_tasks(n: int, seed: int) -> list[TinyTask]:
    rng = np.random.default_rng([seed, 77])
    out = []
    for _ in range(n):
        mask = np.zeros(TINY_SHAPE[:2])
        mask[1] = 1.0
        out.append(TinyTask(rng.uniform(-1, 1, TINY_SHAPE), rng.uniform(-1, 1, TINY_SHAPE), 1, mask, np.ones(TINY_SHAPE[:2])))
    return out


def tiny_setup(T: int = 4):
    return ReducedDenoiser(TINY_SHAPE, steps=T), build_schedule(T, 0.05, 0.3)
