"""Held-out edit evaluation and sim-to-real consistency metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .denoiser import ConditioningTriple
from .diffusion import initial_noise, rollout
from .scoring import ScoreConfig, reconstruction_term, semantic_score, structural_score
from .synth import speckle_fraction


@dataclass
class PolicyTable:
    labels: list[str]
    real: np.ndarray
    sim: np.ndarray

    def __post_init__(self):
        self.real = np.asarray(self.real, dtype=float)
        self.sim = np.asarray(self.sim, dtype=float)
        if not (len(self.labels) == len(self.real) == len(self.sim)):
            raise ValueError("policy table columns have different lengths")
        if len(self.labels) < 2:
            raise ValueError("policy table needs at least two policies")
        for name, col in (("real", self.real), ("sim", self.sim)):
            if np.any(~np.isfinite(col)) or np.any(col < 0) or np.any(col > 1):
                raise ValueError(f"{name} success rates must lie in [0, 1]")


def pearson_r(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError(f"pearson_r needs two equal-length 1-D arrays of length >= 2, got {a.shape} and {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    if sa == 0 and sb == 0:
        raise ValueError("Pearson correlation is undefined when both arrays are constant")
    if sa == 0 or sb == 0:
        return 0.0
    return float(np.clip((da * db).sum() / (sa * sb), -1.0, 1.0))


def mmrv(real, sim) -> float:
    """Mean over policies of the largest real-rate gap whose sim ordering is reversed."""
    real, sim = np.asarray(real, dtype=float), np.asarray(sim, dtype=float)
    if real.shape != sim.shape or real.ndim != 1 or real.size < 2:
        raise ValueError(f"mmrv needs two equal-length 1-D arrays of length >= 2, got {real.shape} and {sim.shape}")
    gap = np.abs(real[:, None] - real[None, :])
    reversed_ = (real[:, None] < real[None, :]) != (sim[:, None] < sim[None, :])
    strict = real[:, None] != real[None, :]
    violation = np.where(reversed_ & strict, gap, 0.0)
    return float(violation.max(axis=1).mean())


def read_policy_table(text: str) -> PolicyTable:
    """Parse ``label,real,sim`` CSV text."""
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError("row 0: empty table")
    header = [c.strip() for c in rows[0]]
    if header != ["label", "real", "sim"]:
        raise ValueError(f"row 0: header must be label,real,sim, got {','.join(header)}")
    labels, real, sim = [], [], []
    for i, r in enumerate(rows[1:], start=1):
        if len(r) != 3:
            raise ValueError(f"row {i}: expected 3 columns, got {len(r)}")
        labels.append(r[0].strip())
        for col, name, dest in ((1, "real", real), (2, "sim", sim)):
            try:
                dest.append(float(r[col]))
            except ValueError:
                raise ValueError(f"row {i}, column {name}: not a number: {r[col]!r}") from None
    if not labels:
        raise ValueError("row 1: table has no policy rows")
    return PolicyTable(labels, np.array(real), np.array(sim))


def table_metrics(table: PolicyTable) -> dict:
    return {"n_policies": len(table.labels), "pearson_r": pearson_r(table.real, table.sim), "mmrv": mmrv(table.real, table.sim)}


def eval_seed(base_seed: int, i: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), 601, i]).generate_state(1)[0])


def sample_edits(model, params, tasks, scales, sched, seed: int = 0, guided: bool = True, chunk: int = 32) -> list[np.ndarray]:
    """One clamped guided sample per task, each with its own fixed seed."""
    outs = []
    for start in range(0, len(tasks), chunk):
        part = tasks[start : start + chunk]
        seeds = [eval_seed(seed, start + j) for j in range(len(part))]
        conds = [ConditioningTriple(ex.input_image, ex.style_image, ex.instruction) for ex in part]
        x_T = np.stack([initial_noise(s, model.image_shape) for s in seeds])
        trajs = rollout(model, params, x_T, conds, seeds, [0] * len(part), scales, sched, guided)
        outs.extend(tr.clamped_final() for tr in trajs)
    return outs


def score_edits(tasks, edits, score_cfg: ScoreConfig = ScoreConfig()) -> dict:
    rows = []
    for i, (ex, out) in enumerate(zip(tasks, edits)):
        struct = structural_score(ex.input_image, out)
        sem = semantic_score(out, ex.input_image, ex.style_image, ex.region_mask, ex.style_mask, score_cfg.lam)
        rows.append(
            {
                "task": i,
                "concept": ex.concept,
                "struct": struct,
                "sem": sem,
                "total": struct + score_cfg.alpha * sem,
                "out_of_mask_msd": reconstruction_term(out, ex.input_image, ex.region_mask) * out.size / max((1.0 - ex.region_mask).sum() * out.shape[-1], 1.0),
                "speckle": speckle_fraction(out, ex.region_mask),
            }
        )
    keys = ("struct", "sem", "total", "out_of_mask_msd", "speckle")
    means = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    return {"rows": rows, "means": means}


def eval_report(model, params, tasks, scales, sched, score_cfg: ScoreConfig = ScoreConfig(), seed: int = 0, guided: bool = True) -> dict:
    if not tasks:
        raise ValueError("empty task set")
    return score_edits(tasks, sample_edits(model, params, tasks, scales, sched, seed, guided), score_cfg)
