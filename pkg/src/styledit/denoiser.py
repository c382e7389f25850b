"""Conditional noise-prediction networks.

Images are H x W x C at the public surface and C x H x W inside the conv
stack. Both networks expose ``forward_batch(params, x, t, inp, sty, instr)``
taking N-stacked images with nulls already replaced (zero image, id 0); the
sampler, guidance and trainers only talk to that method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ParamStore
from .synth import CHANNELS, IMAGE_SIZE, INSTRUCTIONS, NULL_INSTRUCTION, CONCEPTS

PATTERNS = ("all-null", "input-only", "input-style", "full")
_PRESENT = {
    "all-null": (False, False, False),
    "input-only": (True, False, False),
    "input-style": (True, True, False),
    "full": (True, True, True),
}


@dataclass(frozen=True, eq=False)
class ConditioningTriple:
    input_image: np.ndarray | None
    style_image: np.ndarray | None
    instruction: int | None

    def __post_init__(self):
        present = (self.input_image is not None, self.style_image is not None, self.instruction is not None)
        if present not in _PRESENT.values():
            raise ValueError(f"conditioning null pattern {present} is not one of the nested patterns")
        if self.instruction is not None and self.instruction == NULL_INSTRUCTION:
            raise ValueError("instruction id 0 is reserved for the null instruction")

    @property
    def pattern(self) -> str:
        present = (self.input_image is not None, self.style_image is not None, self.instruction is not None)
        return next(k for k, v in _PRESENT.items() if v == present)


def null_of(cond: ConditioningTriple, pattern: str) -> ConditioningTriple:
    if pattern not in _PRESENT:
        raise ValueError(f"unknown conditioning pattern {pattern!r}; expected one of {PATTERNS}")
    keep_in, keep_sty, keep_t = _PRESENT[pattern]
    return ConditioningTriple(
        cond.input_image if keep_in else None,
        cond.style_image if keep_sty else None,
        cond.instruction if keep_t else None,
    )


def stack_conditions(conds: list[ConditioningTriple], shape: tuple[int, int, int]):
    """Stack triples into (inp, sty, instr) arrays with nulls as zeros / id 0."""
    n = len(conds)
    inp = np.zeros((n, *shape))
    sty = np.zeros((n, *shape))
    instr = np.zeros(n, dtype=np.int64)
    for i, c in enumerate(conds):
        if c.input_image is not None:
            inp[i] = c.input_image
        if c.style_image is not None:
            sty[i] = c.style_image
        if c.instruction is not None:
            instr[i] = c.instruction
    return inp, sty, instr


def apply_pattern(pattern: str, inp: np.ndarray, sty: np.ndarray, instr: np.ndarray):
    """Null out the slots a pattern drops, on stacked arrays."""
    keep_in, keep_sty, keep_t = _PRESENT[pattern]
    return (
        inp if keep_in else np.zeros_like(inp),
        sty if keep_sty else np.zeros_like(sty),
        instr if keep_t else np.zeros_like(instr),
    )


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=float)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class DenoiserConfig:
    height: int = IMAGE_SIZE
    width: int = IMAGE_SIZE
    channels: int = CHANNELS
    hidden: int = 32
    vocab: int = len(INSTRUCTIONS) + 1
    embed_dim: int = 16
    time_dim: int = 16
    attn_dim: int = 8
    attn_out: int = 4

    def __post_init__(self):
        for name in ("height", "width", "channels", "hidden", "vocab", "embed_dim", "time_dim", "attn_dim", "attn_out"):
            if getattr(self, name) <= 0:
                raise ValueError(f"denoiser config: {name} must be positive")
        if self.vocab < len(CONCEPTS):
            raise ValueError(f"instruction vocabulary {self.vocab} smaller than the {len(CONCEPTS)} registered concepts")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


class Denoiser:
    """Cross-attention over the instruction, channel concat, three conv blocks."""

    def __init__(self, config: DenoiserConfig | None = None):
        self.config = config or DenoiserConfig()

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.config.image_shape

    @property
    def in_channels(self) -> int:
        c = self.config
        return 3 * c.channels + c.attn_out

    def style_channel_slice(self) -> slice:
        c = self.config.channels
        return slice(2 * c, 3 * c)

    def init_params(self, seed: int) -> ParamStore:
        c = self.config
        rng = np.random.default_rng([int(seed), 101])

        def uni(shape, fan_in):
            b = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-b, b, size=shape)

        p = {}
        pair = 2 * c.channels
        wq = uni((pair, c.attn_dim), pair)
        wq[c.channels :] = 0.0  # style half of the query
        p["attn.wq"] = wq
        p["attn.bq"] = uni((c.attn_dim,), pair)
        p["attn.wk"] = uni((c.embed_dim, c.attn_dim), c.embed_dim)
        p["attn.wv"] = uni((c.embed_dim, c.attn_out), c.embed_dim)
        p["attn.sink"] = uni((c.attn_dim,), c.attn_dim)
        p["embed"] = rng.normal(0.0, 1.0, size=(c.vocab, c.embed_dim))
        k1 = uni((c.hidden, self.in_channels, 3, 3), 9 * self.in_channels)
        k1[:, self.style_channel_slice()] = 0.0
        p["conv1.k"] = k1
        p["conv1.b"] = uni((c.hidden,), 9 * self.in_channels)
        p["time.w"] = uni((c.time_dim, c.hidden), c.time_dim)
        p["time.b"] = uni((c.hidden,), c.time_dim)
        for name in ("conv2", "conv3"):
            p[f"{name}.k"] = uni((c.hidden, c.hidden, 3, 3), 9 * c.hidden)
            p[f"{name}.b"] = uni((c.hidden,), 9 * c.hidden)
        p["out.k"] = uni((c.channels, c.hidden, 3, 3), 9 * c.hidden)
        p["out.b"] = np.zeros(c.channels)
        return ParamStore(p)

    def check_params(self, params) -> None:
        ref = self.init_params(0).shapes()
        got = {k: tuple(nx.value_of(params[k]).shape) for k in params}
        if ref != got:
            raise ValueError(f"parameter layout does not match denoiser config: expected {ref}, got {got}")

    def forward_batch(self, params, x, t, inp, sty, instr):
        c = self.config
        n = x.shape[0]
        h, w, ch = c.height, c.width, c.channels
        if x.shape[1:] != (h, w, ch) or inp.shape != x.shape or sty.shape != x.shape:
            raise nx.ShapeError(f"image shape mismatch: x {x.shape}, input {inp.shape}, style {sty.shape}, config {(h, w, ch)}")
        hw = h * w

        # cross-attention: per-pixel queries from (input, style), one instruction
        # token plus a learned sink with zero value
        pair = np.concatenate([inp, sty], axis=-1).reshape(n, hw, 2 * ch)
        q = nx.add(nx.matmul(pair, params["attn.wq"]), nx.expand(nx.reshape(params["attn.bq"], (1, 1, c.attn_dim)), (n, hw, c.attn_dim)))
        e = nx.take_rows(params["embed"], instr)
        k = nx.sub(nx.matmul(e, params["attn.wk"]), nx.expand(nx.reshape(params["attn.sink"], (1, c.attn_dim)), (n, c.attn_dim)))
        v = nx.matmul(e, params["attn.wv"])
        logits = nx.scale(nx.matmul(q, nx.reshape(k, (n, c.attn_dim, 1))), 1.0 / math.sqrt(c.attn_dim))
        weight = nx.sigmoid(logits)
        att = nx.mul(nx.expand(weight, (n, hw, c.attn_out)), nx.expand(nx.reshape(v, (n, 1, c.attn_out)), (n, hw, c.attn_out)))
        att = nx.transpose(nx.reshape(att, (n, h, w, c.attn_out)), (0, 3, 1, 2))

        to_chw = (0, 3, 1, 2)
        images = np.concatenate([np.transpose(x, to_chw), np.transpose(inp, to_chw), np.transpose(sty, to_chw)], axis=1)
        z = nx.concat([images, att], axis=1)
        z = nx.silu(nx.conv3x3(z, params["conv1.k"], params["conv1.b"]))
        temb = nx.silu(
            nx.add(
                nx.matmul(timestep_features(t, c.time_dim), params["time.w"]),
                nx.expand(nx.reshape(params["time.b"], (1, c.hidden)), (n, c.hidden)),
            )
        )
        z = nx.add(z, nx.expand(nx.reshape(temb, (n, c.hidden, 1, 1)), (n, c.hidden, h, w)))
        z = nx.silu(nx.conv3x3(z, params["conv2.k"], params["conv2.b"]))
        z = nx.silu(nx.conv3x3(z, params["conv3.k"], params["conv3.b"]))
        z = nx.conv3x3(z, params["out.k"], params["out.b"])
        return nx.transpose(z, (0, 2, 3, 1))

    def forward(self, params, x_t: np.ndarray, t: int, cond: ConditioningTriple):
        inp, sty, instr = stack_conditions([cond], self.image_shape)
        out = self.forward_batch(params, x_t[None], np.array([t]), inp, sty, instr)
        return nx.getitem(out, 0)


class ReducedDenoiser:
    """Six-parameter linear noise predictor for gradient and calibration checks.

    eps = w0*x + w1*inp + w2*sty + w3*(t/T)*x + bias[instr]
    """

    def __init__(self, image_shape: tuple[int, int, int] = (2, 2, 1), steps: int = 4, vocab: int = 2):
        self.image_shape = tuple(image_shape)
        self.steps = steps
        self.vocab = vocab

    def init_params(self, seed: int) -> ParamStore:
        rng = np.random.default_rng([int(seed), 7])
        return ParamStore({"w": rng.uniform(-0.5, 0.5, size=4), "bias": rng.uniform(-0.2, 0.2, size=self.vocab)})

    def check_params(self, params) -> None:
        if {k: tuple(nx.value_of(params[k]).shape) for k in params} != {"w": (4,), "bias": (self.vocab,)}:
            raise ValueError("parameter layout does not match the reduced denoiser")

    def forward_batch(self, params, x, t, inp, sty, instr):
        n = x.shape[0]
        shape = x.shape
        flat = int(np.prod(shape[1:]))
        feats = np.stack(
            [x.reshape(n, flat), inp.reshape(n, flat), sty.reshape(n, flat), (np.asarray(t, float)[:, None] / self.steps) * x.reshape(n, flat)],
            axis=-1,
        )  # n x flat x 4
        lin = nx.matmul(feats, nx.reshape(params["w"], (4, 1)))
        b = nx.expand(nx.reshape(nx.take_rows(nx.reshape(params["bias"], (self.vocab, 1)), instr), (n, 1, 1)), (n, flat, 1))
        return nx.reshape(nx.add(lin, b), shape)

    def forward(self, params, x_t, t, cond):
        inp, sty, instr = stack_conditions([cond], self.image_shape)
        return nx.getitem(self.forward_batch(params, x_t[None], np.array([t]), inp, sty, instr), 0)
