"""Synthetic editing tasks: block scenes, concept style banks and oracle edits.

Scenes are H x W x 3 float images in [-1, 1]. The editable region is always
painted with the flat ``ROAD`` colour, so a local model can find it from the
input image alone; every other colour in the scene keeps its distance from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IMAGE_SIZE = 16
CHANNELS = 3

ROAD = np.array([-0.2, -0.2, -0.2])
SNOW = np.array([0.9, 0.9, 0.95])
GOLD = np.array([0.85, 0.6, -0.5])
WOOD = np.array([0.3, -0.1, -0.5])
_MIN_COLOR_GAP = 0.35

CONCEPTS = ("sparse-snow", "dense-snow", "gold", "wood")
NULL_INSTRUCTION = 0
INSTRUCTIONS = {"add-snow": 1, "make-gold": 2, "make-wood": 3}
CONCEPT_INSTRUCTION = {"sparse-snow": 1, "dense-snow": 1, "gold": 2, "wood": 3}
BANK_SIZE = 5

# speckle density bands
_SNOW_DENSITY = {"sparse-snow": (0.06, 0.14), "dense-snow": (0.40, 0.55)}
SPECKLE_THRESHOLD = 0.5


@dataclass
class Scene:
    image: np.ndarray
    region_mask: np.ndarray
    seed: int

    @property
    def mask_fraction(self) -> float:
        return float(self.region_mask.mean())


@dataclass
class Exemplar:
    concept: str
    index: int
    params: dict
    image: np.ndarray
    mask: np.ndarray


@dataclass
class StyleBank:
    concept: str
    seed: int
    exemplars: list[Exemplar]

    def __post_init__(self):
        if len(self.exemplars) != BANK_SIZE:
            raise ValueError(f"a style bank holds exactly {BANK_SIZE} exemplars, got {len(self.exemplars)}")

    def __len__(self) -> int:
        return len(self.exemplars)

    def __getitem__(self, i: int) -> Exemplar:
        return self.exemplars[i]


@dataclass
class EditExample:
    scene: Scene
    instruction: int
    concept: str
    exemplar_index: int
    style_image: np.ndarray = field(repr=False)
    style_mask: np.ndarray = field(repr=False)
    target: np.ndarray = field(repr=False)

    @property
    def input_image(self) -> np.ndarray:
        return self.scene.image

    @property
    def region_mask(self) -> np.ndarray:
        return self.scene.region_mask


def _far_color(rng: np.random.Generator) -> np.ndarray:
    while True:
        c = rng.uniform(-0.9, 0.9, size=CHANNELS)
        if np.abs(c - ROAD).max() >= _MIN_COLOR_GAP:
            return c


def generate_scene(seed: int, size: int = IMAGE_SIZE) -> Scene:
    """Background plus 2-5 flat rectangles; the region is the bottom-third band
    for even seeds and a random rectangle for odd seeds."""
    seed = int(seed)
    rng = np.random.default_rng([seed, 11])
    img = np.empty((size, size, CHANNELS))
    img[:] = _far_color(rng)
    for _ in range(int(rng.integers(2, 6))):
        h, w = rng.integers(3, size // 2 + 1, size=2)
        y, x = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        img[y : y + h, x : x + w] = _far_color(rng)

    mask = np.zeros((size, size))
    if seed % 2 == 0:
        mask[size - size // 3 :, :] = 1.0
    else:
        npix = size * size
        while True:
            h, w = rng.integers(3, size + 1, size=2)
            if 0.10 <= h * w / npix <= 0.60:
                break
        y, x = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        mask[y : y + h, x : x + w] = 1.0
    img[mask > 0] = ROAD
    return Scene(np.clip(img, -1.0, 1.0), mask, seed)


def _exemplar_params(concept: str, rng: np.random.Generator) -> dict:
    if concept in _SNOW_DENSITY:
        lo, hi = _SNOW_DENSITY[concept]
        return {"density": float(rng.uniform(lo, hi))}
    if concept == "gold":
        return {"color": (GOLD + rng.uniform(-0.08, 0.08, size=3)).tolist(), "noise": 0.05}
    if concept == "wood":
        return {
            "color": (WOOD + rng.uniform(-0.05, 0.05, size=3)).tolist(),
            "period": int(rng.integers(2, 5)),
            "contrast": 0.25,
            "noise": 0.03,
        }
    raise ValueError(f"unknown concept {concept!r}; known: {', '.join(CONCEPTS)}")


def render_texture(concept: str, params: dict, base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Full-frame realisation of a concept texture over ``base``."""
    h, w, _ = base.shape
    if concept in _SNOW_DENSITY:
        flakes = rng.random((h, w)) < params["density"]
        out = base.copy()
        out[flakes] = SNOW
        return out
    if concept == "gold":
        return np.asarray(params["color"]) + rng.normal(0.0, params["noise"], size=base.shape)
    if concept == "wood":
        phase = int(rng.integers(0, params["period"] * 2))
        dark = (((np.arange(h) + phase) // params["period"]) % 2).astype(float)
        out = np.asarray(params["color"]) - params["contrast"] * dark[:, None, None]
        out = np.broadcast_to(out, base.shape) + rng.normal(0.0, params["noise"], size=base.shape)
        return out
    raise ValueError(f"unknown concept {concept!r}")


def build_style_bank(concept: str, seed: int, size: int = IMAGE_SIZE) -> StyleBank:
    if concept not in CONCEPTS:
        raise ValueError(f"unknown concept {concept!r}; known: {', '.join(CONCEPTS)}")
    cidx = CONCEPTS.index(concept)
    prng = np.random.default_rng([int(seed), 23, cidx])
    exemplars = []
    base = np.broadcast_to(ROAD, (size, size, CHANNELS)).copy()
    for k in range(BANK_SIZE):
        params = _exemplar_params(concept, prng)
        img = render_texture(concept, params, base, np.random.default_rng([int(seed), 29, cidx, k]))
        exemplars.append(Exemplar(concept, k, params, np.clip(img, -1.0, 1.0), np.ones((size, size))))
    return StyleBank(concept, int(seed), exemplars)


def apply_concept(scene: Scene, exemplar: Exemplar, rng: np.random.Generator) -> np.ndarray:
    """Oracle edit: texture inside the region, input untouched outside."""
    tex = np.clip(render_texture(exemplar.concept, exemplar.params, scene.image, rng), -1.0, 1.0)
    inside = scene.region_mask > 0
    out = scene.image.copy()
    out[inside] = tex[inside]
    return out


def speckle_fraction(image: np.ndarray, mask: np.ndarray, threshold: float = SPECKLE_THRESHOLD) -> float:
    """Fraction of masked pixels whose channel mean exceeds ``threshold``."""
    inside = mask > 0
    if not inside.any():
        return 0.0
    return float((image.mean(axis=-1)[inside] > threshold).mean())


def scene_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1, np.uint64)[0])


def make_dataset(
    n: int,
    seed: int,
    concepts: tuple[str, ...] = CONCEPTS,
    bank_seed: int | None = None,
    size: int = IMAGE_SIZE,
) -> list[EditExample]:
    """``n`` examples cycling over ``concepts``; each concept cycles its 5 exemplars in turn."""
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    banks = {c: build_style_bank(c, seed if bank_seed is None else bank_seed, size) for c in concepts}
    out = []
    for i in range(n):
        concept = concepts[i % len(concepts)]
        k = (i // len(concepts)) % BANK_SIZE
        ex = banks[concept][k]
        scene = generate_scene(scene_seed(seed, i), size)
        target = apply_concept(scene, ex, np.random.default_rng([int(seed), i, 31]))
        out.append(EditExample(scene, CONCEPT_INSTRUCTION[concept], concept, k, ex.image, ex.mask, target))
    return out
