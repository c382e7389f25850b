import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from styledit import netpbm
from styledit.scoring import cosine_distance, semantic_embed, semantic_score
from styledit.synth import (
    BANK_SIZE,
    CONCEPTS,
    GOLD,
    Scene,
    StyleBank,
    apply_concept,
    build_style_bank,
    generate_scene,
    make_dataset,
    speckle_fraction,
)

seeds = st.integers(0, 2**63 - 1)


def test_scene_is_deterministic():
    a, b = generate_scene(5), generate_scene(5)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.region_mask, b.region_mask)


def test_seed_zero_mask_fraction():
    s = generate_scene(0)
    frac = s.region_mask.sum() / s.region_mask.size
    assert 0.10 <= frac <= 0.60


def test_even_seed_is_bottom_band():
    s = generate_scene(4)
    rows = np.nonzero(s.region_mask.any(axis=1))[0]
    assert rows.max() == s.region_mask.shape[0] - 1
    assert s.region_mask[rows].all()


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_scene_invariants(seed):
    s = generate_scene(seed)
    assert np.isfinite(s.image).all()
    assert s.image.min() >= -1.0 and s.image.max() <= 1.0
    assert set(np.unique(s.region_mask)) <= {0.0, 1.0}
    assert 0.10 <= s.mask_fraction <= 0.60


@pytest.mark.parametrize("concept", CONCEPTS)
def test_bank_has_five_exemplars(concept):
    bank = build_style_bank(concept, 3)
    assert len(bank) == BANK_SIZE == 5
    assert all(ex.mask.sum() > 0 for ex in bank.exemplars)
    again = build_style_bank(concept, 3)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(bank.exemplars, again.exemplars))


def test_bank_size_enforced_and_unknown_concept():
    with pytest.raises(ValueError):
        StyleBank("gold", 0, build_style_bank("gold", 0).exemplars[:4])
    with pytest.raises(ValueError):
        build_style_bank("velvet", 0)


@pytest.mark.parametrize("seed", range(5))
def test_dense_snow_bank_is_denser(seed):
    def bank_density(c):
        b = build_style_bank(c, seed)
        return np.mean([speckle_fraction(e.image, e.mask) for e in b.exemplars])

    assert bank_density("dense-snow") > bank_density("sparse-snow")


def test_empty_region_leaves_input_unchanged():
    s = generate_scene(2)
    empty = Scene(s.image, np.zeros_like(s.region_mask), s.seed)
    out = apply_concept(empty, build_style_bank("wood", 0)[0], np.random.default_rng(0))
    assert np.array_equal(out, s.image)


def test_gold_shifts_masked_mean_towards_gold():
    s = generate_scene(7)
    inside = s.region_mask > 0
    out = apply_concept(s, build_style_bank("gold", 0)[1], np.random.default_rng(0))
    before = np.linalg.norm(s.image[inside].mean(axis=0) - GOLD)
    after = np.linalg.norm(out[inside].mean(axis=0) - GOLD)
    assert after < before


@settings(max_examples=40, deadline=None)
@given(seeds, st.sampled_from(CONCEPTS), st.integers(0, 4))
def test_edit_is_exact_outside_mask(seed, concept, k):
    s = generate_scene(seed)
    out = apply_concept(s, build_style_bank(concept, 1)[k], np.random.default_rng(seed % 1000))
    outside = s.region_mask == 0
    assert np.abs(out[outside] - s.image[outside]).max(initial=0.0) == 0.0


def test_dataset_cycles_concepts_and_exemplars():
    ds = make_dataset(20, 0)
    counts = {c: sum(ex.concept == c for ex in ds) for c in CONCEPTS}
    assert counts == {c: 5 for c in CONCEPTS}
    for c in CONCEPTS:
        assert [ex.exemplar_index for ex in ds if ex.concept == c] == [0, 1, 2, 3, 4]
    ds2 = make_dataset(20, 0)
    assert all(np.array_equal(a.target, b.target) for a, b in zip(ds, ds2))
    with pytest.raises(ValueError):
        make_dataset(0, 0)


def test_dataset_targets_match_input_outside_mask():
    for ex in make_dataset(24, 9):
        outside = ex.region_mask == 0
        assert np.array_equal(ex.target[outside], ex.input_image[outside])


def test_oracle_target_scores_no_worse_than_input():
    for ex in make_dataset(16, 4):
        oracle = semantic_score(ex.target, ex.input_image, ex.style_image, ex.region_mask, ex.style_mask)
        unedited = semantic_score(ex.input_image, ex.input_image, ex.style_image, ex.region_mask, ex.style_mask)
        assert oracle <= unedited


def test_snow_banks_are_separable_in_embedding_space():
    within, across = [], []
    for seed in range(4):
        sparse = [semantic_embed(e.image, e.mask) for e in build_style_bank("sparse-snow", seed).exemplars]
        dense = [semantic_embed(e.image, e.mask) for e in build_style_bank("dense-snow", seed).exemplars]
        across += [cosine_distance(d, s) for d in dense for s in sparse]
        within += [cosine_distance(a, b) for i, a in enumerate(dense) for b in dense[i + 1 :]]
    assert np.mean(across) > np.mean(within)


def test_scene_exports_as_netpbm(tmp_path):
    s = generate_scene(3)
    netpbm.write_ppm(tmp_path / "s.ppm", s.image)
    netpbm.write_pgm(tmp_path / "m.pgm", s.region_mask)
    back = netpbm.read_ppm(tmp_path / "s.ppm")
    assert np.abs(back - s.image).max() <= 1.0 / 127.5
    assert np.array_equal(netpbm.read_pgm(tmp_path / "m.pgm"), s.region_mask)
