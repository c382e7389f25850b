import numpy as np
import pytest

from styledit import numerics as nx
from styledit.denoiser import (
    PATTERNS,
    ConditioningTriple,
    Denoiser,
    DenoiserConfig,
    ReducedDenoiser,
    null_of,
)
from styledit.synth import make_dataset

MODEL = Denoiser()


@pytest.fixture(scope="module")
def params():
    return MODEL.init_params(0)


def _cond(seed, instruction=1):
    rng = np.random.default_rng(seed)
    return ConditioningTriple(rng.uniform(-1, 1, MODEL.image_shape), rng.uniform(-1, 1, MODEL.image_shape), instruction)


def test_style_paths_start_at_zero(params):
    assert not params["conv1.k"][:, MODEL.style_channel_slice()].any()
    assert not params["attn.wq"][3:6].any()
    assert params["embed"].any()
    assert MODEL.init_params(0).equal(params)


def test_output_invariant_to_style_at_init(params):
    rng = np.random.default_rng(3)
    x = rng.normal(size=MODEL.image_shape)
    a = _cond(1)
    b = ConditioningTriple(a.input_image, rng.uniform(-1, 1, MODEL.image_shape), a.instruction)
    out_a = MODEL.forward(params, x, 17, a)
    assert out_a.shape == x.shape
    assert np.array_equal(out_a, MODEL.forward(params, x, 17, b))


def test_forward_is_deterministic(params):
    x = np.random.default_rng(4).normal(size=MODEL.image_shape)
    c = _cond(5)
    assert np.array_equal(MODEL.forward(params, x, 3, c), MODEL.forward(params, x, 3, c))


def test_forward_rejects_wrong_shape(params):
    with pytest.raises(nx.ShapeError):
        MODEL.forward_batch(params, np.zeros((1, 8, 8, 3)), np.array([1]), np.zeros((1, 8, 8, 3)), np.zeros((1, 8, 8, 3)), np.zeros(1, int))


def test_instruction_matters_after_one_step(params):
    from styledit.diffusion import build_schedule, ddpm_loss

    sched = build_schedule(50, 1e-4, 0.1)
    batch = make_dataset(4, 0)
    _, g = nx.reverse_gradient(lambda p: ddpm_loss(MODEL, p, batch, sched, np.random.default_rng(0), (0, 0, 0)), params)
    stepped = nx.ParamStore({k: params[k] - 0.05 * g[k] for k in params})
    x = np.random.default_rng(1).normal(size=MODEL.image_shape)
    c = _cond(2)
    with_instr = MODEL.forward(stepped, x, 20, c)
    without = MODEL.forward(stepped, x, 20, null_of(c, "input-style"))
    assert not np.array_equal(with_instr, without)


def test_style_path_opens_after_training(params):
    from styledit.diffusion import build_schedule, ddpm_loss

    sched = build_schedule(50, 1e-4, 0.1)
    batch = make_dataset(4, 0)
    _, g = nx.reverse_gradient(lambda p: ddpm_loss(MODEL, p, batch, sched, np.random.default_rng(0), (0, 0, 0)), params)
    assert np.abs(g["conv1.k"][:, MODEL.style_channel_slice()]).sum() > 0


def test_null_of_patterns():
    c = _cond(6, 2)
    assert null_of(c, "full").input_image is c.input_image
    empty = null_of(c, "all-null")
    assert empty.input_image is None and empty.style_image is None and empty.instruction is None
    only = null_of(c, "input-only")
    assert only.input_image is c.input_image and only.style_image is None and only.instruction is None
    assert [null_of(c, p).pattern for p in PATTERNS] == list(PATTERNS)
    with pytest.raises(ValueError):
        null_of(c, "style-only")


def test_non_nested_patterns_rejected():
    img = np.zeros(MODEL.image_shape)
    with pytest.raises(ValueError):
        ConditioningTriple(None, img, 1)
    with pytest.raises(ValueError):
        ConditioningTriple(img, None, 1)
    with pytest.raises(ValueError):
        ConditioningTriple(img, img, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(hidden=0)
    with pytest.raises(ValueError):
        DenoiserConfig(vocab=2)


def test_check_params_detects_layout():
    small = Denoiser(DenoiserConfig(hidden=8))
    with pytest.raises(ValueError):
        MODEL.check_params(small.init_params(0))


def test_reduced_net_is_small_and_differentiable():
    net = ReducedDenoiser()
    p = net.init_params(0)
    assert p.size() <= 8
    rng = np.random.default_rng(0)
    x, inp, sty = (rng.normal(size=(3, 2, 2, 1)) for _ in range(3))
    t = np.array([1, 3, 4])
    instr = np.array([1, 0, 1])
    w = rng.normal(size=(3, 2, 2, 1))
    report = nx.finite_diff_check(lambda q: nx.sum_(nx.mul(net.forward_batch(q, x, t, inp, sty, instr), w)), p)
    assert report.passed
