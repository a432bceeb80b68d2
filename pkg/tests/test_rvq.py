import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speechmask.errors import ConfigurationError, DimensionError
from speechmask.numerics import ParamSet, RngState, grad_check
from speechmask.rvq import (
    Codebook,
    LatentTokenGrid,
    MotionSequence,
    PartLayout,
    RvqTrainConfig,
    _decode_bwd,
    _decode_fwd,
    _encode_bwd,
    _encode_fwd,
    init_autoencoder_params,
    mean_predictor_mse,
    quantize,
    reconstruction_mse,
    train_rvq,
)

LAYOUT = PartLayout.from_sizes(4, 8, 8, 4)
SMALL = PartLayout.from_sizes(1, 2, 2, 1)


def _motion(t=64, layout=LAYOUT, seed=0):
    gen = RngState(seed).generator()
    return MotionSequence(gen.normal(size=(t, layout.channels)), layout)


def test_layout_properties():
    assert LAYOUT.channels == 24
    assert LAYOUT.slice_of("hands") == slice(4, 12)
    with pytest.raises(ConfigurationError):
        PartLayout((0, 4), (5, 12), (12, 20), (20, 24))  # gap
    with pytest.raises(ConfigurationError):
        PartLayout((0, 4), (4, 4), (4, 20), (20, 24))  # empty


def test_motion_sequence_validation():
    with pytest.raises(DimensionError):
        MotionSequence(np.zeros((3, 24)), LAYOUT)  # too short
    with pytest.raises(DimensionError):
        MotionSequence(np.zeros((8, 23)), LAYOUT)  # wrong width
    bad = np.zeros((8, 24))
    bad[0, 0] = np.nan
    with pytest.raises(DimensionError):
        MotionSequence(bad, LAYOUT)


@pytest.fixture(scope="module")
def rvq_model(toy_rvq):
    return toy_rvq


def test_encode_downscale(rvq_model):
    assert rvq_model.encode(_motion(64)).shape == (16, rvq_model.dim)
    tiny = MotionSequence(np.ones((4, 24)), LAYOUT)
    assert rvq_model.encode(tiny).shape == (1, rvq_model.dim)


def test_encode_deterministic(rvq_model):
    m = _motion(32, seed=5)
    np.testing.assert_array_equal(rvq_model.encode(m), rvq_model.encode(m))


def test_encode_pad_and_crop(rvq_model):
    m = _motion(66, seed=6)
    latent = rvq_model.encode(m)
    assert latent.shape == (17, rvq_model.dim)  # padded to 68 frames
    recon = rvq_model.reconstruct(m)
    assert recon.frames.shape == (66, 24)


def test_quantize_exact_code_gives_zero_residual():
    gen = RngState(9).generator()
    table = gen.normal(size=(8, 5))
    table[0] = 0.0
    cb = Codebook([table])
    latent = table[3:4].copy()
    residuals = []
    grid = quantize(latent, cb, 1, _collect_residuals=residuals)
    assert grid.indices[0, 0] == 3
    np.testing.assert_allclose(latent - grid.quantized, 0.0, atol=1e-15)


def test_quantize_one_dimensional_hand_case():
    cb = Codebook([np.array([[-1.0], [1.0]])])
    grid = quantize(np.array([[0.2]]), cb, 1)
    assert grid.indices[0, 0] == 1
    np.testing.assert_allclose(0.2 - grid.quantized[0, 0], -0.8)


def test_quantize_tie_break_lowest_index():
    cb = Codebook([np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])])
    grid = quantize(np.array([[1.0, 0.0]]), cb, 1)
    assert grid.indices[0, 0] == 0


def test_quantize_rejects_bad_inputs():
    cb = Codebook([np.zeros((4, 3))])
    with pytest.raises(ConfigurationError):
        quantize(np.zeros((2, 3)), cb, 2)
    with pytest.raises(DimensionError):
        quantize(np.zeros((2, 4)), cb, 1)
    with pytest.raises(ConfigurationError):
        Codebook([])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_residual_norm_non_increasing_with_zero_code(seed):
    gen = np.random.default_rng(seed)
    layers = []
    for _ in range(4):
        table = gen.normal(size=(6, 3))
        table[0] = 0.0  # frozen zero code guarantees monotone residuals
        layers.append(table)
    cb = Codebook(layers)
    latent = gen.normal(size=(5, 3)) * 2
    residuals = []
    quantize(latent, cb, 4, _collect_residuals=residuals)
    final = latent - quantize(latent, cb, 4).quantized
    norms = [np.linalg.norm(r, axis=1) for r in residuals] + [np.linalg.norm(final, axis=1)]
    for a, b in zip(norms, norms[1:]):
        assert np.all(b <= a + 1e-12)


def test_more_layers_never_worse(toy_rvq):
    m = _motion(32, seed=11)
    latent = toy_rvq.encode(m)
    r1 = np.linalg.norm(latent - quantize(latent, toy_rvq.codebook, 1).quantized)
    r6 = np.linalg.norm(latent - quantize(latent, toy_rvq.codebook, 6).quantized)
    assert r6 <= r1 + 1e-12


def test_quantized_equals_sum_of_indexed_codes(toy_rvq):
    latent = toy_rvq.encode(_motion(32, seed=4))
    grid = toy_rvq.tokenize(_motion(32, seed=4))
    summed = np.zeros_like(grid.quantized)
    for layer in range(grid.active_layers):
        summed += toy_rvq.codebook.layers[layer][grid.indices[layer]]
    np.testing.assert_allclose(grid.quantized, summed, atol=1e-9)


def test_round_trip_shape(toy_rvq):
    m = _motion(64, seed=12)
    recon = toy_rvq.reconstruct(m)
    assert recon.frames.shape == m.frames.shape


def test_part_isolation(toy_rvq):
    m = _motion(32, seed=13)
    grid = toy_rvq.tokenize(m)
    before = toy_rvq.decode(grid).frames
    crippled = toy_rvq.params.copy()
    for name in crippled.names():
        if name.startswith("dec.hands."):
            crippled.values[name][...] = 0.0
    from speechmask.rvq import RvqModel

    model2 = RvqModel(crippled, toy_rvq.codebook, toy_rvq.layout, toy_rvq.hidden)
    after = model2.decode(grid).frames
    hands = LAYOUT.slice_of("hands")
    assert np.any(before[:, hands] != after[:, hands])
    others = [c for c in range(24) if not hands.start <= c < hands.stop]
    np.testing.assert_array_equal(before[:, others], after[:, others])


def test_autoencoder_gradients_certified():
    layout = SMALL
    params = init_autoencoder_params(layout.channels, 5, 4, layout,
                                     RngState(21).generator())
    x = RngState(22).generator().normal(size=(8, layout.channels))

    def loss(ps):
        ps.zero_grads()
        latent, enc_cache = _encode_fwd(x, ps)
        recon, dec_cache = _decode_fwd(latent, ps, layout)
        diff = recon - x
        dlatent = _decode_bwd(2 * diff / diff.size, ps, layout, dec_cache)
        _encode_bwd(dlatent, ps, enc_cache)
        return float(np.mean(diff ** 2))

    report = grad_check(loss, params, eps=1e-5, tol=1e-4)
    assert report.passed, f"max rel error {report.max_rel_error}"


def test_training_beats_mean_predictor(toy_rvq, toy_split):
    train, held = toy_split
    train_m = [s.motion for s in train]
    held_m = [s.motion for s in held]
    assert all(np.isfinite(c["loss"]) for c in toy_rvq.loss_curve)
    baseline = mean_predictor_mse(train_m, held_m)
    assert reconstruction_mse(toy_rvq, held_m) < baseline


def test_dropout_gives_graceful_degradation(toy_rvq, toy_split):
    train, held = toy_split
    held_m = [s.motion for s in held]
    baseline = mean_predictor_mse([s.motion for s in train], held_m)
    single_layer = reconstruction_mse(toy_rvq, held_m, active_layers=1)
    assert np.isfinite(single_layer)
    assert single_layer < baseline


def test_train_rejects_empty_corpus():
    with pytest.raises(ConfigurationError):
        train_rvq([], RvqTrainConfig(), RngState(0))
