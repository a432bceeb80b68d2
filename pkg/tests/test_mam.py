import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speechmask.errors import ConfigurationError, DimensionError
from speechmask.mam import (
    MamModel,
    MamTrainConfig,
    SpeechFeatures,
    _encode_queries_fwd,
    _mam_sequence_bwd,
    _mam_sequence_fwd,
    alignment_diagnostics,
    info_nce,
    info_nce_with_grads,
    init_mam_params,
    resample_track,
    train_mam,
)
from speechmask.numerics import ParamSet, RngState, grad_check


def test_info_nce_single_pair_is_exactly_zero():
    a = np.array([[1.0, 2.0]])
    assert info_nce(a, a) == 0.0
    assert info_nce(a, np.array([[3.0, -1.0]])) == 0.0


def test_info_nce_orthogonal_hand_value():
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = info_nce(e, e, tau=1.0, symmetric=False)
    np.testing.assert_allclose(loss, 2 * math.log(1 + math.exp(-1)), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_info_nce_nonnegative(batch, dim, seed):
    gen = np.random.default_rng(seed)
    a = gen.normal(size=(batch, dim)) + 0.1
    b = gen.normal(size=(batch, dim)) + 0.1
    if np.any(np.linalg.norm(a, axis=1) == 0) or np.any(np.linalg.norm(b, axis=1) == 0):
        return
    assert info_nce(a, b) >= 0.0
    assert info_nce(a, b, symmetric=False) >= 0.0


def test_info_nce_monotone_in_positive_similarity():
    base = np.array([[1.0, 0.0], [0.0, 1.0]])

    def loss_at(theta):
        rotated = base.copy()
        rotated[0] = [math.cos(theta), math.sin(theta)]
        return info_nce(rotated, base, tau=0.5)

    losses = [loss_at(t) for t in (1.2, 0.8, 0.4, 0.1)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_info_nce_rejects_bad_temperature_and_shapes():
    a = np.ones((2, 3))
    with pytest.raises(ConfigurationError):
        info_nce(a, a, tau=0.0)
    with pytest.raises(DimensionError):
        info_nce(a, np.ones((3, 3)))
    with pytest.raises(DimensionError):
        info_nce(np.zeros((2, 3)), a)  # zero rows cannot be normalized


def test_info_nce_gradients_certified():
    gen = RngState(31).generator()
    params = ParamSet()
    params.add("a", gen.normal(size=(3, 4)))
    params.add("b", gen.normal(size=(3, 4)))

    def loss(ps):
        ps.zero_grads()
        value, (da, db) = info_nce_with_grads(ps["a"], ps["b"], tau=0.2)
        ps.accumulate("a", da)
        ps.accumulate("b", db)
        return value

    report = grad_check(loss, params, eps=1e-5, tol=1e-4)
    assert report.passed, f"max rel error {report.max_rel_error}"


def test_resample_track():
    track = np.array([[0.0, 10.0], [1.0, 11.0], [2.0, 12.0]])
    up = resample_track(track, 5)
    assert up.shape == (5, 2)
    np.testing.assert_allclose(up[:, 0], [0.0, 0.5, 1.0, 1.5, 2.0])
    same = resample_track(track, 3)
    np.testing.assert_array_equal(same, track)


def _tiny_model(seed=0, n_q=4, d_q=8, d_low=3, d_high=2, motion_dim=5,
                heads=2, blocks=1):
    params = init_mam_params(n_q, d_q, d_low, d_high, motion_dim, heads, blocks, 2,
                             RngState(seed).generator())
    return MamModel(params, n_q, d_q, heads, blocks)


def test_encode_queries_shape_for_any_track_length():
    model = _tiny_model()
    for t_a in (2, 4, 9, 40):
        gen = RngState(t_a).generator()
        feats = SpeechFeatures(gen.normal(size=(t_a, 3)), gen.normal(size=(t_a, 2)))
        assert model.encode_queries(feats).shape == (4, 8)


def test_zero_features_ignore_key_parameters():
    model = _tiny_model(seed=3)
    feats = SpeechFeatures(np.zeros((6, 3)), np.zeros((6, 2)))
    before = model.encode_queries(feats)
    # all keys coincide when features vanish, so key weights/biases are inert
    for name in ("ca1.wk.w", "ca1.wk.b", "ca2.wk.w", "ca2.wk.b"):
        model.params.values[name] += 0.731
        np.testing.assert_allclose(model.encode_queries(feats), before, atol=1e-12)
    # value-projection bias does reach the output
    model.params.values["ca1.wv.b"] += 0.5
    assert not np.allclose(model.encode_queries(feats), before)


def test_constant_track_invariant_to_length_and_order():
    model = _tiny_model(seed=4)
    row_low, row_high = np.array([0.3, -1.0, 0.7]), np.array([1.5, 0.25])
    outputs = []
    for t_a in (4, 16, 40):
        feats = SpeechFeatures(np.tile(row_low, (t_a, 1)), np.tile(row_high, (t_a, 1)))
        outputs.append(model.encode_queries(feats))
    np.testing.assert_allclose(outputs[0], outputs[1], atol=1e-12)
    np.testing.assert_allclose(outputs[0], outputs[2], atol=1e-12)


def test_joint_embed_shares_parameter_storage():
    model = _tiny_model(seed=5)
    gen = RngState(6).generator()
    refined = gen.normal(size=(4, 8))
    latents = gen.normal(size=(4, 5))
    before = model.joint_embed(refined, latents)
    np.testing.assert_allclose(before.pooled_speech, before.speech.mean(axis=0))
    np.testing.assert_allclose(before.pooled_motion, before.motion.mean(axis=0))
    model.params.values["shared.0.sa.wv.w"][0, 0] += 0.2
    after = model.joint_embed(refined, latents)
    assert not np.allclose(before.speech, after.speech)
    assert not np.allclose(before.motion, after.motion)


def test_alignment_loss_gradients_certified():
    """Full L_align (frame + sentence, both tracks) against finite differences."""
    n_q, d_low, d_high, motion_dim = 3, 2, 2, 3
    params = init_mam_params(n_q, 4, d_low, d_high, motion_dim, 1, 1, 2,
                             RngState(41).generator())
    gen = RngState(42).generator()
    batch = []
    for _ in range(2):
        feats = SpeechFeatures(gen.normal(size=(5, d_low)), gen.normal(size=(5, d_high)))
        batch.append((feats, gen.normal(size=(n_q, motion_dim))))

    def loss(ps):
        ps.zero_grads()
        total = 0.0
        outs = []
        for feats, latents in batch:
            speech, motion, cache = _mam_sequence_fwd(feats, latents, ps, n_q, 1, 1)
            floss, (dsp, dmo) = info_nce_with_grads(speech, motion, 0.2)
            total += floss / len(batch)
            outs.append((speech, motion, cache, dsp, dmo))
        pooled_s = np.stack([o[0].mean(axis=0) for o in outs])
        pooled_m = np.stack([o[1].mean(axis=0) for o in outs])
        sent, (dps, dpm) = info_nce_with_grads(pooled_s, pooled_m, 0.2)
        for j, (speech, motion, cache, dsp, dmo) in enumerate(outs):
            dspeech = dsp / len(batch) + dps[j][None, :] / speech.shape[0]
            dmotion = dmo / len(batch) + dpm[j][None, :] / motion.shape[0]
            _mam_sequence_bwd(dspeech, dmotion, ps, cache, 1)
        return total + sent

    report = grad_check(loss, params, eps=1e-5, tol=1e-4)
    assert report.passed, f"max rel error {report.max_rel_error}"


def test_training_improves_alignment(toy_split, toy_rvq, toy_mam):
    train, held = toy_split
    fresh = MamModel(
        init_mam_params(toy_mam.n_q, toy_mam.d_q,
                        train[0].features.low.shape[1], train[0].features.high.shape[1],
                        toy_rvq.dim, toy_mam.heads, toy_mam.shared_blocks, 2,
                        RngState(2).split(0).generator()),
        toy_mam.n_q, toy_mam.d_q, toy_mam.heads, toy_mam.shared_blocks)
    before = alignment_diagnostics(fresh, held, toy_rvq)
    after = alignment_diagnostics(toy_mam, held, toy_rvq)
    assert after["positive_cosine"] > before["positive_cosine"]
    assert after["retrieval_top1"] > 1.0 / len(held)
    losses = [c["loss"] for c in toy_mam.loss_curve]
    assert losses[-1] < losses[0]


def test_shuffled_pairs_score_worse(toy_split, toy_rvq, toy_mam):
    _, held = toy_split
    pooled_s, pooled_m = [], []
    for s in held:
        refined = toy_mam.encode_queries(s.features)
        emb = toy_mam.joint_embed(refined, toy_rvq.tokenize(s.motion).quantized)
        pooled_s.append(emb.pooled_speech)
        pooled_m.append(emb.pooled_motion)
    S, M = np.stack(pooled_s), np.stack(pooled_m)
    matched = info_nce(S, M)
    shuffled = info_nce(S, np.roll(M, 1, axis=0))
    assert matched < shuffled


def test_train_mam_rejects_empty():
    with pytest.raises(ConfigurationError):
        train_mam([], None, MamTrainConfig(), RngState(0))
