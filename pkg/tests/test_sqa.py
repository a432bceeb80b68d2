import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speechmask.errors import ConfigurationError, DimensionError
from speechmask.numerics import ParamSet, RngState, grad_check, softmax_rows
from speechmask.sqa import (
    AttentionMap,
    MaskSchedule,
    attention_scores,
    attention_scores_bwd,
    attention_scores_fwd,
    export_attention,
    init_score_params,
    schedule_at,
    score_to_probability_bwd,
    score_to_probability_fwd,
    select_mask,
    semantic_loss,
)

BALANCED = MaskSchedule(mask_ratio=0.5, soft_start=0.3, soft_end=0.0,
                        hard_start=0.0, hard_end=0.3, total_epochs=40)


def test_schedule_endpoints_and_midpoint():
    t = BALANCED.total_epochs
    np.testing.assert_allclose(schedule_at(BALANCED, 0), (0.3, 0.0, 0.2), atol=1e-12)
    np.testing.assert_allclose(schedule_at(BALANCED, t // 2), (0.15, 0.15, 0.2), atol=1e-12)
    np.testing.assert_allclose(schedule_at(BALANCED, t), (0.0, 0.3, 0.2), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1),
       st.floats(0, 1), st.integers(1, 500), st.floats(0, 1))
def test_schedule_conserves_total(ratio, s0, s1, h0, h1, epochs, frac):
    ratio = max(ratio, s0 + h0, s1 + h1)
    if ratio > 1:
        return
    sched = MaskSchedule(ratio, s0, s1, h0, h1, epochs)
    soft, hard, rand = schedule_at(sched, frac * epochs)
    assert abs(soft + hard + rand - ratio) <= 1e-12
    assert rand >= -1e-12


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        MaskSchedule(0.5, 0.4, 0.0, 0.2, 0.3, 10)  # t=0: 0.4+0.2 > 0.5
    with pytest.raises(ConfigurationError):
        MaskSchedule(1.2, 0.0, 0.0, 0.0, 0.0, 10)
    with pytest.raises(ConfigurationError):
        schedule_at(BALANCED, -1)
    with pytest.raises(ConfigurationError):
        schedule_at(BALANCED, BALANCED.total_epochs + 1)


def test_select_mask_hard_argsort_case():
    s = np.array([0.1, 0.9, 0.3, 0.7, 0.5, 0.2, 0.8, 0.4])
    spec = select_mask(s, (0.0, 2 / 8, 0.0), rng=RngState(0))
    assert set(spec.masked) == {1, 6}
    assert spec.tags == {1: "hard", 6: "hard"}


def test_select_mask_pure_random_degenerate_schedule():
    s = np.linspace(0, 1, 12)
    spec = select_mask(s, (0.0, 0.0, 0.5), rng=RngState(3))
    assert spec.count == 6
    assert all(tag == "random" for tag in spec.tags.values())


def test_select_mask_respects_protected_and_counts():
    gen = np.random.default_rng(0)
    for trial in range(200):
        t_lat = int(gen.integers(4, 40))
        s = gen.random(t_lat)
        ratios = (0.2, 0.2, 0.1)
        protected = frozenset(int(i) for i in gen.choice(t_lat, size=2, replace=False))
        spec = select_mask(s, ratios, protected, RngState(trial))
        assert not set(spec.masked) & protected
        assert set(spec.masked) | set(spec.visible) == set(range(t_lat))
        assert not set(spec.masked) & set(spec.visible)
        expected = int(np.floor(0.5 * t_lat + 1e-12))
        assert spec.count + spec.shortfall == expected


def test_select_mask_shortfall_when_mostly_protected():
    s = np.ones(8)
    spec = select_mask(s, (0.0, 0.5, 0.5), protected=frozenset(range(6)),
                       rng=RngState(1))
    assert spec.count == 2
    assert spec.shortfall == 6
    assert set(spec.masked) == {6, 7}


def test_hard_selection_permutation_equivariant():
    gen = np.random.default_rng(5)
    s = gen.permutation(np.linspace(0.05, 0.95, 12))  # distinct scores
    perm = gen.permutation(12)
    base = select_mask(s, (0.0, 4 / 12, 0.0), rng=RngState(2))
    permuted = select_mask(s[perm], (0.0, 4 / 12, 0.0), rng=RngState(2))
    mapped = {int(np.flatnonzero(perm == i)[0]) for i in base.masked}
    assert set(permuted.masked) == mapped


def test_soft_sampling_uniform_frequencies():
    t_lat, trials = 8, 10_000
    counts = np.zeros(t_lat)
    s = np.ones(t_lat)
    root = RngState(99)
    for k in range(trials):
        spec = select_mask(s, (3 / t_lat, 0.0, 0.0), rng=root.split(k))
        counts[spec.masked] += 1
    p = 3 / t_lat
    sigma = math.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) <= 3 * sigma)


def test_soft_sampling_proportional_to_scores():
    s = np.array([0.05, 0.1, 0.2, 0.65])
    trials = 10_000
    counts = np.zeros(4)
    root = RngState(7)
    for k in range(trials):
        spec = select_mask(s, (1 / 4, 0.0, 0.0), rng=root.split(k))
        counts[spec.masked] += 1
    probs = s / s.sum()
    sigma = np.sqrt(trials * probs * (1 - probs))
    assert np.all(np.abs(counts - trials * probs) <= 3 * sigma)


def test_attention_map_aggregation_identity():
    eye = np.eye(3)
    amap = AttentionMap.from_parts({p: eye for p in ("face", "hands", "upper", "lower")})
    np.testing.assert_array_equal(amap.total, 4 * eye)
    np.testing.assert_array_equal(amap.scores, [4.0, 4.0, 4.0])


def test_attention_map_validation():
    eye = np.eye(2)
    with pytest.raises(ConfigurationError):
        AttentionMap.from_parts({"face": eye})
    with pytest.raises(DimensionError):
        AttentionMap.from_parts({"face": eye, "hands": eye, "upper": eye,
                                 "lower": np.eye(3)})


def _score_setup(n_q=5, t_lat=6, d_q=4, width=3, score_dim=4, seed=0, zero=False):
    params = ParamSet()
    gen = RngState(seed).generator()
    init_score_params(params, "score", d_q, width, score_dim, gen)
    if zero:
        for name in params.names():
            params.values[name][...] = 0.0
    pose = RngState(seed + 1).generator().normal(size=(t_lat, width))
    queries = RngState(seed + 2).generator().normal(size=(n_q, d_q))
    return params, pose, queries


def test_uniform_attention_scores():
    params, pose, queries = _score_setup(zero=True)
    amap = attention_scores(pose, queries, params)
    n_q, t_lat = queries.shape[0], pose.shape[0]
    np.testing.assert_allclose(amap.scores, np.full(t_lat, 4 * n_q / t_lat), atol=1e-12)


def test_scores_invariant_to_query_order():
    params, pose, queries = _score_setup(seed=3)
    base = attention_scores(pose, queries, params)
    perm = RngState(9).generator().permutation(queries.shape[0])
    shuffled = attention_scores(pose, queries[perm], params)
    np.testing.assert_allclose(base.scores, shuffled.scores, atol=1e-12)


def test_logit_shift_leaves_map_and_selection_unchanged():
    gen = RngState(11).generator()
    logits = gen.normal(size=(4, 6))
    shifted = softmax_rows(logits + 3.7)
    np.testing.assert_allclose(softmax_rows(logits), shifted, atol=1e-12)
    amap_a = AttentionMap.from_parts(
        {p: softmax_rows(logits) for p in ("face", "hands", "upper", "lower")})
    amap_b = AttentionMap.from_parts(
        {p: shifted for p in ("face", "hands", "upper", "lower")})
    sel_a = select_mask(amap_a.scores, (0.0, 2 / 6, 0.0), rng=RngState(1))
    sel_b = select_mask(amap_b.scores, (0.0, 2 / 6, 0.0), rng=RngState(1))
    np.testing.assert_array_equal(sel_a.masked, sel_b.masked)


def test_per_part_rows_are_stochastic():
    params, pose, queries = _score_setup(seed=4)
    amap = attention_scores(pose, queries, params)
    for part, matrix in amap.per_part.items():
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(matrix >= 0)
    np.testing.assert_allclose(amap.total,
                               sum(amap.per_part.values()), atol=1e-12)
    np.testing.assert_allclose(amap.scores, amap.total.sum(axis=0), atol=1e-12)


def test_semantic_loss_closed_forms():
    half = np.full(6, 0.5)
    np.testing.assert_allclose(semantic_loss(half, half), math.log(2), atol=1e-12)
    labels = np.array([0.01, 0.99, 0.01, 0.99])
    np.testing.assert_allclose(semantic_loss(labels, labels), 0.0560018, atol=1e-6)
    with pytest.raises(DimensionError):
        semantic_loss(np.full(3, 0.5), np.full(4, 0.5))
    with pytest.raises(ConfigurationError):
        semantic_loss(np.array([0.0, 0.5]), np.array([0.5, 0.5]))


def test_semantic_loss_gradients_through_score_head():
    labels = np.array([1.0, 0.0, 0.25, 0.0])
    params = ParamSet()
    params.add("s", RngState(13).generator().normal(size=(1, 4)))

    def loss(ps):
        ps.zero_grads()
        probs, cache = score_to_probability_fwd(ps["s"][0])
        value = semantic_loss(probs, labels)
        dz = (probs - labels) / len(probs)  # fused BCE-through-sigmoid
        ps.accumulate("s", score_to_probability_bwd(dz, cache)[None, :])
        return value

    report = grad_check(loss, params, eps=1e-5, tol=1e-4)
    assert report.passed, f"max rel error {report.max_rel_error}"


def test_attention_score_gradients_certified():
    params, pose, queries = _score_setup(n_q=3, t_lat=4, d_q=3, width=3, score_dim=3,
                                         seed=21)
    labels = np.array([1.0, 0.0, 0.5, 0.0])

    def loss(ps):
        ps.zero_grads()
        amap, caches = attention_scores_fwd(pose, queries, ps, "score")
        probs, cache = score_to_probability_fwd(amap.scores)
        value = semantic_loss(probs, labels)
        dz = (probs - labels) / len(probs)
        dscores = score_to_probability_bwd(dz, cache)
        attention_scores_bwd(dscores, amap, caches, pose, queries, ps, "score")
        return value

    report = grad_check(loss, params, eps=1e-5, tol=1e-4)
    assert report.passed, f"max rel error {report.max_rel_error}"


def test_export_attention_layout(tmp_path):
    params, pose, queries = _score_setup(seed=6)
    amap = attention_scores(pose, queries, params)
    out = tmp_path / "attn.csv"
    written = export_attention(amap, out)
    assert out in written and len(written) == 5
    lines = out.read_text().strip().splitlines()
    n_q, t_lat = queries.shape[0], pose.shape[0]
    assert lines[0].split(",") == [str(i) for i in range(t_lat)]
    assert len(lines) == 1 + n_q + 1  # header + queries + score row
    score_row = np.array([float(v) for v in lines[-1].split(",")])
    np.testing.assert_allclose(score_row, amap.scores, rtol=1e-9)
    face = (tmp_path / "attn.face.csv").read_text().strip().splitlines()
    assert len(face) == 1 + n_q
