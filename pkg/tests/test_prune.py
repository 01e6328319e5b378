"""Mask machinery tests: keep counts, tie handling, the global-sort and
weight-zeroing oracles, straight-through gradients against finite
differences, and the mode-exclusivity hashes."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sltgen.mmd import MomentBank, mmd2_kernel, KernelSpec
from sltgen.nets import (
    FeatureExtractorSpec,
    GeneratorSpec,
    build_feature_extractor,
    build_generator,
)
from sltgen.optim import AdamState
from sltgen.prune import (
    MaskPolicy,
    PrunableParam,
    global_keep_count,
    init_all_scores,
    init_scores,
    keep_count,
    masked_forward,
    score_gradient,
    score_state_hash,
    select_mask,
    slt_search_step,
    finetune_step,
    weight_state_hash,
)
from sltgen.tensor import Tensor, finite_difference_gradient, matmul, relu, sum_


def make_param(layer_id, theta, fan_in=4):
    theta = np.asarray(theta, dtype=np.float64)
    return PrunableParam(layer_id=layer_id, theta=theta, fan_in=fan_in,
                         fan_out=theta.size)


def with_scores(layer_id, scores, fan_in=4):
    p = make_param(layer_id, np.ones_like(np.asarray(scores, dtype=np.float64)), fan_in)
    p.scores = np.asarray(scores, dtype=np.float64)
    return p


# -- score init ------------------------------------------------------------


def test_init_scores_deterministic_and_bounded():
    a = make_param("w", np.zeros(1000), fan_in=6)
    b = make_param("w", np.zeros(1000), fan_in=6)
    init_scores(a, np.random.default_rng(9))
    init_scores(b, np.random.default_rng(9))
    np.testing.assert_array_equal(a.scores, b.scores)
    assert np.abs(a.scores).max() <= 1.0  # sqrt(6/6)


def test_init_scores_symmetric_around_zero():
    p = make_param("w", np.zeros(10**6), fan_in=6)
    init_scores(p, np.random.default_rng(10))
    bound = math.sqrt(6.0 / 6.0)
    stderr = bound / math.sqrt(3.0 * p.size)  # uniform variance b^2/3
    assert abs(p.scores.mean()) < 3 * stderr


def test_init_scores_rejects_reinit():
    p = make_param("w", np.zeros(4))
    init_scores(p, np.random.default_rng(0))
    with pytest.raises(ValueError):
        init_scores(p, np.random.default_rng(0))


# -- keep counts and mask selection -----------------------------------------


def test_keep_count_examples():
    assert keep_count(50.0, 4) == 2
    assert keep_count(10.0, 4) == 1   # floor at one entry
    assert keep_count(100.0, 7) == 7
    assert keep_count(25.0, 10) == 3  # 2.5 rounds half up
    assert global_keep_count(50.0, 9) == 5


def test_select_mask_top_half():
    p = with_scores("w", [0.1, -0.9, 0.5, 0.2])
    select_mask([p], MaskPolicy(k_percent=50.0))
    np.testing.assert_array_equal(p.mask, [0, 1, 1, 0])


def test_select_mask_k100_all_ones():
    p = with_scores("w", [0.1, -0.9, 0.5, 0.2])
    select_mask([p], MaskPolicy(k_percent=100.0))
    np.testing.assert_array_equal(p.mask, [1, 1, 1, 1])


def test_global_scope_matches_brute_force_sort():
    p1 = with_scores("a", [0.9, 0.8, 0.7, 0.6])
    p2 = with_scores("b", [0.1, 0.2, 0.3, 0.4])
    select_mask([p1, p2], MaskPolicy(k_percent=50.0, scope="global"))
    np.testing.assert_array_equal(p1.mask, [1, 1, 1, 1])
    np.testing.assert_array_equal(p2.mask, [0, 0, 0, 0])


def test_global_scope_random_case_matches_oracle():
    rng = np.random.default_rng(21)
    params = [with_scores(f"p{i}", rng.standard_normal(rng.integers(3, 30)))
              for i in range(5)]
    select_mask(params, MaskPolicy(k_percent=37.0, scope="global"))
    flat = np.concatenate([np.abs(p.scores.ravel()) for p in params])
    keep = global_keep_count(37.0, flat.size)
    order = np.argsort(-flat, kind="stable")  # ties at lower flat index first
    expect = np.zeros(flat.size, dtype=np.uint8)
    expect[order[:keep]] = 1
    got = np.concatenate([p.mask.ravel() for p in params])
    np.testing.assert_array_equal(got, expect)


def test_tie_break_prefers_lower_flat_index():
    p = with_scores("w", [0.5, 0.5, 0.5, 0.5])
    select_mask([p], MaskPolicy(k_percent=50.0))
    np.testing.assert_array_equal(p.mask, [1, 1, 0, 0])


def test_frozen_layer_stays_dense_and_out_of_the_basis():
    p1 = with_scores("a", [0.9, 0.8, 0.7, 0.6])
    p2 = with_scores("b", [0.1, 0.2, 0.3, 0.4])
    select_mask([p1, p2], MaskPolicy(k_percent=25.0, scope="global",
                                     frozen_layers=frozenset({"a"})))
    np.testing.assert_array_equal(p1.mask, [1, 1, 1, 1])
    assert p1.freeze_layer
    assert p2.mask.sum() == global_keep_count(25.0, 4)  # basis excludes layer a


def test_random_baseline_ignores_scores():
    policy = MaskPolicy(k_percent=50.0, mode="random_baseline", seed=5)
    p1 = with_scores("w", [9.0, 9.0, 0.1, 0.1, 0.1, 0.1])
    p2 = with_scores("w", [0.1, 0.1, 0.1, 9.0, 9.0, 9.0])
    select_mask([p1], policy)
    select_mask([p2], policy)
    np.testing.assert_array_equal(p1.mask, p2.mask)  # same seed, same counts
    assert p1.mask.sum() == 3


def test_random_baseline_varies_with_seed():
    masks = []
    for seed in range(8):
        p = with_scores("w", np.zeros(40))
        select_mask([p], MaskPolicy(k_percent=50.0, mode="random_baseline", seed=seed))
        masks.append(p.mask.copy())
    assert any(not np.array_equal(masks[0], m) for m in masks[1:])


def test_policy_validation():
    with pytest.raises(ValueError):
        MaskPolicy(k_percent=0.0)
    with pytest.raises(ValueError):
        MaskPolicy(k_percent=101.0)
    with pytest.raises(ValueError):
        MaskPolicy(k_percent=50.0, scope="layerwise")
    with pytest.raises(ValueError):
        MaskPolicy(k_percent=50.0, mode="magnitude")
    with pytest.raises(ValueError):
        select_mask([make_param("w", np.zeros(4))], MaskPolicy(k_percent=50.0))


@given(k=st.integers(1, 100), size=st.integers(1, 1000), seed=st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_keep_count_exactness_property(k, size, seed):
    p = make_param("w", np.zeros(size))
    p.scores = np.random.default_rng(seed).standard_normal(size)
    select_mask([p], MaskPolicy(k_percent=float(k)))
    assert int(p.mask.sum()) == keep_count(float(k), size)


@given(k=st.integers(1, 100), seed=st.integers(0, 2**31),
       scale=st.floats(1e-3, 1e3))
@settings(max_examples=40, deadline=None)
def test_mask_invariant_under_positive_score_scaling(k, seed, scale):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal(37)
    a = with_scores("w", scores)
    b = with_scores("w", scores * scale)
    select_mask([a], MaskPolicy(k_percent=float(k)))
    select_mask([b], MaskPolicy(k_percent=float(k)))
    np.testing.assert_array_equal(a.mask, b.mask)


@given(k=st.integers(1, 100), seed=st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_global_and_per_layer_keep_totals_property(k, seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 60, size=4)
    params = [with_scores(f"p{i}", rng.standard_normal(int(s)))
              for i, s in enumerate(sizes)]
    select_mask(params, MaskPolicy(k_percent=float(k), scope="global"))
    total = sum(int(p.mask.sum()) for p in params)
    assert total == min(global_keep_count(float(k), int(sizes.sum())), int(sizes.sum()))


# -- masked forward ----------------------------------------------------------


def tiny_mlp(seed=0, output=(2,), width=8, hidden_layers=2, latent=4):
    spec = GeneratorSpec(kind="mlp", latent_dim=latent, output_shape=output,
                         hidden_layers=hidden_layers, base_width=width)
    gen = build_generator(spec, "kaiming_normal", seed=seed)
    init_all_scores(gen.params, seed=seed + 100)
    return gen


def test_all_ones_mask_is_dense_forward():
    gen = tiny_mlp()
    z = np.random.default_rng(0).standard_normal((4, 4))
    dense, _ = gen.forward(z)
    select_mask(gen.params, MaskPolicy(k_percent=100.0))
    masked, _ = masked_forward(gen, z)
    np.testing.assert_array_equal(dense.data, masked.data)


def test_zero_final_layer_gives_tanh_zero():
    gen = tiny_mlp(output=(1, 2, 2))
    for p in gen.params:
        if p.layer_id.startswith("out."):
            p.mask = np.zeros_like(p.mask)
    out_bias = next(p for p in gen.params if p.layer_id == "out.b")
    out_bias.theta[:] = 0.0
    out, _ = gen.forward(np.random.default_rng(1).standard_normal((3, 4)))
    np.testing.assert_array_equal(out.data, np.zeros((3, 1, 2, 2)))


def test_masked_forward_equals_weight_zeroing_oracle():
    gen = tiny_mlp(seed=3)
    rng = np.random.default_rng(7)
    for p in gen.params:
        p.mask = (rng.random(p.theta.shape) < 0.6).astype(np.uint8)
    z = rng.standard_normal((5, 4))
    masked, _ = masked_forward(gen, z)

    oracle = tiny_mlp(seed=3)  # independent copy, weights overwritten with zeros
    for p, q in zip(oracle.params, gen.params):
        p.theta = p.theta * q.mask
    dense, _ = oracle.forward(z)
    np.testing.assert_array_equal(masked.data, dense.data)


# -- straight-through score gradients ----------------------------------------


def test_single_edge_score_gradient():
    # L = (w * m) * x with w=2, x=3: dL/ds = dL/d(effective) * w = 3 * 2 = 6,
    # independent of whether the edge is masked.
    for mask_value in (1, 0):
        p = make_param("w", [[2.0]], fan_in=1)
        p.mask = np.array([[mask_value]], dtype=np.uint8)
        leaf = Tensor(p.effective(), requires_grad=True)
        x = Tensor([[3.0]])
        sum_(matmul(x, leaf)).backward()
        grads = score_gradient(type("R", (), {"leaves": {"w": leaf}})(), [p])
        assert grads["w"][0, 0] == pytest.approx(6.0)


def test_score_gradient_matches_fd_on_relaxation():
    # Relaxation oracle: replace each mask entry with a pass-through scalar 1,
    # add t * theta to the scores' role, and differentiate through theta * 1.
    # Equivalently: L(effective + t * theta * direction)'s directional
    # derivative at t=0 must equal <score_grad, direction> for any direction
    # supported on the surviving entries (the forward uses theta * m).
    gen = tiny_mlp(seed=5, width=6, hidden_layers=1)
    select_mask(gen.params, MaskPolicy(k_percent=60.0))
    z = np.random.default_rng(11).standard_normal((3, 4))

    out, rec = masked_forward(gen, z, record=True)
    sum_(out.square()).backward()
    grads = score_gradient(rec, gen.params)

    rng = np.random.default_rng(12)
    for p in gen.params:
        direction = rng.standard_normal(p.theta.shape)
        eps = 1e-6

        def loss_at(t):
            shifted = tiny_mlp(seed=5, width=6, hidden_layers=1)
            for q, orig in zip(shifted.params, gen.params):
                q.mask = orig.mask.copy()
                if q.layer_id == p.layer_id:
                    # straight-through relaxation: perturb the effective
                    # weight by t * theta * direction on every edge
                    q.theta = orig.theta.copy()
                    q.mask = q.mask.astype(np.float64) + t * direction
                else:
                    q.theta = orig.theta.copy()
            o, _ = shifted.forward(z)
            return float((o.data ** 2).sum())

        numeric = (loss_at(eps) - loss_at(-eps)) / (2 * eps)
        analytic = float((grads[p.layer_id] * direction).sum())
        assert numeric == pytest.approx(analytic, rel=1e-4, abs=1e-7)


# -- search and fine-tune steps ----------------------------------------------


def search_fixture(loss_kind="feature_matching"):
    gen = tiny_mlp(seed=8, output=(1,), width=8, hidden_layers=2, latent=2)
    ext = build_feature_extractor(
        FeatureExtractorSpec(kind="identity", channels=(), tap_layers=(0,)))
    bank = MomentBank(tap_widths=[1])
    real = np.array([[-1.0], [1.0]])
    bank.warm_start([real])
    opt = {p.layer_id: AdamState.zeros(p.theta.shape) for p in gen.params}
    return gen, ext, bank, real, opt


def test_search_never_touches_weights():
    gen, ext, bank, real, opt = search_fixture()
    policy = MaskPolicy(k_percent=50.0)
    before = weight_state_hash(gen.params, gen.bn_params)
    rng = np.random.default_rng(0)
    for _ in range(20):
        slt_search_step(gen, ext, bank, policy, opt, lr=0.01,
                        real_batch=real, latent_batch=rng.standard_normal((8, 2)))
    assert weight_state_hash(gen.params, gen.bn_params) == before
    assert any(p.scores.std() > 0 for p in gen.params)


def test_search_k100_scores_still_update():
    gen, ext, bank, real, opt = search_fixture()
    policy = MaskPolicy(k_percent=100.0)
    score_before = score_state_hash(gen.params)
    rng = np.random.default_rng(1)
    slt_search_step(gen, ext, bank, policy, opt, lr=0.01,
                    real_batch=real, latent_batch=rng.standard_normal((8, 2)))
    assert all(np.all(p.mask == 1) for p in gen.params)
    assert score_state_hash(gen.params) != score_before


def eval_mmd2_toy(gen, real, n=256):
    z = np.random.default_rng(999).standard_normal((n, gen.spec.latent_dim))
    fake, _ = gen.forward(z)
    kernel = KernelSpec(kind="rbf", bandwidths=(1.0,))
    return mmd2_kernel(real, fake.data, kernel)


def test_search_improves_two_point_task():
    # Real data {-1, +1} in 1-D; a found mask should beat the initial one.
    gen, ext, bank, real, opt = search_fixture()
    policy = MaskPolicy(k_percent=50.0)
    real_big = np.array([[-1.0], [1.0]] * 64)
    select_mask(gen.params, policy)
    before = eval_mmd2_toy(gen, real_big)
    rng = np.random.default_rng(2)
    for _ in range(2000):
        slt_search_step(gen, ext, bank, policy, opt, lr=0.01,
                        real_batch=real, latent_batch=rng.standard_normal((16, 2)))
    select_mask(gen.params, policy)
    after = eval_mmd2_toy(gen, real_big)
    assert after < before


def test_finetune_zero_mask_changes_nothing():
    gen, ext, bank, real, opt = search_fixture()
    for p in gen.params:
        p.mask = np.zeros_like(p.mask)
    before = weight_state_hash(gen.params, gen.bn_params)
    finetune_step(gen, ext, bank, opt, lr=0.01, real_batch=real,
                  latent_batch=np.random.default_rng(3).standard_normal((8, 2)))
    assert weight_state_hash(gen.params, gen.bn_params) == before


def test_finetune_all_ones_equals_dense_training_step():
    z = np.random.default_rng(4).standard_normal((8, 2))
    runs = []
    for _ in range(2):
        gen, ext, bank, real, opt = search_fixture()
        select_mask(gen.params, MaskPolicy(k_percent=100.0))
        finetune_step(gen, ext, bank, opt, lr=0.01, real_batch=real, latent_batch=z)
        runs.append([p.theta.copy() for p in gen.params])
    for a, b in zip(*runs):
        np.testing.assert_array_equal(a, b)
    # and it actually moved
    fresh = search_fixture()[0]
    assert any(not np.array_equal(a, p.theta) for a, p in zip(runs[0], fresh.params))


def test_finetune_touches_only_surviving_entries():
    gen, ext, bank, real, opt = search_fixture()
    rng = np.random.default_rng(5)
    for p in gen.params:
        p.mask = (rng.random(p.theta.shape) < 0.5).astype(np.uint8)
    thetas_before = [p.theta.copy() for p in gen.params]
    scores_before = score_state_hash(gen.params)
    finetune_step(gen, ext, bank, opt, lr=0.01, real_batch=real,
                  latent_batch=rng.standard_normal((8, 2)))
    assert score_state_hash(gen.params) == scores_before
    for p, before in zip(gen.params, thetas_before):
        np.testing.assert_array_equal(p.theta[p.mask == 0], before[p.mask == 0])
        if p.mask.sum() and p.layer_id.endswith(".w"):
            assert not np.array_equal(p.theta[p.mask == 1], before[p.mask == 1])
