import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import infonce_mix_ref, infonce_ref, koleo_ref, random_unit
from sscdkit.losses import (
    BatchStructure,
    LossConfig,
    combined_loss,
    infonce,
    infonce_mix,
    koleo,
    koleo_neighbors,
    project_gradient_to_sphere,
)
from sscdkit.toy_bench import AugmentParams, build_batch, generate_sources

seeds = st.integers(0, 2**32 - 1)


def simplex(n):
    """n unit vectors in R^(n-1) with all pairwise cosines equal to -1/(n-1)."""
    e = np.eye(n) - 1.0 / n
    u, s, _ = np.linalg.svd(e)
    x = u[:, : n - 1] * s[: n - 1]
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def central_diff(f, Z, h=1e-5):
    g = np.zeros_like(Z)
    for idx in np.ndindex(Z.shape):
        zp, zm = Z.copy(), Z.copy()
        zp[idx] += h
        zm[idx] -= h
        g[idx] = (f(zp) - f(zm)) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def mixed_batch(seed, N=4, d=8):
    rng = np.random.default_rng(seed)
    X, batch = build_batch(generate_sources(N, d, seed), AugmentParams(mix_prob=0.5), rng)
    return random_unit(rng, batch.size, d), batch


# -- batch structure -----------------------------------------------------------


def test_batch_structure_validation():
    with pytest.raises(ValueError, match="itself"):
        BatchStructure((frozenset({0}), frozenset()))
    with pytest.raises(ValueError, match="asymmetric"):
        BatchStructure((frozenset({1}), frozenset()))
    b = BatchStructure.repeated(3)
    assert b.size == 6 and b.single_positive
    assert b.match_sets[1] == {4} and b.self_set(4) == {1, 4}


# -- InfoNCE -------------------------------------------------------------------


def test_infonce_single_pair_is_zero():
    Z = random_unit(np.random.default_rng(0), 2, 3)
    res = infonce(Z, BatchStructure.repeated(1))
    assert res.value == 0.0
    np.testing.assert_array_equal(res.grad, 0.0)


def test_infonce_equal_similarities_log3():
    res = infonce(simplex(4), BatchStructure.repeated(2))
    assert res.value == pytest.approx(math.log(3), abs=1e-12)


@settings(max_examples=25)
@given(seeds, st.sampled_from([2, 4, 8]), st.sampled_from([4, 16]))
def test_infonce_matches_oracle(seed, N, d):
    Z = random_unit(np.random.default_rng(seed), 2 * N, d)
    partner = [(i + N) % (2 * N) for i in range(2 * N)]
    assert infonce(Z, BatchStructure.repeated(N)).value == pytest.approx(infonce_ref(Z, partner, 0.05), rel=1e-12)


def test_infonce_gradient_finite_difference():
    Z = random_unit(np.random.default_rng(1), 8, 8)
    b = BatchStructure.repeated(4)
    num = central_diff(lambda z: infonce(z, b, check_normalized=False).value, Z)
    assert max_rel_err(infonce(Z, b).grad, num) < 1e-4


def test_infonce_rejects_mixed_batch_and_bad_input():
    Z, batch = mixed_batch(3)
    if batch.single_positive:
        pytest.skip("no mixed view drawn")
    with pytest.raises(ValueError, match="infonce_mix"):
        infonce(Z, batch)
    with pytest.raises(ValueError, match="normalized"):
        infonce(2 * random_unit(np.random.default_rng(0), 4, 3), BatchStructure.repeated(2))
    with pytest.raises(ValueError, match="tau"):
        infonce(random_unit(np.random.default_rng(0), 4, 3), BatchStructure.repeated(2), tau=0)


# -- mix-aware InfoNCE ---------------------------------------------------------


@settings(max_examples=25)
@given(seeds, st.sampled_from([2, 4, 8]), st.sampled_from([4, 16]))
def test_infonce_mix_reduces_to_infonce(seed, N, d):
    Z = random_unit(np.random.default_rng(seed), 2 * N, d)
    b = BatchStructure.repeated(N)
    a, m = infonce(Z, b), infonce_mix(Z, b)
    assert abs(a.value - m.value) <= 1e-12
    assert np.max(np.abs(a.grad - m.grad)) <= 1e-12


def test_infonce_mix_two_positives_equal_similarities():
    # view 0 matches 1 and 2; views 3 and 4 are a plain pair
    sets = (frozenset({1, 2}), frozenset({0}), frozenset({0}), frozenset({4}), frozenset({3}))
    res = infonce_mix(simplex(5), BatchStructure(sets))
    # view 0: each pair term log(1 + 2) ; every other view: one positive vs 3 negatives
    assert res.value == pytest.approx((math.log(3) + 4 * math.log(4)) / 5, abs=1e-12)


@settings(max_examples=25)
@given(seeds)
def test_infonce_mix_matches_oracle(seed):
    Z, batch = mixed_batch(seed)
    assert infonce_mix(Z, batch).value == pytest.approx(infonce_mix_ref(Z, batch.match_sets, 0.05), rel=1e-12)


def test_infonce_mix_gradient_finite_difference():
    for seed in range(5):
        Z, batch = mixed_batch(seed)
        num = central_diff(lambda z: infonce_mix(z, batch, check_normalized=False).value, Z)
        assert max_rel_err(infonce_mix(Z, batch).grad, num) < 1e-4


# -- KoLeo -----------------------------------------------------------------------


def test_koleo_three_points():
    Z = np.array([[1.0, 0], [0, 1.0], [-1.0, 0]])
    b = BatchStructure((frozenset(), frozenset(), frozenset()))
    assert koleo(Z, b).value == pytest.approx(-0.34657, abs=5e-6)
    assert koleo(Z, b).value == pytest.approx(-math.log(math.sqrt(2)), abs=1e-15)
    nn, _ = koleo_neighbors(Z, b)
    assert nn[1] == 0  # tie between 0 and 2 goes to the lower index


def test_koleo_unit_distance_is_zero():
    Z = np.array([[1.0, 0], [0.5, math.sqrt(3) / 2]])
    assert koleo(Z, BatchStructure((frozenset(), frozenset()))).value == pytest.approx(0.0, abs=1e-15)


def test_koleo_singularity():
    Z = np.array([[1.0, 0], [1.0, 0], [0, 1.0]])
    with pytest.raises(ValueError, match="singularity"):
        koleo(Z, BatchStructure((frozenset(), frozenset(), frozenset())))


@settings(max_examples=25)
@given(seeds)
def test_koleo_matches_oracle(seed):
    Z, batch = mixed_batch(seed)
    assert koleo(Z, batch).value == pytest.approx(koleo_ref(Z, batch.match_sets), rel=1e-12)


def test_koleo_gradient_finite_difference():
    Z = random_unit(np.random.default_rng(2), 8, 8)
    b = BatchStructure.repeated(4)
    num = central_diff(lambda z: koleo(z, b, check_normalized=False).value, Z)
    assert max_rel_err(koleo(Z, b).grad, num) < 1e-4


# -- combined --------------------------------------------------------------------


def test_combined_lambda_zero_is_contrastive_term():
    Z, batch = mixed_batch(4)
    a = combined_loss(Z, batch, LossConfig(lam=0.0))
    b = infonce_mix(Z, batch)
    assert a.value == b.value
    np.testing.assert_array_equal(a.grad, b.grad)


def test_combined_is_linear_in_lambda():
    Z, batch = mixed_batch(5)
    res = combined_loss(Z, batch, LossConfig(lam=30.0))
    vi, vk = infonce_mix(Z, batch).value, koleo(Z, batch).value
    assert abs(res.value - (vi + 30 * vk)) < 1e-12
    assert res.parts == {"infonce": vi, "koleo": vk}


def test_combined_gradient_finite_difference():
    Z, batch = mixed_batch(6)
    cfg = LossConfig(lam=30.0)
    num = central_diff(lambda z: combined_loss(z, batch, cfg, check_normalized=False).value, Z)
    assert max_rel_err(combined_loss(Z, batch, cfg).grad, num) < 1e-4


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=0.0)
    with pytest.raises(ValueError):
        LossConfig(lam=-1.0)


# -- sphere projection -----------------------------------------------------------


def test_project_gradient_examples():
    np.testing.assert_array_equal(project_gradient_to_sphere([1.0, 0], [1.0, 1.0]), [0, 1])
    np.testing.assert_allclose(project_gradient_to_sphere([0.6, 0.8], [1.2, 1.6]), [0, 0], atol=1e-15)
    np.testing.assert_array_equal(project_gradient_to_sphere([1.0, 0], [0, 3.0]), [0, 3.0])


@given(seeds, st.integers(2, 20))
def test_projected_gradient_is_tangent(seed, d):
    rng = np.random.default_rng(seed)
    Z = random_unit(rng, 5, d)
    G = project_gradient_to_sphere(Z, rng.standard_normal((5, d)))
    assert np.max(np.abs(np.sum(Z * G, axis=1))) < 1e-12
