import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import mean_field_brute
from renetseg.densecrf import CrfParams, argmax_labels, mean_field


def _random_probs(rng, L, h, w):
    p = rng.random((L, h, w)) + 0.05
    return p / p.sum(axis=0)


def _flipped_grid():
    probs = np.empty((2, 5, 5))
    probs[0], probs[1] = 0.9, 0.1
    probs[:, 2, 2] = (0.4, 0.6)
    return probs


def test_flipped_pixel_joins_background():
    probs = _flipped_grid()
    image = np.full((3, 5, 5), 0.5)
    params = CrfParams(appearance_weight=0, smoothness_weight=1, theta_gamma=2, iterations=2)
    out = mean_field(probs, image, params)
    assert argmax_labels(probs)[2, 2] == 1
    assert not argmax_labels(out).any()
    ref = mean_field_brute(probs, image, 0, 1, 10, 13, 2, 2)
    np.testing.assert_allclose(out, ref, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_matches_brute_oracle(seed):
    rng = np.random.default_rng(seed)
    L, h, w = 3, 4, 5
    probs, image = _random_probs(rng, L, h, w), rng.random((3, h, w))
    params = CrfParams(1.5, 0.7, 2.0, 0.4, 1.5, iterations=3)
    ref = mean_field_brute(probs, image, 1.5, 0.7, 2.0, 0.4, 1.5, 3)
    np.testing.assert_allclose(mean_field(probs, image, params), ref, rtol=1e-9, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(0, 4))
def test_normalized_every_iteration(seed, iterations):
    rng = np.random.default_rng(seed)
    probs = _random_probs(rng, 3, 5, 6)
    hist = []
    out = mean_field(probs, rng.random((3, 5, 6)), CrfParams(iterations=iterations), history=hist)
    assert len(hist) == iterations
    for q in hist + [out]:
        np.testing.assert_allclose(q.sum(axis=0), 1, atol=1e-6)


def test_zero_iterations_identity():
    rng = np.random.default_rng(1)
    probs = _random_probs(rng, 4, 3, 3)
    np.testing.assert_array_equal(mean_field(probs, rng.random((3, 3, 3)), CrfParams(iterations=0)), probs)


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_zero_pairwise_keeps_argmax(seed, iterations):
    rng = np.random.default_rng(seed)
    probs = _random_probs(rng, 3, 4, 4)
    out = mean_field(probs, rng.random((3, 4, 4)), CrfParams(0, 0, iterations=iterations))
    np.testing.assert_array_equal(argmax_labels(out), argmax_labels(probs))


@given(st.integers(0, 10_000))
def test_label_permutation_symmetry(seed):
    rng = np.random.default_rng(seed)
    probs, image = _random_probs(rng, 4, 4, 5), rng.random((3, 4, 5))
    perm = rng.permutation(4)
    np.testing.assert_allclose(mean_field(probs[perm], image), mean_field(probs, image)[perm], rtol=1e-12, atol=1e-15)


def test_theta_beta_irrelevant_on_constant_image():
    rng = np.random.default_rng(2)
    probs, image = _random_probs(rng, 3, 5, 5), np.full((3, 5, 5), 0.3)
    a = mean_field(probs, image, CrfParams(theta_beta=13))
    b = mean_field(probs, image, CrfParams(theta_beta=26))
    np.testing.assert_array_equal(a, b)


def test_errors():
    with pytest.raises(ValueError):
        mean_field(np.full((2, 3, 3), 0.3), np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        mean_field(np.full((2, 200, 100), 0.5), np.zeros((3, 200, 100)))
    with pytest.raises(ValueError):
        CrfParams(theta_alpha=0)
    with pytest.raises(ValueError):
        CrfParams(iterations=-1)


def test_argmax_cases():
    onehot = np.eye(3)[[[0, 2], [1, 1]]].transpose(2, 0, 1)
    np.testing.assert_array_equal(argmax_labels(onehot), [[0, 2], [1, 1]])
    assert argmax_labels(np.full((2, 1, 1), 0.5))[0, 0] == 0
    rng = np.random.default_rng(3)
    p = rng.random((3, 3, 3))
    for i in range(3):
        for j in range(3):
            best = 0
            for l in range(1, 3):
                if p[l, i, j] > p[best, i, j]:
                    best = l
            assert argmax_labels(p)[i, j] == best
