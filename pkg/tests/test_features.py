import numpy as np
import pytest
from hypothesis import given, strategies as st

from rffslam.errors import InvalidArgument
from rffslam.features import FeatureBasis, approx_kernel, feature_map, rbf_kernel, sample_frequencies


def rbf_gram(t, lengthscale):
    # closed form, written out independently of rbf_kernel
    d = t[:, None] - t[None, :]
    return np.exp(-(d**2) / (2.0 * lengthscale**2))


def test_frequency_variance_matches_lengthscale():
    basis = sample_frequencies(100, 3.0, 1, seed=0)
    assert basis.frequencies.shape == (50, 1)
    assert abs(basis.frequencies.var() / (1 / 9) - 1) < 0.3


def test_same_seed_same_frequencies():
    a = sample_frequencies(2, 1.0, 1, seed=7)
    b = sample_frequencies(2, 1.0, 1, seed=7)
    np.testing.assert_array_equal(a.frequencies, b.frequencies)


@pytest.mark.parametrize("d", [3, 1, 0, -2])
def test_odd_or_small_feature_count_rejected(d):
    with pytest.raises(InvalidArgument):
        sample_frequencies(d, 1.0, 1, 0)


@pytest.mark.parametrize("ls", [0.0, -1.0, np.nan])
def test_bad_lengthscale_rejected(ls):
    with pytest.raises(InvalidArgument):
        sample_frequencies(4, ls, 1, 0)


def test_feature_map_at_zero():
    basis = sample_frequencies(2, 1.0, 1, seed=3)
    np.testing.assert_allclose(feature_map(0.0, basis), [1.0, 0.0])


def test_dimension_mismatch_rejected():
    basis = sample_frequencies(4, 1.0, 1, 0)
    with pytest.raises(InvalidArgument):
        feature_map([1.0, 2.0], basis)
    with pytest.raises(InvalidArgument):
        approx_kernel([1.0, 2.0], [0.0, 0.0], basis)


def test_kernel_close_to_rbf_on_grid():
    t = np.linspace(0, 10, 101)
    basis = sample_frequencies(4000, 3.0, 1, seed=0)
    phi = basis.matrix(t)
    assert np.abs(phi @ phi.T - rbf_gram(t, 3.0)).max() < 0.05


def test_kernel_at_unit_distance():
    basis = sample_frequencies(4000, 3.0, 1, seed=0)
    exact = np.exp(-1 / 18)
    assert exact == pytest.approx(0.9460, abs=1e-4)
    assert approx_kernel(2.0, 3.0, basis) == pytest.approx(exact, abs=0.05)
    assert rbf_kernel(2.0, 3.0, 3.0) == pytest.approx(exact, rel=1e-15)


def test_error_shrinks_with_more_features():
    t = np.linspace(0, 10, 101)
    exact = rbf_gram(t, 3.0)
    medians = []
    for d in (50, 500, 5000):
        errs = []
        for seed in range(10):
            phi = sample_frequencies(d, 3.0, 1, seed).matrix(t)
            errs.append(np.abs(phi @ phi.T - exact).max())
        medians.append(np.median(errs))
    assert medians[0] > medians[1] > medians[2]


def test_json_round_trip():
    basis = sample_frequencies(10, 2.5, 2, seed=4)
    again = FeatureBasis.from_json(basis.to_json())
    np.testing.assert_array_equal(again.frequencies, basis.frequencies)
    assert (again.num_features, again.lengthscale, again.seed) == (10, 2.5, 4)


def test_multidimensional_inputs():
    basis = sample_frequencies(8, 1.0, 3, seed=1)
    x = np.array([0.3, -1.0, 2.0])
    assert feature_map(x, basis).shape == (8,)
    assert basis.matrix(np.ones((5, 3))).shape == (5, 8)


@given(
    t=st.floats(-1e4, 1e4, allow_nan=False),
    d=st.integers(1, 200).map(lambda k: 2 * k),
    ls=st.floats(0.01, 100.0),
    seed=st.integers(0, 2**31),
)
def test_feature_vectors_have_unit_norm(t, d, ls, seed):
    phi = feature_map(t, sample_frequencies(d, ls, 1, seed))
    assert phi.shape == (d,)
    assert phi @ phi == pytest.approx(1.0, abs=1e-12)


@given(x=st.floats(-50, 50), y=st.floats(-50, 50), seed=st.integers(0, 1000))
def test_kernel_symmetric_and_one_on_diagonal(x, y, seed):
    basis = sample_frequencies(20, 3.0, 1, seed)
    assert approx_kernel(x, y, basis) == approx_kernel(y, x, basis)
    assert approx_kernel(x, x, basis) == pytest.approx(1.0, abs=1e-12)


@given(
    t=st.lists(st.floats(-20, 20), min_size=1, max_size=30),
    seed=st.integers(0, 1000),
)
def test_gram_matrix_is_psd(t, seed):
    phi = sample_frequencies(16, 3.0, 1, seed).matrix(np.array(t))
    assert np.linalg.eigvalsh(phi @ phi.T).min() >= -1e-10
