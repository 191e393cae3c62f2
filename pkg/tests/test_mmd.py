import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from querywatch.mmd import WIDTHS, MmdConfig, kernel, mmd_exact, mmd_subsampled, subsample_indices


def _naive_mmd(A, B, widths=WIDTHS):
    """Double-loop V-statistic, independent of the vectorised path."""
    def k(a, b):
        return sum(np.exp(-np.sum((a - b) ** 2) / (2 * w * w)) for w in widths)

    kaa = np.mean([[k(a, b) for b in A] for a in A])
    kbb = np.mean([[k(a, b) for b in B] for a in B])
    kab = np.mean([[k(a, b) for b in B] for a in A])
    return np.sqrt(max(kaa + kbb - 2 * kab, 0.0))


def test_kernel_self_similarity_is_number_of_widths():
    z = np.random.default_rng(0).normal(size=7)
    assert kernel(z, z) == 5.0


def test_kernel_value_and_dimension_check():
    z, z2 = np.zeros(2), np.array([3.0, 4.0])
    want = sum(np.exp(-25 / (2 * w * w)) for w in WIDTHS)
    assert kernel(z, z2) == pytest.approx(want, rel=1e-14)
    with pytest.raises(ValueError):
        kernel(np.zeros(2), np.zeros(3))


def test_mmd_matches_naive_double_loop():
    g = np.random.default_rng(1)
    for _ in range(10):
        A, B = g.normal(size=(int(g.integers(1, 8)), 3)), g.normal(1, 2, size=(int(g.integers(1, 8)), 3))
        assert mmd_exact(A, B) == pytest.approx(_naive_mmd(A, B), rel=1e-10, abs=1e-12)


def test_mmd_identity_and_symmetry_exact():
    g = np.random.default_rng(2)
    A, B = g.normal(size=(30, 4)), g.normal(size=(17, 4))
    assert mmd_exact(A, A) == 0.0
    assert mmd_exact(A, B) == mmd_exact(B, A)


def test_two_cluster_limit_is_sqrt_ten():
    A = np.zeros((6, 2))
    B = np.full((9, 2), 1e4)
    assert mmd_exact(A, B) == pytest.approx(np.sqrt(10.0), abs=1e-3)


def test_nonnegative_over_many_random_pairs():
    g = np.random.default_rng(3)
    for _ in range(1000):
        n, m, d = g.integers(1, 6, 3)
        v = mmd_exact(g.normal(size=(n, d)), g.normal(g.normal(), 1, size=(m, d)))
        assert v >= 0.0


def test_empty_or_mismatched_sets_rejected():
    with pytest.raises(ValueError):
        mmd_exact(np.empty((0, 2)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        mmd_exact(np.zeros((2, 2)), np.zeros((2, 3)))


def test_subsampling_is_without_replacement_and_keyed():
    cfg = MmdConfig(M=12, N=10, seed=4)
    ia, ib = subsample_indices(30, 10, cfg, key=(7,))
    assert ia.shape == ib.shape == (12, 10)
    assert all(len(set(r)) == 10 for r in ia)
    # N == n_b: every subsample is the whole set
    assert all(sorted(r) == list(range(10)) for r in ib)
    ja, _ = subsample_indices(30, 10, cfg, key=(7,))
    ka, _ = subsample_indices(30, 10, cfg, key=(8,))
    np.testing.assert_array_equal(ia, ja)
    assert not np.array_equal(ia, ka)


def test_subsampled_mmd_is_mean_of_subsample_mmds():
    g = np.random.default_rng(5)
    A, B = g.normal(size=(40, 3)), g.normal(0.5, 1, size=(25, 3))
    cfg = MmdConfig(M=5, N=8, seed=1)
    ia, ib = subsample_indices(40, 25, cfg, key=(3,))
    want = np.mean([mmd_exact(A[a], B[b]) for a, b in zip(ia, ib)])
    assert mmd_subsampled(A, B, cfg, key=(3,)) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        mmd_subsampled(A[:5], B, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        MmdConfig(widths=())
    with pytest.raises(ValueError):
        MmdConfig(N=1)


pts = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 3)), elements=st.floats(-20, 20))


@settings(max_examples=60, deadline=None)
@given(pts, st.data())
def test_properties_identity_symmetry_nonnegativity_bound(A, data):
    B = data.draw(arrays(np.float64, (data.draw(st.integers(1, 6)), A.shape[1]), elements=st.floats(-20, 20)))
    v = mmd_exact(A, B)
    assert mmd_exact(A, A) == 0.0
    assert v == mmd_exact(B, A)
    # ||mean embedding difference|| is at most sqrt(2 * kernel(z, z))
    assert 0.0 <= v <= np.sqrt(10.0) + 1e-12


@settings(max_examples=40, deadline=None)
@given(pts, arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_translation_invariance(A, shift):
    g = np.random.default_rng(A.size)
    B = g.normal(size=(4, A.shape[1]))
    s = shift[: A.shape[1]]
    assert mmd_exact(A + s, B + s) == pytest.approx(mmd_exact(A, B), abs=1e-5)
