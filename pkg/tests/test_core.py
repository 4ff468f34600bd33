import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idmap.core import cosine, cosine_matrix, euclidean, mean_vector, mvn
from idmap.errors import DegenerateVector, EmptyInput, ShapeError


def _rand(dim, seed):
    return np.random.default_rng(seed).normal(size=dim)


class TestCosine:
    def test_self_similarity(self):
        x = _rand(32, 0)
        assert cosine(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        a = np.zeros(8)
        b = np.zeros(8)
        a[0] = 1.0
        b[1] = 1.0
        assert cosine(a, b) == 0.0

    def test_antipodal(self):
        x = _rand(32, 1)
        assert cosine(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateVector):
            cosine(np.zeros(8), np.ones(8))

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            cosine(np.ones(4), np.ones(5))

    @given(st.integers(0, 10_000), st.floats(1e-6, 1e6))
    @settings(max_examples=50, deadline=None)
    def test_positive_scaling_invariance(self, seed, alpha):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=16)
        b = rng.normal(size=16)
        assert cosine(alpha * a, b) == pytest.approx(cosine(a, b), abs=1e-12)


class TestEuclidean:
    def test_self_distance(self):
        x = _rand(16, 2)
        assert euclidean(x, x) == 0.0

    def test_3_4_5(self):
        assert euclidean(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == pytest.approx(5.0)

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.normal(size=64)
            b = rng.normal(size=64)
            acc = 0.0
            for i in range(64):
                acc += (a[i] - b[i]) ** 2
            expect = acc ** 0.5
            assert euclidean(a, b) == pytest.approx(expect, rel=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_triangle_inequality(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(3, 24))
        assert euclidean(a, c) <= euclidean(a, b) + euclidean(b, c) + 1e-9


class TestMvn:
    def test_two_point_fixed_point(self):
        np.testing.assert_allclose(mvn(np.array([1.0, -1.0])), [1.0, -1.0])

    def test_constant_rejected(self):
        with pytest.raises(DegenerateVector):
            mvn(np.full(16, 3.5))

    def test_idempotent(self):
        v = _rand(128, 4)
        once = mvn(v)
        np.testing.assert_allclose(mvn(once), once, atol=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_output_statistics(self, seed):
        v = np.random.default_rng(seed).normal(size=64) * 7.0 + 3.0
        out = mvn(v)
        assert abs(out.mean()) < 1e-9
        assert abs(out.std() - 1.0) < 1e-9


class TestMeanVector:
    def test_two_vectors(self):
        got = mean_vector([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        np.testing.assert_allclose(got, [0.5, 0.5])

    def test_single_vector(self):
        x = _rand(8, 5)
        np.testing.assert_allclose(mean_vector([x]), x)

    def test_copies(self):
        x = _rand(8, 6)
        np.testing.assert_allclose(mean_vector([x] * 5), x, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            mean_vector([])


def test_cosine_matrix_agrees_with_scalar():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 12))
    b = rng.normal(size=(4, 12))
    m = cosine_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert m[i, j] == pytest.approx(cosine(a[i], b[j]), abs=1e-12)
