import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from signet import numerics as nx, transforms as T
from signet.exceptions import DegenerateInputError, ShapeError

X4 = np.array([1.0, 2.0, 3.0, 4.0])
GRAM4 = np.array([[5.0, 8.0, 11.0], [8.0, 13.0, 18.0], [11.0, 18.0, 25.0]])


# -- slicing ------------------------------------------------------------------------


def test_slice_examples():
    assert np.array_equal(T.slice_signal(X4, 2, 1), [[1, 2], [2, 3], [3, 4]])
    assert np.array_equal(T.slice_signal(X4, 2, 2), [[1, 2], [3, 4]])
    assert T.slice_signal(np.zeros(128), 3, 1).shape == (126, 3)


def test_slice_drops_tail_and_rejects_long_window():
    assert np.array_equal(T.slice_signal(np.arange(5.0), 2, 2), [[0, 1], [2, 3]])
    with pytest.raises(ShapeError):
        T.slice_signal(X4, 5)


@settings(max_examples=100, deadline=None)
@given(N=st.integers(1, 60), k=st.integers(1, 8), h=st.integers(1, 5))
def test_output_size_law(N, k, h):
    if k > N:
        with pytest.raises(ShapeError):
            T.num_windows(N, k, h)
        return
    m = (N - k) // h + 1
    S = T.slice_signal(np.arange(float(N)), k, h)
    assert S.shape == (m, k)
    for r in range(m):
        assert np.array_equal(S[r], np.arange(r * h, r * h + k))
    assert T.s2m_forward(S, np.eye(k)).shape == (m, m)


# -- S2M forward ------------------------------------------------------------------------


def test_s2m_identity_is_gram_hand_example():
    S = T.slice_signal(X4, 2)
    assert np.array_equal(T.s2m_forward(S, np.eye(2)), GRAM4)
    assert np.array_equal(T.gram(X4, k=2), GRAM4)


def test_s2m_asymmetric_hand_example():
    M = T.s2m_forward(T.slice_signal(X4, 2), [[0.0, 1.0], [0.0, 0.0]])
    assert np.array_equal(M, [[2, 3, 4], [4, 6, 8], [6, 9, 12]])
    assert not np.array_equal(M, M.T)


def test_s2m_element_formula():
    rng = np.random.default_rng(0)
    S = T.slice_signal(rng.standard_normal(12), 3, 2)
    F = rng.standard_normal((3, 3))
    M = T.s2m_forward(S, F)
    for a in range(len(S)):
        for b in range(len(S)):
            assert M[a, b] == pytest.approx(sum(S[a, i] * F[i, j] * S[b, j] for i in range(3) for j in range(3)), abs=1e-12)


def test_s2m_filter_shape_mismatch():
    with pytest.raises(ShapeError):
        T.s2m_forward(T.slice_signal(X4, 2), np.eye(3))


@pytest.mark.parametrize("N,m", [(128, 126), (512, 510)])
def test_paper_image_sizes(N, m):
    rng = np.random.default_rng(1)
    img = T.s2m_sample(rng.standard_normal((2, N)), rng.standard_normal((3, 3)), rng.standard_normal((3, 3)), 3, 1)
    assert img.shape == (2, m, m)


def test_s2m_sample_identical_channels():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(20)
    F = rng.standard_normal((3, 3))
    img = T.s2m_sample(np.stack([x, x]), F, F)
    assert np.array_equal(img[0], img[1])


def test_symmetric_filter_gives_symmetric_matrix_and_psd_factorization():
    rng = np.random.default_rng(3)
    S = T.slice_signal(rng.standard_normal(50), 4)
    A = rng.standard_normal((4, 4))
    M = T.s2m_forward(S, A + A.T)
    assert np.max(np.abs(M - M.T)) <= 1e-12
    G = rng.standard_normal((4, 4))
    P = T.s2m_forward(S, G.T @ G)
    V = rng.standard_normal((100, len(P)))
    assert np.min(np.einsum("ij,jk,ik->i", V, P, V)) >= -1e-10


def test_gram_constant_signal_and_symmetry():
    M = T.gram(np.full(10, 1.5), k=3)
    assert np.allclose(M, 3 * 1.5**2, rtol=0, atol=1e-15)
    M = T.gram(np.random.default_rng(4).standard_normal(30), k=4)
    assert np.array_equal(M, M.T)


# -- S2M backward ------------------------------------------------------------------------


def test_s2m_backward_sum_example():
    S = T.slice_signal(X4, 2)
    dF, _ = T.s2m_backward(S, np.eye(2), np.ones((3, 3)), 4)
    assert np.array_equal(dF, [[36, 54], [54, 81]])
    num = nx.numerical_gradient(lambda F: float(np.sum(T.s2m_forward(S, F))), np.eye(2))
    np.testing.assert_allclose(num, dF, rtol=1e-9)


def test_s2m_backward_zero_upstream():
    rng = np.random.default_rng(5)
    S = T.slice_signal(rng.standard_normal(16), 3)
    dF, dx = T.s2m_backward(S, rng.standard_normal((3, 3)), np.zeros((14, 14)), 16)
    assert not dF.any() and not dx.any() and dx.shape == (16,)


def test_s2m_backward_uncovered_samples_get_zero_gradient():
    rng = np.random.default_rng(6)
    x = rng.standard_normal(9)
    S = T.slice_signal(x, 2, 3)  # windows cover 0,1 3,4 6,7
    _, dx = T.s2m_backward(S, rng.standard_normal((2, 2)), rng.standard_normal((3, 3)), 9, 3)
    assert dx[2] == dx[5] == dx[8] == 0.0


def test_s2m_backward_random_case_matches_finite_differences():
    rng = np.random.default_rng(7)
    x, F = rng.standard_normal(16), rng.standard_normal((3, 3))
    R = rng.standard_normal((14, 14))

    def loss(sig, filt):
        return float(np.sum(T.s2m_forward(T.slice_signal(sig, 3), filt) * R))

    dF, dx = T.s2m_backward(T.slice_signal(x, 3), F, R, 16)
    assert nx.relative_error(dF, nx.numerical_gradient(lambda f: loss(x, f), F)) < 1e-6
    assert nx.relative_error(dx, nx.numerical_gradient(lambda s: loss(s, F), x)) < 1e-6


def test_s2m_tape_op_channel_gradient_flow():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((3, 2, 12))
    F0 = rng.standard_normal((2, 3, 3))
    R = np.zeros((3, 2, 10, 10))
    R[:, 0] = rng.standard_normal((3, 10, 10))  # the loss only sees channel 0 (I)
    tape = nx.Tape()
    F = tape.param(F0, "F")
    out = T.s2m(tape.constant(x), F)
    loss = nx.sum_all(nx.matmul(nx.reshape(out, (1, -1)), tape.constant(R.reshape(-1, 1))))
    g = tape.backward(loss)["F"]
    assert np.any(g[0] != 0) and not np.any(g[1])

    def f(Fn):
        t = Fn.tape
        y = T.s2m(t.constant(x), Fn)
        return nx.sum_all(nx.matmul(nx.reshape(y, (1, -1)), t.constant(R.reshape(-1, 1))))

    assert nx.finite_diff_check(f, F0) < 1e-6


def test_s2m_tape_op_signal_gradient():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 2, 11))
    F = rng.standard_normal((2, 2, 2))
    R = rng.standard_normal((2, 2, 5, 5))

    def f(xn):
        t = xn.tape
        y = T.s2m(xn, t.constant(F), h=2)
        return nx.sum_all(nx.matmul(nx.reshape(y, (1, -1)), t.constant(R.reshape(-1, 1))))

    assert nx.finite_diff_check(f, x) < 1e-6


# -- GAF ------------------------------------------------------------------------------------


def test_gasf_exact_example():
    np.testing.assert_allclose(T.gaf([1.0, 0.0, -1.0]), [[1, 0, -1], [0, -1, 0], [-1, 0, 1]], atol=1e-15)


def test_gasf_diagonal_identity():
    x = np.random.default_rng(10).standard_normal(9)
    xt = (x - x.min()) / (x.max() - x.min()) * 2 - 1
    np.testing.assert_allclose(np.diag(T.gaf(x)), 2 * xt**2 - 1, atol=1e-12)


@pytest.mark.parametrize("variant", ["summation", "difference"])
def test_gaf_matches_angle_by_angle_evaluation(variant):
    x = np.random.default_rng(11).standard_normal(8)
    xt = (x - x.min()) / (x.max() - x.min()) * 2 - 1
    phi = [math.acos(max(-1.0, min(1.0, v))) for v in xt]
    if variant == "summation":
        expected = [[math.cos(a + b) for b in phi] for a in phi]
    else:
        expected = [[math.sin(a - b) for b in phi] for a in phi]
    got = T.gaf(x, variant)
    np.testing.assert_allclose(got, expected, atol=1e-12)
    assert np.all(np.abs(got) <= 1.0)


def test_gaf_constant_series_is_degenerate():
    with pytest.raises(DegenerateInputError):
        T.gaf(np.ones(5))


# -- MTF ---------------------------------------------------------------------------------------


def test_mtf_alternating_example():
    expected = [[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]]
    assert np.array_equal(T.mtf([0.0, 1.0, 0.0, 1.0], 2), expected)


def test_mtf_monotone_series():
    M, W = T.mtf(np.arange(6.0), 2, return_transitions=True)
    # lower bin {0,1,2}: transitions 0->0 twice and one 0->1; upper bin has 1->1 twice
    np.testing.assert_allclose(W, [[2 / 3, 1 / 3], [0.0, 1.0]])
    assert W[0, 1] > 0 and W[1, 0] == 0
    assert M.shape == (6, 6)


def test_mtf_rows_sum_to_one_or_zero():
    rng = np.random.default_rng(12)
    for _ in range(20):
        _, W = T.mtf(rng.standard_normal(int(rng.integers(2, 40))), int(rng.integers(2, 10)), return_transitions=True)
        sums = W.sum(axis=1)
        assert np.all(np.isclose(sums, 1.0, atol=1e-12) | (sums == 0))


def test_mtf_zero_outgoing_row_left_zero():
    # the last point is the only member of the top bin, so it has no outgoing transition
    _, W = T.mtf([0.0, 1.0, 2.0, 3.0], 4, return_transitions=True)
    assert not W[3].any()


# -- constellation density and reshape -------------------------------------------------------------


def test_constellation_origin_goes_to_lower_cell():
    D = T.constellation_density(np.zeros((2, 7)), grid=2, radius=1.0)
    assert np.array_equal(D, [[1.0, 0.0], [0.0, 0.0]])


def test_constellation_quadrant_centres_are_uniform():
    pts = np.array([[0.5, 0.5, -0.5, -0.5], [0.5, -0.5, 0.5, -0.5]])
    assert np.array_equal(T.constellation_density(pts, grid=2), np.full((2, 2), 0.25))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 50), st.integers(2, 40), st.integers(0, 2**31))
def test_constellation_total_mass_is_one(n, grid, seed):
    pts = np.random.default_rng(seed).normal(scale=2.0, size=(2, n))  # many points clamp to the border
    assert T.constellation_density(pts, grid=grid).sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("N,side", [(128, 16), (512, 32)])
def test_reshape_square(N, side):
    x = np.arange(2.0 * N).reshape(2, N)
    R = T.reshape_square(x)
    assert R.shape == (side, side)
    assert np.array_equal(R[0], x[0, :side])


def test_reshape_rejects_non_square():
    with pytest.raises(ShapeError):
        T.reshape_square(np.zeros((2, 10)))


# -- scikit-learn transformers -----------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(T.TRANSFORMS))
def test_transformers_follow_sklearn_conventions(name):
    tr = T.make_transformer(name)
    assert clone(tr).get_params() == tr.get_params()
    X = np.random.default_rng(13).uniform(-1, 1, (3, 2, 32))
    out = tr.fit_transform(X)
    assert out.ndim == 4 and out.shape[0] == 3


def test_s2m_transformer_filters_are_standard_normal_and_seeded():
    X = np.zeros((1, 2, 8))
    a = T.S2MTransformer(random_state=0).fit(X).filters_
    b = T.S2MTransformer(random_state=0).fit(X).filters_
    assert a.shape == (2, 3, 3) and np.array_equal(a, b)
    big = T.S2MTransformer(k=50, random_state=1).fit(np.zeros((1, 2, 60))).filters_
    assert abs(big.mean()) < 0.05 and abs(big.std() - 1) < 0.05


def test_s2m_transformer_matches_function():
    rng = np.random.default_rng(14)
    X = rng.standard_normal((2, 2, 20))
    F = rng.standard_normal((2, 3, 3))
    out = T.S2MTransformer(filters=F).fit(X).transform(X)
    np.testing.assert_array_equal(out[1], T.s2m_sample(X[1], F[0], F[1]))


def test_unknown_transform_name():
    with pytest.raises(ValueError):
        T.make_transformer("wavelet")
