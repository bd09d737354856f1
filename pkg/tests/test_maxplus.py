import numpy as np
import pytest
from fractions import Fraction
from hypothesis import given
from hypothesis import strategies as st

from maxplusnet.maxplus import (
    anti_dilation_forward,
    anti_erosion_forward,
    conv_dilation_forward,
    dilation_forward,
    erosion_forward,
    linear_forward,
    maxplus_matmul,
    pointwise_max_reduce,
    relu_forward,
    squared_error_loss,
    toeplitz_from_taps,
    windows_from_signal,
)

from conftest import dilation_case, grid, grid_matrix, grid_vector


def test_dilation_examples():
    assert np.array_equal(dilation_forward(np.zeros((2, 2)), np.zeros(2)), [0.0, 0.0])
    assert np.array_equal(dilation_forward([[1, -1], [0, 2]], [0, 1]), [1.0, 3.0])
    for a, b in [(0.3, 2.5), (-4.0, 5.5), (7.0, 7.0)]:
        assert np.array_equal(dilation_forward([[0, -10], [-10, 0]], [a, b]), [a, b])


def test_erosion_examples():
    assert np.array_equal(erosion_forward(np.zeros((2, 2)), np.zeros(2)), [0.0, 0.0])
    assert np.array_equal(erosion_forward([[1, -1], [0, 2]], [1, 3]), [0.0, 1.0])
    assert np.array_equal(erosion_forward(np.zeros((2, 1)), [1, 2]), [1.0])


def test_matmul_examples():
    assert np.array_equal(maxplus_matmul([[0]], [[0]]), [[0.0]])
    assert np.array_equal(maxplus_matmul([[1, 2]], [[0], [-1]]), [[1.0]])


def test_reduce_examples():
    W = np.array([[1.0, -2.0], [0.5, 3.0]])
    assert np.array_equal(pointwise_max_reduce([W]), W)
    assert np.array_equal(pointwise_max_reduce([[[0]], [[1]]]), [[1.0]])


def test_anti_examples():
    assert np.array_equal(anti_dilation_forward([[0, 0]], [1, 2]), [-1.0])
    W = np.array([[0.5, -1.0], [2.0, 0.0]])
    assert np.array_equal(anti_dilation_forward(W, np.zeros(2)), dilation_forward(W, np.zeros(2)))
    # W is 2x1, so the erosion reads a 2-vector
    assert np.array_equal(anti_erosion_forward([[0], [0]], [1, 1]), [-1.0])


def test_conv_examples():
    assert np.array_equal(conv_dilation_forward([0, 0], [[0, 0]]), [0.0])
    assert np.array_equal(conv_dilation_forward([1, 0], [[0, 2], [3, 0]]), [2.0, 4.0])


def test_windows_examples():
    assert np.array_equal(windows_from_signal([1, 2, 3], 2), [[1, 2], [2, 3]])
    sig = np.array([4.0, -1.0, 2.5])
    assert np.array_equal(windows_from_signal(sig, 3), [sig])
    assert np.array_equal(windows_from_signal(sig, 1), sig[:, None])


def test_classical_examples():
    assert np.array_equal(relu_forward([-1, 2]), [0.0, 2.0])
    x = np.array([0.3, -1.2, 4.0])
    assert np.array_equal(linear_forward(np.eye(3), np.zeros(3), x), x)
    assert squared_error_loss(x, x) == 0.0


@pytest.mark.parametrize("call", [
    lambda: dilation_forward(np.zeros((2, 3)), np.zeros(2)),
    lambda: erosion_forward(np.zeros((2, 3)), np.zeros(3)),
    lambda: maxplus_matmul(np.zeros((2, 3)), np.zeros((2, 3))),
    lambda: pointwise_max_reduce([]),
    lambda: pointwise_max_reduce([np.zeros((1, 2)), np.zeros((2, 1))]),
    lambda: conv_dilation_forward(np.zeros(3), np.zeros((2, 2))),
    lambda: windows_from_signal([1.0, 2.0], 3),
    lambda: linear_forward(np.eye(2), np.zeros(3), np.zeros(2)),
    lambda: squared_error_loss(np.zeros(2), np.zeros(3)),
    lambda: dilation_forward(np.zeros((0, 2)), np.zeros(2)),
])
def test_dimension_errors(call):
    with pytest.raises(ValueError):
        call()


@given(dilation_case(6), st.data())
def test_adjunction(case, data):
    W, x = case
    y = dilation_forward(W, x) + data.draw(grid_vector(W.shape[0])) / 4
    assert bool((dilation_forward(W, x) <= y).all()) == bool((x <= erosion_forward(W, y)).all())


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.data())
def test_composition(m, p, n, data):
    A, B = data.draw(grid_matrix(m, p)), data.draw(grid_matrix(p, n))
    x = data.draw(grid_vector(n))
    assert np.array_equal(dilation_forward(maxplus_matmul(A, B), x), dilation_forward(A, dilation_forward(B, x)))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.data())
def test_pointwise_max_reduction(m, n, count, data):
    Ws = [data.draw(grid_matrix(m, n)) for _ in range(count)]
    x = data.draw(grid_vector(n))
    expected = np.max([dilation_forward(W, x) for W in Ws], axis=0)
    assert np.array_equal(dilation_forward(pointwise_max_reduce(Ws), x), expected)


@given(dilation_case(5))
def test_erosion_duality(case):
    W, x = case
    y = x[: W.shape[0]] if W.shape[0] <= x.shape[0] else np.resize(x, W.shape[0])
    assert np.array_equal(erosion_forward(W, y), -dilation_forward(W.T, -y))


@given(st.integers(1, 4), st.integers(0, 5), st.data())
def test_conv_matches_toeplitz(p, extra, data):
    w = data.draw(grid_vector(p))
    sig = data.draw(grid_vector(p + extra))
    dense = dilation_forward(toeplitz_from_taps(w, sig.shape[0]), sig)
    assert np.array_equal(conv_dilation_forward(w, windows_from_signal(sig, p)), dense)


@given(st.integers(1, 4), st.integers(1, 5), st.data())
def test_conv_translation_invariance(p, extra, data):
    w = data.draw(grid_vector(p))
    sig = data.draw(grid_vector(p + extra + 1))
    out = conv_dilation_forward(w, windows_from_signal(sig, p))
    shifted = conv_dilation_forward(w, windows_from_signal(sig[1:], p))
    assert np.array_equal(shifted, out[1:])


@given(dilation_case(5), grid)
def test_dilation_commutes_with_constant_shift(case, c):
    W, x = case
    assert np.array_equal(dilation_forward(W, x + c), dilation_forward(W, x) + c)


def test_fraction_arrays_are_supported():
    W = np.array([[Fraction(1, 3), Fraction(-2, 7)]], dtype=object)
    x = np.array([Fraction(1, 5), Fraction(5, 6)], dtype=object)
    out = dilation_forward(W, x)
    assert out[0] == max(Fraction(1, 3) + Fraction(1, 5), Fraction(-2, 7) + Fraction(5, 6))
    # closing is extensive
    assert (erosion_forward(W, out) >= x).all()
