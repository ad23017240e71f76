import numpy as np
import pytest

from app.constants import Purpose
from app.core.errors import DimensionError, DomainError, NumericError
from app.services.numerics import RandomStream, as_vector, axpy, draw_gaussian, norm2_sq, ordered_sum


def test_axpy_examples():
    assert np.array_equal(axpy(0.0, np.array([1.0, 2.0]), np.array([3.0, 4.0])), [3.0, 4.0])
    assert np.array_equal(axpy(1.0, np.array([1.0, 2.0]), np.zeros(2)), [1.0, 2.0])
    assert np.array_equal(axpy(2.0, np.array([1.0, -1.0]), np.array([1.0, 1.0])), [3.0, -1.0])


def test_axpy_leaves_inputs_alone():
    x, y = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    axpy(5.0, x, y)
    assert np.array_equal(x, [1.0, 2.0])
    assert np.array_equal(y, [3.0, 4.0])


def test_axpy_length_mismatch():
    with pytest.raises(DimensionError):
        axpy(1.0, np.ones(2), np.ones(3))


@pytest.mark.parametrize("x, expected", [([0, 0, 0], 0.0), ([3, 4], 25.0), ([1, 1, 1, 1], 4.0)])
def test_norm2_sq(x, expected):
    assert norm2_sq(np.array(x, dtype=float)) == expected


def test_norm2_sq_sums_left_to_right():
    x = np.array([1.0, 1e-8, 1e-8])
    assert norm2_sq(x) == 1.0
    assert norm2_sq(x[::-1]) == 1.0000000000000002
    assert norm2_sq(np.array([])) == 0.0


def test_ordered_sum_empty():
    with pytest.raises(DimensionError):
        ordered_sum([])


def test_as_vector_rejects_nan():
    with pytest.raises(NumericError):
        as_vector([1.0, float("nan")])


def test_draw_gaussian_replays():
    stream = RandomStream(7, round=3, client=1, step=2)
    assert np.array_equal(draw_gaussian(stream, 50), draw_gaussian(stream, 50))


def test_draw_gaussian_contexts_are_independent():
    a = draw_gaussian(RandomStream(11, round=0, client=1), 100_000)
    b = draw_gaussian(RandomStream(11, round=0, client=2), 100_000)
    assert not np.array_equal(a, b)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_purpose_separates_streams():
    a = draw_gaussian(RandomStream(11, purpose=Purpose.MINIBATCH), 10)
    b = draw_gaussian(RandomStream(11, purpose=Purpose.PARTICIPATION), 10)
    assert not np.array_equal(a, b)


def test_draw_gaussian_moments():
    x = draw_gaussian(RandomStream(5), 1_000_000)
    assert abs(x.mean()) < 4e-3
    assert abs(x.var() - 1.0) < 1e-2


def test_draw_gaussian_needs_positive_count():
    with pytest.raises(DomainError):
        draw_gaussian(RandomStream(0), 0)
