import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biamasr.biam import biam_backward, biam_forward, monotonicity_score
from biamasr.gradcheck import numeric_grads
from biamasr.numerics import make_rng, relative_error


def test_scaled_identity_self_alignment():
    x = 50.0 * np.eye(3)
    out = biam_forward(x, x)
    assert np.all(np.diag(out.w12) > 0.999)
    np.testing.assert_allclose(out.x_aligned, x, atol=1e-6)
    np.testing.assert_allclose(out.y_aligned, x, atol=1e-6)
    assert monotonicity_score(out.w12, 0.1) > 0.99


def test_single_grapheme():
    rng = make_rng(0)
    x = rng.standard_normal((4, 2))
    y = rng.standard_normal((1, 2))
    out = biam_forward(x, y)
    np.testing.assert_array_equal(out.w12, np.ones((4, 1)))
    np.testing.assert_allclose(out.y_aligned, np.repeat(y, 4, axis=0))


def test_hand_evaluated_case():
    out = biam_forward([[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0]])
    np.testing.assert_array_equal(out.a, [[2.0], [0.0]])
    e2 = np.exp(2.0)
    expected = [e2 / (e2 + 1), 1 / (e2 + 1)]
    np.testing.assert_allclose(out.w21, [expected], rtol=1e-14)
    np.testing.assert_allclose(out.x_aligned, [expected], rtol=1e-14)
    assert out.x_aligned[0, 0] == pytest.approx(0.8808, abs=1e-4)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="embedding dims differ"):
        biam_forward(np.zeros((3, 2)), np.zeros((2, 3)))


def test_empty_sequence_rejected():
    with pytest.raises(ValueError, match="empty"):
        biam_forward(np.zeros((0, 2)), np.zeros((2, 2)))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 16), st.integers(0, 2**32 - 1),
       st.floats(0.1, 5.0))
def test_row_stochastic_and_shapes(n1, n2, d, seed, scale):
    rng = make_rng(seed)
    out = biam_forward(scale * rng.standard_normal((n1, d)), scale * rng.standard_normal((n2, d)))
    assert np.all(np.abs(out.w12.sum(axis=1) - 1) <= 1e-12)
    assert np.all(np.abs(out.w21.sum(axis=1) - 1) <= 1e-12)
    assert out.x_aligned.shape == (n2, d)
    assert out.y_aligned.shape == (n1, d)


def test_permutation_equivariance(rng):
    x = rng.standard_normal((6, 3))
    y = rng.standard_normal((4, 3))
    perm = np.array([2, 0, 3, 1])
    a = biam_forward(x, y)
    b = biam_forward(x, y[perm])
    np.testing.assert_allclose(b.a, a.a[:, perm], rtol=1e-14)
    np.testing.assert_allclose(b.w12, a.w12[:, perm], rtol=1e-12)
    np.testing.assert_allclose(b.w21, a.w21[perm], rtol=1e-12)
    np.testing.assert_allclose(b.x_aligned, a.x_aligned[perm], rtol=1e-12)
    np.testing.assert_allclose(b.y_aligned, a.y_aligned, rtol=1e-12)


def test_deterministic(rng):
    x, y = rng.standard_normal((5, 3)), rng.standard_normal((2, 3))
    a, b = biam_forward(x, y), biam_forward(x, y)
    np.testing.assert_array_equal(a.y_aligned, b.y_aligned)


def test_backward_zero_upstream(rng):
    out = biam_forward(rng.standard_normal((3, 2)), rng.standard_normal((2, 2)))
    gx, gy = biam_backward(out, np.zeros((2, 2)), np.zeros((3, 2)))
    assert not gx.any() and not gy.any()


def test_backward_shape_mismatch(rng):
    out = biam_forward(rng.standard_normal((3, 2)), rng.standard_normal((2, 2)))
    with pytest.raises(ValueError):
        biam_backward(out, np.zeros((3, 2)), np.zeros((3, 2)))


def _fd_check(x, y, which):
    def loss():
        out = biam_forward(x, y)
        return float(out.y_aligned.sum() if which == "y" else out.x_aligned.sum())

    out = biam_forward(x, y)
    ones_x = np.ones_like(out.x_aligned) if which == "x" else None
    ones_y = np.ones_like(out.y_aligned) if which == "y" else None
    gx, gy = biam_backward(out, ones_x, ones_y)
    num = numeric_grads(loss, {"x": x, "y": y})
    return max(relative_error(gx, num["x"]), relative_error(gy, num["y"]))


@pytest.mark.parametrize("which", ["x", "y"])
def test_backward_sum_losses(which, rng):
    assert _fd_check(rng.standard_normal((3, 2)), rng.standard_normal((2, 2)), which) <= 1e-3


def test_backward_random_instances():
    rng = make_rng(99)
    worst = 0.0
    for _ in range(50):
        n1, n2, d = rng.integers(1, 6, size=3)
        x, y = rng.standard_normal((n1, d)), rng.standard_normal((n2, d))
        rx, ry = rng.standard_normal((n2, d)), rng.standard_normal((n1, d))

        def loss():
            out = biam_forward(x, y)
            return float((rx * out.x_aligned).sum() + (ry * out.y_aligned).sum())

        gx, gy = biam_backward(biam_forward(x, y), rx, ry)
        num = numeric_grads(loss, {"x": x, "y": y})
        worst = max(worst, relative_error(gx, num["x"]), relative_error(gy, num["y"]))
    assert worst <= 1e-3


def test_monotonicity_permutation_diagonal():
    assert monotonicity_score(np.eye(7), 0.05) == pytest.approx(1.0)


def test_monotonicity_uniform():
    n = 400
    assert monotonicity_score(np.full((n, n), 1.0 / n), 0.1) == pytest.approx(0.19, abs=0.01)


def test_monotonicity_uneven_lengths_perfect_alignment():
    # five graphemes held for three frames each: every frame centre is within
    # 0.1 of its grapheme centre, but left edges drift up to 2/15 apart
    w = np.repeat(np.eye(5), 3, axis=0)
    assert monotonicity_score(w, 0.1) == pytest.approx(1.0)
    assert monotonicity_score(w, 0.1, centered=False) == pytest.approx(2 / 3)


def test_monotonicity_wide_graphemes_exceed_band():
    # cells of width 1/3 put the outer frames 0.125 from their grapheme centre
    w = np.repeat(np.eye(3), 4, axis=0)
    assert monotonicity_score(w, 0.1) == pytest.approx(0.5)


def test_monotonicity_band_validation():
    with pytest.raises(ValueError):
        monotonicity_score(np.eye(2), 0.0)
