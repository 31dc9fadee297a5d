"""test_oracles.py :: Tests for the brute-force reference implementations."""

import numpy as np
import pytest

from lipfast import tensor as T
from lipfast.errors import OracleError, UsageError
from lipfast.layers.lipschitz import ScaledCosineAttention
from lipfast.oracles import (
    GRADCHECK_SUITES,
    PRIMITIVE_TOLERANCE,
    GaussianPairs,
    check_gradient,
    empirical_lipschitz,
    explicit_jacobian,
    explicit_jacobian_spectral_norm,
    finite_diff_grad,
    naive_average_precision,
    naive_bce,
    naive_conv2d,
    relative_error,
    run_gradcheck,
)
from lipfast.tensor import Tensor


def test_finite_diff_of_sum(float64: None, rng: np.random.Generator) -> None:
    """Test that the gradient of sum(x) is all ones."""
    x = rng.standard_normal((3, 2))
    grad = finite_diff_grad(T.sum_, x)
    assert np.allclose(grad.data, 1.0, atol=1e-9)


def test_finite_diff_of_half_square(
    float64: None, rng: np.random.Generator
) -> None:
    """Test that the gradient of ||x||^2 / 2 is x."""
    x = rng.standard_normal(5)
    grad = finite_diff_grad(lambda v: T.scale(T.sum_(v * v), 0.5), x)
    assert np.max(np.abs(grad.data - x)) <= 1e-8


def test_finite_diff_restores_input(float64: None) -> None:
    """Test that the evaluation point is left untouched."""
    x = Tensor(np.array([1.0, 2.0]))
    finite_diff_grad(T.sum_, x)
    assert np.array_equal(x.data, [1.0, 2.0])


def test_finite_diff_non_finite(float64: None) -> None:
    """Test that a non-finite function value is an oracle error."""
    with pytest.raises(OracleError):
        finite_diff_grad(lambda v: float("nan"), np.zeros(2))


def test_empirical_lipschitz_linear(
    float64: None, rng: np.random.Generator
) -> None:
    """Test that f(x) = 2x gives a ratio of two."""
    estimate = empirical_lipschitz(
        lambda x: T.scale(x, 2.0), GaussianPairs((4,)), 200, rng
    )
    assert 2.0 - 1e-6 <= estimate <= 2.0 + 1e-12


def test_empirical_lipschitz_bounded_attention(
    float64: None, rng: np.random.Generator
) -> None:
    """Test that bounded outputs make far-apart pairs stretch nothing."""
    p = ScaledCosineAttention(8, rng, heads=2)
    estimate = empirical_lipschitz(
        lambda x: p(x), GaussianPairs((5, 8), scale=1e6), 100, rng
    )
    assert estimate < 1e-4


def test_empirical_lipschitz_skips_equal_points(
    rng: np.random.Generator,
) -> None:
    """Test that coincident pairs are ignored."""
    x = np.ones(3)
    assert empirical_lipschitz(T.relu, lambda _: (x, x), 10, rng) == 0.0


def test_spectral_norm() -> None:
    """Test the identity, a diagonal and the zero matrix."""
    assert explicit_jacobian_spectral_norm(np.eye(3)) == pytest.approx(1.0)
    assert explicit_jacobian_spectral_norm(
        np.diag([3.0, 1.0])
    ) == pytest.approx(3.0, abs=1e-9)
    assert explicit_jacobian_spectral_norm(np.zeros((2, 2))) == 0.0


def test_spectral_norm_matches_svd(rng: np.random.Generator) -> None:
    """Test power iteration against the SVD on a random matrix."""
    m = rng.standard_normal((6, 4))
    expected = np.linalg.svd(m, compute_uv=False)[0]
    assert explicit_jacobian_spectral_norm(m) == pytest.approx(
        expected, rel=1e-8
    )


def test_spectral_norm_non_convergence() -> None:
    """Test that running out of iterations is an oracle error."""
    with pytest.raises(OracleError):
        explicit_jacobian_spectral_norm(np.diag([3.0, 1.0]), max_iter=1)


def test_explicit_jacobian_of_affine_map(
    float64: None, rng: np.random.Generator
) -> None:
    """Test that an affine map recovers its matrix."""
    a = rng.standard_normal((3, 4))
    jacobian = explicit_jacobian(
        lambda x: T.matmul(Tensor(a), x), rng.standard_normal((4, 1))
    )
    assert np.allclose(jacobian, a, atol=1e-8)


def test_naive_conv2d_channel_check() -> None:
    """Test that the loop oracle checks input channels."""
    with pytest.raises(UsageError):
        naive_conv2d(np.ones((3, 3, 2)), np.ones((1, 1, 3, 1)))


def test_naive_references() -> None:
    """Test the metric and loss references on hand-computed values."""
    assert naive_average_precision([0.9, 0.8, 0.7], [0, 1, 1]) == (
        pytest.approx((1 / 2 + 2 / 3) / 2)
    )
    assert np.isnan(naive_average_precision([0.1, 0.2], [0, 0]))
    assert naive_bce([0.0, 0.0], [1, 0]) == pytest.approx(np.log(2.0))


def test_relative_error_floor() -> None:
    """Test relative scaling and the absolute floor near zero."""
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(0.0, 1e-6) == pytest.approx(1e-3)


def test_check_gradient_detects_wrong_gradient(float64: None) -> None:
    """Test that a mismatched analytic gradient fails the check."""
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ok = check_gradient(
        "square", lambda: T.sum_(x * x), {"x": x}, PRIMITIVE_TOLERANCE
    )
    assert ok.passed
    assert ok.failing_index is None

    # the tape sees x * c while the function evaluates x * x
    def loss() -> Tensor:
        return T.sum_(x * Tensor(np.array(x.data)))

    bad = check_gradient("frozen", loss, {"x": x}, PRIMITIVE_TOLERANCE)
    assert not bad.passed
    assert bad.failing_index is not None


def test_check_gradient_needs_grad_tensors() -> None:
    """Test that constants cannot be gradient-checked."""
    x = Tensor(np.ones(2))
    with pytest.raises(UsageError):
        check_gradient("const", lambda: T.sum_(x), {"x": x}, 1e-5)


@pytest.mark.parametrize("module", sorted(GRADCHECK_SUITES))
def test_gradcheck_suites_pass(module: str) -> None:
    """Test every gradient check of a suite over 20 seeds."""
    results = run_gradcheck(module, range(20))
    assert results
    failures = [report for _, report in results if not report.passed]
    assert not failures, failures


def test_gradcheck_unknown_module() -> None:
    """Test that an unknown suite name is a usage error."""
    with pytest.raises(UsageError, match="tensor-autodiff"):
        run_gradcheck("nope")
