"""test_lipschitz.py :: Tests for CenterNorm, SCSA, WRS and the block."""

import numpy as np
import pytest

from lipfast import tensor as T
from lipfast.errors import ConfigError, DimensionError, UsageError
from lipfast.layers.baseline import BaselineBlock, DotProductAttention
from lipfast.layers.lipschitz import (
    CenterNorm,
    LipschitzBlock,
    ScaledCosineAttention,
    WeightedResidual,
    center_norm,
    drop_path,
    lipschitz_block,
    scsa,
    scsa_trace,
    weighted_residual,
)
from lipfast.oracles import (
    BLOCK_TOLERANCE,
    ClimbingPairs,
    GaussianPairs,
    check_gradient,
    empirical_lipschitz,
    explicit_jacobian,
    explicit_jacobian_spectral_norm,
)
from lipfast.tensor import Tensor


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x, axis=-1)


def test_center_norm_constant_input(
    float64: None, rng: np.random.Generator
) -> None:
    """Test that a constant vector maps to beta."""
    p = CenterNorm(6)
    p.gamma.assign(rng.uniform(-3, 3, 6))
    p.beta.assign(rng.standard_normal(6))
    out = center_norm(Tensor(np.full(6, 2.5)), p)
    assert np.allclose(out.data, p.beta.data, atol=1e-12)


def test_center_norm_zero_mean_input(float64: None) -> None:
    """Test that zero-mean input is scaled by D / (D - 1)."""
    x = np.array([1.0, -2.0, 3.0, -2.0])
    out = center_norm(Tensor(x), CenterNorm(4))
    assert np.allclose(out.data, 4 / 3 * x)


def test_center_norm_rejects_single_feature() -> None:
    """Test that D = 1 is a configuration error."""
    with pytest.raises(ConfigError):
        CenterNorm(1)


def test_center_norm_shape_mismatch() -> None:
    """Test that the last axis must match the parameter dimension."""
    with pytest.raises(DimensionError):
        center_norm(Tensor(np.ones((2, 5))), CenterNorm(4))


def test_center_norm_jacobian_norm(float64: None) -> None:
    """Test the power-iteration norm of the Jacobian against an SVD."""
    p = CenterNorm(4)
    p.gamma.assign(np.array([2.0, 1.0, 1.0, 1.0]))
    jacobian = explicit_jacobian(lambda x: center_norm(x, p), np.zeros(4))
    closed_form = np.diag(p.gamma.data) @ (4 / 3 * (np.eye(4) - 0.25))
    assert np.allclose(jacobian, closed_form, atol=1e-8)
    norm = explicit_jacobian_spectral_norm(jacobian)
    assert norm == pytest.approx(np.linalg.svd(closed_form)[1][0], abs=1e-8)
    assert norm <= 4 / 3 * 2.0 + 1e-9


def test_center_norm_empirical_matches_spectral(float64: None) -> None:
    """Test that climbing pairs recover the D = 4 Jacobian norm."""
    p = CenterNorm(4)
    p.gamma.assign(np.array([2.0, 1.0, 1.0, 1.0]))
    f = lambda x: center_norm(x, p)  # noqa: E731
    norm = explicit_jacobian_spectral_norm(explicit_jacobian(f, np.zeros(4)))
    rng = np.random.default_rng(1)
    estimate = empirical_lipschitz(f, ClimbingPairs((4,), rng), 10_000, rng)
    assert abs(estimate - norm) <= 1e-6


@pytest.mark.parametrize("dim", [2, 4, 16, 64])
def test_center_norm_lipschitz_bound(float64: None, dim: int) -> None:
    """Test the D / (D - 1) * max|gamma| bound over random gammas."""
    rng = np.random.default_rng(dim)
    for _ in range(10):
        p = CenterNorm(dim)
        p.gamma.assign(rng.uniform(-2, 2, dim))
        f = lambda x: center_norm(x, p)  # noqa: E731
        bound = dim / (dim - 1) * np.max(np.abs(p.gamma.data))
        norm = explicit_jacobian_spectral_norm(
            explicit_jacobian(f, np.zeros(dim))
        )
        assert norm <= bound + 1e-9

        random_pairs = empirical_lipschitz(
            f, GaussianPairs((dim,)), 1_000, rng
        )
        assert random_pairs <= bound + 1e-9
        climbed = empirical_lipschitz(
            f, ClimbingPairs((dim,), rng), 10_000, rng
        )
        assert climbed <= norm + 1e-6
        assert climbed >= 0.95 * norm


def test_scsa_single_token(float64: None, rng: np.random.Generator) -> None:
    """Test that one token returns nu / sqrt(heads) times its unit values."""
    p = ScaledCosineAttention(8, rng, heads=2)
    x = rng.standard_normal((1, 8))
    trace = scsa_trace(Tensor(x), p)
    assert np.allclose(trace.attention.data, 1.0)
    values = (x @ p.wv.data).reshape(2, 4)
    values /= np.sqrt(np.sum(values**2, axis=-1, keepdims=True) + p.eps)
    expected = p.nu / np.sqrt(2) * values.reshape(1, 8)
    assert np.allclose(trace.output.data, expected, atol=1e-10)
    assert _row_norms(trace.output.data).max() <= p.nu + 1e-9


def test_scsa_identical_rows(float64: None, rng: np.random.Generator) -> None:
    """Test that identical tokens give identical output rows."""
    p = ScaledCosineAttention(8, rng, heads=4)
    x = np.tile(rng.standard_normal(8), (5, 1))
    trace = scsa_trace(Tensor(x), p)
    assert np.allclose(trace.attention.data, 1 / 5)
    assert np.allclose(trace.output.data, trace.output.data[0])


def test_scsa_row_norms(float64: None, rng: np.random.Generator) -> None:
    """Test unit-ball rows, stochastic attention and the nu bound."""
    p = ScaledCosineAttention(8, rng, heads=4, eps=1e-6)
    trace = scsa_trace(Tensor(rng.standard_normal((5, 8))), p)
    for rows in (trace.queries, trace.keys, trace.values):
        norms = _row_norms(rows.data)
        assert np.all((norms > 0) & (norms < 1))
    assert np.allclose(trace.attention.data.sum(axis=-1), 1.0, atol=1e-6)
    assert _row_norms(trace.output.data).max() <= p.nu + 1e-9


def test_scsa_bounded_for_huge_inputs(
    float64: None, rng: np.random.Generator
) -> None:
    """Test boundedness over many inputs, some scaled by 1e6."""
    p = ScaledCosineAttention(8, rng, heads=4)
    baseline = DotProductAttention(8, rng, heads=4)
    for i in range(1000):
        scale = 1e6 if i % 2 else rng.uniform(0.1, 10)
        x = Tensor(scale * rng.standard_normal((5, 8)))
        trace = scsa_trace(x, p)
        assert _row_norms(trace.output.data).max() <= p.nu + 1e-9
        assert np.allclose(trace.attention.data.sum(axis=-1), 1.0, atol=1e-6)
        for rows in (trace.queries, trace.keys, trace.values):
            norms = _row_norms(rows.data)
            if scale < 1e6:
                assert norms.max() < 1
            else:
                # sqrt(s / (s + eps)) rounds to one once s dwarfs eps
                assert norms.max() <= 1 + 1e-12
                assert norms.min() > 0.999
        if scale == 1e6:
            assert _row_norms(baseline(x).data).max() > 10 * p.nu


def test_scsa_invalid_params(rng: np.random.Generator) -> None:
    """Test that heads must divide the dimension and nu be positive."""
    with pytest.raises(ConfigError, match="heads=3.*nu=0"):
        ScaledCosineAttention(8, rng, heads=3, nu=0.0)


def test_scsa_batched(float64: None, rng: np.random.Generator) -> None:
    """Test that leading axes are treated independently."""
    p = ScaledCosineAttention(8, rng, heads=2)
    x = rng.standard_normal((3, 5, 8))
    batched = scsa(Tensor(x), p).data
    for i in range(3):
        assert np.allclose(batched[i], scsa(Tensor(x[i]), p).data)


def test_weighted_residual_alpha_zero(rng: np.random.Generator) -> None:
    """Test that alpha = 0 returns x exactly."""
    x = Tensor(rng.standard_normal((4, 6)))
    p = WeightedResidual(6, alpha=0.0)
    out = weighted_residual(x, Tensor(rng.standard_normal((4, 6))), p)
    assert np.array_equal(out.data, x.data)


def test_weighted_residual_alpha_one(rng: np.random.Generator) -> None:
    """Test that alpha = 1 without DropPath is a plain residual."""
    x = Tensor(rng.standard_normal((4, 6)))
    f_out = Tensor(rng.standard_normal((4, 6)))
    out = weighted_residual(x, f_out, WeightedResidual(6, alpha=1.0))
    assert np.allclose(out.data, x.data + f_out.data)


def test_drop_path_monte_carlo(float64: None) -> None:
    """Test that training-mode DropPath is unbiased."""
    p = WeightedResidual(3, alpha=0.3, drop_prob=0.5)
    x = Tensor(np.zeros((100_000, 3)))
    f_out = Tensor(np.tile([1.0, -2.0, 0.5], (100_000, 1)))
    rng = np.random.default_rng(0)
    trained = weighted_residual(x, f_out, p, True, rng).data
    evaluated = weighted_residual(x, f_out, p).data
    column = trained[:, 0]
    assert np.all(np.isclose(column, 0.0) | np.isclose(column, 0.6))
    assert np.allclose(
        trained.mean(axis=0), evaluated.mean(axis=0), rtol=0.02
    )


def test_drop_path_leaves_rng_alone(rng: np.random.Generator) -> None:
    """Test that eval mode and prob 0 never consult the rng."""
    branch = Tensor(rng.standard_normal((4, 3)))
    state = np.random.default_rng(5)
    before = state.bit_generator.state
    assert drop_path(branch, 0.5, False, state) is branch
    assert drop_path(branch, 0.0, True, state) is branch
    assert state.bit_generator.state == before
    with pytest.raises(UsageError):
        drop_path(branch, 0.5, True, None)


def test_drop_path_probability_range() -> None:
    """Test that a drop probability of one is rejected."""
    with pytest.raises(ConfigError):
        WeightedResidual(4, drop_prob=1.0)


def test_block_reduces_to_centering(
    float64: None, rng: np.random.Generator
) -> None:
    """Test that zero alphas leave the CenterNorm composition."""
    p = LipschitzBlock(8, rng, heads=2)
    p.residual1.alpha.assign(np.zeros(8))
    p.residual2.alpha.assign(np.zeros(8))
    x = rng.standard_normal((5, 8))
    x -= x.mean(axis=-1, keepdims=True)
    out = lipschitz_block(Tensor(x), p)
    assert np.allclose(out.data, (8 / 7) ** 2 * x)


@pytest.mark.parametrize("tokens", [1, 3, 17])
def test_block_preserves_shape(
    float64: None, rng: np.random.Generator, tokens: int
) -> None:
    """Test that the block maps (N, D) to (N, D)."""
    p = LipschitzBlock(8, rng, heads=4)
    assert p(Tensor(rng.standard_normal((tokens, 8)))).shape == (tokens, 8)


def test_block_gradient(float64: None, rng: np.random.Generator) -> None:
    """Test the block's input gradient against finite differences."""
    p = LipschitzBlock(8, rng, heads=2)
    x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    weights = Tensor(rng.standard_normal((4, 8)))
    report = check_gradient(
        "lipschitz_block",
        lambda: T.sum_(p(x) * weights),
        {"x": x, "gamma": p.norm1.gamma, "alpha": p.residual2.alpha},
        BLOCK_TOLERANCE,
    )
    assert report.passed, report


def test_baseline_block_shape(float64: None, rng: np.random.Generator) -> None:
    """Test that the ablation block is shape-compatible."""
    p = BaselineBlock(8, rng, heads=4, drop_prob=0.1)
    x = Tensor(rng.standard_normal((2, 5, 8)))
    assert p(x, True, np.random.default_rng(0)).shape == (2, 5, 8)
