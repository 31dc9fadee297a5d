"""oracles.py :: Brute-force references for checking the fast code paths.

Everything here is deliberately naive: central finite differences, quadruple
loops, explicit power iteration and per-rank enumeration. None of it reuses
the vectorised implementations it checks, apart from evaluating the function
under test.
"""

from __future__ import annotations

import dataclasses
import math
import typing as t

import numpy as np

from lipfast import logger
from lipfast import tensor as T
from lipfast.errors import OracleError, UsageError
from lipfast.layers.baseline import BaselineBlock
from lipfast.layers.lipschitz import (
    CenterNorm,
    LipschitzBlock,
    ScaledCosineAttention,
    WeightedResidual,
)
from lipfast.layers.mobilevit import FastBlock, InvertedResidual
from lipfast.model import ModelConfig, build, forward
from lipfast.tensor import Tape, Tensor

FD_STEP = 1e-5
PRIMITIVE_TOLERANCE = 1e-5
BLOCK_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3

# Gradients smaller than this are compared in absolute terms
RELATIVE_FLOOR = 1e-3

LossFn = t.Callable[[], Tensor]
Built = t.Tuple[LossFn, t.Dict[str, Tensor]]
Maker = t.Callable[[np.random.Generator], Built]


def _scalar(value: t.Any) -> float:
    if isinstance(value, Tensor):
        value = value.data
    result = float(np.asarray(value, dtype=np.float64).reshape(()))
    if not math.isfinite(result):
        raise OracleError(f"function returned non-finite value {result}")
    return result


def _central_difference(
    loss_fn: LossFn, tensor: Tensor, flat_index: int, step: float
) -> float:
    original = tensor.data
    try:
        values = []
        for sign in (1.0, -1.0):
            bumped = original.copy()
            bumped.flat[flat_index] += sign * step
            tensor.data = bumped
            with T.no_grad():
                values.append(_scalar(loss_fn()))
    finally:
        tensor.data = original
    return (values[0] - values[1]) / (2 * step)


def finite_diff_grad(
    f: t.Callable[[Tensor], t.Any],
    x: Tensor | np.ndarray,
    step: float = FD_STEP,
) -> Tensor:
    """Central-difference gradient of a scalar function at `x`.

    Args:
        f: Scalar-valued function of one tensor
        x: Evaluation point
        step: Perturbation size `h`

    Returns:
        `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`

    Raises:
        OracleError: if `f` returns a non-finite value

    """
    point = Tensor(np.array(x.data if isinstance(x, Tensor) else x))
    grad = np.zeros(point.shape, dtype=np.float64)
    for i in range(point.size):
        grad.flat[i] = _central_difference(lambda: f(point), point, i, step)
    return Tensor(grad)


def relative_error(analytic: float, numeric: float) -> float:
    """`|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`."""
    scale = max(abs(analytic), abs(numeric), RELATIVE_FLOOR)
    return abs(analytic - numeric) / scale


@dataclasses.dataclass(frozen=True)
class GradCheckReport:
    """Outcome of comparing tape gradients with finite differences."""

    name: str
    max_rel_error: float
    failing_index: str | None
    tolerance: float

    @property
    def passed(self) -> bool:
        """Return whether the worst error is within tolerance."""
        return self.max_rel_error <= self.tolerance


def check_gradient(
    name: str,
    loss_fn: LossFn,
    tensors: t.Mapping[str, Tensor],
    tolerance: float,
    *,
    step: float = FD_STEP,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of `loss_fn()` with central differences.

    Args:
        name: Label for the report
        loss_fn: Zero-argument function building a scalar from `tensors`
        tensors: Grad-enabled tensors whose gradients are checked
        tolerance: Largest acceptable `relative_error`
        step: Finite-difference step
        samples: Check at most this many random coordinates per tensor
        rng: Picks the sampled coordinates

    """
    for key, tensor in tensors.items():
        if not tensor.requires_grad:
            raise UsageError(f"{name}: tensor {key!r} is not grad-enabled")
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {key: np.array(tensor.grad) for key, tensor in tensors.items()}

    worst, where = 0.0, None
    for key, tensor in tensors.items():
        coords: t.Iterable[int] = range(tensor.size)
        if samples is not None and tensor.size > samples:
            picker = rng or np.random.default_rng(0)
            coords = picker.choice(tensor.size, samples, replace=False)
        for flat in coords:
            numeric = _central_difference(loss_fn, tensor, int(flat), step)
            error = relative_error(float(analytic[key].flat[flat]), numeric)
            if error > worst:
                worst = error
                if error > tolerance:
                    where = f"{key}[{int(flat)}]"
    report = GradCheckReport(name, worst, where, tolerance)
    if not report.passed:
        logger.warning(
            f"gradcheck {name}: relative error {worst:.3e} at {where} "
            f"exceeds {tolerance:.0e}"
        )
    return report


def empirical_lipschitz(
    f: t.Callable[[Tensor], t.Any],
    sampler: t.Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]],
    pairs: int,
    rng: np.random.Generator,
) -> float:
    """Largest `||f(x) - f(y)|| / ||x - y||` over sampled pairs.

    Pairs closer than `1e-8` are skipped. A sampler with an `observe(ratio)`
    method is told the ratio of every pair it produced.
    """
    observe = getattr(sampler, "observe", None)
    best = 0.0
    with T.no_grad():
        for _ in range(pairs):
            x, y = sampler(rng)
            distance = float(np.linalg.norm(np.ravel(x - y)))
            if distance < 1e-8:
                continue
            fx, fy = f(Tensor(x)), f(Tensor(y))
            fx = fx.data if isinstance(fx, Tensor) else np.asarray(fx)
            fy = fy.data if isinstance(fy, Tensor) else np.asarray(fy)
            ratio = float(np.linalg.norm(np.ravel(fx - fy))) / distance
            if observe is not None:
                observe(ratio)
            best = max(best, ratio)
    return best


class GaussianPairs:
    """Independent standard-normal pairs scaled by `scale`."""

    def __init__(self, shape: tuple[int, ...], scale: float = 1.0) -> None:
        """Initialize the sampler."""
        self.shape = shape
        self.scale = scale

    def __call__(
        self, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """Draw one pair."""
        x = self.scale * rng.standard_normal(self.shape)
        y = self.scale * rng.standard_normal(self.shape)
        return x, y


class ClimbingPairs:
    """Pairs `(x, x + distance * u)` whose direction `u` hill-climbs.

    The direction is a (1+1) evolution strategy on the observed ratio with
    the one-fifth success rule, so the estimate approaches the largest local
    stretch of `f` around `x` as the pair count grows.
    """

    def __init__(
        self,
        shape: tuple[int, ...],
        rng: np.random.Generator,
        *,
        scale: float = 1.0,
        distance: float = 1.0,
    ) -> None:
        """Fix the base point and a random starting direction."""
        self.shape = shape
        self.distance = distance
        self.base = scale * rng.standard_normal(shape)
        self.direction = _unit(rng.standard_normal(shape))
        self.sigma = 0.5
        self.best = -1.0
        self._candidate = self.direction

    def __call__(
        self, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """Propose a perturbed direction."""
        noise = rng.standard_normal(self.shape)
        self._candidate = _unit(self.direction + self.sigma * noise)
        return self.base, self.base + self.distance * self._candidate

    def observe(self, ratio: float) -> None:
        """Keep the proposal if it stretched more than the incumbent."""
        if ratio > self.best:
            self.best = ratio
            self.direction = self._candidate
            self.sigma *= math.exp(1 / 3)
        else:
            self.sigma = max(self.sigma * math.exp(-1 / 12), 1e-12)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def explicit_jacobian(
    f: t.Callable[[Tensor], Tensor], x: np.ndarray, step: float = FD_STEP
) -> np.ndarray:
    """Materialise the `(out size, in size)` Jacobian by central differences.

    Exact up to rounding for affine maps.
    """
    x = np.asarray(x, dtype=np.float64)
    columns = []
    with T.no_grad():
        for i in range(x.size):
            bumped = x.copy()
            bumped.flat[i] += step
            plus = f(Tensor(bumped)).data.ravel()
            bumped.flat[i] -= 2 * step
            minus = f(Tensor(bumped)).data.ravel()
            columns.append((plus - minus) / (2 * step))
    return np.stack(columns, axis=1)


def explicit_jacobian_spectral_norm(
    matrix: t.Any, tol: float = 1e-10, max_iter: int = 10_000
) -> float:
    """Largest singular value by power iteration on `M^T M`.

    Raises:
        OracleError: if the estimate has not settled after `max_iter` steps

    """
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    gram = m.T @ m
    v = _unit(np.random.default_rng(0).standard_normal(m.shape[1]))
    previous = 0.0
    for _ in range(max_iter):
        w = gram @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        estimate = float(np.linalg.norm(m @ v))
        if abs(estimate - previous) <= tol * max(estimate, 1.0):
            return estimate
        previous = estimate
    raise OracleError(
        f"power iteration did not converge in {max_iter} iterations"
    )


def naive_conv2d(
    x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """Sliding-window cross-correlation of `(H, W, Cin)` with loops."""
    x = np.asarray(x, dtype=np.float64)
    height, width, channels = x.shape
    kh, kw, cin, cout = w.shape
    if cin != channels:
        raise UsageError(f"{channels} input channels for kernel {w.shape}")
    padded = np.zeros((height + 2 * padding, width + 2 * padding, channels))
    padded[padding : padding + height, padding : padding + width] = x
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((out_h, out_w, cout))
    for i in range(out_h):
        for j in range(out_w):
            for o in range(cout):
                total = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        for c in range(cin):
                            total += (
                                padded[i * stride + di, j * stride + dj, c]
                                * w[di, dj, c, o]
                            )
                out[i, j, o] = total
    return out


def naive_f1(preds: t.Sequence[int], labels: t.Sequence[int]) -> float:
    """F1 of the positive class from a hand-counted confusion matrix."""
    tp = fp = fn = 0
    for p, y in zip(preds, labels):
        if p == 1 and y == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif y == 1:
            fn += 1
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def naive_average_precision(
    scores: t.Sequence[float], targets: t.Sequence[int]
) -> float:
    """Precision at every positive rank, averaged; NaN without positives."""
    ranked = sorted(range(len(scores)), key=lambda i: -scores[i])
    positives = sum(1 for y in targets if y == 1)
    if positives == 0:
        return float("nan")
    total, hits = 0.0, 0
    for rank, index in enumerate(ranked, start=1):
        if targets[index] == 1:
            hits += 1
            total += hits / rank
    return total / positives


def naive_mean_average_precision(
    scores: t.Sequence[t.Sequence[float]],
    targets: t.Sequence[t.Sequence[int]],
) -> float:
    """Mean `naive_average_precision` over classes with a positive."""
    classes = len(scores[0])
    values = []
    for c in range(classes):
        ap = naive_average_precision(
            [row[c] for row in scores], [row[c] for row in targets]
        )
        if not math.isnan(ap):
            values.append(ap)
    return sum(values) / len(values)


def naive_bce(logits: t.Sequence[float], targets: t.Sequence[int]) -> float:
    """Mean of `-[y log s(x) + (1 - y) log(1 - s(x))]`."""
    total = 0.0
    for x, y in zip(logits, targets):
        s = 1.0 / (1.0 + math.exp(-x))
        total -= y * math.log(s) + (1 - y) * math.log(1 - s)
    return total / len(logits)


@dataclasses.dataclass(frozen=True)
class GradCase:
    """A gradient check that builds its inputs from a generator."""

    name: str
    tolerance: float
    make: Maker
    samples: int | None = None


def _leaf(
    rng: np.random.Generator, shape: tuple[int, ...], low: float, high: float
) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _projection(
    rng: np.random.Generator, build: t.Callable[[], Tensor]
) -> LossFn:
    """Return `sum(build() * R)` for a fixed random `R`."""
    with T.no_grad():
        shape = build().shape
    weights = Tensor(rng.standard_normal(shape))
    return lambda: T.sum_(build() * weights)


def _unary(
    name: str,
    op: t.Callable[[Tensor], Tensor],
    low: float = -10.0,
    high: float = 10.0,
    shape: tuple[int, ...] = (3, 4),
) -> GradCase:
    def make(rng: np.random.Generator) -> Built:
        x = _leaf(rng, shape, low, high)
        return _projection(rng, lambda: op(x)), {"x": x}

    return GradCase(name, PRIMITIVE_TOLERANCE, make)


def _binary(
    name: str,
    op: t.Callable[[Tensor, Tensor], Tensor],
    shapes: tuple[tuple[int, ...], tuple[int, ...]],
    b_range: tuple[float, float] = (-10.0, 10.0),
) -> GradCase:
    def make(rng: np.random.Generator) -> Built:
        a = _leaf(rng, shapes[0], -10.0, 10.0)
        b = _leaf(rng, shapes[1], *b_range)
        return _projection(rng, lambda: op(a, b)), {"a": a, "b": b}

    return GradCase(name, PRIMITIVE_TOLERANCE, make)


def _conv_case(rng: np.random.Generator) -> Built:
    x = _leaf(rng, (2, 5, 5, 3), -10.0, 10.0)
    w = _leaf(rng, (3, 3, 3, 4), -1.0, 1.0)
    return _projection(rng, lambda: T.conv2d(x, w, 2, 1)), {"x": x, "w": w}


def _depthwise_case(
    rng: np.random.Generator,
) -> Built:
    x = _leaf(rng, (2, 5, 4, 3), -10.0, 10.0)
    w = _leaf(rng, (3, 3, 3), -1.0, 1.0)
    loss = _projection(rng, lambda: T.depthwise_conv2d(x, w, 1, 1))
    return loss, {"x": x, "w": w}


def _concat_case(rng: np.random.Generator) -> Built:
    a = _leaf(rng, (2, 3), -10.0, 10.0)
    b = _leaf(rng, (2, 4), -10.0, 10.0)
    loss = _projection(rng, lambda: T.concat([a, b], axis=-1))
    return loss, {"a": a, "b": b}


def _primitive_cases() -> list[GradCase]:
    return [
        _binary("add", T.add, ((3, 4), (4,))),
        _binary("sub", T.sub, ((2, 3, 4), (3, 1))),
        _binary("mul", T.mul, ((3, 4), (3, 4))),
        _binary("div", T.div, ((3, 4), (4,)), b_range=(1.0, 10.0)),
        _binary("matmul", T.matmul, ((2, 3, 4), (4, 5))),
        _unary("scale", lambda x: T.scale(x, -2.5)),
        _unary("sum", lambda x: T.sum_(x, axis=0)),
        _unary("mean", lambda x: T.mean(x, axis=-1, keepdims=True)),
        _unary("relu", T.relu),
        _unary("sigmoid", T.sigmoid),
        _unary("silu", T.silu),
        _unary("softplus", T.softplus),
        _unary("exp", T.exp, -2.0, 2.0),
        _unary("sqrt", lambda x: T.sqrt(x, 1e-6), 0.5, 10.0),
        _unary("softmax", T.softmax),
        _unary("log_softmax", T.log_softmax),
        _unary("reshape", lambda x: T.reshape(x, (2, 6))),
        _unary("transpose", lambda x: T.transpose(x, (1, 0))),
        _unary("pad", lambda x: T.pad(x, ((1, 0), (0, 2)), 3.0)),
        _unary("take", lambda x: T.take(x, (slice(1, 3), slice(None, 2)))),
        _unary(
            "global_average_pool", T.global_average_pool, shape=(2, 3, 4, 2)
        ),
        GradCase("concat", PRIMITIVE_TOLERANCE, _concat_case),
        GradCase("conv2d", PRIMITIVE_TOLERANCE, _conv_case),
        GradCase("depthwise_conv2d", PRIMITIVE_TOLERANCE, _depthwise_case),
    ]


def _lipschitz_cases() -> list[GradCase]:
    def center_norm(rng: np.random.Generator) -> Built:
        norm = CenterNorm(6, dtype=np.float64)
        norm.gamma.assign(rng.uniform(-2.0, 2.0, 6))
        x = _leaf(rng, (4, 6), -10.0, 10.0)
        return _projection(rng, lambda: norm(x)), {
            "x": x,
            "gamma": norm.gamma,
        }

    def attention(rng: np.random.Generator) -> Built:
        attn = ScaledCosineAttention(8, rng, heads=2, dtype=np.float64)
        x = _leaf(rng, (5, 8), -3.0, 3.0)
        return _projection(rng, lambda: attn(x)), {
            "x": x,
            "wq": attn.wq,
            "log_tau": attn.log_tau,
        }

    def residual(rng: np.random.Generator) -> Built:
        wrs = WeightedResidual(6, dtype=np.float64)
        x = _leaf(rng, (3, 6), -10.0, 10.0)
        f_out = _leaf(rng, (3, 6), -10.0, 10.0)
        return _projection(rng, lambda: wrs(x, f_out)), {
            "x": x,
            "f_out": f_out,
            "alpha": wrs.alpha,
        }

    def block(rng: np.random.Generator) -> Built:
        layer = LipschitzBlock(8, rng, heads=2, dtype=np.float64)
        x = _leaf(rng, (4, 8), -3.0, 3.0)
        return _projection(rng, lambda: layer(x)), {
            "x": x,
            "fc1": layer.mlp.fc1.weight,
            "alpha": layer.residual1.alpha,
        }

    def baseline(rng: np.random.Generator) -> Built:
        layer = BaselineBlock(8, rng, heads=2, dtype=np.float64)
        x = _leaf(rng, (4, 8), -3.0, 3.0)
        return _projection(rng, lambda: layer(x)), {"x": x}

    return [
        GradCase("center_norm", BLOCK_TOLERANCE, center_norm),
        GradCase("scsa", BLOCK_TOLERANCE, attention, samples=12),
        GradCase("weighted_residual", BLOCK_TOLERANCE, residual),
        GradCase("lipschitz_block", BLOCK_TOLERANCE, block, samples=12),
        GradCase("baseline_block", BLOCK_TOLERANCE, baseline, samples=12),
    ]


def _mobilevit_cases() -> list[GradCase]:
    def inverted(stride: int, cout: int) -> Maker:
        def make(rng: np.random.Generator) -> Built:
            layer = InvertedResidual(
                3, cout, rng, stride=stride, dtype=np.float64
            )
            x = _leaf(rng, (1, 4, 4, 3), -3.0, 3.0)
            return _projection(rng, lambda: layer(x)), {
                "x": x,
                "depthwise": layer.depthwise.weight,
            }

        return make

    def fast(depth: int, extent: tuple[int, int]) -> Maker:
        def make(rng: np.random.Generator) -> Built:
            layer = FastBlock(4, 8, depth, rng, heads=2, dtype=np.float64)
            x = _leaf(rng, (1,) + extent + (4,), -3.0, 3.0)
            tensors = {"x": x, "fusion": layer.fusion_pointwise.weight}
            return _projection(rng, lambda: layer(x)), tensors

        return make

    return [
        GradCase("inverted_residual", BLOCK_TOLERANCE, inverted(1, 3), 12),
        GradCase(
            "inverted_residual_stride2", BLOCK_TOLERANCE, inverted(2, 5), 12
        ),
        GradCase("fast_block", BLOCK_TOLERANCE, fast(1, (4, 4)), 12),
        GradCase("fast_block_depth0", BLOCK_TOLERANCE, fast(0, (4, 4)), 12),
        GradCase("fast_block_odd", BLOCK_TOLERANCE, fast(1, (5, 3)), 12),
    ]


def _model_cases() -> list[GradCase]:
    def make(rng: np.random.Generator) -> Built:
        cfg = ModelConfig.tiny(2)
        model = build(cfg, int(rng.integers(2**31)), dtype=np.float64)
        x = Tensor(
            rng.standard_normal((1,) + cfg.image_size + (1,)),
            requires_grad=True,
        )
        tensors = {
            "x": x,
            "stem": model.stem.weight,
            "classifier": model.classifier.weight,
        }
        return lambda: T.mean(forward(model, x)), tensors

    return [GradCase("tiny_model", END_TO_END_TOLERANCE, make, samples=8)]


GRADCHECK_SUITES: dict[str, t.Callable[[], list[GradCase]]] = {
    "tensor-autodiff": _primitive_cases,
    "lipschitz-blocks": _lipschitz_cases,
    "mobilevit-blocks": _mobilevit_cases,
    "model": _model_cases,
}


def run_gradcheck(
    module: str, seeds: t.Iterable[int] = range(20)
) -> list[tuple[int, GradCheckReport]]:
    """Run every case of one suite at float64 for each seed.

    Returns:
        `(seed, report)` pairs in case-major order

    """
    if module not in GRADCHECK_SUITES:
        raise UsageError(
            f"unknown gradcheck module {module!r}; choose from "
            f"{', '.join(GRADCHECK_SUITES)}"
        )
    results = []
    with T.default_dtype(np.float64):
        for case in GRADCHECK_SUITES[module]():
            for seed in seeds:
                rng = np.random.default_rng(seed)
                loss_fn, tensors = case.make(rng)
                report = check_gradient(
                    case.name,
                    loss_fn,
                    tensors,
                    case.tolerance,
                    samples=case.samples,
                    rng=rng,
                )
                results.append((seed, report))
    failed = sum(not report.passed for _, report in results)
    logger.info(f"gradcheck {module}: {len(results)} checks, {failed} failed")
    return results
