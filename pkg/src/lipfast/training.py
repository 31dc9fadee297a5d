"""training.py :: Optimiser, losses, the training loop and experiments.

`train` runs Adam over a `Task` and returns one `TrainRecord` per step.
Steps whose loss or gradient norm is not finite are recorded with `nan_flag`
set and skip the update; training carries on so divergence shows up in the
record stream. `stability_experiment` trains the Lipschitz and baseline
variants side by side under identical seeds.
"""

from __future__ import annotations

import dataclasses
import itertools
import pathlib
import typing as t

import numpy as np

from lipfast import logger
from lipfast import tensor as T
from lipfast.errors import DimensionError, UsageError
from lipfast.layers.mobilevit import VARIANTS
from lipfast.metrics import (
    accuracy,
    f1_binary,
    mean_average_precision,
    one_hot,
)
from lipfast.model import FastModel, ModelConfig, build, class_scores, forward
from lipfast.tasks import SyntheticTask, Task
from lipfast.tensor import Parameter, Tape, Tensor
from lipfast.utils import spawn_generators, write_csv

RECORD_HEADER = ("step", "epoch", "variant", "lr", "loss", "grad_norm", "nan")

Schedule = t.Callable[[float, int], float]


@dataclasses.dataclass
class AdamState:
    """Moment buffers and hyperparameters of Adam."""

    lr: float
    first: list[np.ndarray]
    second: list[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(
        cls, params: t.Sequence[Parameter], lr: float = 1e-3
    ) -> AdamState:
        """Return zeroed moments shaped like `params`."""
        return cls(
            lr=lr,
            first=[np.zeros_like(p.data) for p in params],
            second=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: t.Sequence[Parameter],
    grads: t.Sequence[np.ndarray | None],
    state: AdamState,
) -> bool:
    """Apply one bias-corrected Adam update in place.

    A missing gradient counts as zero.

    Returns:
        False, without touching parameters or moments, if any gradient holds
        a non-finite value; True otherwise

    """
    if not len(params) == len(grads) == len(state.first):
        raise DimensionError(
            f"{len(params)} parameters, {len(grads)} gradients, "
            f"{len(state.first)} moment buffers"
        )
    filled = [
        np.zeros_like(p.data) if g is None else np.asarray(g)
        for p, g in zip(params, grads)
    ]
    for param, grad in zip(params, filled):
        if grad.shape != param.shape:
            raise DimensionError(
                f"gradient {grad.shape} for parameter {param.shape}"
            )
    if not all(np.all(np.isfinite(g)) for g in filled):
        return False

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for i, (param, grad) in enumerate(zip(params, filled)):
        state.first[i] = (
            state.beta1 * state.first[i] + (1 - state.beta1) * grad
        )
        state.second[i] = (
            state.beta2 * state.second[i] + (1 - state.beta2) * grad * grad
        )
        m_hat = state.first[i] / correction1
        v_hat = state.second[i] / correction2
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.data = (param.data - update).astype(param.dtype)
    return True


def bce_loss(logits: Tensor, targets: t.Any) -> Tensor:
    """Mean binary cross-entropy over every logit, computed in log space.

    `softplus(x) - x * y` equals `-[y log s(x) + (1 - y) log(1 - s(x))]`.

    Args:
        logits: `(B, 1)` or `(B, C)` raw scores
        targets: 0/1 values with as many elements as `logits`

    """
    y = np.asarray(targets)
    if y.size != logits.size:
        raise DimensionError(f"targets {y.shape} for logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise UsageError("binary cross-entropy targets must be 0 or 1")
    target = Tensor(y.reshape(logits.shape).astype(logits.dtype))
    return T.mean(T.softplus(logits) - logits * target)


def cross_entropy(logits: Tensor, labels: t.Any) -> Tensor:
    """Mean softmax cross-entropy of `(B, C)` logits and integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != logits.shape[:1]:
        raise DimensionError(
            f"labels {labels.shape} for logits {logits.shape}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise UsageError("cross-entropy labels must be integers")
    chosen = Tensor(one_hot(labels, logits.shape[1]).astype(logits.dtype))
    picked = T.sum_(chosen * T.log_softmax(logits), axis=-1)
    return T.scale(T.mean(picked), -1.0)


@dataclasses.dataclass(frozen=True)
class TrainRecord:
    """One optimisation step."""

    step: int
    epoch: int
    loss: float
    grad_norm: float
    lr: float
    nan_flag: bool
    variant: str = "lips"

    def row(self) -> tuple[t.Any, ...]:
        """Return the CSV row in `RECORD_HEADER` order."""
        return (
            self.step,
            self.epoch,
            self.variant,
            self.lr,
            self.loss,
            self.grad_norm,
            int(self.nan_flag),
        )


def constant_schedule(lr: float, epoch: int) -> float:
    """Keep the base learning rate."""
    return lr


def halve_after_schedule(epochs: int = 2) -> Schedule:
    """Halve the learning rate once `epochs` epochs have completed."""

    def schedule(lr: float, epoch: int) -> float:
        return lr / 2 if epoch >= epochs else lr

    return schedule


def model_loss(
    model: FastModel, logits: Tensor, labels: np.ndarray
) -> Tensor:
    """Apply the loss matching the model's head type."""
    if model.config.head_activation == "softmax":
        return cross_entropy(logits, labels)
    return bce_loss(logits, one_hot(labels, model.config.num_classes))


def train(
    model: FastModel,
    task: Task,
    epochs: int = 1,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    *,
    steps: int | None = None,
    schedule: Schedule | None = None,
) -> list[TrainRecord]:
    """Train `model` in place with Adam.

    Args:
        model: Network to update
        task: Data source; only its train split is used
        epochs: Passes over the train split
        lr: Base learning rate
        batch_size: Examples per step
        seed: Fixes batch order and DropPath masks
        steps: Stop after this many steps instead, looping over epochs as
               needed
        schedule: Maps `(lr, epoch)` to the epoch's learning rate

    Returns:
        One record per step

    """
    if task.image_size != tuple(model.config.image_size):
        raise DimensionError(
            f"task images {task.image_size} do not match model input "
            f"{model.config.image_size}"
        )
    if lr < 0:
        raise UsageError(f"learning rate must be non-negative, got {lr}")
    schedule = schedule or constant_schedule
    data_rng, drop_rng = spawn_generators(seed, 2)
    params = model.parameters()
    state = AdamState.for_params(params, lr)
    variant = model.config.variant
    records: list[TrainRecord] = []

    epoch_range = itertools.count() if steps is not None else range(epochs)
    for epoch in epoch_range:
        state.lr = schedule(lr, epoch)
        for batch in task.batches(batch_size, data_rng):
            if steps is not None and len(records) >= steps:
                return records
            model.zero_grad()
            with Tape() as tape:
                images = Tensor(batch.images, dtype=model.dtype)
                logits = forward(model, images, True, drop_rng)
                loss = model_loss(model, logits, batch.labels)
                tape.backward(loss)
            grads = [p.grad for p in params]
            grad_norm = float(
                np.sqrt(
                    sum(
                        float(np.sum(np.square(g, dtype=np.float64)))
                        for g in grads
                        if g is not None
                    )
                )
            )
            loss_value = loss.item()
            nan_flag = not (np.isfinite(loss_value) and np.isfinite(grad_norm))
            if nan_flag:
                logger.warning(
                    f"step {len(records)}: non-finite loss or gradient, "
                    "update skipped"
                )
            else:
                adam_step(params, grads, state)
            logger.debug(
                f"step {len(records)} epoch {epoch}: loss {loss_value:.6f} "
                f"grad norm {grad_norm:.6f}"
            )
            records.append(
                TrainRecord(
                    step=len(records),
                    epoch=epoch,
                    loss=loss_value,
                    grad_norm=grad_norm,
                    lr=state.lr,
                    nan_flag=nan_flag,
                    variant=variant,
                )
            )
    return records


@dataclasses.dataclass(frozen=True)
class EvalResult:
    """Held-out metrics; `f1` is only defined for two classes."""

    accuracy: float
    f1: float | None
    mean_ap: float
    examples: int


def predict(
    model: FastModel, images: np.ndarray, batch_size: int = 32
) -> np.ndarray:
    """Return eval-mode class scores `(B, num_classes)`."""
    chunks = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(images[start : start + batch_size], dtype=model.dtype)
            chunks.append(class_scores(model, forward(model, x)))
    return np.concatenate(chunks, axis=0)


def evaluate(
    model: FastModel, task: Task, split: str = "test", batch_size: int = 32
) -> EvalResult:
    """Score `model` on one split of `task`."""
    chosen = task.indices(split)
    if len(chosen) == 0:
        raise UsageError(f"the {split} split of {task!r} is empty")
    labels = task.labels[chosen]
    scores = predict(model, task.images[chosen], batch_size)
    preds = scores.argmax(axis=1)
    binary = model.config.num_classes == 2
    result = EvalResult(
        accuracy=accuracy(preds, labels),
        f1=f1_binary(preds, labels) if binary else None,
        mean_ap=mean_average_precision(scores, labels),
        examples=len(chosen),
    )
    logger.info(f"Evaluated {split} split: {result}")
    return result


def stability_experiment(
    cfg: ModelConfig,
    lr_list: t.Sequence[float],
    steps: int,
    seed: int = 0,
    batch_size: int = 16,
    task: Task | None = None,
) -> dict[str, list[TrainRecord]]:
    """Train both block variants at every learning rate.

    Each run starts from `build(cfg, seed)` with only `variant` changed and
    uses the same task, batch order and DropPath stream.

    Returns:
        Variant name to the concatenated records of its runs, in `lr_list`
        order

    """
    if steps < 1 or not lr_list:
        raise UsageError("stability experiment needs steps >= 1 and an lr")
    task = task or SyntheticTask(
        cfg.num_classes, tuple(cfg.image_size), seed=seed
    )
    streams: dict[str, list[TrainRecord]] = {}
    for variant in VARIANTS:
        streams[variant] = []
        for lr in lr_list:
            model = build(dataclasses.replace(cfg, variant=variant), seed)
            records = train(
                model,
                task,
                lr=lr,
                batch_size=batch_size,
                seed=seed,
                steps=steps,
            )
            flagged = sum(r.nan_flag for r in records)
            logger.info(
                f"{variant} lr={lr}: final loss {records[-1].loss:.4f}, "
                f"{flagged} non-finite steps"
            )
            streams[variant].extend(records)
    return streams


def write_records(
    records: t.Iterable[TrainRecord], path: str | pathlib.Path | None = None
) -> None:
    """Write records as CSV with the `RECORD_HEADER` columns."""
    write_csv(RECORD_HEADER, (r.row() for r in records), path)
