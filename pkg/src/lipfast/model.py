"""model.py :: Assemble, run and persist the FAST network.

The network is a stride-2 stem, five stages of MobileNetV2 and FAST blocks,
a final point-wise convolution and a two-layer classifier head on globally
average-pooled features. `stage_plan` is the single place where the 11-entry
channel list is mapped onto layers.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
import struct
import typing as t

import numpy as np

from lipfast import logger
from lipfast import tensor as T
from lipfast.errors import (
    ConfigError,
    DimensionError,
    ParseError,
    UnsupportedFormatError,
    UsageError,
)
from lipfast.layers import Module
from lipfast.layers.basic import Conv2d, Linear
from lipfast.layers.mobilevit import VARIANTS, FastBlock, InvertedResidual
from lipfast.tensor import Tensor

HEAD_ACTIVATIONS = ("sigmoid", "softmax")
CHECKPOINT_MAGIC = b"FSTC"
CHECKPOINT_VERSION = 1

_REQUIRED_KEYS = (
    "image_size",
    "hidden_dims",
    "channels",
    "num_classes",
    "expansion",
    "kernel",
    "patch_size",
    "depths",
)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of a FAST network.

    The defaults are the published configuration with two classes.
    """

    image_size: tuple[int, int] = (128, 1876)
    hidden_dims: tuple[int, ...] = (96, 128, 144)
    channels: tuple[int, ...] = (16, 32, 48, 48, 64, 64, 80, 80, 96, 96, 384)
    num_classes: int = 2
    expansion: int = 4
    kernel: int = 3
    patch_size: tuple[int, int] = (2, 2)
    depths: tuple[int, ...] = (2, 4, 4)
    heads: int = 4
    mlp_ratio: int = 2
    drop_path_rate: float = 0.1
    variant: str = "lips"
    head_activation: str = "sigmoid"
    head_hidden: int = 256

    @classmethod
    def published(cls, num_classes: int = 2) -> ModelConfig:
        """Return the published configuration."""
        return cls(num_classes=num_classes)

    @classmethod
    def tiny(cls, num_classes: int = 2) -> ModelConfig:
        """Return a desk-scale configuration for tests and smoke runs."""
        return cls(
            image_size=(32, 64),
            hidden_dims=(8, 8, 8),
            channels=(4, 8, 8, 8, 12, 12, 16, 16, 16, 16, 32),
            num_classes=num_classes,
            depths=(1, 1, 1),
            head_hidden=16,
        )

    @classmethod
    def from_dict(cls, raw: t.Mapping[str, t.Any]) -> ModelConfig:
        """Build a config from a JSON-style mapping.

        Raises:
            ConfigError: on unknown or missing keys, or invalid values

        """
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - fields)
        missing = [key for key in _REQUIRED_KEYS if key not in raw]
        problems = []
        if unknown:
            problems.append(f"unknown keys: {', '.join(unknown)}")
        if missing:
            problems.append(f"missing keys: {', '.join(missing)}")
        if problems:
            raise ConfigError("; ".join(problems))
        values = {
            key: tuple(value) if isinstance(value, list) else value
            for key, value in raw.items()
        }
        try:
            config = cls(**values)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        config.validate()
        return config

    @classmethod
    def from_json(cls, path: str | pathlib.Path) -> ModelConfig:
        """Read a config from a JSON file."""
        path = pathlib.Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict[str, t.Any]:
        """Return a JSON-serialisable mapping."""
        return {
            key: list(value) if isinstance(value, tuple) else value
            for key, value in dataclasses.asdict(self).items()
        }

    def to_json(self, path: str | pathlib.Path) -> None:
        """Write the config as JSON."""
        pathlib.Path(path).write_text(json.dumps(self.to_dict(), indent=4))

    def problems(self) -> list[str]:
        """Return one message per violated invariant."""
        found = []

        def positive_ints(name: str, values: t.Any, length: int) -> None:
            if not isinstance(values, tuple) or len(values) != length:
                found.append(f"{name} must have length {length}")
            elif not all(isinstance(v, int) and v >= 1 for v in values):
                found.append(f"{name} must hold positive integers")

        positive_ints("image_size", self.image_size, 2)
        positive_ints("channels", self.channels, 11)
        positive_ints("hidden_dims", self.hidden_dims, 3)
        positive_ints("patch_size", self.patch_size, 2)
        dims = self.hidden_dims if isinstance(self.hidden_dims, tuple) else ()
        if not isinstance(self.depths, tuple) or len(self.depths) != len(dims):
            found.append("depths must have the same length as hidden_dims")
        elif not all(isinstance(d, int) and d >= 0 for d in self.depths):
            found.append("depths must hold non-negative integers")
        for name in ("num_classes", "expansion", "heads", "mlp_ratio"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                found.append(f"{name} must be a positive integer")
        if not isinstance(self.head_hidden, int) or self.head_hidden < 1:
            found.append("head_hidden must be a positive integer")
        if not isinstance(self.kernel, int) or self.kernel < 1 or (
            self.kernel % 2 == 0
        ):
            found.append("kernel must be a positive odd integer")
        if isinstance(self.heads, int) and self.heads >= 1:
            for dim in dims:
                if isinstance(dim, int) and (dim < 2 or dim % self.heads):
                    found.append(
                        f"hidden dim {dim} must be >= 2 and divisible by "
                        f"heads={self.heads}"
                    )
        rate = self.drop_path_rate
        if not isinstance(rate, (int, float)) or not 0.0 <= rate < 1.0:
            found.append("drop_path_rate must lie in [0, 1)")
        if self.variant not in VARIANTS:
            found.append(f"variant must be one of {VARIANTS}")
        if self.head_activation not in HEAD_ACTIVATIONS:
            found.append(f"head_activation must be one of {HEAD_ACTIVATIONS}")
        return found

    def validate(self) -> None:
        """Raise `ConfigError` listing every violated invariant."""
        found = self.problems()
        if found:
            raise ConfigError("invalid model config: " + "; ".join(found))


class LayerPlan(t.NamedTuple):
    """One trunk layer in `stage_plan`."""

    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    hidden_dim: int = 0
    depth: int = 0


def stage_plan(cfg: ModelConfig) -> list[list[LayerPlan]]:
    """Map the channel list onto the five trunk stages.

    `channels[0]` is the stem output, `channels[1:10]` are the block
    waypoints and `channels[10]` is the final point-wise projection.
    """
    ch, dims, depths = cfg.channels, cfg.hidden_dims, cfg.depths
    return [
        [LayerPlan("mv2", ch[0], ch[1])],
        [LayerPlan("mv2", ch[1], ch[2], 2), LayerPlan("mv2", ch[2], ch[3])],
        [
            LayerPlan("mv2", ch[3], ch[4], 2),
            LayerPlan("fast", ch[4], ch[5], 1, dims[0], depths[0]),
        ],
        [
            LayerPlan("mv2", ch[5], ch[6], 2),
            LayerPlan("fast", ch[6], ch[7], 1, dims[1], depths[1]),
        ],
        [
            LayerPlan("mv2", ch[7], ch[8], 2),
            LayerPlan("fast", ch[8], ch[9], 1, dims[2], depths[2]),
        ],
    ]


class FastModel(Module):
    """The assembled network."""

    def __init__(
        self, config: ModelConfig, rng: np.random.Generator, dtype: t.Any
    ) -> None:
        """Initialize every layer from `config`, drawing from `rng`."""
        self.config = config
        plan = stage_plan(config)
        total_depth = sum(config.depths)
        rates = iter(np.linspace(0.0, config.drop_path_rate, total_depth))

        self.stem = Conv2d(
            1, config.channels[0], config.kernel, rng, stride=2, dtype=dtype
        )
        self.stages: list[list[Module]] = []
        for stage in plan:
            layers: list[Module] = []
            for entry in stage:
                if entry.kind == "mv2":
                    layers.append(
                        InvertedResidual(
                            entry.in_channels,
                            entry.out_channels,
                            rng,
                            stride=entry.stride,
                            expansion=config.expansion,
                            kernel=config.kernel,
                            dtype=dtype,
                        )
                    )
                else:
                    layers.append(
                        FastBlock(
                            entry.in_channels,
                            entry.hidden_dim,
                            entry.depth,
                            rng,
                            patch_size=config.patch_size,
                            kernel=config.kernel,
                            heads=config.heads,
                            mlp_ratio=config.mlp_ratio,
                            drop_probs=[
                                float(next(rates)) for _ in range(entry.depth)
                            ],
                            variant=config.variant,
                            out_channels=entry.out_channels,
                            dtype=dtype,
                        )
                    )
            self.stages.append(layers)
        self.final = Conv2d(
            config.channels[9], config.channels[10], 1, rng, dtype=dtype
        )
        self.head_hidden = Linear(
            config.channels[10], config.head_hidden, rng, dtype=dtype
        )
        self.classifier = Linear(
            config.head_hidden, config.num_classes, rng, dtype=dtype
        )

    @property
    def dtype(self) -> np.dtype:
        """Return the parameter dtype."""
        return self.stem.weight.dtype

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Return `forward(self, x, training, rng)`."""
        return forward(self, x, training, rng)


def build(
    cfg: ModelConfig, seed: int = 0, *, dtype: t.Any = np.float32
) -> FastModel:
    """Build and initialise a network.

    Initialisation is a deterministic function of `seed`: Kaiming-uniform
    convolutions, truncated-normal (std 0.02) linear and attention weights,
    `alpha = 0.1`, `gamma = 1`, zero biases and `beta`.

    Raises:
        ConfigError: listing every violated invariant of `cfg`

    """
    cfg.validate()
    model = FastModel(cfg, np.random.default_rng(seed), np.dtype(dtype))
    logger.info(
        f"Built {cfg.variant} FAST model: {parameter_count(model)} parameters"
    )
    return model


def forward(
    m: FastModel,
    x: Tensor | np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Compute raw logits `(B, num_classes)` for spectrograms `(B, H, W, 1)`.

    Raises:
        DimensionError: if the spatial extents differ from the config

    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=m.dtype))
    height, width = m.config.image_size
    if x.ndim != 4 or x.shape[1:] != (height, width, 1):
        raise DimensionError(
            f"model expects (B, {height}, {width}, 1) input, got {x.shape}"
        )
    h = T.silu(m.stem(x))
    for stage in m.stages:
        for layer in stage:
            h = layer(h, training, rng)
    h = T.silu(m.final(h))
    pooled = T.global_average_pool(h)
    return m.classifier(T.silu(m.head_hidden(pooled)))


def class_scores(m: FastModel, logits: Tensor) -> np.ndarray:
    """Turn logits into per-class scores for the model's head type."""
    if m.config.head_activation == "softmax":
        return T.softmax(logits).data
    return T.sigmoid(logits).data


def parameter_count(m: Module) -> int:
    """Return the number of scalar parameters."""
    return sum(param.size for param in m.parameters())


def parameter_table(m: FastModel) -> list[tuple[str, str, int]]:
    """Return `(layer name, layer type, parameter count)` rows."""
    rows = [("stem", type(m.stem).__name__, parameter_count(m.stem))]
    for i, stage in enumerate(m.stages):
        for j, layer in enumerate(stage):
            name = f"stages.{i}.{j}"
            rows.append((name, type(layer).__name__, parameter_count(layer)))
    for name in ("final", "head_hidden", "classifier"):
        layer = getattr(m, name)
        rows.append((name, type(layer).__name__, parameter_count(layer)))
    return rows


def save(m: Module, path: str | pathlib.Path) -> None:
    """Write every parameter to an FSTC checkpoint (float32, little-endian).

    Raises:
        UsageError: if a parameter is not float32

    """
    entries = list(m.named_parameters())
    for name, param in entries:
        if param.dtype != np.float32:
            raise UsageError(
                f"checkpoints hold float32 only; {name} is {param.dtype}"
            )
    header = (CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(entries))
    out = bytearray(struct.pack("<4sII", *header))
    for name, param in entries:
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", param.ndim)
        out += struct.pack(f"<{param.ndim}I", *param.shape)
        out += np.ascontiguousarray(param.data, dtype="<f4").tobytes()
    pathlib.Path(path).write_bytes(bytes(out))
    logger.info(f"Saved {len(entries)} tensors to {path}")


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, count: int, field: str) -> bytes:
        if self.offset + count > len(self.data):
            raise ParseError(
                "checkpoint truncated", offset=self.offset, field=field
            )
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, field: str) -> tuple[t.Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def read_checkpoint(path: str | pathlib.Path) -> dict[str, np.ndarray]:
    """Decode an FSTC checkpoint into an ordered name -> array mapping.

    Raises:
        ParseError: naming the field that could not be decoded

    """
    reader = _Reader(pathlib.Path(path).read_bytes())
    magic, version, count = reader.unpack("<4sII", "header")
    if magic != CHECKPOINT_MAGIC:
        raise ParseError("not an FSTC checkpoint", offset=0, field="magic")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedFormatError(
            f"checkpoint version {version} is not supported",
            offset=4,
            field="version",
        )
    state: dict[str, np.ndarray] = {}
    for index in range(count):
        (length,) = reader.unpack("<H", f"tensor {index} name length")
        start = reader.offset
        try:
            name = reader.take(length, f"tensor {index} name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(
                "tensor name is not UTF-8",
                offset=start,
                field=f"tensor {index} name",
            ) from None
        if name in state:
            raise ParseError(
                "duplicate tensor name", offset=start, field=name
            )
        (rank,) = reader.unpack("<B", f"{name} rank")
        extents = reader.unpack(f"<{rank}I", f"{name} extents")
        size = int(np.prod(extents)) if extents else 1
        raw = reader.take(4 * size, f"{name} data")
        state[name] = np.frombuffer(raw, dtype="<f4").reshape(extents).copy()
    if reader.offset != len(reader.data):
        raise ParseError(
            "unexpected bytes after last tensor",
            offset=reader.offset,
            field="trailer",
        )
    return state


def load_state(m: Module, state: t.Mapping[str, np.ndarray]) -> None:
    """Copy named arrays into the parameters of `m`.

    Raises:
        ParseError: naming any missing, unexpected or mis-shaped tensor

    """
    params = dict(m.named_parameters())
    for name in params:
        if name not in state:
            raise ParseError("checkpoint lacks a tensor", field=name)
    for name, values in state.items():
        if name not in params:
            raise ParseError("checkpoint has an unknown tensor", field=name)
        if tuple(values.shape) != params[name].shape:
            raise ParseError(
                f"tensor shape {tuple(values.shape)} does not match "
                f"{params[name].shape}",
                field=name,
            )
    for name, param in params.items():
        param.assign(state[name])


def load(
    path: str | pathlib.Path, cfg: ModelConfig, *, dtype: t.Any = np.float32
) -> FastModel:
    """Build a network for `cfg` and fill it from a checkpoint."""
    state = read_checkpoint(path)
    model = build(cfg, dtype=dtype)
    load_state(model, state)
    logger.info(f"Loaded {len(state)} tensors from {path}")
    return model
