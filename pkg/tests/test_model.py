"""test_model.py :: Tests for config handling, the network and checkpoints."""

import dataclasses
import json
import pathlib
import struct

import numpy as np
import pytest

from lipfast import tensor as T
from lipfast.errors import (
    ConfigError,
    DimensionError,
    ParseError,
    UnsupportedFormatError,
    UsageError,
)
from lipfast.layers.basic import Conv2d
from lipfast.model import (
    CHECKPOINT_MAGIC,
    FastModel,
    ModelConfig,
    build,
    class_scores,
    forward,
    load,
    load_state,
    parameter_count,
    parameter_table,
    read_checkpoint,
    save,
    stage_plan,
)
from lipfast.oracles import END_TO_END_TOLERANCE, check_gradient
from lipfast.tensor import Tensor

config_path = pathlib.Path(__file__).parent / "test_config.json"


def _input(cfg: ModelConfig, batch: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((batch,) + cfg.image_size + (1,))


def test_published_parameter_count() -> None:
    """Test that the published configuration has about two million."""
    model = build(ModelConfig.published(2))
    assert 1_600_000 <= parameter_count(model) <= 2_400_000
    assert parameter_count(model) == 1_754_234


def test_parameter_count_of_fragment() -> None:
    """Test the count of a bias-free 3x3x1x16 convolution."""
    conv = Conv2d(1, 16, 3, np.random.default_rng(0), bias=False)
    assert parameter_count(conv) == 144


def test_parameter_count_is_seed_invariant(tiny_config: ModelConfig) -> None:
    """Test that the count depends on the config only."""
    counts = {parameter_count(build(tiny_config, seed)) for seed in (0, 1, 2)}
    assert counts == {18_574}


def test_parameter_table_sums_to_count(tiny_config: ModelConfig) -> None:
    """Test that the per-layer table covers every parameter once."""
    model = build(tiny_config)
    rows = parameter_table(model)
    assert rows[0][0] == "stem"
    assert rows[-1][0] == "classifier"
    assert sum(count for _, _, count in rows) == parameter_count(model)
    names = [name for name, _ in model.named_parameters()]
    assert len(names) == len(set(names))


def test_stage_plan_layout() -> None:
    """Test the mapping of the channel list onto the stages."""
    plan = stage_plan(ModelConfig.published())
    assert [len(stage) for stage in plan] == [1, 2, 2, 2, 2]
    strides = [entry.stride for stage in plan for entry in stage]
    assert strides == [1, 2, 1, 2, 1, 2, 1, 2, 1]
    fast = [entry for stage in plan for entry in stage if entry.kind == "fast"]
    assert [(e.hidden_dim, e.depth) for e in fast] == [
        (96, 2),
        (128, 4),
        (144, 4),
    ]
    assert plan[-1][-1].out_channels == 96


def test_build_is_deterministic(tiny_config: ModelConfig) -> None:
    """Test that equal seeds give bit-identical parameters."""
    first = build(tiny_config, seed=7).state_dict()
    second = build(tiny_config, seed=7).state_dict()
    other = build(tiny_config, seed=8).state_dict()
    assert first.keys() == second.keys()
    assert all(np.array_equal(first[k], second[k]) for k in first)
    assert any(not np.array_equal(first[k], other[k]) for k in first)


def test_build_initialisation(tiny_config: ModelConfig) -> None:
    """Test alpha, gamma, beta and transformer weight initial values."""
    model = build(tiny_config)
    block = model.stages[2][1].transformer_blocks[0]
    assert np.all(block.residual1.alpha.data == np.float32(0.1))
    assert np.all(block.norm1.gamma.data == 1)
    assert np.all(block.norm1.beta.data == 0)
    assert np.abs(block.attention.wq.data).max() <= 0.04 + 1e-7
    assert np.allclose(np.exp(block.attention.log_tau.data), 5.0)


def test_forward_shape_and_determinism(tiny_config: ModelConfig) -> None:
    """Test logits shape and bit-exact eval-mode repeats."""
    model = build(tiny_config)
    x = _input(tiny_config, 3)
    first = forward(model, x)
    second = forward(model, Tensor(x.astype(np.float32)))
    assert first.shape == (3, 2)
    assert np.array_equal(first.data, second.data)


def test_forward_wrong_spatial_dims(tiny_config: ModelConfig) -> None:
    """Test that the input extents must match the config."""
    model = build(tiny_config)
    with pytest.raises(DimensionError):
        forward(model, np.zeros((1, 32, 60, 1)))
    with pytest.raises(DimensionError):
        forward(model, np.zeros((32, 64, 1)))


def test_forward_large_inputs_are_finite(tiny_config: ModelConfig) -> None:
    """Test that logits stay finite for inputs scaled by 1e3."""
    model = build(tiny_config)
    logits = forward(model, 1e3 * _input(tiny_config, 2))
    assert np.all(np.isfinite(logits.data))


def test_forward_connectivity(tiny_config: ModelConfig) -> None:
    """Test that perturbing any parameter tensor changes the logits."""
    # the last stage needs two patches for wq, wk and tau to matter
    cfg = dataclasses.replace(tiny_config, image_size=(64, 128))
    rng = np.random.default_rng(1)
    with T.default_dtype(np.float64):
        model = build(cfg, dtype=np.float64)
        x = _input(cfg, 2)
        reference = forward(model, x).data
        for name, param in model.named_parameters():
            # a constant shift can sit in the null space of a centred input
            original = param.data
            signs = rng.choice([-0.5, 0.5], size=original.shape)
            param.data = original + signs
            changed = not np.array_equal(forward(model, x).data, reference)
            param.data = original
            assert changed, name


def test_eval_forward_leaves_no_tape(tiny_config: ModelConfig) -> None:
    """Test that inference outside a tape records nothing."""
    model = build(tiny_config)
    x = _input(tiny_config, 1)
    for _ in range(3):
        logits = forward(model, x)
    assert T.current_tape() is None
    assert not logits.requires_grad
    with T.Tape() as tape:
        assert forward(model, x).requires_grad
        assert len(tape) > 0


def test_training_forward_uses_rng(tiny_config: ModelConfig) -> None:
    """Test that training mode is reproducible from the DropPath seed."""
    cfg = dataclasses.replace(tiny_config, drop_path_rate=0.5)
    model = build(cfg)
    x = _input(cfg, 4)
    one = forward(model, x, True, np.random.default_rng(0)).data
    same = forward(model, x, True, np.random.default_rng(0)).data
    assert np.array_equal(one, same)


def test_end_to_end_input_gradient(tiny_config: ModelConfig) -> None:
    """Test the mean-logit gradient of the tiny model w.r.t. its input."""
    with T.default_dtype(np.float64):
        model = build(tiny_config, dtype=np.float64)
        x = Tensor(_input(tiny_config, 1), requires_grad=True)
        report = check_gradient(
            "tiny_model",
            lambda: T.mean(forward(model, x)),
            {"x": x},
            END_TO_END_TOLERANCE,
            samples=16,
            rng=np.random.default_rng(0),
        )
    assert report.passed, report


def test_class_scores(tiny_config: ModelConfig) -> None:
    """Test sigmoid and softmax heads."""
    logits = Tensor(np.array([[0.0, 2.0], [-1.0, 1.0]]))
    sigmoid = class_scores(build(tiny_config), logits)
    assert np.allclose(sigmoid[0], [0.5, 1 / (1 + np.exp(-2.0))])
    softmax_cfg = dataclasses.replace(tiny_config, head_activation="softmax")
    softmax = class_scores(build(softmax_cfg), logits)
    assert np.allclose(softmax.sum(axis=1), 1.0)


def test_config_json_roundtrip(tmp_path: pathlib.Path) -> None:
    """Test reading the JSON fixture and writing it back."""
    cfg = ModelConfig.from_json(config_path)
    assert cfg == ModelConfig.tiny(2)
    cfg.to_json(tmp_path / "out.json")
    assert ModelConfig.from_json(tmp_path / "out.json") == cfg


def test_config_sample_is_published_config() -> None:
    """Test that the shipped sample config is the published one."""
    sample = pathlib.Path(__file__).parent.parent / "config-sample.json"
    assert ModelConfig.from_json(sample) == ModelConfig.published(2)


def test_config_rejects_unknown_and_missing_keys() -> None:
    """Test that unknown keys and missing required keys are named."""
    raw = json.loads(config_path.read_text())
    raw["colour"] = "blue"
    del raw["depths"]
    with pytest.raises(ConfigError, match="colour.*depths"):
        ModelConfig.from_dict(raw)


def test_config_lists_every_problem() -> None:
    """Test that validation reports all violated invariants at once."""
    raw = json.loads(config_path.read_text())
    raw["channels"] = [4, 8]
    raw["hidden_dims"] = [8, 6, 8]
    raw["kernel"] = 2
    with pytest.raises(ConfigError) as excinfo:
        ModelConfig.from_dict(raw)
    message = str(excinfo.value)
    assert "channels must have length 11" in message
    assert "hidden dim 6" in message
    assert "kernel" in message


def test_config_scalar_where_list_expected() -> None:
    """Test that a scalar hidden_dims is a config error, not a crash."""
    raw = json.loads(config_path.read_text())
    raw["hidden_dims"] = 8
    with pytest.raises(ConfigError, match="hidden_dims"):
        ModelConfig.from_dict(raw)


def test_checkpoint_roundtrip(
    tiny_config: ModelConfig, tmp_path: pathlib.Path
) -> None:
    """Test that save then load restores every parameter bit-exactly."""
    model = build(tiny_config, seed=3)
    path = tmp_path / "model.fstc"
    save(model, path)
    restored = load(path, tiny_config)
    original = model.state_dict()
    loaded = restored.state_dict()
    assert list(original) == list(loaded)
    assert all(np.array_equal(original[k], loaded[k]) for k in original)
    assert list(read_checkpoint(path)) == list(original)


def test_checkpoint_rejects_float64(
    tiny_config: ModelConfig, tmp_path: pathlib.Path
) -> None:
    """Test that a float64 model is refused rather than narrowed."""
    path = tmp_path / "model.fstc"
    with pytest.raises(UsageError, match="float32 only"):
        save(build(tiny_config, dtype=np.float64), path)
    assert not path.exists()


def test_checkpoint_layout(
    tiny_config: ModelConfig, tmp_path: pathlib.Path
) -> None:
    """Test the header and the first tensor record."""
    model = build(tiny_config)
    path = tmp_path / "model.fstc"
    save(model, path)
    data = path.read_bytes()
    magic, version, count = struct.unpack_from("<4sII", data)
    assert magic == CHECKPOINT_MAGIC
    assert version == 1
    assert count == len(model.parameters())
    (length,) = struct.unpack_from("<H", data, 12)
    assert data[14 : 14 + length] == b"stem.weight"
    assert data[14 + length] == 4


def test_checkpoint_truncated(
    tiny_config: ModelConfig, tmp_path: pathlib.Path
) -> None:
    """Test that a truncated file names the field being read."""
    path = tmp_path / "model.fstc"
    save(build(tiny_config), path)
    path.write_bytes(path.read_bytes()[:60])
    with pytest.raises(ParseError) as excinfo:
        read_checkpoint(path)
    assert excinfo.value.field == "stem.weight data"
    assert excinfo.value.offset is not None


def test_checkpoint_bad_magic_and_version(tmp_path: pathlib.Path) -> None:
    """Test rejection of foreign files and unknown versions."""
    path = tmp_path / "bad.fstc"
    path.write_bytes(struct.pack("<4sII", b"NOPE", 1, 0))
    with pytest.raises(ParseError, match="magic"):
        read_checkpoint(path)
    path.write_bytes(struct.pack("<4sII", CHECKPOINT_MAGIC, 9, 0))
    with pytest.raises(UnsupportedFormatError):
        read_checkpoint(path)


def test_checkpoint_trailing_bytes(
    tiny_config: ModelConfig, tmp_path: pathlib.Path
) -> None:
    """Test that bytes after the last tensor are rejected."""
    path = tmp_path / "model.fstc"
    save(build(tiny_config), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ParseError, match="trailer"):
        read_checkpoint(path)


def test_load_state_mismatch(tiny_config: ModelConfig) -> None:
    """Test that missing and mis-shaped tensors name the parameter."""
    model = build(tiny_config)
    state = model.state_dict()
    state["stem.weight"] = np.zeros((1, 1))
    with pytest.raises(ParseError, match="stem.weight"):
        load_state(model, state)
    del state["stem.weight"]
    with pytest.raises(ParseError, match="stem.weight"):
        load_state(model, state)


def test_checkpoint_config_mismatch(
    tiny_config: ModelConfig, tmp_path: pathlib.Path
) -> None:
    """Test loading a checkpoint against a different config."""
    path = tmp_path / "model.fstc"
    save(build(tiny_config), path)
    wider = dataclasses.replace(tiny_config, head_hidden=24)
    with pytest.raises(ParseError):
        load(path, wider)


def test_model_is_a_module(tiny_config: ModelConfig) -> None:
    """Test the FastModel surface used by training."""
    model = build(tiny_config)
    assert isinstance(model, FastModel)
    assert model.dtype == np.float32
    model.zero_grad()
    assert all(p.grad is None for p in model.parameters())
