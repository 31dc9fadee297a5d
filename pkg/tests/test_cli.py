"""test_cli.py :: Tests for the lipfast command line."""

import csv
import io
import pathlib
import typing as t

import numpy as np
import pytest

from lipfast import __version__
from lipfast import tensor as T
from lipfast.cli import cli
from lipfast.lipfast import find_config, main
from lipfast.model import ModelConfig, build, parameter_count
from lipfast.oracles import GRADCHECK_SUITES, PRIMITIVE_TOLERANCE, GradCase
from lipfast.tensor import Tensor

WriteWav = t.Callable[..., pathlib.Path]


def _run(arguments: list[str]) -> int:
    with pytest.raises(SystemExit) as info:
        cli(arguments)
    return info.value.code


def _rows(text: str) -> list[list[str]]:
    return list(csv.reader(io.StringIO(text)))


@pytest.fixture(scope="function")
def isolated(
    tmp_path: pathlib.Path, monkeypatch: pytest.MonkeyPatch
) -> pathlib.Path:
    """Run in an empty directory with an empty home."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("HOME", str(tmp_path))
    return tmp_path


def test_version(capsys: pytest.CaptureFixture) -> None:
    """Test that -V prints the package version."""
    assert _run(["-V"]) == 0
    assert capsys.readouterr().out.strip() == __version__


def test_params_tiny(
    config_file: pathlib.Path, capsys: pytest.CaptureFixture
) -> None:
    """Test that the printed total matches the library count."""
    assert _run(["params", "-c", str(config_file)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["layer", "type", "parameters"]
    expected = parameter_count(build(ModelConfig.tiny(2)))
    assert out[-1].split() == ["total", str(expected)]


def test_params_default_is_published(
    isolated: pathlib.Path, capsys: pytest.CaptureFixture
) -> None:
    """Test the fallback to the published configuration."""
    assert _run(["params"]) == 0
    total = int(capsys.readouterr().out.splitlines()[-1].split()[-1])
    assert 1_700_000 <= total <= 1_800_000
    assert total == 1_754_234


def test_config_discovery(
    isolated: pathlib.Path, config_file: pathlib.Path
) -> None:
    """Test that config.json in the working directory is found."""
    assert config_file.parent == isolated
    assert find_config() == ModelConfig.tiny(2)
    assert find_config(str(config_file)) == ModelConfig.tiny(2)


def test_missing_config(
    tmp_path: pathlib.Path, capsys: pytest.CaptureFixture
) -> None:
    """Test that a missing config file exits 2 naming the path."""
    missing = tmp_path / "nope.json"
    assert _run(["params", "-c", str(missing)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("lipfast params: error:")
    assert str(missing) in err


def test_invalid_config(
    tmp_path: pathlib.Path, capsys: pytest.CaptureFixture
) -> None:
    """Test that a config violating invariants exits 2."""
    bad = tmp_path / "bad.json"
    bad.write_text('{"image_size": [32, 64]}')
    assert _run(["params", "-c", str(bad)]) == 2
    assert "error" in capsys.readouterr().err


def test_infer(
    config_file: pathlib.Path,
    write_wav: WriteWav,
    capsys: pytest.CaptureFixture,
) -> None:
    """Test one finite score row per file, equal for equal files."""
    silence = write_wav("silence.wav", np.zeros(16000))
    copy = write_wav("copy.wav", np.zeros(16000))
    tone = write_wav("tone.wav", 0.3 * np.sin(np.arange(16000) / 5))
    code = _run(
        ["infer", "-c", str(config_file), "--wav"]
        + [str(silence), str(copy), str(tone)]
    )
    assert code == 0
    rows = _rows(capsys.readouterr().out)
    assert rows[0] == ["path", "score_0", "score_1"]
    assert len(rows) == 4
    scores = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    assert np.all(np.isfinite(scores))
    assert np.all((scores >= 0) & (scores <= 1))
    assert np.array_equal(scores[0], scores[1])


def test_infer_truncated_wav(
    config_file: pathlib.Path,
    write_wav: WriteWav,
    capsys: pytest.CaptureFixture,
) -> None:
    """Test that a truncated WAV exits 2 with the byte offset."""
    path = write_wav("cut.wav", np.zeros(16000))
    path.write_bytes(path.read_bytes()[:100])
    assert _run(["infer", "-c", str(config_file), "--wav", str(path)]) == 2
    assert "byte offset 36" in capsys.readouterr().err


def test_train_and_infer_with_checkpoint(
    tmp_path: pathlib.Path,
    config_file: pathlib.Path,
    write_wav: WriteWav,
    capsys: pytest.CaptureFixture,
) -> None:
    """Test a short training run whose checkpoint infer can load."""
    checkpoint = tmp_path / "model.fstc"
    records = tmp_path / "records.csv"
    code = _run(
        [
            "train",
            "-c",
            str(config_file),
            "--steps",
            "3",
            "--samples",
            "20",
            "--batch-size",
            "4",
            "--output",
            str(records),
            "--checkpoint",
            str(checkpoint),
        ]
    )
    assert code == 0
    assert "accuracy=" in capsys.readouterr().err
    assert len(_rows(records.read_text())) == 4
    assert checkpoint.is_file()

    wav = write_wav("clip.wav", np.zeros(16000))
    code = _run(
        [
            "infer",
            "-c",
            str(config_file),
            "--checkpoint",
            str(checkpoint),
            "--wav",
            str(wav),
        ]
    )
    assert code == 0
    assert len(_rows(capsys.readouterr().out)) == 2


def test_train_data_class_mismatch(
    tmp_path: pathlib.Path,
    config_file: pathlib.Path,
    write_wav: WriteWav,
    capsys: pytest.CaptureFixture,
) -> None:
    """Test that a dataset with the wrong class count exits 2."""
    write_wav("data/only/a.wav", np.zeros(8000))
    data = str(tmp_path / "data")
    assert _run(["train", "-c", str(config_file), "--data", data]) == 2
    assert "1 classes" in capsys.readouterr().err


def test_stability(
    config_file: pathlib.Path, capsys: pytest.CaptureFixture
) -> None:
    """Test one row per step for each block variant."""
    code = _run(
        [
            "stability",
            "-c",
            str(config_file),
            "--steps",
            "50",
            "--lrs",
            "0.001",
            "--batch-size",
            "4",
        ]
    )
    assert code == 0
    rows = _rows(capsys.readouterr().out)
    assert rows[0] == [
        "step",
        "epoch",
        "variant",
        "lr",
        "loss",
        "grad_norm",
        "nan",
    ]
    assert len(rows) == 101
    assert {row[2] for row in rows[1:]} == {"lips", "base"}


def test_gradcheck(capsys: pytest.CaptureFixture) -> None:
    """Test that one suite passes and writes a row per check and seed."""
    assert _run(["gradcheck", "--module", "lipschitz-blocks"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert rows[0][:3] == ["module", "check", "seed"]
    assert len(rows) == 1 + 5 * 20
    assert all(row[-1] == "1" for row in rows[1:])


def _frozen_square(
    rng: np.random.Generator,
) -> tuple[t.Callable[[], Tensor], dict[str, Tensor]]:
    x = Tensor(rng.uniform(1.0, 2.0, size=3), requires_grad=True)

    # the tape sees x * c while the function evaluates x * x
    def loss() -> Tensor:
        return T.sum_(x * Tensor(np.array(x.data)))

    return loss, {"x": x}


def test_gradcheck_failure_exits_1(
    monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture
) -> None:
    """Test that a wrong gradient exits 1 and lists the failure."""
    case = GradCase("frozen", PRIMITIVE_TOLERANCE, _frozen_square)
    monkeypatch.setitem(GRADCHECK_SUITES, "broken", lambda: [case])
    code = _run(["gradcheck", "--module", "broken", "--seeds", "2"])
    assert code == 1
    captured = capsys.readouterr()
    rows = _rows(captured.out)
    assert len(rows) == 3
    assert [row[-1] for row in rows[1:]] == ["0", "0"]
    assert "FAILED broken/frozen seed 0" in captured.err


def test_gradcheck_rejects_unknown_module(
    capsys: pytest.CaptureFixture,
) -> None:
    """Test that argparse refuses an unknown suite."""
    assert _run(["gradcheck", "--module", "nope"]) == 2
    assert "invalid choice" in capsys.readouterr().err


def test_bench(
    config_file: pathlib.Path, capsys: pytest.CaptureFixture
) -> None:
    """Test that timings are positive."""
    code = _run(
        [
            "bench",
            "-c",
            str(config_file),
            "--iterations",
            "3",
            "--warmup",
            "1",
        ]
    )
    assert code == 0
    rows = _rows(capsys.readouterr().out)
    assert rows[0] == ["iterations", "mean_seconds", "p95_seconds"]
    assert rows[1][0] == "3"
    assert float(rows[1][1]) > 0
    assert float(rows[1][2]) > 0


def test_bench_needs_iterations(
    config_file: pathlib.Path, capsys: pytest.CaptureFixture
) -> None:
    """Test that zero iterations is a usage error."""
    assert main("bench", config=str(config_file), iterations=0) == 2
    assert "iterations" in capsys.readouterr().err
