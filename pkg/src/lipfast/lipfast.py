"""lipfast.py :: Command runners behind the lipfast CLI.

Each `run_*` function implements one subcommand, writes its CSV or table to
stdout (or `output`) and returns the process exit code. `main` dispatches
and turns library errors into exit code 2.
"""

from __future__ import annotations

import pathlib
import sys
import time
import typing as t

import numpy as np

from lipfast import __version__, logger
from lipfast import tensor as T
from lipfast.audio import SpectrogramConfig, load_wav, mel_spectrogram
from lipfast.errors import ConfigError, LipfastError, UsageError
from lipfast.model import (
    FastModel,
    ModelConfig,
    build,
    forward,
    load,
    parameter_count,
    parameter_table,
    save,
)
from lipfast.oracles import GRADCHECK_SUITES, run_gradcheck
from lipfast.tasks import AudioFolderTask, SyntheticTask, Task
from lipfast.training import (
    evaluate,
    halve_after_schedule,
    predict,
    stability_experiment,
    train,
    write_records,
)
from lipfast.utils import format_table, write_csv

CONFIG_DIRS = (".", "~/.config/lipfast", "~/.lipfast", "/etc/lipfast")
SCHEDULES = ("constant", "halve")


def find_config(config_path_str: str | None = None) -> ModelConfig:
    """Load the model config.

    Args:
        config_path_str: Path to config file. If not given will search for
                         `config.json` in cwd, `~/.config/lipfast/`,
                         `~/.lipfast/` and `/etc/lipfast/`, falling back to
                         the published configuration with two classes.

    """
    if config_path_str:
        return ModelConfig.from_json(pathlib.Path(config_path_str))
    for config_dir in CONFIG_DIRS:
        config_path = pathlib.Path(config_dir).expanduser() / "config.json"
        if config_path.is_file():
            logger.info(f"Using config: {config_path}")
            return ModelConfig.from_json(config_path)
    logger.info("No config file found, using the published configuration")
    return ModelConfig.published(2)


def _model(cfg: ModelConfig, checkpoint: str | None, seed: int) -> FastModel:
    if checkpoint:
        return load(checkpoint, cfg)
    return build(cfg, seed)


def run_params(config: str | None = None) -> int:
    """Print the per-layer parameter table and the total."""
    model = build(find_config(config), seed=0)
    rows = parameter_table(model)
    rows.append(("total", "", parameter_count(model)))
    print(format_table(("layer", "type", "parameters"), rows))
    return 0


def run_infer(
    wav: t.Sequence[str],
    config: str | None = None,
    checkpoint: str | None = None,
    seed: int = 0,
) -> int:
    """Write one CSV row of class scores per WAV file."""
    cfg = find_config(config)
    model = _model(cfg, checkpoint, seed)
    front_end = SpectrogramConfig().for_image(cfg.image_size)
    rows = []
    for path in wav:
        spectrogram = mel_spectrogram(load_wav(path), front_end)
        scores = predict(model, spectrogram.values.data[None])[0]
        rows.append([path] + [repr(float(s)) for s in scores])
    header = ["path"] + [f"score_{c}" for c in range(cfg.num_classes)]
    write_csv(header, rows)
    return 0


def _task(
    cfg: ModelConfig, data: str | None, samples: int, seed: int
) -> Task:
    if data:
        front_end = SpectrogramConfig().for_image(cfg.image_size)
        task: Task = AudioFolderTask(data, front_end, seed=seed)
        if task.num_classes != cfg.num_classes:
            raise ConfigError(
                f"{data} has {task.num_classes} classes, config expects "
                f"{cfg.num_classes}"
            )
        return task
    return SyntheticTask(
        cfg.num_classes, tuple(cfg.image_size), samples=samples, seed=seed
    )


def run_train(
    config: str | None = None,
    data: str | None = None,
    epochs: int = 30,
    steps: int | None = None,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    schedule: str = "constant",
    samples: int = 256,
    output: str | None = None,
    checkpoint: str | None = None,
) -> int:
    """Train on a WAV directory or the synthetic task and write records."""
    cfg = find_config(config)
    task = _task(cfg, data, samples, seed)
    model = build(cfg, seed)
    records = train(
        model,
        task,
        epochs=epochs,
        lr=lr,
        batch_size=batch_size,
        seed=seed,
        steps=steps,
        schedule=halve_after_schedule() if schedule == "halve" else None,
    )
    write_records(records, output)
    if len(task.test_indices):
        result = evaluate(model, task)
        print(
            f"accuracy={result.accuracy:.4f} f1={result.f1} "
            f"mAP={result.mean_ap:.4f} examples={result.examples}",
            file=sys.stderr,
        )
    if checkpoint:
        save(model, checkpoint)
    return 0


def run_gradcheck_command(
    module: t.Sequence[str] = (), seeds: int = 20
) -> int:
    """Run gradient-check suites; exit 1 listing failures."""
    failures = []
    rows = []
    for name in module or GRADCHECK_SUITES:
        for seed, report in run_gradcheck(name, range(seeds)):
            rows.append(
                (
                    name,
                    report.name,
                    seed,
                    repr(report.max_rel_error),
                    report.tolerance,
                    int(report.passed),
                )
            )
            if not report.passed:
                failures.append(
                    f"{name}/{report.name} seed {seed}: "
                    f"{report.max_rel_error:.3e} at {report.failing_index}"
                )
    header = ("module", "check", "seed", "max_rel_error", "tolerance", "pass")
    write_csv(header, rows)
    for failure in failures:
        print(f"FAILED {failure}", file=sys.stderr)
    return 1 if failures else 0


def run_stability(
    config: str | None = None,
    lrs: t.Sequence[float] = (1e-3,),
    steps: int = 500,
    seed: int = 0,
    batch_size: int = 16,
    output: str | None = None,
) -> int:
    """Train both block variants per learning rate and write records."""
    cfg = find_config(config)
    streams = stability_experiment(cfg, lrs, steps, seed, batch_size)
    write_records(
        (record for records in streams.values() for record in records), output
    )
    return 0


def run_bench(
    config: str | None = None,
    checkpoint: str | None = None,
    iterations: int = 100,
    warmup: int = 10,
    seed: int = 0,
) -> int:
    """Time single-sample eval-mode forwards after a warmup."""
    if iterations < 1 or warmup < 0:
        raise UsageError("bench needs iterations >= 1 and warmup >= 0")
    cfg = find_config(config)
    model = _model(cfg, checkpoint, seed)
    rng = np.random.default_rng(seed)
    x = T.Tensor(
        rng.standard_normal((1,) + tuple(cfg.image_size) + (1,)),
        dtype=model.dtype,
    )
    timings = []
    with T.no_grad():
        for i in range(warmup + iterations):
            start = time.perf_counter()
            forward(model, x)
            if i >= warmup:
                timings.append(time.perf_counter() - start)
    latencies = np.asarray(timings)
    write_csv(
        ("iterations", "mean_seconds", "p95_seconds"),
        [
            (
                iterations,
                repr(float(latencies.mean())),
                repr(float(np.percentile(latencies, 95))),
            )
        ],
    )
    return 0


COMMANDS: dict[str, t.Callable[..., int]] = {
    "params": run_params,
    "infer": run_infer,
    "train": run_train,
    "gradcheck": run_gradcheck_command,
    "stability": run_stability,
    "bench": run_bench,
}


def main(command: str, verbosity: int = 40, **options: t.Any) -> int:
    """Run one subcommand.

    Args:
        command: One of `COMMANDS`
        verbosity: Logging verbosity, defaults to 40
        options: Keyword arguments of the subcommand's runner

    Returns:
        Exit code: 0 success, 1 failed check, 2 usage, config or file error

    """
    logger.setLevel(verbosity)
    logger.info(f"lipfast {__version__}")
    logger.debug(sys.version)
    try:
        return COMMANDS[command](**options)
    except (LipfastError, OSError) as e:
        print(f"lipfast {command}: error: {e}", file=sys.stderr)
        return 2
