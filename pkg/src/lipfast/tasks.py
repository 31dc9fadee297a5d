"""tasks.py :: Labelled spectrogram datasets with a seeded train/test split.

`SyntheticTask` is a separable desk-scale stand-in for a real corpus: every
class gets its own band of elevated mel energy on top of smoothed noise.
`AudioFolderTask` reads one sub-directory of WAV files per class and runs
them through the audio front end.
"""

from __future__ import annotations

import abc
import pathlib
import typing as t

import numpy as np
from scipy import ndimage

from lipfast import logger
from lipfast.audio import SpectrogramConfig, load_wav, mel_spectrogram
from lipfast.errors import ConfigError, UsageError

TRAIN_FRACTION = 0.7
SPLITS = ("train", "test", "all")


class Batch(t.NamedTuple):
    """Images `(B, H, W, 1)` and integer labels `(B,)`."""

    images: np.ndarray
    labels: np.ndarray


class Task(abc.ABC):
    """Provide ABC for labelled spectrogram datasets.

    Subclasses fill `images`, `labels`, `num_classes` and `class_names`
    before calling `_make_split`.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_names: list[str]

    def _make_split(self, seed: int) -> None:
        order = np.random.default_rng(seed).permutation(len(self.labels))
        cut = max(1, int(round(TRAIN_FRACTION * len(order))))
        self.train_indices = np.sort(order[:cut])
        self.test_indices = np.sort(order[cut:])

    @property
    def image_size(self) -> tuple[int, int]:
        """Return the `(H, W)` of every image."""
        return self.images.shape[1], self.images.shape[2]

    def __len__(self) -> int:
        """Return the number of examples."""
        return len(self.labels)

    def indices(self, split: str) -> np.ndarray:
        """Return the example indices of `split`."""
        if split == "train":
            return self.train_indices
        if split == "test":
            return self.test_indices
        if split == "all":
            return np.arange(len(self))
        raise UsageError(f"split must be one of {SPLITS}, got {split!r}")

    def batches(
        self,
        batch_size: int,
        rng: np.random.Generator | None = None,
        split: str = "train",
    ) -> t.Iterator[Batch]:
        """Yield one pass over `split`.

        Args:
            batch_size: Examples per batch (the last batch may be smaller)
            rng: Shuffles the order when given; otherwise index order
            split: `"train"`, `"test"` or `"all"`

        """
        if batch_size < 1:
            raise UsageError(f"batch size must be positive, got {batch_size}")
        chosen = self.indices(split)
        if rng is not None:
            chosen = rng.permutation(chosen)
        for start in range(0, len(chosen), batch_size):
            picked = chosen[start : start + batch_size]
            yield Batch(self.images[picked], self.labels[picked])

    def __repr__(self) -> str:
        """Provide a short human-readable representation."""
        return (
            f"{self.__class__.__name__}(examples={len(self)}, "
            f"classes={self.num_classes}, image_size={self.image_size})"
        )


class SyntheticTask(Task):
    """Noise spectrograms with one class-specific band of extra energy."""

    def __init__(
        self,
        num_classes: int = 2,
        image_size: tuple[int, int] = (32, 64),
        samples: int = 256,
        seed: int = 0,
        *,
        peak: float = 2.0,
    ) -> None:
        """Generate the whole dataset from `seed`.

        Args:
            num_classes: Number of classes
            image_size: `(n_mels, frames)` of every example
            samples: Number of examples
            seed: Generator seed; equal seeds give equal datasets
            peak: Height of the class band relative to the noise

        """
        if num_classes < 1 or samples < num_classes:
            raise ConfigError(
                f"need samples >= num_classes >= 1, got {samples} samples "
                f"for {num_classes} classes"
            )
        height, width = image_size
        rng = np.random.default_rng(seed)
        labels = rng.permutation(np.arange(samples) % num_classes)

        # band-limited along frequency and time
        noise = ndimage.gaussian_filter(
            rng.standard_normal((samples, height, width)), sigma=(0, 1.0, 2.0)
        )
        bins = np.arange(height)
        centers = np.linspace(0.2, 0.8, num_classes) * (height - 1)
        width_bins = max(1.0, height / (4 * num_classes))
        bands = peak * np.exp(
            -0.5 * ((bins[None, :] - centers[:, None]) / width_bins) ** 2
        )
        images = noise + bands[labels][:, :, None]
        images -= images.mean(axis=(1, 2), keepdims=True)
        images /= images.std(axis=(1, 2), keepdims=True)

        self.seed = seed
        self.num_classes = num_classes
        self.class_names = [f"class{c}" for c in range(num_classes)]
        self.images = images[..., None]
        self.labels = labels.astype(np.int64)
        self._make_split(seed)


class AudioFolderTask(Task):
    """One sub-directory of WAV files per class, sorted by name."""

    def __init__(
        self,
        root: str | pathlib.Path,
        spectrogram_config: SpectrogramConfig | None = None,
        seed: int = 0,
    ) -> None:
        """Convert every WAV under `root` into a spectrogram.

        Raises:
            ConfigError: if `root` has no class directory or no WAV file

        """
        root = pathlib.Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset directory {root} not found")
        cfg = spectrogram_config or SpectrogramConfig()
        class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        if not class_dirs:
            raise ConfigError(f"{root} has no class sub-directories")

        images, labels = [], []
        for label, class_dir in enumerate(class_dirs):
            for wav in sorted(class_dir.glob("*.wav")):
                spectrogram = mel_spectrogram(load_wav(wav), cfg)
                images.append(spectrogram.values.data)
                labels.append(label)
            logger.info(f"Loaded class {label} ({class_dir.name})")
        if not images:
            raise ConfigError(f"no .wav files found under {root}")

        self.root = root
        self.num_classes = len(class_dirs)
        self.class_names = [p.name for p in class_dirs]
        self.images = np.stack(images)
        self.labels = np.asarray(labels, dtype=np.int64)
        self._make_split(seed)
