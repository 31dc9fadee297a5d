"""audio.py :: Turn WAV files into fixed-size log-mel spectrogram images.

The pipeline is a Hann-windowed magnitude STFT, an HTK-scale triangular mel
filterbank, a natural log after flooring, per-spectrogram standardisation
and finally right-padding or center-truncation along time so that every clip
yields exactly `(n_mels, target_frames, 1)`.
"""

from __future__ import annotations

import dataclasses
import pathlib
import struct
import typing as t

import librosa
import numpy as np
from scipy import signal

from lipfast import logger
from lipfast.errors import (
    ConfigError,
    ParseError,
    TooShortError,
    UnsupportedFormatError,
    UsageError,
)
from lipfast.tensor import Tensor

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
SPECTROGRAM_MAGIC = b"FSTS"

# Below this the spectrogram is treated as constant and left unscaled
_MIN_STD = 1e-12


@dataclasses.dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono samples in `[-1, 1]` at `sample_rate` Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        """Check the clip invariants."""
        if self.sample_rate < 1:
            raise UsageError(
                f"sample rate must be positive: {self.sample_rate}"
            )
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise UsageError("audio clip must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise UsageError("audio clip contains non-finite samples")

    @property
    def duration(self) -> float:
        """Return the clip length in seconds."""
        return self.samples.size / self.sample_rate


@dataclasses.dataclass(frozen=True)
class SpectrogramConfig:
    """Front-end parameters; the defaults yield `(128, 1876)` images."""

    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 128
    target_frames: int = 1876
    log_floor: float = 1e-10

    @property
    def window_samples(self) -> int:
        """Return the analysis window length in samples."""
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop_samples(self) -> int:
        """Return the hop length in samples."""
        return int(round(self.sample_rate * self.hop_ms / 1000))

    def validate(self) -> None:
        """Raise `ConfigError` listing every violated invariant."""
        problems = []
        if self.sample_rate < 1:
            problems.append("sample_rate must be positive")
        if self.hop_ms <= 0 or self.window_ms <= 0:
            problems.append("window_ms and hop_ms must be positive")
        elif self.hop_ms > self.window_ms:
            problems.append("hop_ms must not exceed window_ms")
        if self.hop_samples < 1 or self.window_samples < 1:
            problems.append("window and hop must span at least one sample")
        if self.n_fft < self.window_samples:
            problems.append(
                f"n_fft={self.n_fft} is shorter than the "
                f"{self.window_samples}-sample window"
            )
        if self.n_mels < 1:
            problems.append("n_mels must be positive")
        if self.target_frames < 1:
            problems.append("target_frames must be at least 1")
        if self.log_floor <= 0:
            problems.append("log_floor must be positive")
        if problems:
            raise ConfigError(
                "invalid spectrogram config: " + "; ".join(problems)
            )

    def for_image(self, image_size: t.Sequence[int]) -> SpectrogramConfig:
        """Return a copy whose output matches a model's `(H, W)`."""
        height, width = image_size
        return dataclasses.replace(self, n_mels=height, target_frames=width)


@dataclasses.dataclass(frozen=True, eq=False)
class Spectrogram:
    """A standardised log-mel image `(n_mels, target_frames, 1)`."""

    values: Tensor

    def __post_init__(self) -> None:
        """Check the shape and finiteness."""
        if self.values.ndim != 3 or self.values.shape[-1] != 1:
            raise UsageError(
                f"spectrogram must be (n_mels, frames, 1), got "
                f"{self.values.shape}"
            )
        if not np.all(np.isfinite(self.values.data)):
            raise UsageError("spectrogram contains non-finite values")


def _chunks(data: bytes) -> t.Iterator[tuple[bytes, int, int, int]]:
    """Yield `(chunk id, header offset, body start, body end)`."""
    offset = 12
    while offset < len(data):
        if offset + 8 > len(data):
            raise ParseError(
                "truncated chunk header", offset=offset, field="chunk header"
            )
        chunk_id, size = struct.unpack_from("<4sI", data, offset)
        start, end = offset + 8, offset + 8 + size
        name = chunk_id.decode("latin-1").strip()
        if end > len(data):
            raise ParseError(
                f"chunk declares {size} bytes, only {len(data) - start} "
                "remain",
                offset=offset,
                field=f"{name} chunk",
            )
        yield chunk_id, offset, start, end
        offset = end + (size & 1)


def _decode_fmt(
    data: bytes, offset: int, start: int, end: int
) -> tuple[int, int, int, int]:
    if end - start < 16:
        raise ParseError("fmt chunk too short", offset=offset, field="fmt")
    tag, channels, rate, _, block_align, bits = struct.unpack_from(
        "<HHIIHH", data, start
    )
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if end - start < 40:
            raise ParseError(
                "extensible fmt chunk too short", offset=offset, field="fmt"
            )
        (tag,) = struct.unpack_from("<H", data, start + 24)
    if (tag, bits) not in (
        (WAVE_FORMAT_PCM, 16),
        (WAVE_FORMAT_IEEE_FLOAT, 32),
    ):
        raise UnsupportedFormatError(
            f"format tag {tag:#06x} with {bits} bits per sample; only 16-bit "
            "PCM and 32-bit float are supported",
            offset=start,
            field="audio format",
        )
    if channels not in (1, 2):
        raise UnsupportedFormatError(
            f"{channels} channels; only mono and stereo are supported",
            offset=start + 2,
            field="channels",
        )
    if rate < 1:
        raise ParseError("sample rate is zero", offset=start + 4, field="rate")
    if block_align != channels * bits // 8:
        raise ParseError(
            f"block align {block_align} does not match {channels}x{bits} bit",
            offset=start + 12,
            field="block align",
        )
    return tag, channels, rate, bits


def load_wav(path: str | pathlib.Path) -> AudioClip:
    """Read a RIFF/WAVE file into a mono clip.

    Args:
        path: WAV file holding 16-bit PCM or 32-bit float, mono or stereo

    Returns:
        Clip with stereo mean-downmixed and PCM scaled by `1 / 32768`

    Raises:
        ParseError: with the byte offset of a malformed header or chunk
        UnsupportedFormatError: for other encodings or channel counts

    """
    data = pathlib.Path(path).read_bytes()
    if len(data) < 12:
        raise ParseError(
            "file too short for a RIFF header", offset=0, field="RIFF header"
        )
    if data[:4] != b"RIFF":
        raise ParseError("missing RIFF signature", offset=0, field="RIFF id")
    if data[8:12] != b"WAVE":
        raise ParseError("missing WAVE signature", offset=8, field="WAVE id")

    fmt = None
    for chunk_id, offset, start, end in _chunks(data):
        if chunk_id == b"fmt ":
            fmt = _decode_fmt(data, offset, start, end)
        elif chunk_id == b"data":
            if fmt is None:
                raise ParseError(
                    "data chunk precedes fmt chunk", offset=offset, field="fmt"
                )
            tag, channels, rate, bits = fmt
            frame_bytes = channels * bits // 8
            if (end - start) % frame_bytes:
                raise ParseError(
                    f"data size {end - start} is not a multiple of the "
                    f"{frame_bytes}-byte frame",
                    offset=offset,
                    field="data chunk",
                )
            if end == start:
                raise ParseError("no samples", offset=offset, field="data")
            if tag == WAVE_FORMAT_PCM:
                raw = np.frombuffer(data[start:end], dtype="<i2")
                samples = raw.astype(np.float64) / 32768.0
            else:
                raw = np.frombuffer(data[start:end], dtype="<f4")
                samples = raw.astype(np.float64)
                if not np.all(np.isfinite(samples)):
                    raise ParseError(
                        "non-finite float samples", offset=start, field="data"
                    )
            samples = samples.reshape(-1, channels).mean(axis=1)
            logger.debug(
                f"{path}: {samples.size} samples at {rate} Hz, "
                f"{channels} channel(s), {bits}-bit"
            )
            return AudioClip(samples, rate)
    raise ParseError(
        "no data chunk" if fmt else "no fmt chunk",
        offset=len(data),
        field="data" if fmt else "fmt",
    )


def save_wav(
    path: str | pathlib.Path,
    samples: np.ndarray,
    sample_rate: int,
    *,
    encoding: str = "pcm16",
) -> None:
    """Write `(n,)` mono or `(n, channels)` samples as a WAV file.

    Args:
        path: Destination
        samples: Values in `[-1, 1]`
        sample_rate: Hz
        encoding: `"pcm16"` or `"float32"`

    """
    samples = np.asarray(samples, dtype=np.float64)
    frames = samples.reshape(samples.shape[0], -1)
    channels = frames.shape[1]
    if encoding == "pcm16":
        tag, bits = WAVE_FORMAT_PCM, 16
        scaled = np.clip(np.round(frames * 32768.0), -32768, 32767)
        payload = scaled.astype("<i2").tobytes()
    elif encoding == "float32":
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
        payload = frames.astype("<f4").tobytes()
    else:
        raise UsageError(f"unknown WAV encoding {encoding!r}")
    block_align = channels * bits // 8
    fmt = struct.pack(
        "<HHIIHH",
        tag,
        channels,
        sample_rate,
        sample_rate * block_align,
        block_align,
        bits,
    )
    body = (
        b"WAVE"
        + struct.pack("<4sI", b"fmt ", len(fmt))
        + fmt
        + struct.pack("<4sI", b"data", len(payload))
        + payload
    )
    if len(payload) & 1:
        body += b"\x00"
    pathlib.Path(path).write_bytes(
        struct.pack("<4sI", b"RIFF", len(body)) + body
    )


def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """Return the `(n_mels, n_fft // 2 + 1)` HTK-scale triangular filters."""
    return librosa.filters.mel(
        sr=cfg.sample_rate,
        n_fft=cfg.n_fft,
        n_mels=cfg.n_mels,
        fmin=0.0,
        fmax=cfg.sample_rate / 2,
        htk=True,
        norm=None,
        dtype=np.float64,
    )


def mel_center_frequencies(cfg: SpectrogramConfig) -> np.ndarray:
    """Return the center frequency in Hz of every mel filter."""
    edges = librosa.mel_frequencies(
        n_mels=cfg.n_mels + 2, fmin=0.0, fmax=cfg.sample_rate / 2, htk=True
    )
    return edges[1:-1]


def log_mel_energies(clip: AudioClip, cfg: SpectrogramConfig) -> np.ndarray:
    """Compute floored natural-log mel energies `(n_mels, frames)`.

    Raises:
        UsageError: if the clip's sample rate differs from the config
        TooShortError: if the clip is shorter than one analysis window

    """
    cfg.validate()
    if clip.sample_rate != cfg.sample_rate:
        raise UsageError(
            f"clip is {clip.sample_rate} Hz, front end expects "
            f"{cfg.sample_rate} Hz (resampling is not supported)"
        )
    window = cfg.window_samples
    if clip.samples.size < window:
        raise TooShortError(
            f"clip has {clip.samples.size} samples, one window needs {window}"
        )
    _, _, magnitude = signal.spectrogram(
        clip.samples,
        fs=cfg.sample_rate,
        window=signal.get_window("hann", window),
        nperseg=window,
        noverlap=window - cfg.hop_samples,
        nfft=cfg.n_fft,
        detrend=False,
        scaling="spectrum",
        mode="magnitude",
    )
    mel = mel_filterbank(cfg) @ magnitude
    return np.log(np.maximum(mel, cfg.log_floor))


def fit_frames(
    values: np.ndarray, target_frames: int, pad_value: float
) -> np.ndarray:
    """Right-pad with `pad_value` or center-truncate the time axis."""
    frames = values.shape[1]
    if frames >= target_frames:
        start = (frames - target_frames) // 2
        return values[:, start : start + target_frames]
    padding = np.full((values.shape[0], target_frames - frames), pad_value)
    return np.concatenate([values, padding], axis=1)


def mel_spectrogram(clip: AudioClip, cfg: SpectrogramConfig) -> Spectrogram:
    """Convert a clip into a standardised `(n_mels, target_frames, 1)` image.

    Standardisation uses the mean and standard deviation of the clip's own
    frames; padding uses the standardised value of `log(log_floor)`.
    """
    energies = log_mel_energies(clip, cfg)
    center = energies.mean()
    spread = energies.std()
    if spread < _MIN_STD:
        spread = 1.0
    standardized = (energies - center) / spread
    pad_value = (np.log(cfg.log_floor) - center) / spread
    fitted = fit_frames(standardized, cfg.target_frames, pad_value)
    return Spectrogram(Tensor(fitted[:, :, None]))


def save_spectrogram(spec: Spectrogram, path: str | pathlib.Path) -> None:
    """Dump a spectrogram in the FSTS flat binary format."""
    n_mels, frames, _ = spec.values.shape
    header = struct.pack("<4sIII", SPECTROGRAM_MAGIC, n_mels, frames, 0)
    payload = np.ascontiguousarray(spec.values.data[:, :, 0], dtype="<f4")
    pathlib.Path(path).write_bytes(header + payload.tobytes())


def load_spectrogram(path: str | pathlib.Path) -> Spectrogram:
    """Read an FSTS dump back into a float32 spectrogram."""
    data = pathlib.Path(path).read_bytes()
    if len(data) < 16:
        raise ParseError(
            "file too short for an FSTS header", offset=0, field="header"
        )
    magic, n_mels, frames, _ = struct.unpack_from("<4sIII", data)
    if magic != SPECTROGRAM_MAGIC:
        raise ParseError("not an FSTS dump", offset=0, field="magic")
    expected = 16 + 4 * n_mels * frames
    if len(data) != expected:
        raise ParseError(
            f"expected {expected} bytes for {n_mels}x{frames}, got "
            f"{len(data)}",
            offset=16,
            field="values",
        )
    values = np.frombuffer(data, dtype="<f4", offset=16)
    return Spectrogram(
        Tensor(values.reshape(n_mels, frames, 1).astype(np.float32))
    )
