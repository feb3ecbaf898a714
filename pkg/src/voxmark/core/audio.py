#!/usr/bin/env python3
"""
VoxMark Audio Module

Waveform container, WAV file I/O, band-limited resampling and the
time-frequency segmentation used by the loudness loss.

Author: VoxMark Team
Version: 1.0
"""

import logging
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import julius
import numpy as np
import soundfile as sf
import torch
import torch.nn.functional as F

from .errors import AudioFormatError, AudioIOError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
PCM16_SCALE = 32768.0
SUPPORTED_SUBTYPES = ("PCM_16", "FLOAT")


@dataclass(frozen=True)
class AudioClip:
    """
    Immutable mono waveform.

    Samples are stored as a read-only float32 array with nominal range
    [-1, 1]. Construction rejects empty, multi-dimensional or non-finite
    input.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float32, copy=True)
        if samples.ndim != 1:
            raise ValidationError(f"AudioClip expects a 1-D sample array, got shape {samples.shape}")
        if samples.size < 1:
            raise ValidationError("AudioClip must contain at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("AudioClip samples must all be finite")
        if int(self.sample_rate) <= 0:
            raise ValidationError(f"Sample rate must be positive, got {self.sample_rate}")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def num_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        """Clip duration in seconds."""
        return self.num_samples / self.sample_rate

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Return a fresh 1-D tensor copy of the samples."""
        return torch.tensor(self.samples, dtype=dtype)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor, sample_rate: int = DEFAULT_SAMPLE_RATE) -> "AudioClip":
        """Build a clip from any tensor holding exactly one channel of samples."""
        return cls(tensor.detach().cpu().to(torch.float32).reshape(-1).numpy(), sample_rate)


def as_tensor(audio: Union[AudioClip, torch.Tensor, np.ndarray],
              dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """
    Coerce a clip, array or tensor into a tensor.

    Tensors pass through untouched so autograd graphs are preserved.
    """
    if isinstance(audio, AudioClip):
        return audio.to_tensor(dtype)
    if isinstance(audio, torch.Tensor):
        return audio
    return torch.as_tensor(np.asarray(audio), dtype=dtype)


def load_wav(path: Union[str, Path]) -> AudioClip:
    """
    Load a PCM-16 or 32-bit float WAV file as a mono clip.

    Multi-channel files are downmixed by averaging. PCM-16 values are
    scaled by 1/32768.

    Args:
        path: WAV file path

    Returns:
        AudioClip: Mono clip at the file's sample rate

    Raises:
        AudioIOError: If the file is missing, unreadable or truncated
        AudioFormatError: If the encoding is not PCM-16 or float32
    """
    path = Path(path)
    try:
        info = sf.info(str(path))
    except (RuntimeError, OSError) as e:
        raise AudioIOError(f"Cannot read WAV file {path}: {e}") from e

    if info.format not in ("WAV", "WAVEX") or info.subtype not in SUPPORTED_SUBTYPES:
        raise AudioFormatError(
            f"Unsupported encoding {info.format}/{info.subtype} in {path}; "
            f"expected WAV with one of {SUPPORTED_SUBTYPES}")

    try:
        if info.subtype == "PCM_16":
            raw, sample_rate = sf.read(str(path), dtype="int16", always_2d=True)
            data = raw.astype(np.float64) / PCM16_SCALE
        else:
            raw, sample_rate = sf.read(str(path), dtype="float32", always_2d=True)
            data = raw.astype(np.float64)
    except (RuntimeError, OSError) as e:
        raise AudioIOError(f"Failed to decode {path}: {e}") from e

    if data.shape[0] == 0 or data.shape[0] != info.frames:
        raise AudioIOError(f"Truncated WAV file {path}: expected {info.frames} frames, read {data.shape[0]}")

    mono = data.mean(axis=1) if data.shape[1] > 1 else data[:, 0]
    logger.debug("Loaded %s: %d frames, %d channel(s), %d Hz", path, data.shape[0], data.shape[1], sample_rate)
    return AudioClip(mono.astype(np.float32), int(sample_rate))


def save_wav(clip: AudioClip, path: Union[str, Path], subtype: str = "PCM_16"):
    """
    Write a clip to a WAV file.

    The file is written to a temporary sibling first and renamed into
    place, so readers never observe a partial file.

    Args:
        clip: Clip to save
        path: Destination path
        subtype: "PCM_16" (quantized, error <= 2^-15) or "FLOAT" (bit-exact)

    Raises:
        ValidationError: If the clip is invalid or the subtype unknown
        AudioIOError: If the destination cannot be written
    """
    if not isinstance(clip, AudioClip):
        raise ValidationError(f"save_wav expects an AudioClip, got {type(clip).__name__}")
    if not np.all(np.isfinite(clip.samples)):
        raise ValidationError("Refusing to save non-finite samples")
    if subtype not in SUPPORTED_SUBTYPES:
        raise ValidationError(f"Unsupported WAV subtype {subtype!r}")

    if subtype == "PCM_16":
        data = np.clip(np.round(clip.samples.astype(np.float64) * PCM16_SCALE), -32768, 32767).astype(np.int16)
    else:
        data = clip.samples

    path = Path(path)
    try:
        fd, tmp_name = tempfile.mkstemp(suffix=".wav.tmp", dir=str(path.parent or Path(".")))
        os.close(fd)
        try:
            sf.write(tmp_name, data, clip.sample_rate, subtype=subtype, format="WAV")
            os.replace(tmp_name, path)
        finally:
            if os.path.exists(tmp_name):
                os.remove(tmp_name)
    except (RuntimeError, OSError) as e:
        raise AudioIOError(f"Cannot write WAV file {path}: {e}") from e
    logger.debug("Saved %s (%s, %d samples)", path, subtype, clip.num_samples)


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def resample_tensor(x: torch.Tensor, old_rate: int, new_rate: int) -> torch.Tensor:
    """
    Windowed-sinc resampling along the last dimension.

    Output length is round(T * new_rate / old_rate).
    """
    if old_rate <= 0 or new_rate <= 0:
        raise ValidationError(f"Sample rates must be positive, got {old_rate} -> {new_rate}")
    if old_rate == new_rate:
        return x
    length = round_half_up(x.shape[-1] * new_rate / old_rate)
    return julius.resample_frac(x, int(old_rate), int(new_rate), output_length=length)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """
    Resample a clip to a new rate.

    Args:
        clip: Input clip
        target_rate: Target rate in Hz

    Returns:
        AudioClip: Resampled clip (the input itself when rates match)
    """
    if target_rate <= 0:
        raise ValidationError(f"Target rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip
    out = resample_tensor(clip.to_tensor(), clip.sample_rate, int(target_rate))
    return AudioClip(out.numpy(), int(target_rate))


@dataclass(frozen=True)
class TimeFrequencyGrid:
    """
    Band-split, windowed view of a signal.

    ``segments`` has shape (..., band_count, num_windows, window_size).
    """

    segments: torch.Tensor
    band_count: int
    window_size: int
    overlap_ratio: float
    hop: int

    @property
    def num_windows(self) -> int:
        return int(self.segments.shape[-2])


def octave_cutoffs(band_count: int, sample_rate: int) -> List[float]:
    """
    Octave-spaced crossover frequencies ending one octave below Nyquist.

    For 8 bands at 16 kHz: 62.5, 125, 250, 500, 1000, 2000, 4000 Hz.
    """
    nyquist = sample_rate / 2.0
    return [nyquist / 2 ** (band_count - 1 - i) for i in range(band_count - 1)]


def split_bands(x: torch.Tensor, sample_rate: int, band_count: int) -> torch.Tensor:
    """
    Complementary octave filter bank.

    Returns a tensor of shape (..., band_count, T) whose sum over the band
    axis reproduces the input.
    """
    if band_count < 1:
        raise ValidationError(f"Band count must be >= 1, got {band_count}")
    if band_count == 1:
        return x.unsqueeze(-2)
    bands = julius.split_bands(x, sample_rate, cutoffs=octave_cutoffs(band_count, sample_rate))
    return bands.movedim(0, -2)


def split_time_frequency(audio: Union[AudioClip, torch.Tensor],
                         band_count: int = 8,
                         window_size: int = 2048,
                         overlap: float = 0.5,
                         sample_rate: int = DEFAULT_SAMPLE_RATE) -> TimeFrequencyGrid:
    """
    Split a signal into frequency bands and overlapping time windows.

    Differentiable when given a tensor. The last window of each band is
    zero-padded to the full window size; a window longer than the signal
    yields a single padded window.

    Args:
        audio: AudioClip or tensor of shape (..., T)
        band_count: Number of bands B
        window_size: Window length W in samples
        overlap: Overlap ratio r in [0, 1)
        sample_rate: Rate used for band edges when audio is a tensor

    Returns:
        TimeFrequencyGrid: Segments of shape (..., B, n_windows, W)
    """
    if isinstance(audio, AudioClip):
        sample_rate = audio.sample_rate
    x = as_tensor(audio)
    if window_size < 2:
        raise ValidationError(f"Window size must be >= 2, got {window_size}")
    if not 0.0 <= overlap < 1.0:
        raise ValidationError(f"Overlap ratio must be in [0, 1), got {overlap}")

    length = x.shape[-1]
    hop = max(1, round_half_up(window_size * (1.0 - overlap)))
    num_windows = 1 if window_size > length else math.ceil(length / hop)
    padded_length = (num_windows - 1) * hop + window_size

    bands = split_bands(x, sample_rate, band_count)
    bands = F.pad(bands, (0, padded_length - length))
    segments = bands.unfold(-1, window_size, hop)
    return TimeFrequencyGrid(segments, band_count, window_size, overlap, hop)
