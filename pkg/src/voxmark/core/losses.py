#!/usr/bin/env python3
"""
VoxMark Perceptual Losses Module

Quality objectives and metrics for the watermark: K-weighted block
loudness, the time-frequency loudness loss, the l1 watermark penalty,
the multi-scale mel loss, SI-SNR and the hinge adversarial losses.

All losses accept float32 or float64 tensors and are differentiable.

Author: VoxMark Team
Version: 1.0
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchaudio

from .audio import AudioClip, DEFAULT_SAMPLE_RATE, as_tensor, split_time_frequency
from .errors import ConfigurationError, ValidationError

logger = logging.getLogger(__name__)

LOUDNESS_OFFSET = -0.691
ENERGY_FLOOR = 1e-8
SI_SNR_EPS = 1e-8
MEL_SCALES = (64, 128, 256, 512, 1024, 2048)
MEL_LOG_FLOOR = 1e-5

# Analog K-weighting prototypes, valid at any sample rate
SHELF_F0 = 1681.9744509555319
SHELF_GAIN_DB = 3.99984385397
SHELF_Q = 0.7071752369554193
SHELF_VB_EXPONENT = 0.499666774155
HIGHPASS_F0 = 38.13547087613982
HIGHPASS_Q = 0.5003270373253953

AudioLike = Union[AudioClip, torch.Tensor, np.ndarray]


def k_weighting_coefficients(sample_rate: int) -> Tuple[Tuple[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]:
    """
    Bilinear-transform K-weighting biquads for ``sample_rate``.

    Returns:
        ((shelf_b, shelf_a), (highpass_b, highpass_a))
    """
    k = np.tan(np.pi * SHELF_F0 / sample_rate)
    vh = np.power(10.0, SHELF_GAIN_DB / 20.0)
    vb = np.power(vh, SHELF_VB_EXPONENT)
    a0 = 1.0 + k / SHELF_Q + k * k
    shelf_b = np.array([(vh + vb * k / SHELF_Q + k * k) / a0,
                        2.0 * (k * k - vh) / a0,
                        (vh - vb * k / SHELF_Q + k * k) / a0])
    shelf_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / SHELF_Q + k * k) / a0])

    k = np.tan(np.pi * HIGHPASS_F0 / sample_rate)
    a0 = 1.0 + k / HIGHPASS_Q + k * k
    highpass_b = np.array([1.0, -2.0, 1.0])
    highpass_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / HIGHPASS_Q + k * k) / a0])
    return (shelf_b, shelf_a), (highpass_b, highpass_a)


@dataclass(frozen=True)
class LoudnessConfig:
    """K-weighting filters and block parameters for one sample rate."""

    sample_rate: int
    shelf_b: Tuple[float, ...]
    shelf_a: Tuple[float, ...]
    highpass_b: Tuple[float, ...]
    highpass_a: Tuple[float, ...]
    block_size: int = 2048
    energy_floor: float = ENERGY_FLOOR

    def __post_init__(self):
        if self.energy_floor <= 0:
            raise ConfigurationError(f"energy_floor must be positive, got {self.energy_floor}")
        if self.block_size < 1:
            raise ConfigurationError(f"block_size must be >= 1, got {self.block_size}")
        for name, denominator in (("shelf", self.shelf_a), ("highpass", self.highpass_a)):
            poles = np.roots(denominator)
            if np.any(np.abs(poles) >= 1.0):
                raise ConfigurationError(f"Unstable {name} filter at {self.sample_rate} Hz: poles {poles}")

    @classmethod
    def for_rate(cls, sample_rate: int = DEFAULT_SAMPLE_RATE, block_size: int = 2048,
                 energy_floor: float = ENERGY_FLOOR) -> "LoudnessConfig":
        (sb, sa), (hb, ha) = k_weighting_coefficients(sample_rate)
        return cls(sample_rate, tuple(sb), tuple(sa), tuple(hb), tuple(ha), block_size, energy_floor)


def _as_float_result(value: torch.Tensor, audio) -> Union[float, torch.Tensor]:
    if not isinstance(audio, torch.Tensor) and value.dim() == 0:
        return float(value)
    return value


def k_weight(x: torch.Tensor, cfg: LoudnessConfig) -> torch.Tensor:
    """Apply the shelf and highpass K-weighting stages along the last dimension."""
    for b, a in ((cfg.shelf_b, cfg.shelf_a), (cfg.highpass_b, cfg.highpass_a)):
        x = torchaudio.functional.lfilter(
            x,
            torch.tensor(a, dtype=x.dtype, device=x.device),
            torch.tensor(b, dtype=x.dtype, device=x.device),
            clamp=False,
        )
    return x


def loudness(segment: AudioLike, cfg: Optional[LoudnessConfig] = None) -> Union[float, torch.Tensor]:
    """
    K-weighted loudness of a segment in LU.

    -0.691 + 10 * log10(mean(k_weighted^2) + energy_floor), computed over
    the last dimension.

    Args:
        segment: Samples of shape (..., N)
        cfg: Loudness configuration (16 kHz defaults when omitted)

    Returns:
        Loudness per leading index (a float for non-tensor 1-D input)

    Raises:
        ValidationError: If the segment is empty or contains non-finite values
    """
    if cfg is None:
        rate = segment.sample_rate if isinstance(segment, AudioClip) else DEFAULT_SAMPLE_RATE
        cfg = LoudnessConfig.for_rate(rate)
    x = as_tensor(segment, torch.float64) if not isinstance(segment, torch.Tensor) else segment
    if x.shape[-1] < 1:
        raise ValidationError("Loudness needs at least one sample")
    if not torch.isfinite(x).all():
        raise ValidationError("Loudness input contains non-finite values")
    energy = k_weight(x, cfg).pow(2).mean(dim=-1)
    value = LOUDNESS_OFFSET + 10.0 * torch.log10(energy + cfg.energy_floor)
    return _as_float_result(value, segment)


def block_loudness(audio: AudioLike, cfg: Optional[LoudnessConfig] = None) -> torch.Tensor:
    """Loudness of consecutive non-overlapping blocks of ``cfg.block_size`` samples."""
    cfg = cfg or LoudnessConfig.for_rate(getattr(audio, "sample_rate", DEFAULT_SAMPLE_RATE))
    x = as_tensor(audio, torch.float64)
    length = x.shape[-1]
    blocks = max(1, length // cfg.block_size)
    usable = x[..., : blocks * cfg.block_size] if length >= cfg.block_size else x
    return loudness(usable.reshape(*x.shape[:-1], blocks, -1), cfg)


def tf_loudness_diff(s: AudioLike, delta: AudioLike,
                     band_count: int = 8, window_size: int = 2048, overlap: float = 0.5,
                     cfg: Optional[LoudnessConfig] = None,
                     sample_rate: int = DEFAULT_SAMPLE_RATE) -> torch.Tensor:
    """
    Per-cell loudness difference between the watermark and its carrier.

    Both signals are split on the same band/window grid and
    l[b, w] = loudness(delta_b^w) - loudness(s_b^w).

    Returns:
        torch.Tensor: Shape (..., band_count, n_windows)

    Raises:
        ValidationError: If the two signals differ in length
    """
    if isinstance(s, AudioClip):
        sample_rate = s.sample_rate
    s_t = s if isinstance(s, torch.Tensor) else as_tensor(s, torch.float64)
    d_t = delta if isinstance(delta, torch.Tensor) else as_tensor(delta, torch.float64)
    if s_t.shape != d_t.shape:
        raise ValidationError(f"Signal and watermark lengths differ: {tuple(s_t.shape)} vs {tuple(d_t.shape)}")
    cfg = cfg or LoudnessConfig.for_rate(sample_rate)
    grid_s = split_time_frequency(s_t, band_count, window_size, overlap, sample_rate)
    grid_d = split_time_frequency(d_t.to(s_t.dtype), band_count, window_size, overlap, sample_rate)
    return loudness(grid_d.segments, cfg) - loudness(grid_s.segments, cfg)


def tf_loudness_loss(diff: torch.Tensor) -> torch.Tensor:
    """
    Softmax-weighted average of a loudness-difference matrix.

    The softmax runs jointly over all (band, window) cells; leading batch
    dimensions are averaged.
    """
    diff = torch.as_tensor(diff)
    if diff.dim() < 2:
        diff = diff.reshape(1, -1)
    flat = diff.flatten(start_dim=-2)
    weights = torch.softmax(flat, dim=-1)
    return (weights * flat).sum(dim=-1).mean()


def l1_loss(delta: AudioLike) -> Union[float, torch.Tensor]:
    """Mean absolute watermark amplitude."""
    value = as_tensor(delta).abs().mean()
    return _as_float_result(value, delta)


class MultiScaleMelLoss(nn.Module):
    """
    Sum over STFT scales of L1 + L2 distances between log-mel spectrograms.

    Scales default to windows 64..2048 with hop = window / 4 and 64 mel
    bins; constant padding makes any input length valid.
    """

    def __init__(self, sample_rate: int = DEFAULT_SAMPLE_RATE, scales: Sequence[int] = MEL_SCALES,
                 n_mels: int = 64, log_floor: float = MEL_LOG_FLOOR):
        super().__init__()
        self.scales = tuple(scales)
        self.log_floor = log_floor
        self.transforms = nn.ModuleList([
            torchaudio.transforms.MelSpectrogram(
                sample_rate=sample_rate, n_fft=w, win_length=w, hop_length=max(1, w // 4),
                n_mels=n_mels, power=1.0, center=True, pad_mode="constant", normalized=False)
            for w in self.scales
        ])

    def _log_mel(self, transform: nn.Module, x: torch.Tensor) -> torch.Tensor:
        return torch.log(transform(x).clamp_min(self.log_floor))

    def forward(self, s: torch.Tensor, s_w: torch.Tensor) -> torch.Tensor:
        if s.shape != s_w.shape:
            raise ValidationError(f"Mel loss inputs differ in shape: {tuple(s.shape)} vs {tuple(s_w.shape)}")
        first = next(self.transforms[0].buffers(), None)
        if first is not None and (first.dtype != s.dtype or first.device != s.device):
            self.to(dtype=s.dtype, device=s.device)
        total = s.new_zeros(())
        for transform in self.transforms:
            diff = self._log_mel(transform, s) - self._log_mel(transform, s_w)
            total = total + diff.abs().mean() + diff.pow(2).mean()
        return total


_DEFAULT_MEL_LOSS: Dict[int, MultiScaleMelLoss] = {}


def msspec_loss(s: AudioLike, s_w: AudioLike) -> Union[float, torch.Tensor]:
    """Multi-scale mel loss with the default scales."""
    rate = s.sample_rate if isinstance(s, AudioClip) else DEFAULT_SAMPLE_RATE
    if rate not in _DEFAULT_MEL_LOSS:
        _DEFAULT_MEL_LOSS[rate] = MultiScaleMelLoss(rate)
    a, b = as_tensor(s), as_tensor(s_w)
    if a.shape != b.shape:
        raise ValidationError(f"Mel loss inputs differ in length: {tuple(a.shape)} vs {tuple(b.shape)}")
    value = _DEFAULT_MEL_LOSS[rate](a, b.to(a.dtype))
    return _as_float_result(value, s)


def si_snr(s: AudioLike, s_w: AudioLike, eps: float = SI_SNR_EPS) -> Union[float, torch.Tensor]:
    """
    Scale-invariant SNR of ``s_w`` against reference ``s`` in dB.

    10 * log10(|alpha s|^2 / (|alpha s - s_w|^2 + eps)), alpha = <s, s_w> / |s|^2,
    evaluated over the last dimension.

    Raises:
        ValidationError: If lengths differ or the reference is all-zero
    """
    ref = s if isinstance(s, torch.Tensor) else as_tensor(s, torch.float64)
    est = s_w if isinstance(s_w, torch.Tensor) else as_tensor(s_w, torch.float64)
    est = est.to(ref.dtype)
    if ref.shape != est.shape:
        raise ValidationError(f"SI-SNR inputs differ in shape: {tuple(ref.shape)} vs {tuple(est.shape)}")
    energy = ref.pow(2).sum(dim=-1, keepdim=True)
    if torch.any(energy == 0):
        raise ValidationError("SI-SNR reference signal is all-zero")
    alpha = (ref * est).sum(dim=-1, keepdim=True) / energy
    target = alpha * ref
    value = 10.0 * torch.log10(target.pow(2).sum(dim=-1) / ((target - est).pow(2).sum(dim=-1) + eps))
    return _as_float_result(value, s)


def discriminator_hinge_loss(real_scores: Sequence[torch.Tensor], fake_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    """Hinge loss for the discriminator, averaged over scales."""
    losses = [F.relu(1.0 - real).mean() + F.relu(1.0 + fake).mean()
              for real, fake in zip(real_scores, fake_scores)]
    return torch.stack(losses).mean()


def generator_hinge_loss(fake_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    """mean(max(0, 1 - score_fake)), averaged over scales."""
    return torch.stack([F.relu(1.0 - fake).mean() for fake in fake_scores]).mean()


def feature_matching_loss(real_features: Sequence[Sequence[torch.Tensor]],
                          fake_features: Sequence[Sequence[torch.Tensor]]) -> torch.Tensor:
    """Relative L1 distance between discriminator feature maps."""
    losses = []
    for real_maps, fake_maps in zip(real_features, fake_features):
        for real, fake in zip(real_maps, fake_maps):
            real = real.detach()
            losses.append((real - fake).abs().mean() / (real.abs().mean() + 1e-8))
    return torch.stack(losses).mean()


def adversarial_loss(fake_scores: Sequence[torch.Tensor],
                     real_features: Sequence[Sequence[torch.Tensor]],
                     fake_features: Sequence[Sequence[torch.Tensor]],
                     feature_weight: float = 1.0) -> torch.Tensor:
    """Generator-side adversarial term: hinge plus weighted feature matching."""
    return generator_hinge_loss(fake_scores) + feature_weight * feature_matching_loss(real_features, fake_features)


BALANCED_LOSSES = ("l1", "msspec", "adv", "loud")


@dataclass(frozen=True)
class LossWeights:
    """Loss weights; the first four are balanced at the generator output."""

    l1: float = 0.1
    msspec: float = 2.0
    adv: float = 4.0
    loud: float = 10.0
    loc: float = 10.0
    dec: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigurationError(f"Loss weight {name} must be >= 0, got {value}")

    @classmethod
    def from_dict(cls, values: Mapping[str, float]) -> "LossWeights":
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Unknown loss weights {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    def balanced(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in BALANCED_LOSSES}
