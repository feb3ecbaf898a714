#!/usr/bin/env python3
"""
VoxMark Models Module

Trainable networks: the watermark generator (convolutional encoder/decoder
with an optional message embedding), the sample-level detector and the
multi-scale STFT discriminator, plus the single-file checkpoint container.

Author: VoxMark Team
Version: 1.0
"""

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import AudioClip, as_tensor
from .errors import ConfigurationError, ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "voxmark-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Message:
    """b-bit payload; bit 0 is the most significant hex digit bit."""

    bits: Tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in np.asarray(self.bits).reshape(-1).tolist())
        if any(b not in (0, 1) for b in bits):
            raise ValidationError(f"Message bits must be 0 or 1, got {self.bits}")
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return len(self.bits)

    @classmethod
    def from_hex(cls, text: str, num_bits: int) -> "Message":
        """Parse a zero-padded hex string holding exactly ``num_bits`` bits."""
        digits = max(1, math.ceil(num_bits / 4))
        text = text.strip().lower().removeprefix("0x")
        try:
            value = int(text, 16)
        except ValueError as e:
            raise ValidationError(f"Invalid hex message {text!r}") from e
        if len(text) != digits or value >= 2 ** num_bits:
            raise ValidationError(f"Hex message {text!r} does not encode exactly {num_bits} bits")
        return cls(tuple((value >> (num_bits - 1 - i)) & 1 for i in range(num_bits)))

    def to_hex(self) -> str:
        value = 0
        for bit in self.bits:
            value = (value << 1) | bit
        return format(value, f"0{max(1, math.ceil(len(self.bits) / 4))}x")

    @classmethod
    def random(cls, num_bits: int, generator: Optional[torch.Generator] = None) -> "Message":
        return cls(tuple(torch.randint(0, 2, (num_bits,), generator=generator).tolist()))

    def to_tensor(self) -> torch.Tensor:
        return torch.tensor(self.bits, dtype=torch.long)


@dataclass(frozen=True)
class GeneratorConfig:
    """Generator topology; defaults are the full-size network."""

    base_channels: int = 32
    strides: Tuple[int, ...] = (2, 4, 5, 8)
    latent_dim: int = 128
    hidden_dim: int = 32
    message_bits: int = 16
    kernel_size: int = 7
    last_kernel_size: int = 7
    residual_kernel_size: int = 3
    lstm_layers: int = 2
    activation: str = "ELU"
    output_gain: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        self.validate()

    def validate(self):
        if self.message_bits < 0:
            raise ConfigurationError(f"message_bits must be >= 0, got {self.message_bits}")
        if self.message_bits > 0 and self.hidden_dim <= self.message_bits:
            raise ConfigurationError(
                f"hidden_dim ({self.hidden_dim}) must exceed message_bits ({self.message_bits})")
        for name in ("base_channels", "latent_dim", "hidden_dim", "kernel_size", "last_kernel_size",
                     "residual_kernel_size", "lstm_layers"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.strides or any(s <= 0 for s in self.strides):
            raise ConfigurationError(f"Invalid strides {self.strides}")
        if self.activation != "ELU":
            raise ConfigurationError(f"Unsupported activation {self.activation!r}")

    @property
    def hop_length(self) -> int:
        """Total downsampling factor (product of strides)."""
        return int(np.prod(self.strides))


@dataclass(frozen=True)
class DetectorConfig(GeneratorConfig):
    """Detector topology; shares the generator's encoder layout."""


@dataclass(frozen=True)
class ModelConfig:
    """
    The ``model`` config section.

    Channel widths left unset resolve to the desk-scale network (16/64)
    unless ``full_scale`` selects the full-size one (32/128).
    """

    full_scale: bool = False
    base_channels: Optional[int] = None
    latent_dim: Optional[int] = None
    hidden_dim: int = 32
    message_bits: int = 16
    strides: Tuple[int, ...] = (2, 4, 5, 8)
    lstm_layers: int = 2
    output_gain: float = 0.01
    disc_scales: Tuple[int, ...] = (256, 512, 1024)
    disc_channels: int = 16
    sample_rate: int = 16000

    def __post_init__(self):
        if self.base_channels is None:
            object.__setattr__(self, "base_channels", 32 if self.full_scale else 16)
        if self.latent_dim is None:
            object.__setattr__(self, "latent_dim", 128 if self.full_scale else 64)
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "disc_scales", tuple(int(s) for s in self.disc_scales))
        self.generator_config()

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"Unknown model config keys {sorted(unknown)}")
        return cls(**dict(values))

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["strides"] = list(self.strides)
        values["disc_scales"] = list(self.disc_scales)
        return values

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def _network_kwargs(self) -> Dict[str, Any]:
        return dict(base_channels=self.base_channels, strides=self.strides, latent_dim=self.latent_dim,
                    hidden_dim=self.hidden_dim, message_bits=self.message_bits, lstm_layers=self.lstm_layers)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(output_gain=self.output_gain, **self._network_kwargs())

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(**self._network_kwargs())


def get_extra_padding_for_conv1d(x: torch.Tensor, kernel_size: int, stride: int, padding_total: int = 0) -> int:
    """Right padding that makes the last convolution window complete."""
    length = x.shape[-1]
    n_frames = (length - kernel_size + padding_total) / stride + 1
    ideal_length = (math.ceil(n_frames) - 1) * stride + (kernel_size - padding_total)
    return ideal_length - length


def pad1d(x: torch.Tensor, paddings: Tuple[int, int], mode: str = "reflect") -> torch.Tensor:
    """F.pad that also reflect-pads inputs shorter than the padding."""
    left, right = paddings
    if mode == "reflect":
        length = x.shape[-1]
        max_pad = max(left, right)
        extra = 0
        if length <= max_pad:
            extra = max_pad - length + 1
            x = F.pad(x, (0, extra))
        padded = F.pad(x, paddings, mode)
        return padded[..., : padded.shape[-1] - extra]
    return F.pad(x, paddings, mode)


class StreamableConv1d(nn.Module):
    """Conv1d with symmetric reflect padding; output length ceil(T / stride)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 pad_mode: str = "reflect"):
        super().__init__()
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size, stride=stride)
        self.pad_mode = pad_mode

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        kernel_size = self.conv.kernel_size[0]
        stride = self.conv.stride[0]
        padding_total = kernel_size - stride
        extra = get_extra_padding_for_conv1d(x, kernel_size, stride, padding_total)
        padding_right = padding_total // 2
        padding_left = padding_total - padding_right
        return self.conv(pad1d(x, (padding_left, padding_right + extra), self.pad_mode))


class StreamableConvTranspose1d(nn.Module):
    """ConvTranspose1d trimmed so that T frames become T * stride samples."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1):
        super().__init__()
        self.convtr = nn.ConvTranspose1d(in_channels, out_channels, kernel_size, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.convtr(x)
        padding_total = self.convtr.kernel_size[0] - self.convtr.stride[0]
        padding_right = padding_total // 2
        padding_left = padding_total - padding_right
        return y[..., padding_left: y.shape[-1] - padding_right]


class ResidualUnit(nn.Module):
    """Two kernel-3 convolutions with an identity skip."""

    def __init__(self, dim: int, kernel_size: int = 3, compress: int = 2):
        super().__init__()
        hidden = max(1, dim // compress)
        self.block = nn.Sequential(
            nn.ELU(),
            StreamableConv1d(dim, hidden, kernel_size),
            nn.ELU(),
            StreamableConv1d(hidden, dim, kernel_size),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class SLSTM(nn.Module):
    """Unidirectional LSTM over (B, C, T) activations with a skip connection."""

    def __init__(self, dimension: int, num_layers: int = 2):
        super().__init__()
        self.lstm = nn.LSTM(dimension, dimension, num_layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(2, 0, 1)
        y, _ = self.lstm(x)
        return (y + x).permute(1, 2, 0)


class SEANetEncoder(nn.Module):
    """Strided convolutional encoder: (B, 1, T) -> (B, latent, ceil(T / hop))."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        channels = cfg.base_channels
        layers: List[nn.Module] = [StreamableConv1d(1, channels, cfg.kernel_size)]
        for stride in cfg.strides:
            layers += [
                ResidualUnit(channels, cfg.residual_kernel_size),
                nn.ELU(),
                StreamableConv1d(channels, channels * 2, kernel_size=stride * 2, stride=stride),
            ]
            channels *= 2
        layers += [SLSTM(channels, cfg.lstm_layers), nn.ELU(),
                   StreamableConv1d(channels, cfg.latent_dim, cfg.last_kernel_size)]
        self.model = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


class SEANetDecoder(nn.Module):
    """Mirror of the encoder with transposed convolutions in reverse stride order."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        channels = cfg.base_channels * 2 ** len(cfg.strides)
        layers: List[nn.Module] = [StreamableConv1d(cfg.latent_dim, channels, cfg.kernel_size),
                                   SLSTM(channels, cfg.lstm_layers)]
        for stride in reversed(cfg.strides):
            layers += [
                nn.ELU(),
                StreamableConvTranspose1d(channels, channels // 2, kernel_size=stride * 2, stride=stride),
                ResidualUnit(channels // 2, cfg.residual_kernel_size),
            ]
            channels //= 2
        layers += [nn.ELU(), StreamableConv1d(channels, 1, cfg.last_kernel_size)]
        self.model = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.model(z)


def message_embed(table: torch.Tensor, message: Union[Message, Sequence[int], torch.Tensor]) -> torch.Tensor:
    """
    Sum of message rows: e = sum_i table[2i + m_i].

    Args:
        table: Embedding table of shape (2b, h)
        message: b bits

    Returns:
        torch.Tensor: Vector of length h

    Raises:
        ValidationError: If the message length does not match the table
    """
    bits = message.to_tensor() if isinstance(message, Message) else torch.as_tensor(message, dtype=torch.long)
    bits = bits.reshape(-1)
    if table.dim() != 2 or table.shape[0] != 2 * bits.numel():
        raise ValidationError(f"Message of {bits.numel()} bits does not match table shape {tuple(table.shape)}")
    indices = 2 * torch.arange(bits.numel(), device=table.device) + bits.to(table.device)
    return table[indices].sum(dim=0)


class MessageEmbedding(nn.Module):
    """Learnable (2b, h) table, one row per (bit position, bit value)."""

    def __init__(self, num_bits: int, hidden_dim: int):
        super().__init__()
        self.num_bits = num_bits
        self.table = nn.Embedding(2 * num_bits, hidden_dim)

    def forward(self, bits: torch.Tensor) -> torch.Tensor:
        if bits.shape[-1] != self.num_bits:
            raise ValidationError(f"Expected {self.num_bits}-bit messages, got {bits.shape[-1]}")
        offsets = 2 * torch.arange(self.num_bits, device=bits.device)
        return self.table(offsets + bits.long()).sum(dim=-2)


def _as_batch(x: torch.Tensor, hop: int) -> torch.Tensor:
    if x.dim() == 1:
        x = x[None, None]
    elif x.dim() == 2:
        x = x[:, None]
    if x.dim() != 3 or x.shape[1] != 1:
        raise ValidationError(f"Expected mono audio shaped (T,), (B, T) or (B, 1, T), got {tuple(x.shape)}")
    if x.shape[-1] < hop:
        raise ValidationError(f"Input of {x.shape[-1]} samples is shorter than the hop length {hop}")
    return x


class WatermarkGenerator(nn.Module):
    """Encoder/decoder producing an additive watermark bounded by tanh times a learnable gain."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SEANetEncoder(cfg)
        self.decoder = SEANetDecoder(cfg)
        self.message_embedding = None
        self.message_projection = None
        if cfg.message_bits > 0:
            self.message_embedding = MessageEmbedding(cfg.message_bits, cfg.hidden_dim)
            self.message_projection = nn.Conv1d(cfg.hidden_dim, cfg.latent_dim, 1)
        self.gain = nn.Parameter(torch.tensor(float(cfg.output_gain)))

    def forward(self, x: torch.Tensor, message: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, 1, T) audio and optional (B, b) bits -> (B, 1, T) watermark. A single (b,) or (1, b) message is shared by the whole batch."""
        x = _as_batch(x, self.cfg.hop_length)
        length = x.shape[-1]
        z = self.encoder(x)
        if message is not None and self.message_embedding is not None:
            message = message.to(x.device)
            if message.dim() == 1 or message.shape[0] == 1:
                message = message.reshape(1, -1).expand(x.shape[0], -1)
            message = message.reshape(x.shape[0], -1)
            e = self.message_embedding(message)
            z = z + self.message_projection(e.unsqueeze(-1))
        y = self.decoder(z)[..., :length]
        return torch.tanh(y) * self.gain


@dataclass
class DetectorOutput:
    """
    Per-sample detector outputs.

    ``presence`` has shape (..., T) with values in [0, 1];
    ``message_logits`` has shape (..., T, b).
    """

    presence: torch.Tensor
    message_logits: torch.Tensor

    @property
    def num_samples(self) -> int:
        return int(self.presence.shape[-1])

    @property
    def num_bits(self) -> int:
        return int(self.message_logits.shape[-1])

    def item(self, index: int) -> "DetectorOutput":
        """Single clip from a batched output."""
        return DetectorOutput(self.presence[index], self.message_logits[index])

    def detach(self) -> "DetectorOutput":
        return DetectorOutput(self.presence.detach(), self.message_logits.detach())


class WatermarkDetector(nn.Module):
    """Encoder plus full-resolution transposed convolution and per-sample heads."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SEANetEncoder(cfg)
        hop = cfg.hop_length
        self.upsample = nn.ConvTranspose1d(cfg.latent_dim, cfg.hidden_dim, kernel_size=hop, stride=hop)
        self.presence_head = nn.Linear(cfg.hidden_dim, 2)
        self.message_head = nn.Linear(cfg.hidden_dim, cfg.message_bits) if cfg.message_bits > 0 else None

    def forward(self, x: torch.Tensor) -> DetectorOutput:
        x = _as_batch(x, self.cfg.hop_length)
        length = x.shape[-1]
        features = self.upsample(self.encoder(x))[..., :length].transpose(1, 2)
        presence = torch.softmax(self.presence_head(features), dim=-1)[..., 1]
        if self.message_head is not None:
            logits = self.message_head(features)
        else:
            logits = features.new_zeros(features.shape[0], length, 0)
        return DetectorOutput(presence, logits)


@dataclass
class DiscriminatorOutput:
    scores: List[torch.Tensor]
    features: List[List[torch.Tensor]]


class STFTDiscriminator(nn.Module):
    """2-D convolutional critic on the real/imaginary STFT of one scale."""

    def __init__(self, n_fft: int, channels: int = 16, num_layers: int = 3):
        super().__init__()
        self.n_fft = n_fft
        self.hop_length = n_fft // 4
        self.register_buffer("window", torch.hann_window(n_fft), persistent=False)
        convs = [nn.Conv2d(2, channels, (3, 9), padding=(1, 4))]
        for _ in range(num_layers):
            convs.append(nn.Conv2d(channels, channels, (3, 9), stride=(1, 2), padding=(1, 4)))
        convs.append(nn.Conv2d(channels, channels, (3, 3), padding=(1, 1)))
        self.convs = nn.ModuleList(convs)
        self.post = nn.Conv2d(channels, 1, (3, 3), padding=(1, 1))

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        flat = x.reshape(-1, x.shape[-1])
        spec = torch.stft(flat, self.n_fft, hop_length=self.hop_length, win_length=self.n_fft,
                          window=self.window.to(flat.dtype), center=True, pad_mode="constant",
                          return_complex=True)
        # (B, 2, frames, freq)
        z = torch.stack([spec.real, spec.imag], dim=1).transpose(2, 3)
        features = []
        for conv in self.convs:
            z = F.leaky_relu(conv(z), 0.2)
            features.append(z)
        return self.post(z), features


class MultiScaleSTFTDiscriminator(nn.Module):
    """One STFTDiscriminator per window size."""

    def __init__(self, scales: Sequence[int] = (256, 512, 1024), channels: int = 16):
        super().__init__()
        self.discriminators = nn.ModuleList([STFTDiscriminator(n, channels) for n in scales])

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        scores, features = [], []
        for disc in self.discriminators:
            score, feats = disc(x)
            scores.append(score)
            features.append(feats)
        return DiscriminatorOutput(scores, features)


@dataclass
class WatermarkModels:
    """Generator, detector and discriminator built from one ModelConfig."""

    config: ModelConfig
    generator: WatermarkGenerator
    detector: WatermarkDetector
    discriminator: MultiScaleSTFTDiscriminator

    def modules(self) -> Dict[str, nn.Module]:
        return {"generator": self.generator, "detector": self.detector, "discriminator": self.discriminator}

    def to(self, device: Union[str, torch.device]) -> "WatermarkModels":
        for module in self.modules().values():
            module.to(device)
        return self

    def eval(self) -> "WatermarkModels":
        for module in self.modules().values():
            module.eval()
        return self


def create_models(config: Optional[ModelConfig] = None, seed: int = 0) -> WatermarkModels:
    """Construct freshly initialized networks; identical seeds give identical weights."""
    config = config or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return WatermarkModels(
            config=config,
            generator=WatermarkGenerator(config.generator_config()),
            detector=WatermarkDetector(config.detector_config()),
            discriminator=MultiScaleSTFTDiscriminator(config.disc_scales, config.disc_channels),
        )


@dataclass
class ParameterStore:
    """
    Named parameter arrays plus training metadata.

    Array names are prefixed with the owning network ("generator.",
    "detector.", "discriminator."). Built modules are cached on first use.
    """

    model_config: ModelConfig
    arrays: Dict[str, torch.Tensor]
    step: int = 0
    seed: int = 0
    optimizer_states: Dict[str, Any] = field(default_factory=dict)
    _models: Optional[WatermarkModels] = field(default=None, repr=False, compare=False)

    @property
    def config_hash(self) -> str:
        return self.model_config.config_hash

    @classmethod
    def from_models(cls, models: WatermarkModels, step: int = 0, seed: int = 0,
                    optimizer_states: Optional[Dict[str, Any]] = None) -> "ParameterStore":
        arrays = {}
        for prefix, module in models.modules().items():
            for name, tensor in module.state_dict().items():
                arrays[f"{prefix}.{name}"] = tensor.detach().cpu().clone()
        return cls(models.config, arrays, step, seed, optimizer_states or {})

    def state_dict_for(self, prefix: str) -> Dict[str, torch.Tensor]:
        head = prefix + "."
        return {name[len(head):]: tensor for name, tensor in self.arrays.items() if name.startswith(head)}

    def build(self, device: Union[str, torch.device] = "cpu") -> WatermarkModels:
        """Instantiate the networks and load the stored arrays (cached)."""
        if self._models is None:
            models = create_models(self.model_config, self.seed)
            for prefix, module in models.modules().items():
                try:
                    module.load_state_dict(self.state_dict_for(prefix), strict=True)
                except RuntimeError as e:
                    raise ConfigurationError(f"Checkpoint arrays do not match the {prefix} config: {e}") from e
            self._models = models.eval()
        return self._models.to(device)

    def save(self, path: Union[str, Path]):
        """Atomically write the versioned checkpoint container."""
        path = Path(path)
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.model_config.to_dict(),
            "config_hash": self.config_hash,
            "step": int(self.step),
            "seed": int(self.seed),
            "arrays": self.arrays,
            "optimizer": self.optimizer_states,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(suffix=".pt.tmp", dir=str(path.parent))
        os.close(fd)
        try:
            torch.save(payload, tmp_name)
            os.replace(tmp_name, path)
        finally:
            if os.path.exists(tmp_name):
                os.remove(tmp_name)
        logger.info("Checkpoint written: %s (step %d, config %s)", path, self.step, self.config_hash[:12])

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ParameterStore":
        """
        Read a checkpoint container.

        Raises:
            ConfigurationError: If the file is not a compatible checkpoint
        """
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(f"{path} is not a VoxMark checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"Unsupported checkpoint version {payload.get('version')} in {path}")
        config = ModelConfig.from_dict(payload["config"])
        if config.config_hash != payload.get("config_hash"):
            raise ConfigurationError(f"Config hash mismatch in {path}")
        return cls(config, dict(payload["arrays"]), int(payload["step"]), int(payload["seed"]),
                   dict(payload.get("optimizer") or {}))


ModelSource = Union[ParameterStore, WatermarkModels, nn.Module]


def _resolve(source: ModelSource, role: str) -> nn.Module:
    if isinstance(source, ParameterStore):
        return getattr(source.build(), role)
    if isinstance(source, WatermarkModels):
        return getattr(source, role)
    return source


def _device_of(module: nn.Module) -> torch.device:
    return next(module.parameters()).device


def generator_forward(params: ModelSource, s: Union[AudioClip, torch.Tensor],
                      message: Optional[Union[Message, torch.Tensor]] = None) -> Union[AudioClip, torch.Tensor]:
    """
    Watermark for ``s``, shaped like ``s`` (an AudioClip for clip input).

    Raises:
        ValidationError: If the input is shorter than the hop length or misshaped
    """
    generator = _resolve(params, "generator")
    x = as_tensor(s).to(_device_of(generator))
    bits = message.to_tensor()[None] if isinstance(message, Message) else message
    delta = generator(x, bits)
    if isinstance(s, AudioClip):
        return AudioClip.from_tensor(delta, s.sample_rate)
    return delta.reshape(x.shape)


def detector_forward(params: ModelSource, x: Union[AudioClip, torch.Tensor]) -> DetectorOutput:
    """Per-sample presence and message logits; unbatched for 1-D input."""
    detector = _resolve(params, "detector")
    audio = as_tensor(x).to(_device_of(detector))
    out = detector(audio)
    return out.item(0) if audio.dim() == 1 else out


def discriminator_forward(params: ModelSource, x: Union[AudioClip, torch.Tensor]) -> List[torch.Tensor]:
    """One score map per STFT scale."""
    discriminator = _resolve(params, "discriminator")
    audio = as_tensor(x).to(_device_of(discriminator))
    if audio.dim() == 1:
        audio = audio[None, None]
    return discriminator(audio).scores


def embed(params: ModelSource, clip: AudioClip, message: Optional[Message] = None) -> AudioClip:
    """Watermarked copy of ``clip``: s + delta clipped to [-1, 1]."""
    with torch.no_grad():
        delta = generator_forward(params, clip.to_tensor(), message)
    watermarked = clip.samples.astype(np.float64) + delta.detach().cpu().double().numpy()
    return AudioClip(np.clip(watermarked, -1.0, 1.0), clip.sample_rate)
