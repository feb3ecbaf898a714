#!/usr/bin/env python3
"""
VoxMark Augmentation Module

Audio edit battery used to make the detector robust: filters, speed and
resampling changes, gain changes, echo, noise, smoothing and a lossy codec
stand-in. Every edit has a train-mode and an eval-mode parameter set.
Non-differentiable edits are trained through a straight-through wrapper,
and edits are drawn from an inverse-accuracy sampling policy.

Author: VoxMark Team
Version: 1.0
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import julius
import numpy as np
import torch
import torch.nn.functional as F
import torchaudio
from scipy import signal

from .audio import AudioClip, DEFAULT_SAMPLE_RATE, resample_tensor, round_half_up
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

EDIT_NAMES = (
    "bandpass", "highpass", "lowpass", "speed", "resample", "boost", "duck",
    "echo", "pink_noise", "white_noise", "smooth", "codec_proxy", "identity",
)

TRAIN_PARAMS: Dict[str, Dict[str, float]] = {
    "bandpass": {"low": 300.0, "high": 8000.0},
    "highpass": {"cutoff": 500.0},
    "lowpass": {"cutoff": 5000.0},
    "speed": {"min_factor": 0.9, "max_factor": 1.1},
    "resample": {"intermediate_rate": 32000},
    "boost": {"factor": 1.2},
    "duck": {"factor": 0.8},
    "echo": {"min_delay": 0.1, "max_delay": 0.5, "min_volume": 0.1, "max_volume": 0.5},
    "pink_noise": {"std": 0.01},
    "white_noise": {"std": 0.001},
    "smooth": {"min_window": 2, "max_window": 10},
    "codec_proxy": {"intermediate_rate": 8000, "bits": 8},
    "identity": {},
}

EVAL_PARAMS: Dict[str, Dict[str, float]] = {
    "bandpass": {"low": 500.0, "high": 5000.0},
    "highpass": {"cutoff": 1500.0},
    "lowpass": {"cutoff": 500.0},
    "speed": {"factor": 1.25},
    "resample": {"intermediate_rate": 32000},
    "boost": {"factor": 10.0},
    "duck": {"factor": 0.1},
    "echo": {"delay": 0.5, "volume": 0.5},
    "pink_noise": {"std": 0.1},
    "white_noise": {"std": 0.05},
    "smooth": {"window": 40},
    "codec_proxy": {"intermediate_rate": 8000, "bits": 8},
    "identity": {},
}

FILTER_ORDER = 8
ACCURACY_FLOOR = 0.05
SPEED_RESOLUTION = 100


@dataclass(frozen=True)
class AugmentSpec:
    """
    One named edit with its parameters.

    Missing parameters are filled from the mode's default table; parameters
    the edit does not know are rejected.
    """

    name: str
    params: Mapping[str, Any] = field(default_factory=dict)
    mode: str = "eval"

    def __post_init__(self):
        if self.name not in EDIT_NAMES:
            raise ConfigurationError(f"Unknown edit {self.name!r}; expected one of {EDIT_NAMES}")
        if self.mode not in ("train", "eval"):
            raise ConfigurationError(f"Edit mode must be 'train' or 'eval', got {self.mode!r}")
        table = TRAIN_PARAMS if self.mode == "train" else EVAL_PARAMS
        defaults = table[self.name]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ConfigurationError(f"Unknown parameters {sorted(unknown)} for {self.mode} edit {self.name!r}")
        object.__setattr__(self, "params", {**defaults, **dict(self.params)})

    @classmethod
    def from_dict(cls, entry: Mapping[str, Any], default_mode: str = "train") -> "AugmentSpec":
        """Build a spec from a config entry {name, params, mode}."""
        if "name" not in entry:
            raise ConfigurationError(f"Augmentation entry without a name: {entry}")
        return cls(entry["name"], entry.get("params") or {}, entry.get("mode", default_mode))

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "params": dict(self.params), "mode": self.mode}

    @property
    def preserves_length(self) -> bool:
        return self.name != "speed"

    @property
    def differentiable(self) -> bool:
        return self.name != "codec_proxy"


def eval_battery(names: Optional[Iterable[str]] = None) -> List[AugmentSpec]:
    """Eval-strength edits, identity first."""
    names = list(names) if names is not None else ["identity"] + [n for n in EDIT_NAMES if n != "identity"]
    return [AugmentSpec(name, mode="eval") for name in names]


def _uniform(low: float, high: float, generator: Optional[torch.Generator]) -> float:
    return low + (high - low) * torch.rand((), generator=generator, dtype=torch.float64).item()


def resolve_params(spec: AugmentSpec, generator: Optional[torch.Generator] = None) -> Dict[str, Any]:
    """
    Turn a spec into concrete edit parameters.

    Train-mode ranges are sampled from the generator; eval specs pass
    through unchanged.
    """
    params = dict(spec.params)
    if spec.mode != "train":
        return params
    if spec.name == "speed":
        factor = _uniform(params.pop("min_factor"), params.pop("max_factor"), generator)
        params["factor"] = round(factor * SPEED_RESOLUTION) / SPEED_RESOLUTION
    elif spec.name == "echo":
        params = {
            "delay": _uniform(params["min_delay"], params["max_delay"], generator),
            "volume": _uniform(params["min_volume"], params["max_volume"], generator),
        }
    elif spec.name == "smooth":
        low, high = int(params["min_window"]), int(params["max_window"])
        params = {"window": int(torch.randint(low, high + 1, (), generator=generator).item())}
    return params


def _butter_sos(btype: str, cutoffs: Sequence[float], sample_rate: int) -> Optional[np.ndarray]:
    """Butterworth cascade of 8th total order; None when the edit is a no-op."""
    nyquist = sample_rate / 2.0
    if btype == "bandpass":
        low, high = cutoffs
        if high >= nyquist and low <= 0:
            return None
        if high >= nyquist:
            return signal.butter(FILTER_ORDER, low, btype="highpass", fs=sample_rate, output="sos")
        if low <= 0:
            return signal.butter(FILTER_ORDER, high, btype="lowpass", fs=sample_rate, output="sos")
        return signal.butter(FILTER_ORDER // 2, [low, high], btype="bandpass", fs=sample_rate, output="sos")
    cutoff = cutoffs[0]
    if btype == "lowpass" and cutoff >= nyquist:
        return None
    if btype == "highpass" and cutoff <= 0:
        return None
    if cutoff >= nyquist:
        raise ConfigurationError(f"Highpass cutoff {cutoff} Hz is above Nyquist ({nyquist} Hz)")
    return signal.butter(FILTER_ORDER, cutoff, btype=btype, fs=sample_rate, output="sos")


def sos_filtfilt(x: torch.Tensor, sos: np.ndarray) -> torch.Tensor:
    """Zero-phase cascaded-biquad filtering along the last dimension."""
    y = x
    for _ in range(2):
        for section in sos:
            b = torch.as_tensor(section[:3], dtype=x.dtype, device=x.device)
            a = torch.as_tensor(section[3:], dtype=x.dtype, device=x.device)
            y = torchaudio.functional.lfilter(y, a, b, clamp=False)
        y = y.flip(-1)
    return y


def speed_change(x: torch.Tensor, factor: float) -> torch.Tensor:
    """Play back ``factor`` times faster; output length round(T / factor)."""
    if factor <= 0:
        raise ConfigurationError(f"Speed factor must be positive, got {factor}")
    old_rate = round_half_up(factor * SPEED_RESOLUTION)
    return resample_tensor(x, old_rate, SPEED_RESOLUTION)


def pink_noise(shape: Tuple[int, ...], generator: Optional[torch.Generator] = None,
               dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """
    Unit-variance pink noise by the Voss-McCartney method.

    Row k holds a random value that is redrawn every 2^k samples; the sum
    of all rows plus a white row approximates a 1/f spectrum.
    """
    length = shape[-1]
    lead = tuple(shape[:-1])
    num_rows = max(1, min(16, int(math.ceil(math.log2(max(length, 2))))))
    total = torch.randn(*lead, length, generator=generator, dtype=dtype)
    for row in range(num_rows):
        period = 2 ** row
        values = torch.randn(*lead, length // period + 1, generator=generator, dtype=dtype)
        total = total + values.repeat_interleave(period, dim=-1)[..., :length]
    std = total.std(dim=-1, keepdim=True) if length > 1 else torch.ones_like(total)
    return total / std.clamp_min(1e-12)


def _noise_like(x: torch.Tensor, generator: Optional[torch.Generator], pink: bool) -> torch.Tensor:
    if pink:
        noise = pink_noise(tuple(x.shape), generator, dtype=x.dtype)
    else:
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return noise.to(x.device)


def moving_average(x: torch.Tensor, window: int) -> torch.Tensor:
    """Causal moving average; group delay (window - 1) / 2 samples."""
    window = int(window)
    if window < 1:
        raise ConfigurationError(f"Smoothing window must be >= 1, got {window}")
    shape = x.shape
    flat = x.reshape(-1, 1, shape[-1])
    kernel = torch.full((1, 1, window), 1.0 / window, dtype=x.dtype, device=x.device)
    return F.conv1d(F.pad(flat, (window - 1, 0)), kernel).reshape(shape)


def echo(x: torch.Tensor, delay_samples: int, volume: float) -> torch.Tensor:
    """Single delayed copy mixed in at ``volume``; result clipped to [-1, 1]."""
    length = x.shape[-1]
    if delay_samples >= length:
        return x.clamp(-1.0, 1.0)
    delayed = F.pad(x, (delay_samples, 0))[..., :length]
    return (x + volume * delayed).clamp(-1.0, 1.0)


def codec_proxy(x: torch.Tensor, sample_rate: int, intermediate_rate: int, bits: int) -> torch.Tensor:
    """Lossy codec stand-in: downsample, uniform quantization, upsample."""
    length = x.shape[-1]
    levels = 2 ** int(bits) - 1
    with torch.no_grad():
        low = resample_tensor(x.detach(), sample_rate, int(intermediate_rate))
        quantized = torch.round((low.clamp(-1.0, 1.0) + 1.0) / 2.0 * levels) / levels * 2.0 - 1.0
        if int(intermediate_rate) == sample_rate:
            return quantized
        return julius.resample_frac(quantized, int(intermediate_rate), sample_rate, output_length=length)


def augment_tensor(x: torch.Tensor,
                   spec: AugmentSpec,
                   generator: Optional[torch.Generator] = None,
                   sample_rate: int = DEFAULT_SAMPLE_RATE,
                   params: Optional[Mapping[str, Any]] = None) -> torch.Tensor:
    """
    Apply one edit to a tensor of shape (..., T).

    Args:
        x: Input audio
        spec: Edit to apply
        generator: Random source for noise and train-mode parameters
        sample_rate: Sample rate of ``x``
        params: Concrete parameters from ``resolve_params``; resolved here if omitted

    Returns:
        torch.Tensor: Edited audio (length round(T / factor) for speed)

    Raises:
        ConfigurationError: If the edit name is unknown
    """
    if not isinstance(spec, AugmentSpec) or spec.name not in EDIT_NAMES:
        raise ConfigurationError(f"Unknown edit {getattr(spec, 'name', spec)!r}")
    p = dict(params) if params is not None else resolve_params(spec, generator)
    name = spec.name

    if name == "identity":
        return x
    if name in ("boost", "duck"):
        return x * float(p["factor"])
    if name in ("lowpass", "highpass"):
        sos = _butter_sos(name, [float(p["cutoff"])], sample_rate)
        return x if sos is None else sos_filtfilt(x, sos)
    if name == "bandpass":
        sos = _butter_sos("bandpass", [float(p["low"]), float(p["high"])], sample_rate)
        return x if sos is None else sos_filtfilt(x, sos)
    if name == "speed":
        return speed_change(x, float(p["factor"]))
    if name == "resample":
        up = resample_tensor(x, sample_rate, int(p["intermediate_rate"]))
        if int(p["intermediate_rate"]) == sample_rate:
            return up
        return julius.resample_frac(up, int(p["intermediate_rate"]), sample_rate, output_length=x.shape[-1])
    if name == "echo":
        return echo(x, round_half_up(float(p["delay"]) * sample_rate), float(p["volume"]))
    if name in ("pink_noise", "white_noise"):
        return x + float(p["std"]) * _noise_like(x, generator, pink=(name == "pink_noise"))
    if name == "smooth":
        return moving_average(x, int(p["window"]))
    if name == "codec_proxy":
        return codec_proxy(x, sample_rate, int(p["intermediate_rate"]), int(p["bits"]))
    raise ConfigurationError(f"Unknown edit {name!r}")


def apply_augment(clip: AudioClip, spec: AugmentSpec,
                  rng: Optional[torch.Generator] = None) -> AudioClip:
    """
    Apply an edit to a clip.

    Deterministic for a given (clip, spec, generator seed).
    """
    params = resolve_params(spec, rng)
    out = augment_tensor(clip.to_tensor(), spec, rng, clip.sample_rate, params)
    return AudioClip(out.detach().numpy(), clip.sample_rate)


class _StraightThroughFunction(torch.autograd.Function):
    """Returns the precomputed edit output; identity gradient to the input."""

    @staticmethod
    def forward(ctx, input: torch.Tensor, output: torch.Tensor) -> torch.Tensor:
        return output.clone()

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return grad_output, None


EditFn = Union[AugmentSpec, Callable[[torch.Tensor], torch.Tensor]]


def straight_through(edit: EditFn,
                     x: Union[torch.Tensor, AudioClip],
                     generator: Optional[torch.Generator] = None,
                     sample_rate: int = DEFAULT_SAMPLE_RATE,
                     params: Optional[Mapping[str, Any]] = None) -> Union[torch.Tensor, AudioClip]:
    """
    Wrap an edit so that its forward value is kept and its Jacobian is
    treated as the identity.

    Args:
        edit: AugmentSpec or tensor-to-tensor callable
        x: Input audio
        generator: Random source for stochastic edits
        sample_rate: Sample rate of ``x``
        params: Concrete edit parameters (spec edits only)

    Returns:
        Edited audio whose gradient w.r.t. ``x`` is the upstream gradient

    Raises:
        ConfigurationError: If the edit changes the signal length
    """
    if isinstance(edit, AugmentSpec) and not edit.preserves_length:
        raise ConfigurationError(f"Edit {edit.name!r} changes length and cannot be wrapped straight-through")
    if isinstance(x, AudioClip):
        out = straight_through(edit, x.to_tensor(), generator, x.sample_rate, params)
        return AudioClip(out.detach().numpy(), x.sample_rate)

    with torch.no_grad():
        if isinstance(edit, AugmentSpec):
            edited = augment_tensor(x.detach(), edit, generator, sample_rate, params)
        else:
            edited = edit(x.detach())
    if edited.shape != x.shape:
        raise ConfigurationError(
            f"Straight-through edit changed shape {tuple(x.shape)} -> {tuple(edited.shape)}")
    return _StraightThroughFunction.apply(x, edited)


def augment_with_mask(x: torch.Tensor,
                      mask: torch.Tensor,
                      spec: AugmentSpec,
                      generator: Optional[torch.Generator] = None,
                      sample_rate: int = DEFAULT_SAMPLE_RATE,
                      params: Optional[Mapping[str, Any]] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Edit audio and keep its presence mask aligned.

    Speed rescales the mask in time by nearest-neighbour interpolation;
    non-differentiable edits go through the straight-through wrapper.
    """
    p = dict(params) if params is not None else resolve_params(spec, generator)
    if spec.name == "speed":
        edited = augment_tensor(x, spec, generator, sample_rate, p)
        flat = mask.reshape(-1, 1, mask.shape[-1]).to(torch.float32)
        scaled = F.interpolate(flat, size=edited.shape[-1], mode="nearest-exact")
        return edited, scaled.reshape(*mask.shape[:-1], edited.shape[-1]).to(mask.dtype)
    if not spec.differentiable:
        return straight_through(spec, x, generator, sample_rate, p), mask
    return augment_tensor(x, spec, generator, sample_rate, p), mask


def fit_length(x: torch.Tensor, length: int) -> torch.Tensor:
    """Crop or zero-pad the last dimension to ``length``."""
    current = x.shape[-1]
    if current >= length:
        return x[..., :length]
    return F.pad(x, (0, length - current))


@dataclass
class AugmentPolicy:
    """
    Sampling distribution over edits.

    Weights are proportional to 1 / max(accuracy, floor), so edits the
    detector handles poorly are drawn more often.
    """

    specs: List[AugmentSpec]
    weights: Optional[np.ndarray] = None
    accuracy_estimates: Optional[np.ndarray] = None
    floor: float = ACCURACY_FLOOR
    smoothing: float = 0.9

    def __post_init__(self):
        if not self.specs:
            raise ConfigurationError("Augmentation policy needs at least one edit")
        n = len(self.specs)
        if self.accuracy_estimates is None:
            self.accuracy_estimates = np.full(n, 0.5)
        self.accuracy_estimates = np.asarray(self.accuracy_estimates, dtype=np.float64)
        if self.accuracy_estimates.shape != (n,):
            raise ConfigurationError(f"Expected {n} accuracy estimates, got {self.accuracy_estimates.shape}")
        if self.weights is None:
            self.recompute_weights()
        else:
            weights = np.asarray(self.weights, dtype=np.float64)
            if weights.shape != (n,) or np.any(weights < 0) or weights.sum() <= 0:
                raise ConfigurationError(f"Invalid policy weights {self.weights}")
            self.weights = weights / weights.sum()

    @classmethod
    def default(cls, mode: str = "train") -> "AugmentPolicy":
        """Every edit except identity at its ``mode`` defaults."""
        return cls([AugmentSpec(name, mode=mode) for name in EDIT_NAMES if name != "identity"])

    @classmethod
    def from_config(cls, entries: Sequence[Mapping[str, Any]], default_mode: str = "train") -> "AugmentPolicy":
        return cls([AugmentSpec.from_dict(entry, default_mode) for entry in entries])

    @property
    def names(self) -> List[str]:
        return [spec.name for spec in self.specs]

    def recompute_weights(self):
        inverse = 1.0 / np.maximum(self.accuracy_estimates, self.floor)
        self.weights = inverse / inverse.sum()

    def set_accuracies(self, accuracies: Sequence[float]):
        """Replace all accuracy estimates and renormalize."""
        values = np.clip(np.asarray(accuracies, dtype=np.float64), 0.0, 1.0)
        if values.shape != self.accuracy_estimates.shape:
            raise ConfigurationError(f"Expected {len(self.specs)} accuracies, got {values.shape}")
        self.accuracy_estimates = values
        self.recompute_weights()

    def update_accuracy(self, key: Union[int, str], accuracy: float):
        """Blend a new accuracy measurement into the running estimate."""
        index = key if isinstance(key, int) else self.names.index(key)
        blended = self.smoothing * self.accuracy_estimates[index] + (1.0 - self.smoothing) * float(accuracy)
        self.accuracy_estimates[index] = min(max(blended, 0.0), 1.0)
        self.recompute_weights()


def sample_augment(policy: AugmentPolicy, rng: Optional[torch.Generator] = None) -> AugmentSpec:
    """
    Draw one edit with probability equal to its policy weight.

    Raises:
        ConfigurationError: If the policy is empty or its weights are not normalized
    """
    if not policy.specs:
        raise ConfigurationError("Cannot sample from an empty augmentation policy")
    weights = np.asarray(policy.weights, dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-6:
        raise ConfigurationError(f"Policy weights must sum to 1, got {weights.sum()}")
    draw = torch.rand((), generator=rng, dtype=torch.float64).item()
    index = int(np.searchsorted(np.cumsum(weights), draw, side="right"))
    return policy.specs[min(index, len(policy.specs) - 1)]
