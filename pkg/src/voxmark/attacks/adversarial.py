#!/usr/bin/env python3
"""
VoxMark Adversarial Attacks Module

Bounded perturbation attacks against a watermark detector: gradient
attacks on the true detector (white-box), on an independently trained
detector (semi-black-box) or on a surrogate classifier trained from
watermarked/genuine examples (black-box), plus a Gaussian-noise baseline
and a sweep over perturbation scales.

Author: VoxMark Team
Version: 1.0
"""

import logging
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.audio import AudioClip, as_tensor
from ..core.detection import detect
from ..core.errors import ConfigurationError, ValidationError
from ..core.losses import si_snr
from ..core.models import ModelConfig, ParameterStore, WatermarkDetector, WatermarkModels, detector_forward

logger = logging.getLogger(__name__)

TARGETS = {"remove": 0.0, "forge": 1.0}
ATTACK_MODES = ("whitebox", "semiblackbox", "blackbox", "noise")
SCORE_EPS = 1e-7


@dataclass(frozen=True)
class AttackConfig:
    """The ``attack`` config section."""

    alpha: float = 1e-3
    steps: int = 100
    learning_rate: float = 1e-1
    target: str = "remove"
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError(f"attack.alpha must be > 0, got {self.alpha}")
        if self.steps < 0:
            raise ConfigurationError(f"attack.steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"attack.learning_rate must be > 0, got {self.learning_rate}")
        if self.target not in TARGETS:
            raise ConfigurationError(f"attack.target must be one of {sorted(TARGETS)}, got {self.target!r}")

    @property
    def label(self) -> float:
        return TARGETS[self.target]

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"Unknown attack config keys {sorted(unknown)}")
        return cls(**dict(values))


@dataclass
class SurrogateResult:
    detector: WatermarkDetector
    val_accuracy: float


def _detector(source: Union[nn.Module, ParameterStore, WatermarkModels]) -> nn.Module:
    if isinstance(source, ParameterStore):
        return source.build().detector
    if isinstance(source, WatermarkModels):
        return source.detector
    return source


def adversarial_attack(detector: Union[nn.Module, ParameterStore, WatermarkModels],
                       x: Union[AudioClip, torch.Tensor], cfg: Optional[AttackConfig] = None) -> Union[AudioClip, torch.Tensor]:
    """
    Optimize a bounded perturbation x + alpha * tanh(delta) against the detector.

    The detector's parameters are frozen during the attack and their
    ``requires_grad`` flags restored afterwards.

    Args:
        detector: Network to attack
        x: Clip or (T,) / (B, T) tensor
        cfg: Attack settings

    Returns:
        Attacked audio of the same type as ``x``
    """
    cfg = cfg or AttackConfig()
    net = _detector(detector)
    device = next(net.parameters()).device
    audio = as_tensor(x).detach().to(device=device, dtype=torch.float32)
    generator = torch.Generator().manual_seed(cfg.seed)
    delta = torch.randn(audio.shape, generator=generator).to(device).requires_grad_(True)

    flags = [p.requires_grad for p in net.parameters()]
    was_training = net.training
    net.eval()
    net.requires_grad_(False)
    try:
        optimizer = torch.optim.Adam([delta], lr=cfg.learning_rate)
        for _ in range(cfg.steps):
            presence = net(audio + cfg.alpha * torch.tanh(delta)).presence
            score = presence.mean(dim=-1).clamp(SCORE_EPS, 1.0 - SCORE_EPS)
            loss = F.binary_cross_entropy(score, torch.full_like(score, cfg.label))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    finally:
        for p, flag in zip(net.parameters(), flags):
            p.requires_grad_(flag)
        net.train(was_training)

    attacked = (audio + cfg.alpha * torch.tanh(delta)).detach()
    if isinstance(x, AudioClip):
        return AudioClip.from_tensor(attacked, x.sample_rate)
    return attacked.to(x.dtype)


def noise_attack(x: AudioClip, sigma: float, seed: int = 0) -> AudioClip:
    """Gaussian-noise baseline with standard deviation sigma."""
    generator = torch.Generator().manual_seed(seed)
    noise = torch.randn(x.num_samples, generator=generator, dtype=torch.float64).numpy()
    return AudioClip(x.samples.astype(np.float64) + sigma * noise, x.sample_rate)


def _stack_clips(clips: Sequence[Union[AudioClip, torch.Tensor]]) -> torch.Tensor:
    tensors = [as_tensor(c).detach().reshape(-1).to(torch.float32) for c in clips]
    length = min(t.shape[0] for t in tensors)
    return torch.stack([t[:length] for t in tensors]).unsqueeze(1)


def train_surrogate(watermarked: Sequence[Union[AudioClip, torch.Tensor]],
                    genuine: Sequence[Union[AudioClip, torch.Tensor]],
                    steps: int = 500, seed: int = 0, model_config: Optional[ModelConfig] = None,
                    learning_rate: float = 1e-3, batch_size: int = 16) -> SurrogateResult:
    """
    Train a fresh detector-architecture classifier on clip-level labels.

    Uses an 80/20 train/validation split. Clips are cropped to the
    shortest length.

    Raises:
        ConfigurationError: If either class is empty
    """
    if not watermarked or not genuine:
        raise ConfigurationError("Surrogate training needs both watermarked and genuine clips")
    x = _stack_clips(list(watermarked) + list(genuine))
    y = torch.cat([torch.ones(len(watermarked)), torch.zeros(len(genuine))])

    generator = torch.Generator().manual_seed(seed)
    order = torch.randperm(x.shape[0], generator=generator)
    n_val = max(1, int(round(0.2 * x.shape[0])))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.numel() == 0:
        raise ConfigurationError("Too few clips for a train/validation split")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        detector = WatermarkDetector((model_config or ModelConfig()).detector_config())
    optimizer = torch.optim.Adam(detector.parameters(), lr=learning_rate)
    detector.train()
    for step in range(steps):
        pick = train_idx[torch.randint(0, train_idx.numel(), (min(batch_size, train_idx.numel()),),
                                       generator=generator)]
        score = detector(x[pick]).presence.mean(dim=-1).clamp(SCORE_EPS, 1.0 - SCORE_EPS)
        loss = F.binary_cross_entropy(score, y[pick])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if (step + 1) % 100 == 0:
            logger.debug("Surrogate step %d: loss %.4f", step + 1, float(loss))

    detector.eval()
    with torch.no_grad():
        val_score = detector(x[val_idx]).presence.mean(dim=-1)
    accuracy = float(((val_score > 0.5).float() == y[val_idx]).float().mean())
    logger.info("Surrogate trained for %d steps: validation accuracy %.3f", steps, accuracy)
    return SurrogateResult(detector, accuracy)


def attack_sweep(detector: Union[nn.Module, ParameterStore, WatermarkModels],
                 clips: Sequence[AudioClip],
                 alphas: Sequence[float],
                 modes: Sequence[str] = ("whitebox", "noise"),
                 proxies: Optional[Dict[str, nn.Module]] = None,
                 cfg: Optional[AttackConfig] = None,
                 threshold: float = 0.5) -> pd.DataFrame:
    """
    Quality versus detection accuracy for each attack mode and scale.

    White-box attacks use ``detector``; semi-black-box and black-box
    attacks optimize against ``proxies[mode]`` and are scored on
    ``detector``. Noise rows use sigma = alpha.

    Returns:
        pd.DataFrame: Columns mode, alpha, si_snr_mean, detection_accuracy
    """
    cfg = cfg or AttackConfig()
    proxies = proxies or {}
    if not clips:
        raise ValidationError("attack_sweep needs at least one clip")
    expect_flagged = cfg.target == "remove"
    true_detector = _detector(detector)
    rows: List[Dict[str, Any]] = []
    for mode in modes:
        if mode not in ATTACK_MODES:
            raise ConfigurationError(f"Unknown attack mode {mode!r}; expected one of {ATTACK_MODES}")
        if mode in ("semiblackbox", "blackbox") and mode not in proxies:
            raise ConfigurationError(f"Attack mode {mode!r} needs a proxy detector")
        target = true_detector if mode == "whitebox" else proxies.get(mode)
        for alpha in alphas:
            qualities, correct = [], []
            for i, clip in enumerate(clips):
                if mode == "noise":
                    attacked = noise_attack(clip, alpha, cfg.seed + i)
                else:
                    attacked = adversarial_attack(target, clip, replace(cfg, alpha=float(alpha), seed=cfg.seed + i))
                qualities.append(si_snr(clip, attacked))
                with torch.no_grad():
                    flagged = detect(detector_forward(true_detector, attacked), threshold).flagged
                correct.append(flagged == expect_flagged)
            rows.append({"mode": mode, "alpha": float(alpha), "si_snr_mean": float(np.mean(qualities)),
                         "detection_accuracy": float(np.mean(correct))})
            logger.info("Attack %s alpha=%g: SI-SNR %.2f dB, accuracy %.3f", mode, alpha,
                        rows[-1]["si_snr_mean"], rows[-1]["detection_accuracy"])
    return pd.DataFrame(rows, columns=["mode", "alpha", "si_snr_mean", "detection_accuracy"])


def accuracy_at_quality(table: pd.DataFrame, si_snr_db: Optional[Sequence[float]] = None,
                        points: int = 5) -> pd.DataFrame:
    """
    Detection accuracy of each attack mode at matched SI-SNR.

    Each mode's sweep rows are linearly interpolated over SI-SNR. Without
    ``si_snr_db`` the grid is ``points`` values spanning the range every
    mode covers.

    Args:
        table: Output of :func:`attack_sweep`
        si_snr_db: SI-SNR values in dB to evaluate at
        points: Grid size when ``si_snr_db`` is not given

    Returns:
        pd.DataFrame: Column si_snr plus one accuracy column per mode;
            NaN outside the range a mode was measured over
    """
    if table.empty:
        raise ValidationError("accuracy_at_quality needs at least one sweep row")
    curves = {}
    for mode, group in table.groupby("mode", sort=False):
        group = group.sort_values("si_snr_mean")
        curves[mode] = (group["si_snr_mean"].to_numpy(float), group["detection_accuracy"].to_numpy(float))
    if si_snr_db is None:
        low = max(x[0] for x, _ in curves.values())
        high = min(x[-1] for x, _ in curves.values())
        if low > high:
            raise ValidationError(f"Attack modes share no SI-SNR range (lowest top {high:.2f} dB, "
                                  f"highest bottom {low:.2f} dB)")
        si_snr_db = np.linspace(low, high, points)
    grid = np.asarray(si_snr_db, dtype=float)
    result = {"si_snr": grid}
    for mode, (x, y) in curves.items():
        values = np.interp(grid, x, y)
        values[(grid < x[0]) | (grid > x[-1])] = np.nan
        result[mode] = values
    return pd.DataFrame(result)
