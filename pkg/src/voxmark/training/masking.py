#!/usr/bin/env python3
"""
VoxMark Watermark Masking

Partial watermark removal used during training: random spans of the
watermarked signal are reverted to the original, zeroed, replaced by
another clip or left alone, and the per-sample labels record which
samples still carry the watermark.

Author: VoxMark Team
Version: 1.0
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from ..core.audio import AudioClip
from ..core.errors import ValidationError

logger = logging.getLogger(__name__)

BRANCHES = ("revert", "zero", "neighbor", "keep")
BRANCH_PROBABILITIES = (0.4, 0.2, 0.2, 0.2)
_KEEP = BRANCHES.index("keep")


@dataclass(frozen=True)
class MaskWindow:
    start: int
    length: int
    branch: str

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise ValidationError(f"Unknown mask branch {self.branch!r}")
        if self.start < 0 or self.length < 0:
            raise ValidationError(f"Invalid mask window {self.start}+{self.length}")


def span_length(num_samples: int, k: int) -> int:
    """Length of each altered span: T // (2k)."""
    if k < 1:
        raise ValidationError(f"Mask window count must be >= 1, got {k}")
    return num_samples // (2 * k)


def draw_mask_windows(num_samples: int, k: int, generator: Optional[torch.Generator] = None) -> List[MaskWindow]:
    """
    Draw k windows of T // (2k) samples with independent branch choices.

    Starts are uniform over positions where the span fits inside T.
    """
    length = span_length(num_samples, k)
    starts = torch.randint(0, num_samples - length + 1, (k,), generator=generator)
    u = torch.rand(k, generator=generator, dtype=torch.float64)
    cumulative = torch.tensor(np.cumsum(BRANCH_PROBABILITIES), dtype=torch.float64)
    cumulative[-1] = 1.0
    branches = torch.searchsorted(cumulative, u, right=True).clamp(max=len(BRANCHES) - 1)
    return [MaskWindow(int(s), length, BRANCHES[int(b)]) for s, b in zip(starts.tolist(), branches.tolist())]


def window_sources(num_samples: int, windows: Sequence[MaskWindow]) -> np.ndarray:
    """Branch index per sample; later windows overwrite earlier ones, spans are truncated at T."""
    sources = np.full(num_samples, _KEEP, dtype=np.int64)
    for window in windows:
        end = min(num_samples, window.start + window.length)
        sources[window.start:end] = BRANCHES.index(window.branch)
    return sources


def apply_mask_windows(s: torch.Tensor, s_w: torch.Tensor, neighbor: torch.Tensor,
                       sources: Union[np.ndarray, torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Mix original, watermarked and neighbor signals by per-sample source.

    Differentiable with respect to ``s_w``.

    Args:
        s: Original audio (..., T)
        s_w: Watermarked audio (..., T)
        neighbor: Substitute audio (..., T)
        sources: Branch index per sample, broadcastable to (..., T)

    Returns:
        Tuple of (mixed audio, labels) where labels are 1.0 on watermarked samples
    """
    if not (s.shape == s_w.shape == neighbor.shape):
        raise ValidationError(f"Shapes differ: {tuple(s.shape)}, {tuple(s_w.shape)}, {tuple(neighbor.shape)}")
    src = torch.as_tensor(sources, device=s_w.device)
    mixed = torch.where(src == _KEEP, s_w,
                        torch.where(src == BRANCHES.index("revert"), s,
                                    torch.where(src == BRANCHES.index("neighbor"), neighbor,
                                                torch.zeros_like(s_w))))
    labels = (src == _KEEP).to(s_w.dtype).expand_as(mixed)
    return mixed, labels


def mask_watermark(s: Union[AudioClip, torch.Tensor], s_w: Union[AudioClip, torch.Tensor], k: int,
                   neighbor: Union[AudioClip, torch.Tensor],
                   generator: Optional[torch.Generator] = None):
    """
    Partially remove the watermark from one clip.

    Args:
        s: Original clip
        s_w: Watermarked clip
        k: Number of windows
        neighbor: Another clip of the same length
        generator: Random source

    Returns:
        Tuple of (mixed, labels): an AudioClip and integer mask for clip
        input, tensors otherwise
    """
    clips = isinstance(s_w, AudioClip)
    tensors = [x.to_tensor() if isinstance(x, AudioClip) else x for x in (s, s_w, neighbor)]
    num_samples = tensors[1].shape[-1]
    if any(t.shape[-1] != num_samples for t in tensors):
        raise ValidationError("mask_watermark needs equal-length signals")
    windows = draw_mask_windows(num_samples, k, generator)
    mixed, labels = apply_mask_windows(*tensors, window_sources(num_samples, windows))
    if clips:
        return AudioClip.from_tensor(mixed, s_w.sample_rate), labels.to(torch.int64).numpy()
    return mixed, labels


def mask_batch(s: torch.Tensor, s_w: torch.Tensor, k: int,
               generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Mask every element of a (B, 1, T) batch with its own windows.

    The neighbor of element i is the original audio of element i - 1.
    """
    batch, num_samples = s_w.shape[0], s_w.shape[-1]
    sources = np.stack([window_sources(num_samples, draw_mask_windows(num_samples, k, generator))
                        for _ in range(batch)]).reshape(batch, *([1] * (s_w.dim() - 2)), num_samples)
    return apply_mask_windows(s, s_w, s.roll(1, dims=0), sources)
