#!/usr/bin/env python3
"""
VoxMark Evaluation Protocols

Report builders behind the ``eval`` command: robustness per edit,
localization IoU versus watermarked duration, attribution over growing
registries, single-pass versus sliding-window runtime, per-file quality,
and optional plots.

Author: VoxMark Team
Version: 1.0
"""

import logging
import os
import platform
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import psutil
import torch

from ..core.audio import AudioClip
from ..core.augment import AugmentSpec, apply_augment, eval_battery
from ..core.detection import (AttributionRegistry, best_accuracy_threshold, calibrate_threshold,
                              decode_message, detect, iou, localize, roc_auc, sliding_window_detect,
                              timed_detect)
from ..core.errors import ValidationError
from ..core.losses import loudness, si_snr, tf_loudness_diff, tf_loudness_loss
from ..core.models import (DetectorOutput, Message, ModelSource, ParameterStore, WatermarkModels, detector_forward,
                           embed, generator_forward)

logger = logging.getLogger(__name__)

LOCALIZATION_DURATIONS = (0.1, 0.5, 1.0, 2.0, 5.0, 9.0)
ATTRIBUTION_SIZES = (1, 10, 100, 1000, 10000)
RUNTIME_DURATIONS = (1.0, 5.0, 10.0)


def _message_bits(model: ModelSource) -> int:
    if isinstance(model, ParameterStore):
        return model.model_config.message_bits
    if isinstance(model, WatermarkModels):
        return model.config.message_bits
    return model.cfg.message_bits


def _score(model: ModelSource, clip: AudioClip) -> float:
    with torch.no_grad():
        return detect(detector_forward(model, clip)).score


def robustness_table(model: ModelSource, clips: Sequence[AudioClip],
                     specs: Optional[Sequence[AugmentSpec]] = None, seed: int = 0) -> pd.DataFrame:
    """
    Detection quality per edit on watermarked versus clean clips.

    Each clip is watermarked once with a random message; the same edit
    (same random seed) is applied to the watermarked and clean version.

    Returns:
        pd.DataFrame: Columns edit, accuracy, tpr, fpr, auc, threshold
    """
    if not clips:
        raise ValidationError("robustness_table needs at least one clip")
    specs = list(specs) if specs is not None else eval_battery()
    generator = torch.Generator().manual_seed(seed)
    bits = _message_bits(model)
    watermarked = [embed(model, clip, Message.random(bits, generator) if bits else None) for clip in clips]

    rows = []
    for spec in specs:
        pos, neg = [], []
        for i, (clean, marked) in enumerate(zip(clips, watermarked)):
            pos.append(_score(model, apply_augment(marked, spec, torch.Generator().manual_seed(seed + i))))
            neg.append(_score(model, apply_augment(clean, spec, torch.Generator().manual_seed(seed + i))))
        choice = best_accuracy_threshold(pos, neg)
        rows.append({"edit": spec.name, "accuracy": choice.accuracy, "tpr": choice.tpr, "fpr": choice.fpr,
                     "auc": roc_auc(pos, neg), "threshold": choice.threshold})
        logger.info("Robustness %-12s acc=%.3f auc=%.3f", spec.name, choice.accuracy, rows[-1]["auc"])
    return pd.DataFrame(rows, columns=["edit", "accuracy", "tpr", "fpr", "auc", "threshold"])


def localization_curve(model: ModelSource, clips: Sequence[AudioClip],
                       durations: Sequence[float] = LOCALIZATION_DURATIONS, seed: int = 0,
                       oracle: bool = False, threshold: float = 0.5) -> pd.DataFrame:
    """
    IoU of predicted versus true watermark masks for one randomly placed
    watermarked segment per clip.

    With ``oracle`` the detector is replaced by the ground-truth mask,
    which must give IoU 1.0.

    Returns:
        pd.DataFrame: Columns duration, iou, accuracy
    """
    generator = torch.Generator().manual_seed(seed)
    bits = _message_bits(model)
    rows = []
    for duration in durations:
        ious, accuracies = [], []
        for clip in clips:
            length = int(round(duration * clip.sample_rate))
            if length > clip.num_samples:
                raise ValidationError(f"Segment of {duration}s does not fit in a {clip.duration:.2f}s clip")
            start = int(torch.randint(0, clip.num_samples - length + 1, (), generator=generator))
            truth = np.zeros(clip.num_samples, dtype=np.int64)
            truth[start:start + length] = 1
            if oracle:
                out = DetectorOutput(torch.as_tensor(truth, dtype=torch.float32), torch.zeros(clip.num_samples, bits))
            else:
                message = Message.random(bits, generator) if bits else None
                with torch.no_grad():
                    delta = generator_forward(model, clip.to_tensor(), message).numpy()
                samples = clip.samples.astype(np.float64)
                samples[start:start + length] = np.clip(samples[start:start + length] + delta[start:start + length],
                                                        -1.0, 1.0)
                with torch.no_grad():
                    out = detector_forward(model, AudioClip(samples, clip.sample_rate))
            pred = localize(out, threshold)
            ious.append(iou(pred, truth))
            accuracies.append(float(np.mean(pred == truth)))
        rows.append({"duration": float(duration), "iou": float(np.mean(ious)), "accuracy": float(np.mean(accuracies))})
        logger.info("Localization %.1fs: IoU %.3f", duration, rows[-1]["iou"])
    return pd.DataFrame(rows, columns=["duration", "iou", "accuracy"])


def attribution_table(model: ModelSource, clips: Sequence[AudioClip], negatives: Sequence[AudioClip],
                      sizes: Sequence[int] = ATTRIBUTION_SIZES, target_fpr: float = 1e-3,
                      max_embedded: int = 100, seed: int = 0) -> pd.DataFrame:
    """
    Attribution accuracy for registries of N random messages.

    Only the first min(N, max_embedded) messages are actually embedded
    (clip i carries message i mod N'). Detection uses a threshold
    calibrated on ``negatives`` to ``target_fpr``.

    Returns:
        pd.DataFrame: Columns n, accuracy, accuracy_flagged, false_attribution, detection_rate, threshold
    """
    bits = _message_bits(model)
    if bits == 0:
        raise ValidationError("Attribution needs a multi-bit model")
    if not clips or not negatives:
        raise ValidationError("attribution_table needs watermarked and negative clips")
    threshold = calibrate_threshold([_score(model, c) for c in negatives], target_fpr)
    full = AttributionRegistry.random(max(sizes), bits, torch.Generator().manual_seed(seed))

    decoded: Dict[Tuple[int, int], Optional[Message]] = {}

    def decode(clip_index: int, message_index: int) -> Optional[Message]:
        key = (clip_index, message_index)
        if key not in decoded:
            marked = embed(model, clips[clip_index], full.entries[message_index][1])
            with torch.no_grad():
                out = detector_forward(model, marked)
            if not detect(out, threshold).flagged:
                decoded[key] = None
            else:
                mask = localize(out)
                decoded[key] = decode_message(out, mask if mask.any() else np.ones_like(mask))
        return decoded[key]

    rows = []
    for n in sizes:
        registry = AttributionRegistry(full.entries[:n], bits)
        embedded = min(n, max_embedded)
        correct = wrong = flagged = 0
        for i in range(len(clips)):
            message_index = i % embedded
            message = decode(i, message_index)
            if message is None:
                continue
            flagged += 1
            model_id, _ = registry.nearest(message)
            if model_id == registry.entries[message_index][0]:
                correct += 1
            else:
                wrong += 1
        total = len(clips)
        rows.append({"n": n, "accuracy": correct / total,
                     "accuracy_flagged": correct / flagged if flagged else 0.0,
                     "false_attribution": wrong / total, "detection_rate": flagged / total,
                     "threshold": threshold})
        logger.info("Attribution N=%d: accuracy %.3f, detection rate %.3f", n, rows[-1]["accuracy"],
                    rows[-1]["detection_rate"])
    return pd.DataFrame(rows, columns=["n", "accuracy", "accuracy_flagged", "false_attribution",
                                       "detection_rate", "threshold"])


def runtime_benchmark(model: ModelSource, durations: Sequence[float] = RUNTIME_DURATIONS, repeats: int = 3,
                      sample_rate: int = 16000, seed: int = 0) -> pd.DataFrame:
    """
    Single-pass versus sliding-window detection time on noise clips.

    Returns:
        pd.DataFrame: One row per duration with pass counts, median
        milliseconds, speedup and host information
    """
    generator = torch.Generator().manual_seed(seed)
    memory_gb = psutil.virtual_memory().total / 1024 ** 3
    rows = []
    for duration in durations:
        samples = 0.1 * torch.randn(int(round(duration * sample_rate)), generator=generator)
        clip = AudioClip(samples.numpy(), sample_rate)
        single = [timed_detect(model, clip) for _ in range(repeats)]
        sliding = [sliding_window_detect(model, clip) for _ in range(repeats)]
        single_ms = 1000.0 * float(np.median([t.seconds for t in single]))
        sliding_ms = 1000.0 * float(np.median([t.seconds for t in sliding]))
        rows.append({
            "duration": float(duration),
            "single_passes": single[0].passes,
            "sliding_passes": sliding[0].passes,
            "single_ms": single_ms,
            "sliding_ms": sliding_ms,
            "speedup": sliding_ms / single_ms if single_ms > 0 else float("inf"),
            "cpu_count": psutil.cpu_count(logical=True),
            "memory_gb": round(memory_gb, 1),
            "machine": platform.machine(),
        })
        logger.info("Runtime %.0fs: single %.1f ms, sliding %.1f ms (%d passes)", duration, single_ms, sliding_ms,
                    sliding[0].passes)
    return pd.DataFrame(rows)


def quality_table(pairs: Sequence[Tuple[str, AudioClip, AudioClip]]) -> pd.DataFrame:
    """
    Per-file quality of watermarked audio.

    Args:
        pairs: (name, original, watermarked) triples

    Returns:
        pd.DataFrame: Columns file, si_snr, tf_loudness, loudness_delta
    """
    rows = []
    for name, original, marked in pairs:
        delta = AudioClip(marked.samples.astype(np.float64) - original.samples, original.sample_rate)
        tf_loud = float(tf_loudness_loss(tf_loudness_diff(original, delta)))
        rows.append({
            "file": name,
            "si_snr": si_snr(original, marked),
            "tf_loudness": tf_loud,
            "loudness_delta": loudness(marked) - loudness(original),
        })
    return pd.DataFrame(rows, columns=["file", "si_snr", "tf_loudness", "loudness_delta"])


def plot_curves(out_dir: os.PathLike, localization: Optional[pd.DataFrame] = None,
                attacks: Optional[pd.DataFrame] = None) -> List[Path]:
    """Render IoU-vs-duration and attack-sweep curves as PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if localization is not None and not localization.empty:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(localization["duration"], localization["iou"], marker="o")
        ax.set_xscale("log")
        ax.set_xlabel("Watermarked duration (s)")
        ax.set_ylabel("Mean IoU")
        ax.set_ylim(0.0, 1.05)
        ax.grid(True, alpha=0.3)
        path = out_dir / "localization.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    if attacks is not None and not attacks.empty:
        fig, ax = plt.subplots(figsize=(6, 4))
        for mode, group in attacks.groupby("mode"):
            ax.plot(group["si_snr_mean"], group["detection_accuracy"], marker="o", label=mode)
        ax.set_xlabel("SI-SNR (dB)")
        ax.set_ylabel("Detection accuracy")
        ax.legend()
        ax.grid(True, alpha=0.3)
        path = out_dir / "attacks.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    for path in written:
        logger.info("Plot written: %s", path)
    return written
