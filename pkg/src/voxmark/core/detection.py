#!/usr/bin/env python3
"""
VoxMark Core Detection Module

Detection, localization and attribution on top of the detector's
per-sample outputs, the evaluation metrics built on them (IoU, ROC AUC,
best-accuracy and calibrated thresholds), and a sliding-window baseline
used to benchmark single-pass detection.

Author: VoxMark Team
Version: 1.0
"""

import datetime
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.stats import rankdata

from .audio import AudioClip, resample
from .errors import NoWatermarkError, ValidationError
from .models import DetectorOutput, Message, ModelSource, ParameterStore, detector_forward

logger = logging.getLogger(__name__)

REGISTRY_HEADER = "# voxmark-registry v1"
DEFAULT_CHECKPOINT_PATHS = ("checkpoints/latest.pt",)

# PresenceMask: 1-D integer array of 0/1 labels, one per sample.
PresenceMask = np.ndarray


@dataclass(frozen=True)
class DetectionResult:
    score: float
    flagged: bool
    threshold: float


@dataclass(frozen=True)
class TimedDetection:
    """Detection result with wall-clock time and detector pass count."""

    result: DetectionResult
    seconds: float
    passes: int


@dataclass(frozen=True)
class ThresholdChoice:
    threshold: float
    accuracy: float
    tpr: float
    fpr: float


def _presence(out: DetectorOutput) -> np.ndarray:
    presence = out.presence.detach().cpu().to(torch.float64).numpy().reshape(-1)
    if presence.size == 0:
        raise ValidationError("Detector output is empty")
    return presence


def _mask(mask: Union[PresenceMask, Sequence[int], torch.Tensor]) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask).reshape(-1).astype(bool)


def detect(out: DetectorOutput, threshold: float = 0.5) -> DetectionResult:
    """
    Clip-level decision: mean presence strictly above the threshold.

    Raises:
        ValidationError: If the output is empty
    """
    score = float(np.mean(_presence(out)))
    return DetectionResult(score=score, flagged=score > threshold, threshold=float(threshold))


def localize(out: DetectorOutput, threshold: float = 0.5) -> PresenceMask:
    """Per-sample mask: 1 where presence strictly exceeds the threshold."""
    return (_presence(out) > threshold).astype(np.int64)


def iou(pred: PresenceMask, truth: PresenceMask) -> float:
    """Intersection over union of two masks; 1.0 when both are empty."""
    a, b = _mask(pred), _mask(truth)
    if a.shape != b.shape:
        raise ValidationError(f"Mask lengths differ: {a.size} vs {b.size}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def soft_message(out: DetectorOutput, mask: PresenceMask) -> np.ndarray:
    """Mean sigmoid of the message logits over masked samples, one value per bit."""
    selected = _mask(mask)
    logits = out.message_logits.detach().cpu().to(torch.float64)
    if selected.size != logits.shape[0]:
        raise ValidationError(f"Mask of {selected.size} samples does not match output of {logits.shape[0]}")
    if not selected.any():
        raise NoWatermarkError("Cannot decode a message from an empty mask")
    rows = torch.as_tensor(selected)
    return torch.sigmoid(logits[rows]).mean(dim=0).numpy()


def decode_message(out: DetectorOutput, mask: PresenceMask) -> Message:
    """
    Average message over the masked samples.

    Raises:
        NoWatermarkError: If the mask has no positive sample
    """
    return Message(tuple(int(v > 0.5) for v in soft_message(out, mask)))


def mask_runlengths(mask: PresenceMask) -> List[List[int]]:
    """Runs of ones as [start, length] pairs."""
    m = _mask(mask).astype(np.int8)
    edges = np.diff(np.concatenate([[0], m, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [[int(s), int(e - s)] for s, e in zip(starts, ends)]


class AttributionRegistry:
    """
    Ordered (model_id, Message) pairs persisted as a text manifest.

    File layout: a header line ``# voxmark-registry v1 bits=<b>`` followed
    by one ``model_id<TAB>hex`` line per entry.
    """

    def __init__(self, entries: Sequence[Tuple[str, Message]], num_bits: Optional[int] = None):
        self.entries = [(str(model_id), message) for model_id, message in entries]
        ids = [model_id for model_id, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("Registry model ids must be unique")
        lengths = {len(message) for _, message in self.entries}
        if num_bits is None:
            num_bits = lengths.pop() if len(lengths) == 1 else 0
            if lengths:
                raise ValidationError("Registry messages must all have the same length")
        elif lengths - {num_bits}:
            raise ValidationError(f"Registry messages must all have {num_bits} bits")
        self.num_bits = int(num_bits)
        self._matrix = np.array([m.bits for _, m in self.entries], dtype=np.int8).reshape(len(self.entries),
                                                                                          self.num_bits)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def random(cls, n: int, num_bits: int, generator: Optional[torch.Generator] = None,
               prefix: str = "model") -> "AttributionRegistry":
        bits = torch.randint(0, 2, (n, num_bits), generator=generator).tolist()
        return cls([(f"{prefix}-{i:05d}", Message(tuple(row))) for i, row in enumerate(bits)], num_bits)

    def nearest(self, message: Message) -> Tuple[str, int]:
        """Hamming argmin; ties resolve to the lowest registry index."""
        if not self.entries:
            raise ValidationError("Registry is empty")
        if len(message) != self.num_bits:
            raise ValidationError(f"Message has {len(message)} bits, registry has {self.num_bits}")
        distances = np.count_nonzero(self._matrix != np.asarray(message.bits, dtype=np.int8), axis=1)
        index = int(np.argmin(distances))
        return self.entries[index][0], int(distances[index])

    def save(self, path: Union[str, Path]):
        path = Path(path)
        lines = [f"{REGISTRY_HEADER} bits={self.num_bits}"]
        lines += [f"{model_id}\t{message.to_hex()}" for model_id, message in self.entries]
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(suffix=".tmp", dir=str(path.parent))
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        os.replace(tmp_name, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AttributionRegistry":
        with open(path, "r", encoding="utf-8") as f:
            lines = [line.rstrip("\n") for line in f if line.strip()]
        if not lines or not lines[0].startswith(REGISTRY_HEADER):
            raise ValidationError(f"{path} is not a voxmark registry")
        try:
            num_bits = int(lines[0].split("bits=")[1])
        except (IndexError, ValueError) as e:
            raise ValidationError(f"Registry header in {path} has no bit count") from e
        entries = []
        for number, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{path}:{number}: expected model_id<TAB>hex")
            entries.append((parts[0], Message.from_hex(parts[1], num_bits)))
        logger.info("Loaded registry %s: %d entries, %d bits", path, len(entries), num_bits)
        return cls(entries, num_bits)


def attribute(out: DetectorOutput, registry: AttributionRegistry, det_threshold: float = 0.5,
              loc_threshold: float = 0.5) -> Tuple[Optional[str], Optional[int]]:
    """
    Closest registered model for a flagged clip.

    Returns:
        Tuple of (model_id, hamming distance), or (None, None) when the
        clip is not flagged
    """
    if not detect(out, det_threshold).flagged:
        return None, None
    mask = localize(out, loc_threshold)
    if not mask.any():
        mask = np.ones_like(mask)
    return registry.nearest(decode_message(out, mask))


def _scores(values: Sequence[float], label: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValidationError(f"{label} scores are empty")
    return arr


def roc_auc(scores_pos: Sequence[float], scores_neg: Sequence[float]) -> float:
    """P(pos > neg) + 0.5 P(pos == neg), from the rank-sum statistic."""
    pos, neg = _scores(scores_pos, "Positive"), _scores(scores_neg, "Negative")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def best_accuracy_threshold(scores_pos: Sequence[float], scores_neg: Sequence[float]) -> ThresholdChoice:
    """
    Threshold maximizing balanced accuracy (TPR + 1 - FPR) / 2.

    Candidates are midpoints between sorted unique scores plus one value
    below and one above all scores; ties go to the lowest threshold.
    """
    pos, neg = _scores(scores_pos, "Positive"), _scores(scores_neg, "Negative")
    unique = np.unique(np.concatenate([pos, neg]))
    candidates = np.concatenate([[unique[0] - 1e-6], (unique[:-1] + unique[1:]) / 2.0, [unique[-1] + 1e-6]])
    best = None
    for threshold in candidates:
        tpr = float(np.mean(pos > threshold))
        fpr = float(np.mean(neg > threshold))
        accuracy = (tpr + 1.0 - fpr) / 2.0
        if best is None or accuracy > best.accuracy + 1e-12:
            best = ThresholdChoice(float(threshold), accuracy, tpr, fpr)
    return best


def calibrate_threshold(scores_neg: Sequence[float], target_fpr: float = 1e-3) -> float:
    """Smallest threshold whose empirical FPR on negatives is at most target_fpr."""
    neg = np.sort(_scores(scores_neg, "Negative"))
    candidates = np.concatenate([[neg[0] - 1e-6], np.unique(neg)])
    for threshold in candidates:
        if np.mean(neg > threshold) <= target_fpr:
            return float(threshold)
    return float(neg[-1])


def timed_detect(model: ModelSource, clip: AudioClip, threshold: float = 0.5) -> TimedDetection:
    """Single-pass detection with wall-clock timing."""
    start = time.perf_counter()
    with torch.no_grad():
        result = detect(detector_forward(model, clip), threshold)
    return TimedDetection(result, time.perf_counter() - start, 1)


def sliding_window_detect(model: ModelSource, clip: AudioClip, window: float = 1.0, shift: float = 0.05,
                          threshold: float = 0.5) -> TimedDetection:
    """
    Brute-force baseline: one detector pass per window position.

    The clip score is the maximum window mean.

    Raises:
        ValidationError: If the clip is shorter than one window
    """
    win = int(round(window * clip.sample_rate))
    hop = int(round(shift * clip.sample_rate))
    if clip.num_samples < win:
        raise ValidationError(f"Clip of {clip.num_samples} samples is shorter than the {win}-sample window")
    if hop < 1:
        raise ValidationError(f"Window shift {shift}s is below one sample")
    x = clip.to_tensor()
    starts = range(0, clip.num_samples - win + 1, hop)

    start_time = time.perf_counter()
    best = 0.0
    passes = 0
    with torch.no_grad():
        for s in starts:
            out = detector_forward(model, x[s: s + win])
            best = max(best, float(out.presence.mean()))
            passes += 1
    elapsed = time.perf_counter() - start_time
    logger.debug("Sliding-window detection: %d passes in %.3fs", passes, elapsed)
    return TimedDetection(DetectionResult(best, best > threshold, float(threshold)), elapsed, passes)


class ModelManager:
    """
    Resolves and loads a watermarking checkpoint.

    Search order: explicit path, ``$VOXMARK_CHECKPOINT``, then the
    default checkpoint locations.
    """

    def __init__(self, checkpoint_path: Optional[str] = None, device: str = "cpu"):
        self.checkpoint_path = checkpoint_path
        self.device = device
        self.store: Optional[ParameterStore] = None

    def _find_checkpoint_file(self) -> bool:
        """
        Find the checkpoint using fallback paths.

        Returns:
            bool: True if found; self.checkpoint_path is updated
        """
        if self.checkpoint_path:
            found = os.path.exists(self.checkpoint_path)
            logger.info("%s Checkpoint %s", "✓" if found else "✗", self.checkpoint_path)
            return found

        candidates = [os.environ.get("VOXMARK_CHECKPOINT")] + list(DEFAULT_CHECKPOINT_PATHS)
        for path in filter(None, candidates):
            if os.path.exists(path):
                logger.info("✓ Using checkpoint: %s", path)
                self.checkpoint_path = path
                return True
            logger.warning("✗ Checkpoint not found: %s", path)
        return False

    def load_model(self) -> ParameterStore:
        """
        Load the checkpoint and build its networks.

        Raises:
            FileNotFoundError: If no checkpoint can be found
            ConfigurationError: If the file is not a compatible checkpoint
        """
        if not self._find_checkpoint_file():
            raise FileNotFoundError(f"Checkpoint not found: {self.checkpoint_path or 'no candidate path'}")
        self.store = ParameterStore.load(self.checkpoint_path)
        self.store.build(self.device)
        logger.info("Model loaded: step %d, %d message bits, config %s", self.store.step,
                    self.store.model_config.message_bits, self.store.config_hash[:12])
        return self.store


class DetectionProcessor:
    """
    Runs detection, localization, decoding and attribution per clip and
    keeps running statistics. Safe to share between worker threads.
    """

    def __init__(self, model: ModelSource, threshold: float = 0.5, loc_threshold: float = 0.5,
                 registry: Optional[AttributionRegistry] = None, sample_rate: int = 16000):
        self.model = model
        self.threshold = threshold
        self.loc_threshold = loc_threshold
        self.registry = registry
        self.sample_rate = sample_rate
        self._lock = threading.Lock()
        self.stats = {
            "files_processed": 0,
            "flagged": 0,
            "score_sum": 0.0,
            "mean_score": 0.0,
            "start_time": datetime.datetime.now(),
        }

    def process_clip(self, clip: AudioClip, name: str) -> Dict[str, Any]:
        """
        Build the JSON record for one clip.

        Returns:
            Dict with keys file, score, flagged, mask_runlengths,
            decoded_bits, model_id, distance
        """
        clip = resample(clip, self.sample_rate)
        with torch.no_grad():
            out = detector_forward(self.model, clip)
        result = detect(out, self.threshold)
        mask = localize(out, self.loc_threshold)

        decoded_bits = None
        model_id, distance = None, None
        if result.flagged and out.num_bits > 0:
            decode_mask = mask if mask.any() else np.ones_like(mask)
            decoded_bits = decode_message(out, decode_mask).to_hex()
            if self.registry is not None:
                model_id, distance = attribute(out, self.registry, self.threshold, self.loc_threshold)

        with self._lock:
            self.stats["files_processed"] += 1
            self.stats["flagged"] += int(result.flagged)
            self.stats["score_sum"] += result.score
            self.stats["mean_score"] = self.stats["score_sum"] / self.stats["files_processed"]

        logger.debug("%s: score=%.4f flagged=%s", name, result.score, result.flagged)
        return {
            "file": name,
            "score": result.score,
            "flagged": result.flagged,
            "mask_runlengths": mask_runlengths(mask),
            "decoded_bits": decoded_bits,
            "model_id": model_id,
            "distance": distance,
        }

    def get_statistics(self) -> Dict[str, Any]:
        with self._lock:
            stats = dict(self.stats)
        stats["elapsed_seconds"] = (datetime.datetime.now() - stats.pop("start_time")).total_seconds()
        return stats
