#!/usr/bin/env python3
"""
VoxMark Statistics Module

False-positive-rate theory for bit-matching detectors: exact binomial tail
probabilities, Monte-Carlo validation and empirical measurement on decoded
bits from genuine audio.

Author: VoxMark Team
Version: 1.0
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from scipy.special import betainc

from .errors import ValidationError
from .models import Message

logger = logging.getLogger(__name__)

EXACT_MAX_BITS = 64

BitsLike = Union[Message, Sequence[int], np.ndarray]


def _bits(value: BitsLike) -> np.ndarray:
    if isinstance(value, Message):
        return np.asarray(value.bits, dtype=np.int64)
    return np.asarray(value, dtype=np.int64).reshape(-1)


@dataclass(frozen=True)
class BitMatchTest:
    """Flag a message when at least ``tau`` of ``k`` bits match."""

    k: int
    tau: int

    def __post_init__(self):
        if self.k < 0 or not 0 <= self.tau <= self.k:
            raise ValidationError(f"Need 0 <= tau <= k, got k={self.k}, tau={self.tau}")

    def flags(self, m: BitsLike, reference: BitsLike) -> bool:
        return bit_match(m, reference) >= self.tau

    @property
    def fpr(self) -> float:
        return theoretical_fpr(self.k, self.tau)


def bit_match(m: BitsLike, m_prime: BitsLike) -> int:
    """
    Number of positions where two messages agree.

    Raises:
        ValidationError: If the lengths differ
    """
    a, b = _bits(m), _bits(m_prime)
    if a.shape != b.shape:
        raise ValidationError(f"Message lengths differ: {a.size} vs {b.size}")
    return int(np.sum(a == b))


def exact_tail(k: int, tau: int) -> Fraction:
    """P(Binomial(k, 1/2) >= tau) as an exact rational."""
    if not 0 <= tau <= k:
        raise ValidationError(f"Need 0 <= tau <= k, got k={k}, tau={tau}")
    return Fraction(sum(math.comb(k, i) for i in range(tau, k + 1)), 2 ** k)


def theoretical_fpr(k: int, tau: int) -> float:
    """
    False-positive rate of the bit-matching test on random messages.

    Uses an exact rational sum for k <= 64 and the regularized incomplete
    beta I_{1/2}(tau, k - tau + 1) beyond.

    Args:
        k: Payload bits
        tau: Matching-bits threshold, 0 <= tau <= k

    Returns:
        float: P(Binomial(k, 1/2) >= tau)
    """
    if not 0 <= tau <= k:
        raise ValidationError(f"Need 0 <= tau <= k, got k={k}, tau={tau}")
    if tau == 0:
        return 1.0
    if k <= EXACT_MAX_BITS:
        return float(exact_tail(k, tau))
    return float(betainc(tau, k - tau + 1, 0.5))


def monte_carlo_fpr(k: int = 16, p: float = 0.5, trials: int = 100000, seed: int = 0,
                    taus: Optional[Iterable[int]] = None,
                    reference: Optional[BitsLike] = None) -> pd.DataFrame:
    """
    Simulated FPR of the bit-matching test.

    Each trial draws k i.i.d. Bernoulli(p) bits and counts matches against
    the reference message (all zeros by default).

    Returns:
        pd.DataFrame: Columns tau, theoretical, empirical, stderr
    """
    if trials < 1:
        raise ValidationError(f"trials must be >= 1, got {trials}")
    generator = torch.Generator().manual_seed(seed)
    bits = (torch.rand(trials, k, generator=generator, dtype=torch.float64) < p).numpy().astype(np.int64)
    ref = np.zeros(k, dtype=np.int64) if reference is None else _bits(reference)
    matches = (bits == ref[None, :]).sum(axis=1)
    logger.debug("Monte-Carlo FPR: k=%d p=%.3f trials=%d", k, p, trials)
    return _tail_table(matches, k, taus)


def _tail_table(matches: np.ndarray, k: int, taus: Optional[Iterable[int]]) -> pd.DataFrame:
    taus = list(range(k + 1)) if taus is None else [int(t) for t in taus]
    n = matches.size
    rows = []
    for tau in taus:
        theory = theoretical_fpr(k, tau)
        empirical = float(np.mean(matches >= tau))
        rows.append({
            "tau": tau,
            "theoretical": theory,
            "empirical": empirical,
            # binomial standard error under the theoretical rate
            "stderr": math.sqrt(theory * (1.0 - theory) / n),
        })
    return pd.DataFrame(rows, columns=["tau", "theoretical", "empirical", "stderr"])


def empirical_bit_fpr(decoded_bits: Union[np.ndarray, Sequence[BitsLike]],
                      reference: Optional[BitsLike] = None,
                      taus: Optional[Iterable[int]] = None) -> pd.DataFrame:
    """FPR of genuine-clip decoded bits against a reference message (default all zeros)."""
    bits = np.stack([_bits(b) for b in decoded_bits]) if not isinstance(decoded_bits, np.ndarray) \
        else np.asarray(decoded_bits, dtype=np.int64)
    if bits.ndim != 2 or bits.shape[0] < 1:
        raise ValidationError("Need at least one decoded message")
    k = bits.shape[1]
    ref = np.zeros(k, dtype=np.int64) if reference is None else _bits(reference)
    if ref.size != k:
        raise ValidationError(f"Reference has {ref.size} bits, decoded messages have {k}")
    return _tail_table((bits == ref[None, :]).sum(axis=1), k, taus)


def bit_score_histogram(soft_bits: np.ndarray, bins: int = 20) -> pd.DataFrame:
    """
    Histogram of per-bit soft scores in [0, 1].

    Counts sum to the number of clips times the number of bits.
    """
    values = np.clip(np.asarray(soft_bits, dtype=np.float64).reshape(-1), 0.0, 1.0)
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return pd.DataFrame({"bin_low": edges[:-1], "bin_high": edges[1:], "count": counts})


@dataclass
class FPRReport:
    table: pd.DataFrame
    histogram: Optional[pd.DataFrame] = None


def empirical_fpr(scores: Sequence[float], thresholds: Iterable[float],
                  soft_bits: Optional[np.ndarray] = None, bins: int = 20) -> FPRReport:
    """
    Fraction of genuine clips flagged at each detection threshold.

    Args:
        scores: Detection scores of genuine (unwatermarked) clips
        thresholds: Thresholds to evaluate; a clip is flagged when score > threshold
        soft_bits: Optional (clips, k) per-bit soft scores for the bias histogram
        bins: Histogram bin count

    Returns:
        FPRReport: Per-threshold FPR table and optional bit-score histogram
    """
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    if values.size < 1:
        raise ValidationError("empirical_fpr needs at least one genuine clip")
    rows = [{"threshold": float(t), "fpr": float(np.mean(values > t))} for t in thresholds]
    histogram = bit_score_histogram(soft_bits, bins) if soft_bits is not None else None
    return FPRReport(pd.DataFrame(rows, columns=["threshold", "fpr"]), histogram)
