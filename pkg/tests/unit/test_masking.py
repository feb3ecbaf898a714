#!/usr/bin/env python3
"""
Test suite for VoxMark watermark masking
"""

import os
import sys
import unittest

import numpy as np
import torch

# Add src to path for imports
project_root = os.path.join(os.path.dirname(__file__), '..', '..')
sys.path.insert(0, project_root)

from src.voxmark.core.audio import AudioClip
from src.voxmark.core.errors import ValidationError
from src.voxmark.training.masking import (BRANCH_PROBABILITIES, BRANCHES, MaskWindow, apply_mask_windows,
                                          draw_mask_windows, mask_batch, mask_watermark, span_length,
                                          window_sources)


class TestWindows(unittest.TestCase):
    """Window drawing"""

    def test_span_length(self):
        self.assertEqual(span_length(16000, 5), 1600)
        with self.assertRaises(ValidationError):
            span_length(16000, 0)

    def test_windows_fit(self):
        windows = draw_mask_windows(16000, 5, torch.Generator().manual_seed(0))
        self.assertEqual(len(windows), 5)
        for window in windows:
            self.assertEqual(window.length, 1600)
            self.assertLessEqual(window.start + window.length, 16000)

    def test_branch_frequencies(self):
        generator = torch.Generator().manual_seed(1)
        counts = {name: 0 for name in BRANCHES}
        runs = 10_000
        for _ in range(runs):
            for window in draw_mask_windows(16000, 5, generator):
                self.assertEqual(window.length, 1600)
                counts[window.branch] += 1
        total = 5 * runs
        for name, probability in zip(BRANCHES, BRANCH_PROBABILITIES):
            stderr = (probability * (1 - probability) / total) ** 0.5
            self.assertAlmostEqual(counts[name] / total, probability, delta=4 * stderr, msg=name)

    def test_unknown_branch(self):
        with self.assertRaises(ValidationError):
            MaskWindow(0, 10, 'shuffle')

    def test_later_windows_win_and_truncate(self):
        sources = window_sources(10, [MaskWindow(2, 4, 'zero'), MaskWindow(4, 10, 'revert')])
        keep, zero, revert = (BRANCHES.index(b) for b in ('keep', 'zero', 'revert'))
        self.assertEqual(sources.tolist(), [keep, keep, zero, zero] + [revert] * 6)


class TestMixing(unittest.TestCase):
    """Per-sample source mixing"""

    def test_each_branch(self):
        s = torch.tensor([1.0, 2.0, 3.0, 4.0])
        s_w = torch.tensor([10.0, 20.0, 30.0, 40.0], requires_grad=True)
        neighbor = torch.tensor([-1.0, -2.0, -3.0, -4.0])
        sources = np.array([BRANCHES.index(b) for b in ('keep', 'revert', 'zero', 'neighbor')])
        mixed, labels = apply_mask_windows(s, s_w, neighbor, sources)
        self.assertEqual(mixed.tolist(), [10.0, 2.0, 0.0, -4.0])
        self.assertEqual(labels.tolist(), [1.0, 0.0, 0.0, 0.0])
        mixed.sum().backward()
        self.assertEqual(s_w.grad.tolist(), [1.0, 0.0, 0.0, 0.0])

    def test_shape_mismatch(self):
        with self.assertRaises(ValidationError):
            apply_mask_windows(torch.zeros(3), torch.zeros(4), torch.zeros(4), np.zeros(4, dtype=int))

    def test_clip_input_gives_integer_mask(self):
        rng = np.random.default_rng(0)
        s = AudioClip(rng.uniform(-0.5, 0.5, 4000), 16000)
        s_w = AudioClip(s.samples + 0.01, 16000)
        neighbor = AudioClip(rng.uniform(-0.5, 0.5, 4000), 16000)
        mixed, labels = mask_watermark(s, s_w, 3, neighbor, torch.Generator().manual_seed(2))
        self.assertIsInstance(mixed, AudioClip)
        self.assertEqual(labels.dtype, np.int64)
        marked = labels == 1
        np.testing.assert_array_equal(mixed.samples[marked], s_w.samples[marked])

    def test_length_mismatch(self):
        with self.assertRaises(ValidationError):
            mask_watermark(torch.zeros(100), torch.zeros(100), 2, torch.zeros(90))

    def test_batch_shapes_and_labels(self):
        s = torch.randn(3, 1, 2000, generator=torch.Generator().manual_seed(0))
        s_w = s + 0.01
        mixed, labels = mask_batch(s, s_w, 4, torch.Generator().manual_seed(1))
        self.assertEqual(tuple(mixed.shape), (3, 1, 2000))
        self.assertEqual(tuple(labels.shape), (3, 1, 2000))
        kept = labels.bool()
        torch.testing.assert_close(mixed[kept], s_w[kept])


if __name__ == '__main__':
    unittest.main(verbosity=2)
