#!/usr/bin/env python3
"""
Test suite for VoxMark adversarial attacks
"""

import os
import sys
import unittest

import numpy as np
import pandas as pd
import torch

# Add src to path for imports
project_root = os.path.join(os.path.dirname(__file__), '..', '..')
sys.path.insert(0, project_root)

from src.voxmark.attacks.adversarial import (AttackConfig, accuracy_at_quality, adversarial_attack, attack_sweep,
                                             noise_attack, train_surrogate)
from src.voxmark.core.audio import AudioClip
from src.voxmark.core.errors import ConfigurationError, ValidationError
from src.voxmark.core.losses import si_snr
from src.voxmark.core.models import ModelConfig, create_models

TINY_MODEL = ModelConfig(base_channels=4, latent_dim=8, hidden_dim=16, message_bits=4, lstm_layers=1,
                         disc_channels=4)


def clip(seed=0, length=640):
    return AudioClip(0.3 * np.sin(np.linspace(0, 40 * np.pi, length)) +
                     0.01 * np.random.default_rng(seed).standard_normal(length), 16000)


class TestAttackConfig(unittest.TestCase):
    """Attack configuration"""

    def test_defaults(self):
        cfg = AttackConfig()
        self.assertEqual((cfg.alpha, cfg.steps, cfg.target), (1e-3, 100, 'remove'))
        self.assertEqual(cfg.label, 0.0)
        self.assertEqual(AttackConfig(target='forge').label, 1.0)

    def test_invalid(self):
        with self.assertRaises(ConfigurationError):
            AttackConfig(alpha=0.0)
        with self.assertRaises(ConfigurationError):
            AttackConfig(target='erase')
        with self.assertRaises(ConfigurationError):
            AttackConfig.from_dict({'epsilon': 0.1})


class TestAdversarialAttack(unittest.TestCase):
    """Bounded gradient attack"""

    def setUp(self):
        self.models = create_models(TINY_MODEL, seed=0)

    def test_distortion_is_bounded(self):
        x = clip()
        for alpha in (1e-4, 1e-3, 1e-2):
            attacked = adversarial_attack(self.models, x, AttackConfig(alpha=alpha, steps=3))
            self.assertIsInstance(attacked, AudioClip)
            distortion = np.max(np.abs(attacked.samples.astype(np.float64) - x.samples.astype(np.float64)))
            self.assertLessEqual(distortion, alpha + 1e-7)

    def test_tensor_input_keeps_shape(self):
        x = torch.as_tensor(clip().samples).repeat(2, 1)
        attacked = adversarial_attack(self.models, x, AttackConfig(steps=2))
        self.assertEqual(attacked.shape, x.shape)

    def test_detector_state_restored(self):
        detector = self.models.detector
        first = next(detector.parameters())
        first.requires_grad_(False)
        detector.train()
        adversarial_attack(detector, clip(), AttackConfig(steps=2))
        self.assertFalse(first.requires_grad)
        self.assertTrue(all(p.requires_grad for p in list(detector.parameters())[1:]))
        self.assertTrue(detector.training)
        self.assertTrue(all(p.grad is None for p in detector.parameters()))

    def test_zero_steps_is_deterministic(self):
        a = adversarial_attack(self.models, clip(), AttackConfig(steps=0, seed=3))
        b = adversarial_attack(self.models, clip(), AttackConfig(steps=0, seed=3))
        np.testing.assert_array_equal(a.samples, b.samples)


class TestNoiseAndSurrogate(unittest.TestCase):
    """Noise baseline and surrogate training"""

    def test_noise_scale(self):
        x = AudioClip(np.zeros(20000), 16000)
        attacked = noise_attack(x, 0.01, seed=1)
        self.assertAlmostEqual(float(np.std(attacked.samples)), 0.01, delta=0.001)

    def test_surrogate_needs_both_classes(self):
        with self.assertRaises(ConfigurationError):
            train_surrogate([clip()], [], steps=1, model_config=TINY_MODEL)

    def test_surrogate_trains(self):
        marked = [clip(i) for i in range(5)]
        genuine = [clip(10 + i) for i in range(5)]
        result = train_surrogate(marked, genuine, steps=2, model_config=TINY_MODEL, batch_size=4)
        self.assertGreaterEqual(result.val_accuracy, 0.0)
        self.assertLessEqual(result.val_accuracy, 1.0)
        self.assertFalse(result.detector.training)

    def test_surrogate_leaves_global_rng_untouched(self):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        train_surrogate([clip(0), clip(1)], [clip(2), clip(3)], steps=1, seed=7, model_config=TINY_MODEL,
                        batch_size=2)
        torch.testing.assert_close(torch.rand(3), expected)


class TestAttackSweep(unittest.TestCase):
    """Quality versus accuracy sweep"""

    def setUp(self):
        self.models = create_models(TINY_MODEL, seed=0)
        self.clips = [clip(0), clip(1)]

    def test_columns_and_rows(self):
        table = attack_sweep(self.models, self.clips, [1e-3, 1e-2], modes=('whitebox', 'noise'),
                             cfg=AttackConfig(steps=1))
        self.assertEqual(list(table.columns), ['mode', 'alpha', 'si_snr_mean', 'detection_accuracy'])
        self.assertEqual(len(table), 4)
        noise = table[table['mode'] == 'noise']
        self.assertGreater(noise.si_snr_mean.iloc[0], noise.si_snr_mean.iloc[1])
        self.assertTrue(table.detection_accuracy.between(0, 1).all())

    def test_noise_quality_matches_direct_computation(self):
        table = attack_sweep(self.models, self.clips[:1], [1e-2], modes=('noise',))
        expected = si_snr(self.clips[0], noise_attack(self.clips[0], 1e-2, 0))
        self.assertAlmostEqual(table.si_snr_mean.iloc[0], expected, places=6)

    def test_proxy_required(self):
        with self.assertRaises(ConfigurationError):
            attack_sweep(self.models, self.clips, [1e-3], modes=('blackbox',))

    def test_unknown_mode(self):
        with self.assertRaises(ConfigurationError):
            attack_sweep(self.models, self.clips, [1e-3], modes=('fgsm',))

    def test_no_clips(self):
        with self.assertRaises(ValidationError):
            attack_sweep(self.models, [], [1e-3])


class TestAccuracyAtQuality(unittest.TestCase):
    """Mode comparison at matched SI-SNR"""

    def setUp(self):
        self.table = pd.DataFrame({
            'mode': ['whitebox', 'whitebox', 'noise', 'noise', 'noise'],
            'alpha': [1e-3, 1e-2, 1e-3, 1e-2, 1e-1],
            'si_snr_mean': [40.0, 20.0, 40.0, 20.0, 10.0],
            'detection_accuracy': [0.2, 0.0, 1.0, 0.6, 0.4],
        })

    def test_interpolates_each_mode(self):
        result = accuracy_at_quality(self.table, [30.0])
        self.assertEqual(list(result.columns), ['si_snr', 'whitebox', 'noise'])
        self.assertAlmostEqual(result.whitebox.iloc[0], 0.1)
        self.assertAlmostEqual(result.noise.iloc[0], 0.8)

    def test_default_grid_spans_shared_range(self):
        result = accuracy_at_quality(self.table, points=5)
        np.testing.assert_allclose(result.si_snr, [20.0, 25.0, 30.0, 35.0, 40.0])
        self.assertFalse(result.isna().any().any())
        self.assertTrue((result.whitebox <= result.noise).all())

    def test_outside_measured_range_is_nan(self):
        result = accuracy_at_quality(self.table, [10.0])
        self.assertTrue(np.isnan(result.whitebox.iloc[0]))
        self.assertAlmostEqual(result.noise.iloc[0], 0.4)

    def test_disjoint_ranges(self):
        table = self.table.assign(si_snr_mean=[60.0, 50.0, 30.0, 20.0, 10.0])
        with self.assertRaises(ValidationError):
            accuracy_at_quality(table)

    def test_empty_table(self):
        with self.assertRaises(ValidationError):
            accuracy_at_quality(self.table.iloc[:0])


if __name__ == '__main__':
    unittest.main(verbosity=2)
