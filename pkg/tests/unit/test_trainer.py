#!/usr/bin/env python3
"""
Test suite for VoxMark training

Tests for the localization and decoding losses, gradient balancing, the
WAV dataset and short training runs with checkpoint/resume.
"""

import json
import math
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np
import soundfile as sf
import torch

# Add src to path for imports
project_root = os.path.join(os.path.dirname(__file__), '..', '..')
sys.path.insert(0, project_root)

from src.voxmark.core.errors import ConfigurationError, ValidationError
from src.voxmark.core.losses import LossWeights
from src.voxmark.core.models import DetectorOutput, Message, ModelConfig, ParameterStore
from src.voxmark.training.trainer import (METRIC_KEYS, GradientBalancer, TrainConfig, WatermarkTrainer,
                                          WavDataset, balance_and_step, dec_loss, loc_loss, train_loop)

TINY_MODEL = ModelConfig(base_channels=4, latent_dim=8, hidden_dim=16, message_bits=4, lstm_layers=1,
                         disc_channels=4)


def tiny_train_config(**overrides):
    values = dict(batch_size=2, sample_length=3200, total_steps=1, checkpoint_interval=1, mask_windows=2,
                  loud_window=512, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def write_corpus(directory, count=3, length=4000):
    rng = np.random.default_rng(0)
    for i in range(count):
        sf.write(os.path.join(directory, f'clip_{i}.wav'), 0.3 * rng.standard_normal(length).clip(-3, 3) / 3,
                 16000, subtype='PCM_16')


class TestLocalizationAndDecodingLosses(unittest.TestCase):
    """Per-sample BCE losses"""

    def test_loc_loss_at_half(self):
        presence = torch.full((2, 10), 0.5, dtype=torch.float64)
        labels = torch.randint(0, 2, (2, 10), generator=torch.Generator().manual_seed(0))
        self.assertAlmostEqual(float(loc_loss(presence, labels)), math.log(2), places=10)

    def test_loc_loss_clamps_certain_mistakes(self):
        value = float(loc_loss(torch.zeros(4, dtype=torch.float64), torch.ones(4)))
        self.assertTrue(math.isfinite(value))

    def test_loc_loss_shape_mismatch(self):
        with self.assertRaises(ValidationError):
            loc_loss(torch.zeros(4), torch.zeros(5))

    def test_loc_loss_gradient(self):
        presence = torch.rand(3, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        presence = (0.1 + 0.8 * presence).requires_grad_(True)
        labels = torch.randint(0, 2, (3, 8), generator=torch.Generator().manual_seed(2))
        self.assertTrue(torch.autograd.gradcheck(lambda p: loc_loss(p, labels), (presence,)))

    def test_dec_loss_at_zero_logits(self):
        out = DetectorOutput(torch.ones(6), torch.zeros(6, 4, dtype=torch.float64))
        value = dec_loss(out, Message((1, 0, 1, 0)), torch.tensor([1, 1, 0, 0, 1, 0]))
        self.assertAlmostEqual(float(value), math.log(2), places=10)

    def test_dec_loss_without_marked_samples(self):
        logits = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
        value = dec_loss(DetectorOutput(torch.ones(5), logits), Message((1, 0, 1, 0)), torch.zeros(5))
        self.assertEqual(float(value), 0.0)
        self.assertTrue(value.requires_grad)

    def test_dec_loss_batched_messages(self):
        logits = torch.randn(2, 7, 4, generator=torch.Generator().manual_seed(3), dtype=torch.float64,
                             requires_grad=True)
        bits = torch.tensor([[1, 0, 1, 0], [0, 0, 1, 1]])
        labels = torch.randint(0, 2, (2, 7), generator=torch.Generator().manual_seed(4))
        labels[0, 0] = 1
        self.assertTrue(torch.autograd.gradcheck(
            lambda l: dec_loss(DetectorOutput(torch.ones(2, 7), l), bits, labels), (logits,)))

    def test_dec_loss_label_mismatch(self):
        with self.assertRaises(ValidationError):
            dec_loss(DetectorOutput(torch.ones(5), torch.zeros(5, 4)), Message((1, 0, 1, 0)), torch.ones(6))


class TestGradientBalancing(unittest.TestCase):
    """Normalized gradient combination and the optimizer step"""

    def test_combined_gradient_is_normalized(self):
        output = torch.randn(16, requires_grad=True)
        balancer = GradientBalancer({'l1': 2.0})
        combined = balancer.combined_gradient({'l1': 5.0 * output.sum()}, output)
        torch.testing.assert_close(combined, torch.full((16,), 2.0 / 4.0))
        self.assertAlmostEqual(balancer.last_norms['l1'], 20.0, places=4)

    def test_loss_scale_does_not_matter(self):
        output = torch.randn(16, generator=torch.Generator().manual_seed(0), requires_grad=True)
        balancer = GradientBalancer({'l1': 1.0, 'msspec': 3.0})
        small = balancer.combined_gradient({'l1': output.abs().sum(), 'msspec': output.pow(2).sum()}, output)
        large = balancer.combined_gradient({'l1': 100 * output.abs().sum(), 'msspec': 0.01 * output.pow(2).sum()},
                                           output)
        torch.testing.assert_close(small, large)

    def test_zero_weight_and_missing_losses_skipped(self):
        output = torch.randn(4, requires_grad=True)
        balancer = GradientBalancer({'l1': 0.0, 'adv': 1.0})
        combined = balancer.combined_gradient({'l1': output.sum()}, output)
        self.assertTrue(torch.all(combined == 0))
        self.assertEqual(balancer.last_norms, {})

    def test_step_updates_parameters(self):
        weight = torch.nn.Parameter(torch.ones(8))
        optimizer = torch.optim.SGD([weight], lr=0.1)
        output = weight * torch.linspace(-1, 1, 8)
        losses = {'l1': output.abs().mean(), 'loc': weight.pow(2).sum()}
        self.assertTrue(balance_and_step(losses, LossWeights(), optimizer, output))
        self.assertFalse(torch.equal(weight.detach(), torch.ones(8)))

    def test_non_finite_loss_skips_step(self):
        weight = torch.nn.Parameter(torch.ones(4))
        optimizer = torch.optim.SGD([weight], lr=0.1)
        output = weight * 2
        losses = {'l1': output.sum() * float('nan')}
        self.assertFalse(balance_and_step(losses, LossWeights(), optimizer, output))
        self.assertTrue(torch.equal(weight.detach(), torch.ones(4)))


class TestTrainConfig(unittest.TestCase):
    """Training configuration"""

    def test_defaults(self):
        cfg = TrainConfig()
        self.assertEqual((cfg.batch_size, cfg.learning_rate, cfg.total_steps), (32, 1e-4, 20000))
        self.assertEqual(cfg.loss_weights, LossWeights())

    def test_invalid_values(self):
        with self.assertRaises(ConfigurationError):
            TrainConfig(batch_size=0)
        with self.assertRaises(ConfigurationError):
            TrainConfig(sample_length=8, mask_windows=5)

    def test_from_dict(self):
        cfg = TrainConfig.from_dict({'batch_size': 4}, {'loc': 5.0})
        self.assertEqual(cfg.batch_size, 4)
        self.assertEqual(cfg.loss_weights.loc, 5.0)
        with self.assertRaises(ConfigurationError):
            TrainConfig.from_dict({'epochs': 3})


class TestDataset(unittest.TestCase):
    """WAV crop dataset"""

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_skips_short_files(self):
        write_corpus(self.tmp, count=2, length=4000)
        sf.write(os.path.join(self.tmp, 'short.wav'), np.zeros(100), 16000, subtype='PCM_16')
        dataset = WavDataset(self.tmp, sample_length=3200)
        self.assertEqual(len(dataset), 2)
        self.assertEqual(tuple(dataset[0].shape), (1, 3200))

    def test_crops_are_reproducible(self):
        write_corpus(self.tmp, count=1, length=8000)
        a = WavDataset(self.tmp, sample_length=3200, seed=4)
        b = WavDataset(self.tmp, sample_length=3200, seed=4)
        torch.testing.assert_close(a[0], b[0])

    def test_empty_directory(self):
        with self.assertRaises(ConfigurationError):
            WavDataset(self.tmp)


class TestTraining(unittest.TestCase):
    """Short training runs on a tiny network"""

    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.data = os.path.join(self.tmp, 'data')
        self.out = os.path.join(self.tmp, 'out')
        os.makedirs(self.data)
        write_corpus(self.data)

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_train_step_metrics(self):
        trainer = WatermarkTrainer(tiny_train_config(), model_config=TINY_MODEL)
        batch = 0.1 * torch.randn(2, 1, 3200, generator=torch.Generator().manual_seed(0))
        metrics = trainer.train_step(batch)
        self.assertEqual(set(metrics), set(METRIC_KEYS))
        for key in ('l1', 'msspec', 'loud', 'loc', 'dec', 'disc'):
            self.assertTrue(math.isfinite(metrics[key]), key)
        self.assertFalse(metrics['skipped'])

    def test_seeded_runs_are_reproducible(self):
        batch = 0.1 * torch.randn(2, 1, 3200, generator=torch.Generator().manual_seed(0))
        runs = []
        for _ in range(2):
            trainer = WatermarkTrainer(tiny_train_config(), model_config=TINY_MODEL)
            runs.append([trainer.train_step(batch) for _ in range(2)])
        self.assertEqual(runs[0], runs[1])

    def test_augment_batch_preserves_length(self):
        trainer = WatermarkTrainer(tiny_train_config(), model_config=TINY_MODEL)
        mixed = torch.randn(2, 1, 3200)
        labels = torch.ones(2, 1, 3200)
        edited, edited_labels, edited_clean, names = trainer.augment_batch(mixed, labels, mixed.clone())
        self.assertEqual(tuple(edited.shape), (2, 1, 3200))
        self.assertEqual(tuple(edited_labels.shape), (2, 1, 3200))
        self.assertEqual(tuple(edited_clean.shape), (2, 1, 3200))
        self.assertEqual(len(names), 2)

    def test_zero_steps_writes_initial_checkpoint(self):
        latest = train_loop(tiny_train_config(total_steps=0), self.data, self.out, TINY_MODEL)
        self.assertTrue(os.path.exists(latest))
        self.assertEqual(ParameterStore.load(latest).step, 0)
        self.assertTrue(os.path.exists(os.path.join(self.out, 'step_0000000.pt')))

    def test_resume_continues_from_checkpoint(self):
        train_loop(tiny_train_config(total_steps=1), self.data, self.out, TINY_MODEL)
        latest = os.path.join(self.out, 'latest.pt')
        self.assertEqual(ParameterStore.load(latest).step, 1)

        train_loop(tiny_train_config(total_steps=2), self.data, self.out, TINY_MODEL, resume=True)
        self.assertEqual(ParameterStore.load(latest).step, 2)
        with open(os.path.join(self.out, 'metrics.jsonl')) as f:
            rows = [json.loads(line) for line in f]
        self.assertEqual([row['step'] for row in rows], [1, 2])
        self.assertEqual(set(rows[0]), set(METRIC_KEYS))

    def test_resume_rejects_other_model_config(self):
        train_loop(tiny_train_config(total_steps=0), self.data, self.out, TINY_MODEL)
        other = ModelConfig(base_channels=4, latent_dim=8, hidden_dim=16, message_bits=8, lstm_layers=1,
                            disc_channels=4)
        with self.assertRaises(ConfigurationError):
            train_loop(tiny_train_config(total_steps=1), self.data, self.out, other, resume=True)


if __name__ == '__main__':
    unittest.main(verbosity=2)
