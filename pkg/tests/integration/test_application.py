#!/usr/bin/env python3
"""
Integration tests for the VoxMark application

Runs every command end to end through VoxMarkApplication.run on a tiny
network and checks exit codes, written files and record formats.
"""

import csv
import io
import json
import os
import shutil
import sys
import tempfile
import unittest
from unittest.mock import patch

import numpy as np
import soundfile as sf

# Add src to path for imports
project_root = os.path.join(os.path.dirname(__file__), '..', '..')
sys.path.insert(0, project_root)

from src.voxmark.core.detection import AttributionRegistry
from src.voxmark.core.models import ModelConfig, ParameterStore, create_models
from src.voxmark.main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, VoxMarkApplication

TINY_YAML = """
model:
  base_channels: 4
  latent_dim: 8
  hidden_dim: 16
  message_bits: 4
  lstm_layers: 1
  disc_channels: 4
train:
  batch_size: 2
  sample_length: 3200
  mask_windows: 2
  loud_window: 512
  checkpoint_interval: 1
eval:
  durations: [0.1, 0.5, 2.0]
  attribution_sizes: [1, 4]
  max_embedded: 2
  runtime_durations: [1.0]
  runtime_repeats: 1
  clip_seconds: 1.0
attack:
  steps: 2
  alphas: [0.001, 0.01]
  surrogate_steps: 2
"""


def read_csv(path):
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


class TestVoxMarkApplication(unittest.TestCase):
    """End-to-end command tests"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.mkdtemp()
        cls.config = os.path.join(cls.tmp, 'tiny.yaml')
        with open(cls.config, 'w') as f:
            f.write(TINY_YAML)

        cls.model_config = ModelConfig(base_channels=4, latent_dim=8, hidden_dim=16, message_bits=4, lstm_layers=1,
                                       disc_channels=4)
        cls.checkpoint = os.path.join(cls.tmp, 'model.pt')
        ParameterStore.from_models(create_models(cls.model_config, seed=0)).save(cls.checkpoint)

        cls.data = os.path.join(cls.tmp, 'clean')
        os.makedirs(cls.data)
        rng = np.random.default_rng(0)
        t = np.arange(16000) / 16000
        for i in range(2):
            samples = 0.3 * np.sin(2 * np.pi * (200 + 100 * i) * t) + 0.02 * rng.standard_normal(16000)
            sf.write(os.path.join(cls.data, f'speech_{i}.wav'), samples, 16000, subtype='PCM_16')

        with open(os.path.join(project_root, 'schemas', 'detection_record.schema.json')) as f:
            cls.record_keys = set(json.load(f)['required'])

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)

    def setUp(self):
        self.work = tempfile.mkdtemp(dir=self.tmp)

    def run_app(self, *argv, stdout=None):
        argv = list(argv) + ['--config', self.config, '--log-level', 'WARNING']
        with patch.dict(os.environ, {}, clear=False):
            os.environ.pop('VOXMARK_CHECKPOINT', None)
            if stdout is not None:
                with patch('sys.stdout', stdout):
                    return VoxMarkApplication().run(argv)
            return VoxMarkApplication().run(argv)

    def embed_clips(self, *extra):
        out = os.path.join(self.work, 'marked')
        code = self.run_app('embed', self.data, '--out', out, '--checkpoint', self.checkpoint, *extra)
        self.assertEqual(code, EXIT_OK)
        return out

    # fpr

    def test_fpr_single_threshold(self):
        stdout = io.StringIO()
        self.assertEqual(self.run_app('fpr', '--k', '16', '--tau', '12', stdout=stdout), EXIT_OK)
        self.assertEqual(stdout.getvalue().strip(), '0.038406')

    def test_fpr_invalid_threshold(self):
        self.assertEqual(self.run_app('fpr', '--k', '16', '--tau', '17'), EXIT_USAGE)
        self.assertEqual(self.run_app('fpr', '--k', '0', '--tau', '0'), EXIT_USAGE)

    def test_fpr_monte_carlo_and_measurement(self):
        code = self.run_app('fpr', '--k', '4', '--trials', '2000', '--out', self.work, '--data', self.data,
                            '--checkpoint', self.checkpoint)
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(read_csv(os.path.join(self.work, 'fpr.csv'))), 5)
        self.assertEqual(len(read_csv(os.path.join(self.work, 'detection_fpr.csv'))), 21)
        histogram = read_csv(os.path.join(self.work, 'histogram.csv'))
        self.assertEqual(sum(int(row['count']) for row in histogram), 2 * 4)
        self.assertTrue(os.path.exists(os.path.join(self.work, 'bit_fpr.csv')))

    # usage errors

    def test_unknown_command(self):
        with patch('sys.stderr', new_callable=io.StringIO):
            self.assertEqual(VoxMarkApplication().run(['transcode']), EXIT_USAGE)

    def test_detect_empty_directory(self):
        empty = os.path.join(self.work, 'empty')
        os.makedirs(empty)
        self.assertEqual(self.run_app('detect', empty, '--checkpoint', self.checkpoint), EXIT_USAGE)

    def test_missing_input(self):
        missing = os.path.join(self.work, 'nothing.wav')
        self.assertEqual(self.run_app('detect', missing, '--checkpoint', self.checkpoint), EXIT_USAGE)

    def test_missing_checkpoint_writes_nothing(self):
        out = os.path.join(self.work, 'marked')
        code = self.run_app('embed', self.data, '--out', out, '--checkpoint', os.path.join(self.work, 'none.pt'))
        self.assertEqual(code, EXIT_USAGE)
        self.assertFalse(os.path.exists(out))

    def test_invalid_config_file(self):
        bad = os.path.join(self.work, 'bad.yaml')
        with open(bad, 'w') as f:
            f.write('train:\n  epochs: 3\n')
        with patch.dict(os.environ, {}, clear=False):
            code = VoxMarkApplication().run(['fpr', '--tau', '1', '--config', bad, '--log-level', 'WARNING'])
        self.assertEqual(code, EXIT_USAGE)

    def test_corrupt_input_is_runtime_failure(self):
        corrupt = os.path.join(self.work, 'corrupt.wav')
        with open(corrupt, 'wb') as f:
            f.write(b'RIFF0000WAVE')
        self.assertEqual(self.run_app('detect', corrupt, '--checkpoint', self.checkpoint), EXIT_FAILURE)

    # embed / detect / localize / attribute

    def test_embed_writes_files_and_manifest(self):
        out = self.embed_clips('--message', 'a')
        self.assertEqual(sorted(os.listdir(out)), ['manifest.tsv', 'speech_0.wav', 'speech_1.wav'])
        with open(os.path.join(out, 'manifest.tsv')) as f:
            rows = [line.rstrip('\n').split('\t') for line in f]
        self.assertEqual(rows[0], ['file', 'message', 'checkpoint_hash'])
        self.assertEqual([row[1] for row in rows[1:]], ['a', 'a'])
        self.assertEqual(rows[1][2], self.model_config.config_hash)
        info = sf.info(os.path.join(out, 'speech_0.wav'))
        self.assertEqual((info.samplerate, info.frames, info.subtype), (16000, 16000, 'PCM_16'))

    def test_embed_rejects_bad_message(self):
        out = os.path.join(self.work, 'marked')
        code = self.run_app('embed', self.data, '--out', out, '--checkpoint', self.checkpoint, '--message', 'zz')
        self.assertEqual(code, EXIT_USAGE)

    def test_embed_refuses_to_overwrite_inputs(self):
        code = self.run_app('embed', self.data, '--out', self.data, '--checkpoint', self.checkpoint)
        self.assertEqual(code, EXIT_USAGE)

    def test_embed_is_deterministic_per_seed(self):
        first = self.embed_clips('--seed', '5')
        second = os.path.join(self.work, 'again')
        self.assertEqual(self.run_app('embed', self.data, '--out', second, '--checkpoint', self.checkpoint,
                                      '--seed', '5', '--jobs', '2'), EXIT_OK)
        with open(os.path.join(first, 'manifest.tsv')) as a, open(os.path.join(second, 'manifest.tsv')) as b:
            self.assertEqual(a.read(), b.read())

    def test_detect_records_follow_schema(self):
        marked = self.embed_clips()
        output = os.path.join(self.work, 'records.jsonl')
        code = self.run_app('detect', os.path.join(marked, 'speech_0.wav'), os.path.join(marked, 'speech_1.wav'),
                            '--checkpoint', self.checkpoint, '--output', output)
        self.assertEqual(code, EXIT_OK)
        with open(output) as f:
            records = [json.loads(line) for line in f]
        self.assertEqual([r['file'] for r in records], ['speech_0.wav', 'speech_1.wav'])
        for record in records:
            self.assertEqual(set(record), self.record_keys)
            self.assertTrue(0.0 <= record['score'] <= 1.0)
            self.assertEqual(record['flagged'], record['score'] > 0.5)

    def test_localize_to_stdout(self):
        stdout = io.StringIO()
        code = self.run_app('localize', self.data, '--checkpoint', self.checkpoint, '--threshold', '0.0',
                            stdout=stdout)
        self.assertEqual(code, EXIT_OK)
        records = [json.loads(line) for line in stdout.getvalue().splitlines()]
        self.assertEqual(len(records), 2)
        for record in records:
            self.assertTrue(record['flagged'])
            self.assertEqual(len(record['decoded_bits']), 1)

    def test_localize_matches_detect(self):
        outputs = {}
        for command in ('detect', 'localize'):
            stdout = io.StringIO()
            code = self.run_app(command, self.data, '--checkpoint', self.checkpoint, '--threshold', '0.3',
                                stdout=stdout)
            self.assertEqual(code, EXIT_OK)
            outputs[command] = [json.loads(line) for line in stdout.getvalue().splitlines()]
        self.assertEqual(len(outputs['localize']), 2)
        self.assertEqual(outputs['detect'], outputs['localize'])
        for record in outputs['localize']:
            self.assertIn('mask_runlengths', record)

    def test_attribute_with_registry(self):
        registry = os.path.join(self.work, 'registry.tsv')
        AttributionRegistry.random(3, 4).save(registry)
        stdout = io.StringIO()
        code = self.run_app('attribute', self.data, '--checkpoint', self.checkpoint, '--registry', registry,
                            '--threshold', '0.0', stdout=stdout)
        self.assertEqual(code, EXIT_OK)
        for line in stdout.getvalue().splitlines():
            record = json.loads(line)
            self.assertIn(record['model_id'], {'model-00000', 'model-00001', 'model-00002'})
            self.assertTrue(0 <= record['distance'] <= 4)

    def test_attribute_needs_matching_registry(self):
        registry = os.path.join(self.work, 'registry.tsv')
        AttributionRegistry.random(2, 8).save(registry)
        code = self.run_app('attribute', self.data, '--checkpoint', self.checkpoint, '--registry', registry)
        self.assertEqual(code, EXIT_USAGE)
        code = self.run_app('attribute', self.data, '--checkpoint', self.checkpoint)
        self.assertEqual(code, EXIT_USAGE)

    # train / augment-eval / eval / attack

    def test_train_zero_steps_writes_initial_checkpoint(self):
        out = os.path.join(self.work, 'run')
        self.assertEqual(self.run_app('train', '--data', self.data, '--out', out, '--steps', '0'), EXIT_OK)
        store = ParameterStore.load(os.path.join(out, 'latest.pt'))
        self.assertEqual(store.step, 0)
        self.assertEqual(store.config_hash, self.model_config.config_hash)

    def test_train_one_step(self):
        out = os.path.join(self.work, 'run')
        self.assertEqual(self.run_app('train', '--data', self.data, '--out', out, '--steps', '1'), EXIT_OK)
        self.assertEqual(ParameterStore.load(os.path.join(out, 'latest.pt')).step, 1)
        with open(os.path.join(out, 'metrics.jsonl')) as f:
            self.assertEqual(len(f.readlines()), 1)

    def test_augment_eval_battery(self):
        out = os.path.join(self.work, 'edited')
        code = self.run_app('augment-eval', os.path.join(self.data, 'speech_0.wav'), '--out', out)
        self.assertEqual(code, EXIT_OK)
        with open(os.path.join(out, 'manifest.tsv')) as f:
            rows = [line.rstrip('\n').split('\t') for line in f]
        self.assertEqual(rows[0], ['file', 'source', 'edit', 'params'])
        self.assertEqual(len(rows) - 1, 13)
        self.assertEqual(rows[1][:3], ['speech_0__identity.wav', 'speech_0.wav', 'identity'])
        for row in rows[1:]:
            self.assertEqual(sf.info(os.path.join(out, row[0])).subtype, 'FLOAT')
        identity, _ = sf.read(os.path.join(out, 'speech_0__identity.wav'), dtype='float32')
        original, _ = sf.read(os.path.join(self.data, 'speech_0.wav'), dtype='float32')
        np.testing.assert_array_equal(identity, original)

    def test_eval_reports(self):
        out = os.path.join(self.work, 'reports')
        code = self.run_app('eval', '--data', self.data, '--out', out, '--checkpoint', self.checkpoint,
                            '--quality', '--plots')
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(read_csv(os.path.join(out, 'robustness.csv'))), 13)
        localization = read_csv(os.path.join(out, 'localization.csv'))
        self.assertEqual([float(row['duration']) for row in localization], [0.1, 0.5])
        self.assertEqual([int(row['n']) for row in read_csv(os.path.join(out, 'attribution.csv'))], [1, 4])
        self.assertEqual(len(read_csv(os.path.join(out, 'runtime.csv'))), 1)
        self.assertEqual(len(read_csv(os.path.join(out, 'quality.csv'))), 2)
        self.assertTrue(os.path.exists(os.path.join(out, 'localization.png')))

    def test_eval_oracle_localization(self):
        out = os.path.join(self.work, 'reports')
        code = self.run_app('eval', '--data', self.data, '--out', out, '--checkpoint', self.checkpoint,
                            '--reports', 'localization', '--oracle')
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(all(float(row['iou']) == 1.0 for row in read_csv(os.path.join(out, 'localization.csv'))))
        self.assertFalse(os.path.exists(os.path.join(out, 'robustness.csv')))

    def test_attack_sweep(self):
        out = os.path.join(self.work, 'attack')
        code = self.run_app('attack', '--data', self.data, '--out', out, '--checkpoint', self.checkpoint,
                            '--mode', 'whitebox', 'noise', 'blackbox')
        self.assertEqual(code, EXIT_OK)
        rows = read_csv(os.path.join(out, 'attack.csv'))
        self.assertEqual(len(rows), 6)
        self.assertEqual({row['mode'] for row in rows}, {'whitebox', 'noise', 'blackbox'})

    def test_semiblackbox_needs_proxy(self):
        out = os.path.join(self.work, 'attack')
        code = self.run_app('attack', '--data', self.data, '--out', out, '--checkpoint', self.checkpoint,
                            '--mode', 'semiblackbox')
        self.assertEqual(code, EXIT_USAGE)


if __name__ == '__main__':
    unittest.main(verbosity=2)
