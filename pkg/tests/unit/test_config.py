#!/usr/bin/env python3
"""
Test suite for VoxMark configuration

Tests for defaults, YAML files, environment variables, command line
precedence and validation.
"""

import io
import os
import shutil
import sys
import tempfile
import unittest
from unittest.mock import patch

# Add src to path for imports
project_root = os.path.join(os.path.dirname(__file__), '..', '..')
sys.path.insert(0, project_root)

from src.voxmark.core.config import VoxMarkConfig, create_config_from_args
from src.voxmark.core.errors import ConfigurationError

DEFAULT_YAML = os.path.join(project_root, 'configs', 'default.yaml')


class TestVoxMarkConfig(unittest.TestCase):
    """Test cases for VoxMarkConfig"""

    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.env = patch.dict(os.environ, {}, clear=True)
        self.env.start()

    def tearDown(self):
        self.env.stop()
        shutil.rmtree(self.tmp, ignore_errors=True)

    def write(self, text):
        path = os.path.join(self.tmp, 'config.yaml')
        with open(path, 'w') as f:
            f.write(text)
        return path

    def test_defaults(self):
        config = VoxMarkConfig()
        self.assertEqual(config.get('seed'), 0)
        self.assertEqual(config.get('train.batch_size'), 32)
        self.assertEqual(config.get('eval.threshold'), 0.5)
        model = config.get_model_config()
        self.assertEqual((model.base_channels, model.latent_dim, model.message_bits), (16, 64, 16))
        self.assertTrue(config.validate())

    def test_get_missing_key(self):
        config = VoxMarkConfig()
        self.assertEqual(config.get('train.nothing', 'fallback'), 'fallback')
        self.assertIsNone(config.get('nothing'))

    def test_set_dotted_key(self):
        config = VoxMarkConfig()
        config.set('losses.loc', 3.0)
        self.assertEqual(config.get_loss_weights().loc, 3.0)

    def test_shipped_yaml_matches_defaults(self):
        config = VoxMarkConfig()
        config.load_file(DEFAULT_YAML)
        self.assertEqual(config.config, config.defaults)
        self.assertTrue(config.validate())

    def test_yaml_merges_sections(self):
        path = self.write('seed: 3\ntrain:\n  batch_size: 4\nmodel:\n  message_bits: 8\n')
        config = VoxMarkConfig()
        config.parse_args(['fpr', '--config', path])
        self.assertEqual(config.get('seed'), 3)
        self.assertEqual(config.get('train.batch_size'), 4)
        self.assertEqual(config.get('train.total_steps'), 20000)
        self.assertEqual(config.get_model_config().message_bits, 8)

    def test_unknown_section_rejected(self):
        path = self.write('scheduler:\n  warmup: 10\n')
        with self.assertRaises(ConfigurationError):
            VoxMarkConfig().load_file(path)

    def test_unknown_key_rejected(self):
        path = self.write('train:\n  epochs: 10\n')
        with self.assertRaises(ConfigurationError):
            VoxMarkConfig().load_file(path)

    def test_malformed_files(self):
        with self.assertRaises(ConfigurationError):
            VoxMarkConfig().load_file(self.write('- just\n- a list\n'))
        with self.assertRaises(ConfigurationError):
            VoxMarkConfig().load_file(self.write('train: [unclosed\n'))
        with self.assertRaises(ConfigurationError):
            VoxMarkConfig().load_file(os.path.join(self.tmp, 'missing.yaml'))

    def test_environment_overrides_file(self):
        os.environ['VOXMARK_SEED'] = '7'
        os.environ['VOXMARK_DEVICE'] = 'cuda:1'
        path = self.write('seed: 3\n')
        config = VoxMarkConfig()
        config.parse_args(['fpr', '--config', path])
        self.assertEqual(config.get('seed'), 7)
        self.assertEqual(config.get('device'), 'cuda:1')

    def test_command_line_overrides_environment(self):
        os.environ['VOXMARK_SEED'] = '7'
        config = VoxMarkConfig()
        config.parse_args(['fpr', '--seed', '9'])
        self.assertEqual(config.get('seed'), 9)

    def test_invalid_environment_value_ignored(self):
        os.environ['VOXMARK_SEED'] = 'abc'
        self.assertEqual(VoxMarkConfig().get('seed'), 0)

    def test_train_arguments(self):
        config = VoxMarkConfig()
        config.parse_args(['train', '--data', 'd', '--out', 'o', '--steps', '5', '--overfit', '--seed', '2'])
        train = config.get_train_config()
        self.assertEqual((train.total_steps, train.overfit, train.seed), (5, True, 2))

    def test_attack_arguments(self):
        config = VoxMarkConfig()
        args = config.parse_args(['attack', '--data', 'd', '--out', 'o', '--alpha-grid', '0.01', '0.02',
                                  '--target', 'forge'])
        self.assertEqual(args.mode, ['whitebox', 'noise'])
        self.assertEqual(config.get('attack.alphas'), [0.01, 0.02])
        self.assertEqual(config.get_attack_config().target, 'forge')

    def test_eval_specs_start_with_identity(self):
        specs = VoxMarkConfig().get_eval_specs()
        self.assertEqual(specs[0].name, 'identity')
        self.assertTrue(all(spec.mode == 'eval' for spec in specs))
        self.assertNotIn('identity', VoxMarkConfig().get_augment_policy().names)

    def test_validation_failures(self):
        for key, value in (('eval.threshold', 1.5), ('eval.target_fpr', 0.0), ('attack.alphas', [0.0]),
                           ('train.sample_rate', 8000), ('log_level', 'LOUD'), ('model.message_bits', 40)):
            config = VoxMarkConfig()
            config.set(key, value)
            with self.assertRaises(ConfigurationError, msg=key):
                config.validate()

    def test_jobs_must_be_positive(self):
        config = VoxMarkConfig()
        config.parse_args(['fpr', '--jobs', '0'])
        with self.assertRaises(ConfigurationError):
            config.validate()

    def test_missing_command(self):
        with patch('sys.stderr', new_callable=io.StringIO):
            with self.assertRaises(SystemExit):
                VoxMarkConfig().parse_args([])

    def test_create_config_from_args(self):
        config = create_config_from_args(['fpr', '--k', '8', '--tau', '6'])
        self.assertEqual((config.args.k, config.args.tau), (8, 6))

    def test_print_summary(self):
        with patch('sys.stdout', new_callable=io.StringIO) as stdout:
            VoxMarkConfig().print_summary()
        self.assertIn('VoxMark Configuration Summary', stdout.getvalue())


if __name__ == '__main__':
    unittest.main(verbosity=2)
