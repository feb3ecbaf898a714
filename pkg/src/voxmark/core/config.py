#!/usr/bin/env python3
"""
VoxMark Configuration Module

Handles all configuration management: built-in defaults, YAML config
files, environment variables and command line arguments.

Author: VoxMark Team
Version: 1.0
"""

import argparse
import copy
import logging
import os
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from .augment import EDIT_NAMES, AugmentPolicy, AugmentSpec
from .errors import ConfigurationError
from .losses import LossWeights
from .models import ModelConfig

logger = logging.getLogger(__name__)

COMMANDS = ("embed", "detect", "localize", "attribute", "train", "augment-eval", "eval", "attack", "fpr")
SECTIONS = ("model", "train", "losses", "augment", "eval", "attack")
ATTACK_SETTINGS = ("alpha", "steps", "learning_rate", "target", "seed")


class VoxMarkConfig:
    """
    Central configuration management for VoxMark.

    Precedence: defaults, then the YAML config file, then environment
    variables, then command line flags.
    """

    def __init__(self):
        """Initialize configuration with defaults."""
        load_dotenv()

        self.defaults = {
            'model': {
                'full_scale': False,
                'base_channels': None,
                'latent_dim': None,
                'hidden_dim': 32,
                'message_bits': 16,
                'strides': [2, 4, 5, 8],
                'lstm_layers': 2,
                'output_gain': 0.01,
                'disc_scales': [256, 512, 1024],
                'disc_channels': 16,
                'sample_rate': 16000,
            },
            'train': {
                'batch_size': 32,
                'learning_rate': 1e-4,
                'disc_learning_rate': 1e-4,
                'betas': [0.9, 0.999],
                'total_steps': 20000,
                'sample_length': 16000,
                'sample_rate': 16000,
                'mask_windows': 5,
                'checkpoint_interval': 1000,
                'overfit': False,
                'num_workers': 0,
                'loud_bands': 8,
                'loud_window': 2048,
                'loud_overlap': 0.5,
            },
            'losses': LossWeights().as_dict(),
            'augment': {
                'train': [{'name': name} for name in EDIT_NAMES if name != 'identity'],
                'eval': [{'name': 'identity'}] + [{'name': name} for name in EDIT_NAMES if name != 'identity'],
            },
            'eval': {
                'threshold': 0.5,
                'loc_threshold': 0.5,
                'durations': [0.1, 0.5, 1.0, 2.0, 5.0, 9.0],
                'attribution_sizes': [1, 10, 100, 1000, 10000],
                'max_embedded': 100,
                'target_fpr': 1e-3,
                'runtime_durations': [1.0, 5.0, 10.0],
                'runtime_repeats': 3,
                'clip_seconds': 10.0,
            },
            'attack': {
                'alpha': 1e-3,
                'steps': 100,
                'learning_rate': 0.1,
                'target': 'remove',
                'alphas': [1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
                'surrogate_steps': 500,
            },
            'checkpoint': None,
            'registry': None,
            'seed': 0,
            'device': 'cpu',
            'log_level': 'INFO',
        }

        self.config: Dict[str, Any] = {}
        self.args: Optional[argparse.Namespace] = None
        self.config_file: Optional[str] = None
        self.config = copy.deepcopy(self.defaults)
        self._load_from_environment()

    def _load_from_environment(self):
        """Load configuration from environment variables."""
        env_mapping = {
            'VOXMARK_SEED': 'seed',
            'VOXMARK_CHECKPOINT': 'checkpoint',
            'VOXMARK_REGISTRY': 'registry',
            'VOXMARK_DEVICE': 'device',
            'VOXMARK_LOG_LEVEL': 'log_level',
        }

        for env_key, config_key in env_mapping.items():
            env_value = os.getenv(env_key)
            if env_value is None:
                continue
            default_value = self.defaults[config_key]
            try:
                if isinstance(default_value, bool):
                    self.config[config_key] = env_value.lower() in ('true', '1', 'yes', 'on')
                elif isinstance(default_value, int):
                    self.config[config_key] = int(env_value)
                elif isinstance(default_value, float):
                    self.config[config_key] = float(env_value)
                else:
                    self.config[config_key] = env_value
                logger.debug("Loaded %s from environment: %s", config_key, env_value)
            except (ValueError, TypeError) as e:
                logger.warning("Invalid environment value for %s: %s (%s)", env_key, env_value, e)

    def load_file(self, path: str):
        """
        Merge a YAML config file over the current values.

        Raises:
            ConfigurationError: If the file is missing, malformed or has
                unknown sections or keys
        """
        if not os.path.exists(path):
            raise ConfigurationError(f"Config file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid YAML in {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} must contain a mapping of sections")

        for key, value in data.items():
            if key not in self.defaults:
                raise ConfigurationError(f"Unknown config section {key!r} in {path}")
            if key in SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigurationError(f"Config section {key!r} must be a mapping")
                unknown = set(value) - set(self.defaults[key])
                if unknown:
                    raise ConfigurationError(f"Unknown keys {sorted(unknown)} in section {key!r}")
                self.config[key].update(value)
            else:
                self.config[key] = value
        self.config_file = path
        logger.info("Loaded config file %s", path)

    def build_parser(self) -> argparse.ArgumentParser:
        """Command line parser with one subcommand per operation."""
        parser = argparse.ArgumentParser(
            prog='voxmark',
            description='VoxMark Localized Audio Watermarking',
            formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )
        subparsers = parser.add_subparsers(dest='command', metavar='COMMAND')
        subparsers.required = True

        common = argparse.ArgumentParser(add_help=False)
        common.add_argument('--config', default=None, help='YAML config file')
        common.add_argument('--seed', type=int, default=None, help='Random seed')
        common.add_argument('--jobs', type=int, default=1, help='Parallel file jobs')
        common.add_argument('--log-level', default=None, help='Logging level')
        common.add_argument('--device', default=None, help='Torch device')
        common.add_argument('--checkpoint', default=None, help='Model checkpoint path')

        def add(name: str, help_text: str) -> argparse.ArgumentParser:
            return subparsers.add_parser(name, parents=[common], help=help_text,
                                         formatter_class=argparse.ArgumentDefaultsHelpFormatter)

        embed = add('embed', 'Watermark WAV files')
        embed.add_argument('inputs', nargs='+', help='WAV files or directories')
        embed.add_argument('--out', required=True, help='Output directory')
        embed.add_argument('--message', default=None, help='Hex message (random per file if omitted)')
        embed.add_argument('--subtype', choices=['PCM_16', 'FLOAT'], default='PCM_16', help='Output WAV encoding')

        for name, help_text in (('detect', 'Detect watermarks'), ('localize', 'Localize watermarked samples'),
                                ('attribute', 'Attribute watermarked files to registered models')):
            sub = add(name, help_text)
            sub.add_argument('inputs', nargs='+', help='WAV files or directories')
            sub.add_argument('--output', default=None, help='JSONL output file (stdout if omitted)')
            sub.add_argument('--threshold', type=float, default=None, help='Detection threshold')
            sub.add_argument('--registry', default=None, help='Attribution registry manifest')

        train = add('train', 'Train generator and detector')
        train.add_argument('--data', required=True, help='Directory of 16 kHz WAV files')
        train.add_argument('--out', required=True, help='Checkpoint output directory')
        train.add_argument('--steps', type=int, default=None, help='Total training steps')
        train.add_argument('--batch-size', type=int, default=None, help='Batch size')
        train.add_argument('--overfit', action='store_true', default=None, help='Reuse the first batch')
        train.add_argument('--resume', action='store_true', help='Continue from <out>/latest.pt')

        augment = add('augment-eval', 'Apply the eval edit battery to WAV files')
        augment.add_argument('inputs', nargs='+', help='WAV files or directories')
        augment.add_argument('--out', required=True, help='Output directory')

        evaluate = add('eval', 'Build evaluation reports')
        evaluate.add_argument('--data', required=True, help='Directory of clean evaluation WAV files')
        evaluate.add_argument('--out', required=True, help='Report directory')
        evaluate.add_argument('--negatives', default=None, help='Genuine clips for threshold calibration')
        evaluate.add_argument('--reports', nargs='+',
                              choices=['robustness', 'localization', 'attribution', 'runtime'],
                              default=['robustness', 'localization', 'attribution', 'runtime'],
                              help='Reports to build')
        evaluate.add_argument('--max-clips', type=int, default=None, help='Limit the number of clips')
        evaluate.add_argument('--quality', action='store_true', help='Also write quality.csv')
        evaluate.add_argument('--oracle', action='store_true', help='Localize with the ground-truth mask')
        evaluate.add_argument('--plots', action='store_true', help='Render PNG curves')

        attack = add('attack', 'Adversarial watermark removal sweep')
        attack.add_argument('--data', required=True, help='Directory of clean WAV files')
        attack.add_argument('--out', required=True, help='Report directory')
        attack.add_argument('--mode', nargs='+', choices=['whitebox', 'semiblackbox', 'blackbox', 'noise'],
                            default=['whitebox', 'noise'], help='Attack modes')
        attack.add_argument('--alpha-grid', type=float, nargs='+', default=None, help='Perturbation scales')
        attack.add_argument('--target', choices=['remove', 'forge'], default=None, help='Attack target')
        attack.add_argument('--proxy-checkpoint', default=None, help='Independently trained checkpoint')
        attack.add_argument('--max-clips', type=int, default=None, help='Limit the number of clips')
        attack.add_argument('--plots', action='store_true', help='Render PNG curves')

        fpr = add('fpr', 'False-positive-rate theory and measurement')
        fpr.add_argument('--k', type=int, default=16, help='Payload bits')
        fpr.add_argument('--tau', type=int, default=None, help='Print the theoretical FPR for one threshold')
        fpr.add_argument('--tau-grid', type=int, nargs='*', default=None, help='Thresholds (default 0..k)')
        fpr.add_argument('--trials', type=int, default=100000, help='Monte-Carlo trials')
        fpr.add_argument('--p', type=float, default=0.5, help='Bernoulli bit probability')
        fpr.add_argument('--data', default=None, help='Genuine clips for the empirical study')
        fpr.add_argument('--out', default='.', help='Report directory')

        return parser

    def parse_args(self, args=None) -> argparse.Namespace:
        """
        Parse command line arguments and update configuration.

        Args:
            args: List of arguments to parse (None for sys.argv)

        Returns:
            argparse.Namespace: Parsed arguments
        """
        parsed_args = self.build_parser().parse_args(args)
        if parsed_args.config:
            self.load_file(parsed_args.config)
            self._load_from_environment()
        self._update_from_args(parsed_args)
        self.args = parsed_args
        return parsed_args

    def _update_from_args(self, args: argparse.Namespace):
        """Update configuration from parsed command line arguments."""
        arg_mapping = {
            'seed': 'seed',
            'log_level': 'log_level',
            'device': 'device',
            'checkpoint': 'checkpoint',
            'registry': 'registry',
        }
        for arg_key, config_key in arg_mapping.items():
            value = getattr(args, arg_key, None)
            if value is not None:
                self.config[config_key] = value

        section_mapping = {
            'steps': ('train', 'total_steps'),
            'batch_size': ('train', 'batch_size'),
            'overfit': ('train', 'overfit'),
            'threshold': ('eval', 'threshold'),
            'alpha_grid': ('attack', 'alphas'),
            'target': ('attack', 'target'),
        }
        for arg_key, (section, key) in section_mapping.items():
            value = getattr(args, arg_key, None)
            if value is not None:
                self.config[section][key] = value

    def get(self, key: str, default=None) -> Any:
        """
        Get configuration value by key.

        Args:
            key: Top-level key or "section.key"
            default: Default value if key not found

        Returns:
            Configuration value
        """
        if '.' in key:
            section, name = key.split('.', 1)
            return self.config.get(section, {}).get(name, default)
        return self.config.get(key, default)

    def set(self, key: str, value: Any):
        """
        Set configuration value.

        Args:
            key: Top-level key or "section.key"
            value: Value to set
        """
        if '.' in key:
            section, name = key.split('.', 1)
            self.config[section][name] = value
        else:
            self.config[key] = value
        logger.debug("Set %s to %s", key, value)

    def get_model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config['model'])

    def get_loss_weights(self) -> LossWeights:
        return LossWeights.from_dict(self.config['losses'])

    def get_train_config(self):
        from ..training.trainer import TrainConfig
        values = dict(self.config['train'])
        values.setdefault('seed', self.config['seed'])
        values.setdefault('device', self.config['device'])
        return TrainConfig.from_dict(values, self.config['losses'])

    def get_attack_config(self):
        from ..attacks.adversarial import AttackConfig
        values = {k: v for k, v in self.config['attack'].items() if k in ATTACK_SETTINGS}
        values.setdefault('seed', self.config['seed'])
        return AttackConfig.from_dict(values)

    def get_augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy.from_config(self.config['augment']['train'], default_mode='train')

    def get_eval_specs(self) -> List[AugmentSpec]:
        return [AugmentSpec.from_dict(entry, default_mode='eval') for entry in self.config['augment']['eval']]

    def validate(self) -> bool:
        """
        Validate configuration values.

        Returns:
            True if configuration is valid

        Raises:
            ConfigurationError: If configuration is invalid
        """
        self.get_model_config()
        self.get_train_config()
        self.get_attack_config()
        self.get_augment_policy()
        self.get_eval_specs()

        if self.config['model']['sample_rate'] != self.config['train']['sample_rate']:
            raise ConfigurationError("model.sample_rate and train.sample_rate must match")
        if not 0.0 <= self.config['eval']['threshold'] <= 1.0:
            raise ConfigurationError(f"Detection threshold must be in [0, 1], got {self.config['eval']['threshold']}")
        if not 0.0 < self.config['eval']['target_fpr'] < 1.0:
            raise ConfigurationError(f"eval.target_fpr must be in (0, 1), got {self.config['eval']['target_fpr']}")
        if any(a <= 0 for a in self.config['attack']['alphas']):
            raise ConfigurationError("attack.alphas must all be positive")
        if self.args is not None and getattr(self.args, 'jobs', 1) < 1:
            raise ConfigurationError(f"--jobs must be >= 1, got {self.args.jobs}")
        if str(self.config['log_level']).upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ConfigurationError(f"Unknown log level {self.config['log_level']!r}")

        logger.debug("Configuration validation passed")
        return True

    def print_summary(self):
        """Print a summary of the current configuration."""
        model = self.get_model_config()
        print("\n" + "=" * 60)
        print("VoxMark Configuration Summary")
        print("=" * 60)
        print(f"Config file: {self.config_file or '(defaults)'}")
        print(f"Checkpoint: {self.config['checkpoint'] or '(search default paths)'}")
        print(f"Seed: {self.config['seed']}  Device: {self.config['device']}")
        print(f"Model: {model.base_channels}/{model.latent_dim} channels, {model.message_bits} message bits")
        print(f"Train: {self.config['train']['total_steps']} steps, batch {self.config['train']['batch_size']}")
        print(f"Loss weights: {self.config['losses']}")
        print(f"Detection threshold: {self.config['eval']['threshold']}")
        print("=" * 60 + "\n")


def create_config_from_args(args=None) -> VoxMarkConfig:
    """
    Create and configure VoxMark configuration from command line arguments.

    Args:
        args: Command line arguments (None for sys.argv)

    Returns:
        VoxMarkConfig: Configured instance
    """
    config = VoxMarkConfig()
    config.parse_args(args)
    config.validate()
    return config
