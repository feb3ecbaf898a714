#!/usr/bin/env python3
"""
VoxMark Main Application

Command-line application that wires the watermarking modules together:
embedding, detection, localization, attribution, training, evaluation,
attacks and false-positive-rate studies.

Author: VoxMark Team
Version: 1.0
"""

import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TypeVar

import numpy as np
import pandas as pd
import torch

from .attacks.adversarial import attack_sweep, train_surrogate
from .core.audio import AudioClip, load_wav, resample, save_wav
from .core.augment import apply_augment
from .core.config import VoxMarkConfig, create_config_from_args
from .core.detection import (AttributionRegistry, DetectionProcessor, ModelManager, decode_message, detect,
                             soft_message)
from .core.errors import ConfigurationError, UsageError, ValidationError
from .core.models import Message, ParameterStore, detector_forward, embed
from .core.stats import empirical_bit_fpr, empirical_fpr, monte_carlo_fpr, theoretical_fpr
from .evaluation.protocols import (attribution_table, localization_curve, plot_curves, quality_table,
                                   robustness_table, runtime_benchmark)
from .training.trainer import train_loop

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def collect_wavs(inputs: Sequence[str]) -> List[Path]:
    """
    Expand files and directories into a sorted list of WAV paths.

    Raises:
        UsageError: If an input is missing or no WAV file is found
    """
    paths: List[Path] = []
    for item in inputs:
        path = Path(item)
        if path.is_dir():
            paths.extend(sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() == '.wav'))
        elif path.is_file():
            paths.append(path)
        else:
            raise UsageError(f"Input not found: {item}")
    if not paths:
        raise UsageError(f"No WAV files found in {', '.join(inputs)}")
    return paths


def atomic_write_text(path: Path, text: str):
    """Write text to a temporary sibling and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(suffix='.tmp', dir=str(path.parent))
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as f:
            f.write(text)
        os.replace(tmp_name, path)
    finally:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    atomic_write_text(path, frame.to_csv(index=False))
    logger.info("Report written: %s", path)
    return path


def map_files(func: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> List[R]:
    """Apply ``func`` to every item, in order, with up to ``jobs`` threads."""
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))


def _require_path(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


class VoxMarkApplication:
    """
    Main VoxMark application.

    Parses the command line, loads configuration and the model
    checkpoint, dispatches to one ``cmd_*`` method per subcommand and
    maps failures to exit codes (0 ok, 1 runtime failure, 2 usage).
    """

    def __init__(self):
        self.config: Optional[VoxMarkConfig] = None
        self.model_manager: Optional[ModelManager] = None
        self.store: Optional[ParameterStore] = None

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """
        Run one command.

        Args:
            argv: Command line arguments (None for sys.argv)

        Returns:
            int: Process exit code
        """
        try:
            self.config = create_config_from_args(argv)
        except SystemExit as e:
            return e.code if isinstance(e.code, int) else EXIT_USAGE
        except ConfigurationError as e:
            logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
            logger.error("Configuration error: %s", e)
            return EXIT_USAGE

        logging.basicConfig(level=str(self.config.get('log_level')).upper(), format=LOG_FORMAT, force=True)
        args = self.config.args
        handler = getattr(self, 'cmd_' + args.command.replace('-', '_'))
        logger.info("Running %s", args.command)
        try:
            handler(args)
        except (ConfigurationError, FileNotFoundError) as e:
            logger.error("Usage error: %s", e)
            return EXIT_USAGE
        except KeyboardInterrupt:
            logger.info("Interrupted")
            return EXIT_FAILURE
        except Exception as e:
            logger.error("Fatal error: %s", e)
            logger.debug("Traceback", exc_info=True)
            return EXIT_FAILURE
        logger.info("%s finished", args.command)
        return EXIT_OK

    # Shared helpers

    def _load_model(self) -> ParameterStore:
        if self.store is None:
            self.model_manager = ModelManager(self.config.get('checkpoint'), self.config.get('device'))
            self.store = self.model_manager.load_model()
        return self.store

    def _load_clip(self, path: Path) -> AudioClip:
        return resample(load_wav(path), self.config.get('model.sample_rate'))

    def _load_clips(self, paths: Sequence[Path], jobs: int, limit: Optional[int] = None) -> List[AudioClip]:
        if limit is not None:
            paths = list(paths)[:limit]
        return map_files(self._load_clip, list(paths), jobs)

    def _seed(self) -> int:
        return int(self.config.get('seed'))

    # Commands

    def cmd_embed(self, args):
        """Watermark every input file and write a manifest."""
        store = self._load_model()
        bits = store.model_config.message_bits
        if args.message is not None:
            if bits == 0:
                raise UsageError("This checkpoint is zero-bit and carries no message")
            try:
                fixed = Message.from_hex(args.message, bits)
            except ValidationError as e:
                raise UsageError(str(e)) from e
        else:
            fixed = None

        paths = collect_wavs(args.inputs)
        out_dir = Path(args.out)
        targets = [out_dir / p.name for p in paths]
        for source, target in zip(paths, targets):
            if source.resolve() == target.resolve():
                raise UsageError(f"Refusing to overwrite input file {source}")
        out_dir.mkdir(parents=True, exist_ok=True)

        generator = torch.Generator().manual_seed(self._seed())
        messages = [fixed if fixed is not None else (Message.random(bits, generator) if bits else None)
                    for _ in paths]

        def embed_one(index: int) -> str:
            clip = self._load_clip(paths[index])
            save_wav(embed(store, clip, messages[index]), targets[index], args.subtype)
            logger.debug("Embedded %s -> %s", paths[index], targets[index])
            return targets[index].name

        names = map_files(embed_one, list(range(len(paths))), args.jobs)
        lines = ["file\tmessage\tcheckpoint_hash"]
        lines += [f"{name}\t{m.to_hex() if m is not None else ''}\t{store.config_hash}"
                  for name, m in zip(names, messages)]
        atomic_write_text(out_dir / 'manifest.tsv', "\n".join(lines) + "\n")
        logger.info("Embedded %d file(s) into %s", len(names), out_dir)

    def _run_detection(self, args, registry: Optional[AttributionRegistry] = None):
        paths = collect_wavs(args.inputs)
        store = self._load_model()
        processor = DetectionProcessor(store, threshold=self.config.get('eval.threshold'),
                                       loc_threshold=self.config.get('eval.loc_threshold'), registry=registry,
                                       sample_rate=store.model_config.sample_rate)
        records = map_files(lambda p: processor.process_clip(load_wav(p), p.name), paths, args.jobs)
        text = "".join(json.dumps(record) + "\n" for record in records)
        if args.output:
            atomic_write_text(Path(args.output), text)
            logger.info("Wrote %d record(s) to %s", len(records), args.output)
        else:
            sys.stdout.write(text)
            sys.stdout.flush()
        stats = processor.get_statistics()
        logger.info("Processed %d file(s): %d flagged, mean score %.4f", stats['files_processed'],
                    stats['flagged'], stats['mean_score'])
        return records

    def cmd_detect(self, args):
        """detect and localize write the same record, mask run-lengths included."""
        return self._run_detection(args)

    cmd_localize = cmd_detect

    def cmd_attribute(self, args):
        path = _require_path(args.registry or self.config.get('registry'), "Registry")
        store = self._load_model()
        registry = AttributionRegistry.load(path)
        if registry.num_bits != store.model_config.message_bits:
            raise UsageError(f"Registry has {registry.num_bits}-bit messages, checkpoint decodes "
                             f"{store.model_config.message_bits}")
        return self._run_detection(args, registry)

    def cmd_train(self, args):
        """Train a generator/detector pair; ``--steps 0`` writes the initial checkpoint only."""
        data = _require_path(args.data, "Training data directory")
        cfg = self.config.get_train_config()
        checkpoint = train_loop(cfg, data, args.out, model_config=self.config.get_model_config(),
                                policy=self.config.get_augment_policy(), resume=args.resume)
        logger.info("Latest checkpoint: %s", checkpoint)

    def cmd_augment_eval(self, args):
        """Write one edited copy per eval edit and input file."""
        paths = collect_wavs(args.inputs)
        specs = self.config.get_eval_specs()
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        seed = self._seed()

        def augment_one(index: int) -> List[str]:
            clip = load_wav(paths[index])
            rows = []
            for j, spec in enumerate(specs):
                rng = torch.Generator().manual_seed(seed + 1000 * index + j)
                name = f"{paths[index].stem}__{spec.name}.wav"
                save_wav(apply_augment(clip, spec, rng), out_dir / name, 'FLOAT')
                rows.append(f"{name}\t{paths[index].name}\t{spec.name}\t{json.dumps(spec.to_dict()['params'])}")
            return rows

        rows = [row for chunk in map_files(augment_one, list(range(len(paths))), args.jobs) for row in chunk]
        atomic_write_text(out_dir / 'manifest.tsv', "\n".join(["file\tsource\tedit\tparams"] + rows) + "\n")
        logger.info("Wrote %d edited file(s) to %s", len(rows), out_dir)

    def cmd_eval(self, args):
        """Build the robustness, localization, attribution, runtime and quality reports."""
        data = _require_path(args.data, "Evaluation data directory")
        store = self._load_model()
        sample_rate = store.model_config.sample_rate
        clip_samples = int(round(self.config.get('eval.clip_seconds') * sample_rate))
        clips = [AudioClip(c.samples[:clip_samples], c.sample_rate)
                 for c in self._load_clips(collect_wavs([str(data)]), args.jobs, args.max_clips)]
        if args.negatives:
            negatives = self._load_clips(collect_wavs([str(_require_path(args.negatives, "Negatives"))]),
                                         args.jobs, args.max_clips)
        else:
            negatives = clips
        seed = self._seed()
        out_dir = Path(args.out)
        localization = None

        if 'robustness' in args.reports:
            write_csv(robustness_table(store, clips, self.config.get_eval_specs(), seed), out_dir / 'robustness.csv')

        if 'localization' in args.reports:
            shortest = min(c.duration for c in clips)
            durations = [d for d in self.config.get('eval.durations') if d <= shortest]
            skipped = [d for d in self.config.get('eval.durations') if d > shortest]
            if skipped:
                logger.warning("Skipping localization durations %s longer than the shortest clip (%.2fs)",
                               skipped, shortest)
            localization = localization_curve(store, clips, durations, seed, oracle=args.oracle,
                                              threshold=self.config.get('eval.loc_threshold'))
            write_csv(localization, out_dir / 'localization.csv')

        if 'attribution' in args.reports:
            if store.model_config.message_bits == 0:
                logger.warning("Zero-bit checkpoint: attribution report skipped")
            else:
                table = attribution_table(store, clips, negatives, self.config.get('eval.attribution_sizes'),
                                          self.config.get('eval.target_fpr'),
                                          self.config.get('eval.max_embedded'), seed)
                write_csv(table, out_dir / 'attribution.csv')

        if 'runtime' in args.reports:
            table = runtime_benchmark(store, self.config.get('eval.runtime_durations'),
                                      self.config.get('eval.runtime_repeats'), sample_rate, seed)
            write_csv(table, out_dir / 'runtime.csv')

        if args.quality:
            generator = torch.Generator().manual_seed(seed)
            bits = store.model_config.message_bits
            paths = collect_wavs([str(data)])[:len(clips)]
            pairs = [(p.name, c, embed(store, c, Message.random(bits, generator) if bits else None))
                     for p, c in zip(paths, clips)]
            write_csv(quality_table(pairs), out_dir / 'quality.csv')

        if args.plots:
            plot_curves(out_dir, localization=localization)

    def cmd_attack(self, args):
        """Sweep adversarial and noise attacks over the perturbation grid."""
        data = _require_path(args.data, "Attack data directory")
        store = self._load_model()
        attack_cfg = self.config.get_attack_config()
        seed = self._seed()
        genuine = self._load_clips(collect_wavs([str(data)]), args.jobs, args.max_clips)
        bits = store.model_config.message_bits
        generator = torch.Generator().manual_seed(seed)
        watermarked = [embed(store, c, Message.random(bits, generator) if bits else None) for c in genuine]

        proxies: Dict[str, torch.nn.Module] = {}
        if 'semiblackbox' in args.mode:
            proxy_path = _require_path(args.proxy_checkpoint, "--proxy-checkpoint")
            proxies['semiblackbox'] = ParameterStore.load(proxy_path).build(self.config.get('device')).detector
        if 'blackbox' in args.mode:
            surrogate = train_surrogate(watermarked, genuine, steps=self.config.get('attack.surrogate_steps'),
                                        seed=seed, model_config=store.model_config)
            proxies['blackbox'] = surrogate.detector

        clips = watermarked if attack_cfg.target == 'remove' else genuine
        table = attack_sweep(store, clips, self.config.get('attack.alphas'), modes=args.mode, proxies=proxies,
                             cfg=attack_cfg, threshold=self.config.get('eval.threshold'))
        out_dir = Path(args.out)
        write_csv(table, out_dir / 'attack.csv')
        if args.plots:
            plot_curves(out_dir, attacks=table)

    def cmd_fpr(self, args):
        """Theoretical, simulated and measured false-positive rates."""
        if args.k < 1:
            raise UsageError(f"--k must be >= 1, got {args.k}")
        if args.tau is not None:
            if not 0 <= args.tau <= args.k:
                raise UsageError(f"--tau must be in [0, {args.k}], got {args.tau}")
            print(f"{theoretical_fpr(args.k, args.tau):.6f}")
            return

        out_dir = Path(args.out)
        taus = args.tau_grid if args.tau_grid else None
        write_csv(monte_carlo_fpr(args.k, args.p, args.trials, self._seed(), taus), out_dir / 'fpr.csv')

        if args.data:
            data = _require_path(args.data, "Genuine clip directory")
            store = self._load_model()
            clips = self._load_clips(collect_wavs([str(data)]), args.jobs)

            def measure(clip: AudioClip):
                with torch.no_grad():
                    out = detector_forward(store, clip)
                everywhere = np.ones(out.num_samples, dtype=np.int64)
                soft = soft_message(out, everywhere) if out.num_bits else None
                bits = decode_message(out, everywhere).bits if out.num_bits else None
                return detect(out).score, soft, bits

            measured = map_files(measure, clips, args.jobs)
            scores = [m[0] for m in measured]
            soft_bits = np.stack([m[1] for m in measured]) if store.model_config.message_bits else None
            report = empirical_fpr(scores, np.round(np.linspace(0.0, 1.0, 21), 2), soft_bits)
            write_csv(report.table, out_dir / 'detection_fpr.csv')
            if report.histogram is not None:
                write_csv(report.histogram, out_dir / 'histogram.csv')
                write_csv(empirical_bit_fpr(np.array([m[2] for m in measured], dtype=np.int64)),
                          out_dir / 'bit_fpr.csv')


def main():
    """Main entry point for the VoxMark application."""
    app = VoxMarkApplication()
    sys.exit(app.run())


if __name__ == '__main__':
    main()
