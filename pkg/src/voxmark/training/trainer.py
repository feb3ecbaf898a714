#!/usr/bin/env python3
"""
VoxMark Trainer

Joint generator/detector optimization. Each step watermarks a batch,
partially removes the watermark, applies one sampled robustness edit per
clip, runs the detector on the edited watermarked and clean signals and
takes one balanced optimizer step. The discriminator is updated
separately with a hinge loss.

Author: VoxMark Team
Version: 1.0
"""

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from ..core.audio import load_wav, resample
from ..core.augment import (AugmentPolicy, augment_tensor, augment_with_mask, fit_length, resolve_params,
                            sample_augment)
from ..core.errors import AudioFormatError, AudioIOError, ConfigurationError, ValidationError
from ..core.losses import (BALANCED_LOSSES, LossWeights, LoudnessConfig, MultiScaleMelLoss, adversarial_loss,
                           discriminator_hinge_loss, si_snr, tf_loudness_diff, tf_loudness_loss)
from ..core.models import (DetectorOutput, Message, ModelConfig, ParameterStore, WatermarkModels,
                           create_models)
from .masking import mask_batch

logger = logging.getLogger(__name__)

PROBABILITY_EPS = 1e-7
METRIC_KEYS = ("step", "l1", "msspec", "adv", "loud", "loc", "dec", "disc", "si_snr", "skipped")


@dataclass
class TrainConfig:
    """The ``train`` config section; loss weights come from ``losses``."""

    batch_size: int = 32
    learning_rate: float = 1e-4
    disc_learning_rate: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    total_steps: int = 20000
    sample_length: int = 16000
    sample_rate: int = 16000
    mask_windows: int = 5
    seed: int = 0
    checkpoint_interval: int = 1000
    overfit: bool = False
    num_workers: int = 0
    loud_bands: int = 8
    loud_window: int = 2048
    loud_overlap: float = 0.5
    device: str = "cpu"
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if isinstance(self.loss_weights, Mapping):
            self.loss_weights = LossWeights.from_dict(self.loss_weights)
        self.validate()

    def validate(self):
        for name in ("batch_size", "learning_rate", "disc_learning_rate", "sample_length", "sample_rate",
                     "mask_windows", "checkpoint_interval", "loud_bands", "loud_window"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.total_steps < 0 or self.num_workers < 0:
            raise ConfigurationError("train.total_steps and train.num_workers must be >= 0")
        if 2 * self.mask_windows > self.sample_length:
            raise ConfigurationError(
                f"{self.mask_windows} mask windows do not fit in {self.sample_length} samples")

    @classmethod
    def from_dict(cls, values: Mapping[str, Any], loss_weights: Optional[Mapping[str, float]] = None) -> "TrainConfig":
        known = {f.name for f in fields(cls)} - {"loss_weights"}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"Unknown train config keys {sorted(unknown)}")
        return cls(**dict(values), loss_weights=LossWeights.from_dict(loss_weights or {}))


def loc_loss(out: Union[DetectorOutput, torch.Tensor], y: Union[torch.Tensor, np.ndarray]) -> torch.Tensor:
    """Mean per-sample binary cross-entropy of presence against labels (probabilities clamped)."""
    presence = out.presence if isinstance(out, DetectorOutput) else out
    labels = torch.as_tensor(y, dtype=presence.dtype, device=presence.device)
    if labels.shape != presence.shape:
        raise ValidationError(f"Presence {tuple(presence.shape)} and labels {tuple(labels.shape)} differ")
    return F.binary_cross_entropy(presence.clamp(PROBABILITY_EPS, 1.0 - PROBABILITY_EPS), labels)


def dec_loss(out: DetectorOutput, m: Union[Message, torch.Tensor], y: Union[torch.Tensor, np.ndarray]) -> torch.Tensor:
    """
    Message BCE averaged over watermarked samples and all bits.

    Returns zero (still attached to the graph) when no sample is labelled
    watermarked.
    """
    logits = out.message_logits
    bits = m.to_tensor() if isinstance(m, Message) else torch.as_tensor(m)
    bits = bits.to(device=logits.device, dtype=logits.dtype)
    if bits.dim() == 1:
        target = bits.expand_as(logits)
    else:
        target = bits.reshape(*bits.shape[:-1], *([1] * (logits.dim() - bits.dim())), bits.shape[-1]).expand_as(logits)
    selected = torch.as_tensor(y, device=logits.device) > 0.5
    if selected.shape != logits.shape[:-1]:
        raise ValidationError(f"Labels {tuple(selected.shape)} do not match logits {tuple(logits.shape)}")
    if logits.shape[-1] == 0 or not bool(selected.any()):
        return logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(logits[selected], target[selected])


class GradientBalancer:
    """
    Combines loss gradients at a shared output as sum_i w_i g_i / |g_i|.

    Norms are instantaneous (no smoothing across steps).
    """

    def __init__(self, weights: Mapping[str, float], eps: float = 1e-12):
        self.weights = dict(weights)
        self.eps = eps
        self.last_norms: Dict[str, float] = {}

    def combined_gradient(self, losses: Mapping[str, torch.Tensor], output: torch.Tensor) -> torch.Tensor:
        combined = torch.zeros_like(output)
        self.last_norms = {}
        for name, weight in self.weights.items():
            loss = losses.get(name)
            if weight == 0 or loss is None or not loss.requires_grad:
                continue
            (grad,) = torch.autograd.grad(loss, [output], retain_graph=True, allow_unused=True)
            if grad is None:
                continue
            norm = grad.norm()
            self.last_norms[name] = float(norm)
            combined = combined + weight * grad / (norm + self.eps)
        return combined


def balance_and_step(losses: Mapping[str, torch.Tensor], weights: LossWeights, optimizer: torch.optim.Optimizer,
                     output: torch.Tensor, balancer: Optional[GradientBalancer] = None) -> bool:
    """
    One optimizer step from balanced perceptual losses plus weighted
    localization and decoding losses.

    Returns:
        bool: False when the step was skipped because of a non-finite loss
        or gradient
    """
    optimizer.zero_grad(set_to_none=True)
    for name, loss in losses.items():
        if not torch.isfinite(loss).all():
            logger.warning("Non-finite %s loss; skipping step", name)
            return False

    balancer = balancer or GradientBalancer(weights.balanced())
    combined = balancer.combined_gradient({k: losses[k] for k in BALANCED_LOSSES if k in losses}, output)
    surrogate = (output * combined.detach()).sum()
    for name in ("loc", "dec"):
        if name in losses:
            surrogate = surrogate + getattr(weights, name) * losses[name]
    if surrogate.requires_grad:
        surrogate.backward()

    params = [p for group in optimizer.param_groups for p in group["params"] if p.grad is not None]
    if any(not torch.isfinite(p.grad).all() for p in params):
        optimizer.zero_grad(set_to_none=True)
        logger.warning("Non-finite gradient; skipping step")
        return False
    if balancer.last_norms:
        logger.debug("Balanced gradient norms: %s", balancer.last_norms)
    optimizer.step()
    return True


class WavDataset(Dataset):
    """
    Random fixed-length crops from a directory of WAV files.

    Files are loaded once and resampled to the training rate; unreadable
    or too-short files are skipped with a warning. Crop offsets depend only
    on (seed, epoch, index).
    """

    def __init__(self, root: Union[str, Path], sample_length: int = 16000, sample_rate: int = 16000, seed: int = 0):
        self.root = Path(root)
        self.sample_length = sample_length
        self.sample_rate = sample_rate
        self.seed = seed
        self.epoch = 0
        self.clips: List[torch.Tensor] = []

        files = sorted(self.root.rglob("*.wav")) if self.root.is_dir() else []
        for path in files:
            try:
                clip = resample(load_wav(path), sample_rate)
            except (AudioIOError, AudioFormatError) as e:
                logger.warning("Skipping %s: %s", path, e)
                continue
            if clip.num_samples < sample_length:
                logger.warning("Skipping %s: %d samples < %d", path, clip.num_samples, sample_length)
                continue
            self.clips.append(clip.to_tensor())
        if not self.clips:
            raise ConfigurationError(f"No usable training clips of >= {sample_length} samples in {self.root}")
        logger.info("Dataset %s: %d clips", self.root, len(self.clips))

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.clips)

    def __getitem__(self, index: int) -> torch.Tensor:
        clip = self.clips[index]
        generator = torch.Generator().manual_seed((self.seed * 1_000_003 + self.epoch) * 1_000_003 + index)
        offset = int(torch.randint(0, clip.shape[0] - self.sample_length + 1, (), generator=generator))
        return clip[offset: offset + self.sample_length].unsqueeze(0)


class WatermarkTrainer:
    """Owns the networks, optimizers, augmentation policy and random state of one run."""

    def __init__(self, cfg: TrainConfig, model_config: Optional[ModelConfig] = None,
                 models: Optional[WatermarkModels] = None, policy: Optional[AugmentPolicy] = None):
        self.cfg = cfg
        self.models = models or create_models(model_config or ModelConfig(sample_rate=cfg.sample_rate), cfg.seed)
        self.models.to(cfg.device)
        gen, det, disc = self.models.generator, self.models.detector, self.models.discriminator
        self.optimizer = torch.optim.Adam(list(gen.parameters()) + list(det.parameters()),
                                          lr=cfg.learning_rate, betas=cfg.betas)
        self.disc_optimizer = torch.optim.Adam(disc.parameters(), lr=cfg.disc_learning_rate, betas=cfg.betas)
        self.policy = policy or AugmentPolicy.default("train")
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.balancer = GradientBalancer(cfg.loss_weights.balanced())
        self.mel_loss = MultiScaleMelLoss(cfg.sample_rate).to(cfg.device)
        self.loudness_cfg = LoudnessConfig.for_rate(cfg.sample_rate)
        self.step = 0

    @property
    def message_bits(self) -> int:
        return self.models.config.message_bits

    def augment_batch(self, mixed: torch.Tensor, labels: torch.Tensor,
                      clean: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, List[str]]:
        """
        One sampled edit per element, applied with identical parameters to
        the masked watermarked clip and its clean original.
        """
        length = mixed.shape[-1]
        out_mixed, out_labels, out_clean, names = [], [], [], []
        for i in range(mixed.shape[0]):
            spec = sample_augment(self.policy, self.generator)
            params = resolve_params(spec, self.generator)
            edited, mask = augment_with_mask(mixed[i], labels[i], spec, self.generator, self.cfg.sample_rate, params)
            with torch.no_grad():
                edited_clean = augment_tensor(clean[i], spec, self.generator, self.cfg.sample_rate, params)
            out_mixed.append(fit_length(edited, length))
            out_labels.append(fit_length(mask, length))
            out_clean.append(fit_length(edited_clean, length))
            names.append(spec.name)
        return torch.stack(out_mixed), torch.stack(out_labels), torch.stack(out_clean), names

    def detect_pair(self, watermarked: torch.Tensor, clean: torch.Tensor) -> Tuple[DetectorOutput, DetectorOutput]:
        """Single detector pass over the watermarked and clean batches."""
        out = self.models.detector(torch.cat([watermarked, clean], dim=0))
        batch = watermarked.shape[0]
        return (DetectorOutput(out.presence[:batch], out.message_logits[:batch]),
                DetectorOutput(out.presence[batch:], out.message_logits[batch:]))

    def _update_policy(self, names: List[str], out_w: DetectorOutput, out_s: DetectorOutput, labels: torch.Tensor):
        with torch.no_grad():
            correct_w = ((out_w.presence > 0.5).to(labels.dtype) == labels).float().mean(dim=-1)
            correct_s = (out_s.presence <= 0.5).float().mean(dim=-1)
            accuracy = 0.5 * (correct_w + correct_s)
        for name, acc in zip(names, accuracy.tolist()):
            self.policy.update_accuracy(name, acc)

    def train_step(self, s: torch.Tensor) -> Dict[str, Any]:
        """
        One joint optimization step on a (B, 1, T) batch.

        Returns:
            Dict of metrics keyed by METRIC_KEYS
        """
        cfg = self.cfg
        gen, det, disc = self.models.generator, self.models.detector, self.models.discriminator
        gen.train()
        det.train()
        disc.train()
        s = s.to(cfg.device)
        batch = s.shape[0]

        message = None
        if self.message_bits > 0:
            message = torch.randint(0, 2, (batch, self.message_bits), generator=self.generator).to(cfg.device)
        delta = gen(s, message)
        s_w = s + delta

        disc_loss = discriminator_hinge_loss(disc(s).scores, disc(s_w.detach()).scores)
        self.disc_optimizer.zero_grad(set_to_none=True)
        if torch.isfinite(disc_loss):
            disc_loss.backward()
            self.disc_optimizer.step()
        else:
            logger.warning("Non-finite discriminator loss at step %d; skipping", self.step)

        real = disc(s)
        fake = disc(s_w)
        losses = {
            "l1": delta.abs().mean(),
            "msspec": self.mel_loss(s, s_w),
            "adv": adversarial_loss(fake.scores, real.features, fake.features),
            "loud": tf_loudness_loss(tf_loudness_diff(s.squeeze(1), delta.squeeze(1), cfg.loud_bands,
                                                      cfg.loud_window, cfg.loud_overlap, self.loudness_cfg,
                                                      cfg.sample_rate)),
        }

        mixed, labels = mask_batch(s, s_w, cfg.mask_windows, self.generator)
        edited, labels, edited_clean, names = self.augment_batch(mixed, labels, s)
        out_w, out_s = self.detect_pair(edited, edited_clean)
        labels = labels.squeeze(1)
        losses["loc"] = 0.5 * (loc_loss(out_w, labels) + loc_loss(out_s, torch.zeros_like(labels)))
        if message is not None:
            losses["dec"] = dec_loss(out_w, message, labels)
        else:
            losses["dec"] = delta.sum() * 0.0

        stepped = balance_and_step(losses, cfg.loss_weights, self.optimizer, delta, self.balancer)
        self._update_policy(names, out_w, out_s, labels)

        metrics = {"step": self.step + 1}
        metrics.update({name: float(value.detach()) for name, value in losses.items()})
        metrics["disc"] = float(disc_loss.detach())
        metrics["si_snr"] = self._batch_si_snr(s, s_w)
        metrics["skipped"] = not stepped
        return metrics

    @staticmethod
    def _batch_si_snr(s: torch.Tensor, s_w: torch.Tensor) -> Optional[float]:
        ref = s.detach().squeeze(1).double()
        est = s_w.detach().squeeze(1).double()
        voiced = ref.pow(2).sum(dim=-1) > 0
        if not bool(voiced.any()):
            return None
        return float(si_snr(ref[voiced], est[voiced]).mean())

    def state(self) -> ParameterStore:
        optimizer_states = {
            "optimizer": self.optimizer.state_dict(),
            "discriminator": self.disc_optimizer.state_dict(),
            "policy": [float(a) for a in self.policy.accuracy_estimates],
            "rng": self.generator.get_state(),
        }
        return ParameterStore.from_models(self.models, self.step, self.cfg.seed, optimizer_states)

    def save_checkpoint(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        store = self.state()
        path = out_dir / f"step_{self.step:07d}.pt"
        store.save(path)
        store.save(out_dir / "latest.pt")
        return path

    def resume(self, path: Union[str, Path]):
        """Restore networks, optimizers, policy and random state from a checkpoint."""
        store = ParameterStore.load(path)
        if store.config_hash != self.models.config.config_hash:
            raise ConfigurationError(f"Checkpoint {path} was trained with a different model config")
        for prefix, module in self.models.modules().items():
            module.load_state_dict(store.state_dict_for(prefix))
        states = store.optimizer_states
        if "optimizer" in states:
            self.optimizer.load_state_dict(states["optimizer"])
        if "discriminator" in states:
            self.disc_optimizer.load_state_dict(states["discriminator"])
        if "policy" in states and len(states["policy"]) == len(self.policy.specs):
            self.policy.set_accuracies(states["policy"])
        if "rng" in states:
            self.generator.set_state(states["rng"])
        self.step = store.step
        logger.info("Resumed from %s at step %d", path, self.step)

    def batches(self, dataset: WavDataset) -> Iterator[torch.Tensor]:
        loader = DataLoader(dataset, batch_size=min(self.cfg.batch_size, len(dataset)), shuffle=True,
                            num_workers=self.cfg.num_workers, drop_last=True,
                            generator=torch.Generator().manual_seed(self.cfg.seed))
        if self.cfg.overfit:
            fixed = next(iter(loader))
            while True:
                yield fixed
        epoch = 0
        while True:
            dataset.set_epoch(epoch)
            for batch in loader:
                yield batch
            epoch += 1

    def run(self, dataset: WavDataset, out_dir: Union[str, Path]) -> Path:
        """
        Train until ``total_steps``, writing metrics and checkpoints.

        Returns:
            Path: The latest checkpoint
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if self.step == 0:
            self.save_checkpoint(out_dir)
        metrics_path = out_dir / "metrics.jsonl"
        remaining = self.cfg.total_steps - self.step
        if remaining <= 0:
            logger.info("Nothing to train: step %d >= total_steps %d", self.step, self.cfg.total_steps)
            return out_dir / "latest.pt"

        batches = self.batches(dataset)
        with open(metrics_path, "a", encoding="utf-8") as metrics_file, \
                tqdm(total=self.cfg.total_steps, initial=self.step, desc="train") as progress:
            while self.step < self.cfg.total_steps:
                metrics = self.train_step(next(batches))
                self.step += 1
                metrics_file.write(json.dumps({k: metrics[k] for k in METRIC_KEYS}) + "\n")
                metrics_file.flush()
                progress.update(1)
                progress.set_postfix(loc=f"{metrics['loc']:.3f}", dec=f"{metrics['dec']:.3f}")
                if self.step % self.cfg.checkpoint_interval == 0 or self.step == self.cfg.total_steps:
                    self.save_checkpoint(out_dir)
        logger.info("Training finished at step %d", self.step)
        return out_dir / "latest.pt"


def train_loop(cfg: TrainConfig, data_dir: Union[str, Path], out_dir: Union[str, Path],
               model_config: Optional[ModelConfig] = None, policy: Optional[AugmentPolicy] = None,
               resume: bool = False) -> Path:
    """
    Train on a directory of WAVs and write checkpoints to ``out_dir``.

    Raises:
        ConfigurationError: If the dataset has no usable clip
    """
    dataset = WavDataset(data_dir, cfg.sample_length, cfg.sample_rate, cfg.seed)
    trainer = WatermarkTrainer(cfg, model_config=model_config, policy=policy)
    latest = Path(out_dir) / "latest.pt"
    if resume and latest.exists():
        trainer.resume(latest)
    return trainer.run(dataset, out_dir)
