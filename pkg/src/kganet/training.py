"""Mixed video/image training with warmup + step-decay SGD and checkpoint resume."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from .data import Dataset, MixedBatch, sample_batch
from .errors import ConfigError, ContractError, DivergenceError
from .losses import (
    ClassCenters,
    LossBreakdown,
    center_loss,
    coherence_loss,
    cross_entropy,
    distances_to_center,
    total_loss,
    update_centers,
)
from .model import KGANet, ModelConfig, load_archive, save_archive

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "no_image_guidance", "no_coherence", "no_coherence_no_attention")


@dataclass
class TrainConfig:
    base_lr: float = 0.005
    warmup_iters: int = 125
    decay_iters: Tuple[int, ...] = (500, 750)
    total_iters: int = 1000
    decay_factor: float = 0.1
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 0.0
    max_grad_norm: float = 0.0
    lambda_coherence: float = 1.0
    center_alpha: float = 0.5
    ablation: str = "full"
    seed: int = 0
    video_prob: float = 0.5
    fixed_split: bool = False
    image_guidance: bool = True
    pooling: str = "attention"
    max_frames: int = 128
    hidden_dim: int = 32
    feature_dim: int = 16
    hidden_activation: str = "softplus"
    feature_activation: str = "tanh"
    log_interval: int = 10
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.decay_iters = tuple(int(i) for i in self.decay_iters)

    @classmethod
    def full_schedule(cls, **overrides) -> "TrainConfig":
        """The full-length schedule: 8000 iterations, warmup 1000, decays at 4000/6000."""
        base = dict(warmup_iters=1000, decay_iters=(4000, 6000), total_iters=8000)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.total_iters < 0 or self.batch_size < 1:
            raise ConfigError("total_iters must be >= 0 and batch_size >= 1")
        if self.total_iters > 0 and self.decay_iters:
            if not self.warmup_iters < min(self.decay_iters) <= max(self.decay_iters) < self.total_iters:
                raise ConfigError("need warmup_iters < decay_iters < total_iters")
        if self.lambda_coherence < 0:
            raise ConfigError("lambda_coherence must be >= 0")
        if not 0.0 < self.center_alpha <= 1.0:
            raise ConfigError("center_alpha must lie in (0, 1]")
        if not 0.0 <= self.video_prob <= 1.0:
            raise ConfigError("video_prob must lie in [0, 1]")
        if self.base_lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need base_lr >= 0 and 0 <= momentum < 1")

    def resolved(self) -> "TrainConfig":
        """Copy with the ablation's switches applied."""
        self.validate()
        cfg = replace(self)
        if cfg.ablation == "no_image_guidance":
            cfg.image_guidance = False
            cfg.video_prob = 1.0
        elif cfg.ablation == "no_coherence":
            cfg.lambda_coherence = 0.0
        elif cfg.ablation == "no_coherence_no_attention":
            cfg.lambda_coherence = 0.0
            cfg.pooling = "mean"
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_iters"] = list(self.decay_iters)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def model_config(self, input_dim: int) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim,
            hidden_dim=self.hidden_dim,
            feature_dim=self.feature_dim,
            hidden_activation=self.hidden_activation,
            feature_activation=self.feature_activation,
            pooling=self.pooling,
            max_frames=self.max_frames,
            seed=self.seed,
        )


def lr_at(iteration: int, config: TrainConfig) -> float:
    """``base_lr * min(1, it / warmup) * decay_factor ** (#milestones <= it)``."""
    ramp = 1.0 if config.warmup_iters <= 0 else min(1.0, iteration / config.warmup_iters)
    passed = sum(1 for m in config.decay_iters if iteration >= m)
    return config.base_lr * ramp * config.decay_factor ** passed


class SGD:
    """SGD with heavy-ball momentum: ``v = mu * v + g; p -= lr * v``."""

    def __init__(
        self,
        params: List[ag.Parameter],
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        max_grad_norm: float = 0.0,
    ):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.velocity = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, lr: float) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if self.max_grad_norm > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        for p, g in zip(self.params, grads):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.momentum * self.velocity[p.name] + g
            self.velocity[p.name] = v
            p.data = p.data - lr * v

    def zero_grad(self) -> None:
        ag.zero_grads(self.params)


def _mean(terms: List[ag.Tensor]) -> ag.Tensor:
    if not terms:
        return ag.Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return ag.scale(acc, 1.0 / len(terms))


def train_step(
    model: KGANet,
    centers: ClassCenters,
    batch: MixedBatch,
    config: TrainConfig,
    optimizer: SGD,
    iteration: int = 0,
) -> Tuple[LossBreakdown, ClassCenters]:
    """One optimization step; returns the loss breakdown and the updated centers.

    ``config`` must already be resolved (see :meth:`TrainConfig.resolved`).
    """
    ce_video, ce_frame, coherence = [], [], []
    frame_feats, frame_labels = [], []
    for video in batch.videos:
        out = model.video_forward(video.frames)
        ce_video.append(cross_entropy(out.video_logits, [video.label]))
        ce_frame.append(cross_entropy(out.frame_logits, [video.label] * video.n_frames))
        if config.pooling == "attention":
            d = distances_to_center(out.frame_features, video.label, centers)
            coherence.append(coherence_loss(out.attention_weights, d))
        if not config.image_guidance:
            frame_feats.append(out.frame_features)
            frame_labels.extend([video.label] * video.n_frames)

    ce_image = ag.Tensor(0.0)
    center = ag.Tensor(0.0)
    center_feats, center_labels = None, None
    if config.image_guidance and batch.images:
        pixels = np.stack([im.pixels for im in batch.images])
        center_labels = [im.label for im in batch.images]
        feats, logits = model.image_forward(pixels)
        ce_image = cross_entropy(logits, center_labels)
        center = center_loss(feats, center_labels, centers)
        center_feats = feats.data
    elif not config.image_guidance and frame_feats:
        feats = ag.concat(frame_feats, axis=0)
        center_labels = frame_labels
        center = center_loss(feats, center_labels, centers)
        center_feats = feats.data

    parts = (_mean(ce_video), ce_image, _mean(ce_frame), center, _mean(coherence))
    loss = total_loss(*parts, lam=config.lambda_coherence)
    breakdown = LossBreakdown(*(p.item() for p in parts), total=loss.item(), lam=config.lambda_coherence)
    if not np.isfinite(breakdown.total):
        raise DivergenceError("total", breakdown)

    optimizer.zero_grad()
    ag.backward(loss)
    optimizer.step(lr_at(iteration, config))
    optimizer.zero_grad()

    if center_feats is not None:
        centers = update_centers(center_feats, center_labels, centers)
    return breakdown, centers


@dataclass
class TrainResult:
    model: KGANet
    centers: ClassCenters
    history: List[dict] = field(default_factory=list)
    iteration: int = 0


class Trainer:
    """Owns all mutable training state so it can be checkpointed and resumed."""

    def __init__(self, config: TrainConfig, train_data: Dataset):
        self.config = config.resolved()
        self.data = train_data
        input_dim = train_data.input_dim
        if input_dim is None:
            raise ContractError("training dataset is empty")
        self.model = KGANet(self.config.model_config(input_dim))
        self.optimizer = SGD(
            self.model.parameters(),
            self.config.momentum,
            self.config.weight_decay,
            self.config.max_grad_norm,
        )
        self.centers = ClassCenters.zeros(self.config.feature_dim, self.config.center_alpha)
        self.rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, 1]))
        self.iteration = 0
        self.history: List[dict] = []

    def step(self) -> LossBreakdown:
        batch = sample_batch(
            self.rng,
            self.data,
            self.config.batch_size,
            max_frames=self.config.max_frames,
            video_prob=self.config.video_prob,
            fixed_split=self.config.fixed_split,
        )
        breakdown, self.centers = train_step(
            self.model, self.centers, batch, self.config, self.optimizer, self.iteration
        )
        if self.config.log_interval and self.iteration % self.config.log_interval == 0:
            self.history.append(breakdown.as_record(self.iteration))
        self.iteration += 1
        return breakdown

    # checkpoint layout: model parameters under their own names, momentum
    # buffers under "momentum/<name>", centers under "centers/<which>".
    def state(self) -> Tuple[Dict[str, np.ndarray], dict]:
        tensors = dict(self.model.state_dict())
        for name, v in self.optimizer.velocity.items():
            tensors[f"momentum/{name}"] = v
        tensors["centers/c_mal"] = self.centers.c_mal
        tensors["centers/c_benign"] = self.centers.c_benign
        meta = {
            "iteration": self.iteration,
            "rng_state": self.rng.bit_generator.state,
            "config_hash": self.config.hash(),
            "train_config": self.config.to_dict(),
            "model_config": asdict(self.model.config),
            "history": self.history,
        }
        return tensors, meta

    def save(self, path) -> None:
        tensors, meta = self.state()
        save_archive(path, tensors, meta)

    def restore(self, path) -> None:
        tensors, meta = load_archive(path)
        if meta.get("config_hash") != self.config.hash():
            raise ConfigError("checkpoint was written with a different training configuration")
        self.model.load_state_dict(tensors)
        for name in self.optimizer.velocity:
            self.optimizer.velocity[name] = tensors[f"momentum/{name}"].copy()
        self.centers = ClassCenters(
            tensors["centers/c_mal"], tensors["centers/c_benign"], self.config.center_alpha
        )
        self.rng.bit_generator.state = meta["rng_state"]
        self.iteration = int(meta["iteration"])
        self.history = list(meta["history"])

    def result(self) -> TrainResult:
        return TrainResult(self.model, self.centers, self.history, self.iteration)


def load_trained(path) -> Tuple[KGANet, ClassCenters, dict]:
    """Model, centers and metadata from a training checkpoint."""
    tensors, meta = load_archive(path)
    if "model_config" not in meta:
        raise ConfigError("checkpoint has no model_config metadata")
    model = KGANet(ModelConfig(**meta["model_config"]))
    model.load_state_dict(tensors)
    alpha = meta.get("train_config", {}).get("center_alpha", 0.5)
    centers = ClassCenters(tensors["centers/c_mal"], tensors["centers/c_benign"], alpha)
    return model, centers, meta


def write_history(path, history: List[dict]) -> None:
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(
    config: TrainConfig,
    train_data: Dataset,
    out_dir: Optional[str] = None,
    resume_from: Optional[str] = None,
    stop_at: Optional[int] = None,
    callback: Optional[Callable[[Trainer], None]] = None,
) -> TrainResult:
    """Run the schedule from scratch or from a checkpoint.

    ``stop_at`` ends the run early (after that many total iterations), leaving a
    resumable ``checkpoint.kgac`` in ``out_dir``.
    """
    trainer = Trainer(config, train_data)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    if resume_from is not None:
        trainer.restore(resume_from)
    end = trainer.config.total_iters if stop_at is None else min(stop_at, trainer.config.total_iters)
    interval = trainer.config.checkpoint_interval
    while trainer.iteration < end:
        breakdown = trainer.step()
        if trainer.config.log_interval and (trainer.iteration - 1) % trainer.config.log_interval == 0:
            logger.debug("iter %d total %.6f", trainer.iteration - 1, breakdown.total)
        if out_dir and interval and trainer.iteration % interval == 0 and trainer.iteration < end:
            trainer.save(os.path.join(out_dir, f"checkpoint_{trainer.iteration:06d}.kgac"))
        if callback is not None:
            callback(trainer)
    if out_dir:
        trainer.save(os.path.join(out_dir, "checkpoint.kgac"))
        write_history(os.path.join(out_dir, "history.jsonl"), trainer.history)
    return trainer.result()
