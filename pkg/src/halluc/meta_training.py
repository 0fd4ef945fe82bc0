"""Episodic meta-training of the hallucinator.

Each iteration samples an N-way K-shot episode from the base split, computes
per-class prototype tensors, generates M class-conditional features from
noise, and takes one Adam step on the mean squared distance of the generated
features to their prototypes (summed over elements, averaged over the M*N
generated samples).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .data import Episode, EpisodeSpec, FeatureDataset, episode_feature_arrays, sample_episode
from .models import HallucinatorModel, NoiseSampler, save_hallucinator
from .optim import AdamState, adam_step
from .tensor import ShapeError, Tensor, backward, zero_grads


@dataclass
class HallucTrainConfig:
    n_way: int = 5
    k_shot: int = 20
    generated_count: int = 50
    epochs: int = 50
    tasks_per_epoch: int = 600
    learning_rate: float = 1e-5
    lr_half_every_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_way, self.k_shot, self.generated_count, self.epochs,
                  self.tasks_per_epoch, self.lr_half_every_epochs)
        if any(c < 1 for c in counts):
            raise ValueError(f"all counts must be positive, got {self}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


def epoch_learning_rate(config: HallucTrainConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch: halves every lr_half_every_epochs."""
    return config.learning_rate * 0.5 ** ((epoch - 1) // config.lr_half_every_epochs)


def prototype(features: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of K equally shaped feature tensors."""
    if len(features) == 0:
        raise ShapeError("prototype: empty feature list")
    acc = features[0]
    for f in features[1:]:
        acc = ops.add(acc, f)
    return ops.mul(acc, 1.0 / len(features))


def episode_loss(model: HallucinatorModel, class_features: Sequence[Sequence[Tensor]],
                 generated_count: int, sampler: Optional[NoiseSampler] = None,
                 noise: Optional[Sequence[np.ndarray]] = None) -> Tensor:
    """Mean squared distance of generated features to their class prototypes.

    `noise` (one (M, k) array per class) bypasses the sampler for
    reproducible evaluations of the same objective.
    """
    n_classes = len(class_features)
    if n_classes == 0:
        raise ShapeError("episode_loss: no classes")
    if generated_count < 1:
        raise ShapeError(f"episode_loss: generated_count must be >= 1, got {generated_count}")
    if noise is None and sampler is None:
        raise ValueError("episode_loss: pass a sampler or explicit noise")
    total = None
    for j, feats in enumerate(class_features):
        proto = prototype(feats)
        cond = model.condition(proto)
        z = noise[j] if noise is not None else sampler.sample(generated_count)
        if z.shape != (generated_count, model.noise_dim):
            raise ShapeError(f"episode_loss: noise shape {z.shape} does not match "
                             f"({generated_count}, {model.noise_dim})")
        generated = model.generate(Tensor(np.asarray(z, dtype=model.dtype)), cond)
        term = ops.mse_to_target(generated, ops.tile_leading(proto, generated_count))
        total = term if total is None else ops.add(total, term)
    return ops.mul(total, 1.0 / (generated_count * n_classes))


def class_feature_tensors(model_variant: str, support: np.ndarray) -> List[List[Tensor]]:
    """Episode support array (N, K, d, h, w) as per-class Tensor lists; the
    vector variant pools spatially first."""
    if model_variant == "vector":
        support = support.mean(axis=(-2, -1))
    return [[Tensor(support[j, i]) for i in range(support.shape[1])]
            for j in range(support.shape[0])]


def train_hallucinator(dataset: FeatureDataset, model: HallucinatorModel,
                       config: HallucTrainConfig, split: str = "base",
                       checkpoint_dir=None, log_path=None
                       ) -> Tuple[HallucinatorModel, List[float]]:
    """Meta-train in place; returns the model and per-epoch mean losses.

    Emits a checkpoint per epoch into checkpoint_dir and appends
    epoch,mean_loss,learning_rate rows to the CSV at log_path.
    """
    spec = EpisodeSpec(n_way=config.n_way, k_shot=config.k_shot, queries_per_class=0,
                       generated_count=config.generated_count, seed=config.seed)
    episode_seed, noise_seed = np.random.SeedSequence(config.seed).spawn(2)
    episode_rng = np.random.default_rng(episode_seed)
    sampler = NoiseSampler(noise_seed, model.noise_dim, model.dtype)

    params = model.parameters()
    state = AdamState(learning_rate=config.learning_rate)
    history: List[float] = []
    log_rows = []
    for epoch in range(1, config.epochs + 1):
        state.learning_rate = epoch_learning_rate(config, epoch)
        losses = np.empty(config.tasks_per_epoch)
        for task in range(config.tasks_per_epoch):
            episode = sample_episode(dataset, split, spec, episode_rng)
            support, _ = episode_feature_arrays(dataset, episode, dtype=model.dtype)
            feats = class_feature_tensors(model.variant, support)
            loss = episode_loss(model, feats, config.generated_count, sampler=sampler)
            backward(loss)
            adam_step(params, [p.grad for p in params], state)
            zero_grads(params)
            losses[task] = loss.item()
        history.append(float(losses.mean()))
        log_rows.append((epoch, history[-1], state.learning_rate))
        if checkpoint_dir is not None:
            out = Path(checkpoint_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_hallucinator(out / f"hallucinator_epoch_{epoch:03d}.halc", model)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "learning_rate"])
            for row in log_rows:
                writer.writerow([row[0], repr(row[1]), repr(row[2])])
    return model, history
