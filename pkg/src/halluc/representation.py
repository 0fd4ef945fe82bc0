"""Two-stage representation learning on the toy backbone.

Stage 1 trains backbone + classifier with cross-entropy (the L2 regularizer
on the weights is realized through SGD weight decay).  Stage 2 trains a
fresh student of identical architecture against the frozen stage-1 teacher
with alpha * cross-entropy + beta * KL(teacher-probs, student-probs).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import ops
from .data import FeatureDataset, write_feature_file, FormatError
from .models import BackboneModel, ClassifierHead, same_architecture
from .tensor import ShapeError, Tensor, backward, no_grad, zero_grads
from .optim import SgdState, sgd_step


@dataclass
class ReprConfig:
    alpha: float = 0.5
    beta: float = 0.5
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"need alpha, beta >= 0 with alpha + beta > 0, "
                             f"got {self.alpha}, {self.beta}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def base_label_map(dataset: FeatureDataset) -> Dict[int, int]:
    """Contiguous 0..C-1 labels for the sorted base classes."""
    return {cid: i for i, cid in enumerate(dataset.classes("base"))}


def _base_examples(dataset: FeatureDataset) -> Tuple[np.ndarray, np.ndarray]:
    label_map = base_label_map(dataset)
    if not label_map:
        raise ValueError("base split is empty")
    mask = np.isin(dataset.class_ids, list(label_map))
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("base split has no examples")
    labels = np.array([label_map[int(c)] for c in dataset.class_ids[idx]])
    return idx, labels


def classification_loss(backbone: BackboneModel, head: ClassifierHead,
                        images: Tensor, labels: np.ndarray) -> Tensor:
    """Batch-mean cross-entropy of the classifier on pooled backbone features."""
    return ops.cross_entropy_mean(head(backbone.pooled(images)), labels)


def distillation_loss(student: Tuple[BackboneModel, ClassifierHead],
                      teacher: Tuple[BackboneModel, ClassifierHead],
                      images: Tensor, labels: np.ndarray,
                      alpha: float, beta: float) -> Tensor:
    """alpha * cross-entropy + beta * KL of the frozen teacher's predictions
    from the student's."""
    s_bb, s_head = student
    loss = ops.mul(classification_loss(s_bb, s_head, images, labels), alpha)
    if beta != 0.0:
        t_bb, t_head = teacher
        with no_grad():
            teacher_probs = ops.softmax(t_head(t_bb.pooled(images)))
        student_probs = ops.softmax(s_head(s_bb.pooled(images)))
        kl = ops.kl_divergence_mean(student_probs, teacher_probs)
        loss = ops.add(loss, ops.mul(kl, beta))
    return loss


def _run_epochs(dataset: FeatureDataset, params, loss_fn, config: ReprConfig,
                dtype) -> List[float]:
    idx, labels = _base_examples(dataset)
    rng = np.random.default_rng(config.seed)
    state = SgdState(learning_rate=config.learning_rate, momentum=config.momentum,
                     weight_decay=config.weight_decay)
    history: List[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(idx.size)
        batch_losses = []
        for start in range(0, idx.size, config.batch_size):
            rows = order[start:start + config.batch_size]
            images = Tensor(dataset.features[idx[rows]].astype(dtype))
            loss = loss_fn(images, labels[rows])
            backward(loss)
            sgd_step(params, [p.grad for p in params], state)
            zero_grads(params)
            batch_losses.append(loss.item())
        history.append(float(np.mean(batch_losses)))
    return history


def train_stage1(dataset: FeatureDataset, backbone: BackboneModel, head: ClassifierHead,
                 config: ReprConfig) -> List[float]:
    """Cross-entropy training of (backbone, head) on the base split."""
    params = backbone.parameters() + head.parameters()
    return _run_epochs(dataset, params,
                       lambda x, y: classification_loss(backbone, head, x, y),
                       config, backbone.dtype)


def train_stage2_distill(dataset: FeatureDataset,
                         teacher: Tuple[BackboneModel, ClassifierHead],
                         student: Tuple[BackboneModel, ClassifierHead],
                         config: ReprConfig) -> List[float]:
    """Distill the frozen teacher into an identically shaped student."""
    t_bb, t_head = teacher
    s_bb, s_head = student
    if not (same_architecture(t_bb.net, s_bb.net)
            and t_head.linear.weight.shape == s_head.linear.weight.shape):
        raise ShapeError("student architecture does not match the teacher")
    params = s_bb.parameters() + s_head.parameters()
    return _run_epochs(dataset, params,
                       lambda x, y: distillation_loss(student, teacher, x, y,
                                                      config.alpha, config.beta),
                       config, s_bb.dtype)


def export_features(backbone: BackboneModel, dataset: FeatureDataset, path,
                    batch_size: int = 64) -> FeatureDataset:
    """Run every example through the backbone and write an FTH1 feature file.

    Splits carry over; the min/max scaling statistics are recomputed on the
    base split of the exported features.
    """
    feats = []
    with no_grad():
        for start in range(0, dataset.num_examples, batch_size):
            batch = Tensor(dataset.features[start:start + batch_size].astype(backbone.dtype))
            feats.append(backbone.features(batch).data.astype(np.float32))
    features = np.concatenate(feats, axis=0)
    base_mask = np.isin(dataset.class_ids, dataset.classes("base"))
    pool = features[base_mask] if base_mask.any() else features
    exported = FeatureDataset(features, dataset.class_ids.copy(),
                              {k: list(v) for k, v in dataset.splits.items()},
                              scale_min=float(pool.min()), scale_max=float(pool.max()))
    try:
        write_feature_file(path, exported)
    except OSError as exc:
        raise FormatError(f"cannot write feature file {path}: {exc}") from exc
    return exported
