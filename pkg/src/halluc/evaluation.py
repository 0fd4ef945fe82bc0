"""Episodic inference and evaluation.

Per class the support features (optionally augmented with generated
features) are pooled to vectors and averaged into a vector prototype; each
query is assigned to the prototype at the smallest squared Euclidean
distance, ties broken toward the lowest class index.  All method variants
are scored on the same task sequence so comparisons are paired.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import EpisodeSpec, FeatureDataset, Episode, episode_feature_arrays, sample_episode
from .meta_training import class_feature_tensors, episode_loss
from .models import HallucinatorModel, NoiseSampler
from .optim import AdamState, adam_step
from .tensor import ShapeError, Tensor, backward, no_grad, zero_grads

VARIANT_TAGS = ("baseline", "baseline_kd", "vfh", "tfh", "tfh_ft")
_HALLUCINATING = {"vfh", "tfh", "tfh_ft"}
_VARIANT_SALT = {tag: i for i, tag in enumerate(VARIANT_TAGS)}


@dataclass
class MethodVariant:
    """One Table-style method row: a tag plus its inference configuration."""

    tag: str
    hallucinator: Optional[HallucinatorModel] = None
    m_test: int = 500
    finetune_steps: int = 10
    finetune_lr: float = 1e-5
    finetune_m: int = 50

    def __post_init__(self):
        if self.tag not in VARIANT_TAGS:
            raise ValueError(f"unknown variant tag {self.tag!r}; expected one of {VARIANT_TAGS}")
        needs_model = self.tag in _HALLUCINATING
        if needs_model and self.hallucinator is None:
            raise ValueError(f"variant {self.tag!r} needs a hallucinator")
        if not needs_model and self.hallucinator is not None:
            raise ValueError(f"variant {self.tag!r} must not carry a hallucinator")
        if self.hallucinator is not None:
            want = "vector" if self.tag == "vfh" else "tensor"
            if self.hallucinator.variant != want:
                raise ValueError(f"variant {self.tag!r} needs a {want} hallucinator, "
                                 f"got {self.hallucinator.variant!r}")


@dataclass
class EpisodeFeatures:
    """Scaled per-class feature arrays of one sampled episode."""

    support: np.ndarray  # (N, K, d, h, w)
    query: np.ndarray    # (N, Q, d, h, w)

    @classmethod
    def from_episode(cls, dataset: FeatureDataset, episode: Episode,
                     dtype=np.float64) -> "EpisodeFeatures":
        support, query = episode_feature_arrays(dataset, episode, dtype=dtype)
        return cls(support, query)


@dataclass
class ClassificationResult:
    predictions: np.ndarray  # (N*Q,) episode-local class indices
    accuracy: float


def _pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(-2, -1))


def finetune_on_support(model: HallucinatorModel, support: np.ndarray, steps: int,
                        learning_rate: float, generated_count: int,
                        sampler: NoiseSampler) -> Tuple[HallucinatorModel, float, float]:
    """Adapt a copy of the hallucinator to the episode support set.

    Runs `steps` Adam steps of the training objective on support-derived
    prototypes; the original model is untouched.  Returns the adapted copy
    plus the objective value before and after, measured on one fixed noise
    draw so the two numbers are comparable.
    """
    adapted = model.clone()
    feats = class_feature_tensors(model.variant, support)
    eval_noise = [sampler.sample(generated_count) for _ in feats]
    loss_before = episode_loss(adapted, feats, generated_count, noise=eval_noise).item()
    params = adapted.parameters()
    state = AdamState(learning_rate=learning_rate)
    for _ in range(steps):
        loss = episode_loss(adapted, feats, generated_count, sampler=sampler)
        backward(loss)
        adam_step(params, [p.grad for p in params], state)
        zero_grads(params)
    loss_after = episode_loss(adapted, feats, generated_count, noise=eval_noise).item()
    return adapted, loss_before, loss_after


def classify_episode(feats: EpisodeFeatures, variant: MethodVariant,
                     rng: np.random.Generator) -> ClassificationResult:
    """Nearest-prototype predictions for every query of one episode."""
    support, query = feats.support, feats.query
    n_way, k_shot = support.shape[:2]
    n_query = query.shape[1]

    model = variant.hallucinator
    if model is not None:
        if model.variant == "tensor":
            matches = support.shape[2:] == tuple(model.feature_shape)
        else:
            matches = (support.shape[2],) == tuple(model.feature_shape)
        if not matches:
            raise ShapeError(f"episode features {support.shape[2:]} do not match the "
                             f"hallucinator feature shape {model.feature_shape}")

    if model is not None and variant.tag == "tfh_ft" and variant.finetune_steps > 0:
        sampler = NoiseSampler(rng, model.noise_dim, model.dtype)
        model, _, _ = finetune_on_support(model, support, variant.finetune_steps,
                                          variant.finetune_lr, variant.finetune_m, sampler)
    elif model is not None:
        sampler = NoiseSampler(rng, model.noise_dim, model.dtype)

    pooled_support = _pool(support)                      # (N, K, d)
    prototypes = np.empty((n_way, support.shape[2]), dtype=support.dtype)
    with no_grad():
        for j in range(n_way):
            if model is None or variant.m_test == 0:
                prototypes[j] = pooled_support[j].mean(axis=0)
                continue
            if model.variant == "tensor":
                proto = Tensor(support[j].mean(axis=0).astype(model.dtype))
                generated = model.hallucinate_batch(proto, variant.m_test, sampler).data
                pooled_gen = _pool(generated)
            else:
                proto = Tensor(pooled_support[j].mean(axis=0).astype(model.dtype))
                pooled_gen = model.hallucinate_batch(proto, variant.m_test, sampler).data
            stacked = np.concatenate([pooled_support[j], pooled_gen.astype(support.dtype)])
            prototypes[j] = stacked.mean(axis=0)

    pooled_query = _pool(query).reshape(n_way * n_query, -1)
    labels = np.repeat(np.arange(n_way), n_query)
    deltas = pooled_query[:, None, :] - prototypes[None, :, :]
    distances = np.einsum("qnd,qnd->qn", deltas, deltas)
    predictions = distances.argmin(axis=1)               # argmin takes the lowest index on ties
    return ClassificationResult(predictions, float((predictions == labels).mean()))


@dataclass
class EvalReport:
    """Per-variant mean accuracy (%) with 95% confidence half-width over tasks."""

    n_way: int
    k_shot: int
    task_count: int
    seed: int
    accuracy: Dict[str, float] = field(default_factory=dict)
    ci95: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "task_count": self.task_count,
            "seed": self.seed,
            "results": {tag: {"accuracy": self.accuracy[tag], "ci95": self.ci95[tag]}
                        for tag in self.accuracy},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(dataset: FeatureDataset, variants: Sequence[MethodVariant], task_count: int,
             spec: EpisodeSpec, seed: int, split: str = "novel", jobs: int = 1,
             dtype=np.float64) -> EvalReport:
    """Score all variants on one shared sequence of sampled tasks."""
    if task_count < 1:
        raise ValueError(f"task_count must be positive, got {task_count}")
    tags = [v.tag for v in variants]
    if len(set(tags)) != len(tags):
        raise ValueError(f"duplicate variant tags: {tags}")
    # fail fast if the split cannot support the spec
    sample_episode(dataset, split, spec, np.random.default_rng(0))

    def run_task(t: int) -> List[float]:
        episode = sample_episode(dataset, split, spec,
                                 np.random.default_rng([seed, t, len(VARIANT_TAGS)]))
        feats = EpisodeFeatures.from_episode(dataset, episode, dtype=dtype)
        accs = []
        for v in variants:
            vrng = np.random.default_rng([seed, t, _VARIANT_SALT[v.tag]])
            accs.append(classify_episode(feats, v, vrng).accuracy)
        return accs

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_task = list(pool.map(run_task, range(task_count)))
    else:
        per_task = [run_task(t) for t in range(task_count)]

    table = np.asarray(per_task)                          # (T, num_variants)
    report = EvalReport(n_way=spec.n_way, k_shot=spec.k_shot, task_count=task_count,
                        seed=seed)
    for col, v in enumerate(variants):
        accs = table[:, col]
        report.accuracy[v.tag] = float(accs.mean() * 100.0)
        spread = float(accs.std(ddof=1) * 100.0) if task_count > 1 else 0.0
        report.ci95[v.tag] = 1.96 * spread / np.sqrt(task_count)
    return report


def report_table(reports: Sequence[EvalReport]) -> str:
    """Human-readable table, one row per variant, one column pair per K."""
    if not reports:
        return "(no results)"
    shots = [r.k_shot for r in reports]
    tags: List[str] = []
    for r in reports:
        for tag in r.accuracy:
            if tag not in tags:
                tags.append(tag)
    header = f"{'method':<12}" + "".join(f"{f'{k}-shot':>18}" for k in shots)
    lines = [header, "-" * len(header)]
    for tag in tags:
        cells = []
        for r in reports:
            if tag in r.accuracy:
                cells.append(f"{r.accuracy[tag]:6.2f} +/- {r.ci95[tag]:4.2f}")
            else:
                cells.append("--")
        lines.append(f"{tag:<12}" + "".join(f"{c:>18}" for c in cells))
    return "\n".join(lines)
