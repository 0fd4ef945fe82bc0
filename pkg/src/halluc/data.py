"""Feature datasets: binary FTH1 files, split manifests, synthetic data,
and N-way K-shot episode sampling.

File format (little-endian): magic "FTH1", u32 version=1, u32 num_examples,
u32 d, u32 h, u32 w, then per example a u32 class id followed by d*h*w
float32 values.  A JSON sidecar at <path>.json carries the class splits and
the min/max scaling statistics computed on the base split.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

_MAGIC = b"FTH1"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

SPLIT_NAMES = ("base", "val", "novel")


class FormatError(ValueError):
    """A serialized artifact does not match its format contract."""


def _squash(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _smooth3(x: np.ndarray) -> np.ndarray:
    """3-tap box blur over the two trailing (spatial) axes, edges replicated.

    Synthetic class means are spatially correlated like real pooled conv
    features; spatially white means are not representable by a
    weight-sharing generator and make a useless testbed.
    """
    p = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(1, 1), (0, 0)], mode="edge")
    x = (p[..., :-2, :] + p[..., 1:-1, :] + p[..., 2:, :]) / 3.0
    p = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(1, 1)], mode="edge")
    return (p[..., :-2] + p[..., 1:-1] + p[..., 2:]) / 3.0


@dataclass
class FeatureDataset:
    """Labeled feature tensors with disjoint base/val/novel class splits."""

    features: np.ndarray            # (n, d, h, w) float32
    class_ids: np.ndarray           # (n,)
    splits: Dict[str, List[int]]
    scale_min: float = 0.0
    scale_max: float = 1.0
    _by_class: Dict[int, np.ndarray] = field(init=False, repr=False, default=None)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 4:
            raise FormatError(f"features must be (n, d, h, w), got {self.features.shape}")
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.class_ids.shape != (self.features.shape[0],):
            raise FormatError(f"class_ids shape {self.class_ids.shape} does not match "
                              f"{self.features.shape[0]} examples")
        self.splits = {name: sorted(int(c) for c in self.splits.get(name, []))
                       for name in SPLIT_NAMES}
        seen: Dict[int, str] = {}
        for name in SPLIT_NAMES:
            for cid in self.splits[name]:
                if cid in seen:
                    raise FormatError(f"class {cid} appears in splits {seen[cid]!r} and {name!r}")
                seen[cid] = name
        present = set(int(c) for c in np.unique(self.class_ids))
        unassigned = present - set(seen)
        if unassigned:
            raise FormatError(f"classes {sorted(unassigned)} missing from the split manifest")
        self._by_class = {}
        for cid in present:
            self._by_class[cid] = np.flatnonzero(self.class_ids == cid)

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        return tuple(self.features.shape[1:])

    @property
    def num_examples(self) -> int:
        return self.features.shape[0]

    def classes(self, split: str) -> List[int]:
        return self.splits[split]

    def indices_of_class(self, class_id: int) -> np.ndarray:
        return self._by_class.get(int(class_id), np.empty(0, dtype=np.int64))

    def scale(self, x: np.ndarray) -> np.ndarray:
        """Min-max map into [0, 1] using base-split statistics."""
        span = self.scale_max - self.scale_min
        if span <= 0:
            return x - self.scale_min
        return (x - self.scale_min) / span


def _base_scale_stats(features: np.ndarray, class_ids: np.ndarray,
                      base_classes: Sequence[int]) -> Tuple[float, float]:
    mask = np.isin(class_ids, list(base_classes))
    pool = features[mask] if mask.any() else features
    return float(pool.min()), float(pool.max())


def write_feature_file(path, dataset: FeatureDataset) -> None:
    path = Path(path)
    n = dataset.num_examples
    d, h, w = dataset.feature_shape
    record = np.dtype([("cid", "<u4"), ("feat", "<f4", (d * h * w,))])
    body = np.empty(n, dtype=record)
    body["cid"] = dataset.class_ids.astype(np.uint32)
    body["feat"] = dataset.features.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, n, d, h, w))
        fh.write(body.tobytes())
    manifest = {
        "base": dataset.splits["base"],
        "val": dataset.splits["val"],
        "novel": dataset.splits["novel"],
        "scale_min": dataset.scale_min,
        "scale_max": dataset.scale_max,
    }
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def manifest_path(path) -> Path:
    return Path(str(path) + ".json")


def read_feature_file(path) -> FeatureDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated feature file {path}: {len(raw)} bytes is smaller "
                          f"than the {_HEADER.size}-byte header")
    magic, version, n, d, h, w = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r} in {path}; expected {_MAGIC!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported feature file version {version} in {path}")
    record = np.dtype([("cid", "<u4"), ("feat", "<f4", (d * h * w,))])
    expected = _HEADER.size + n * record.itemsize
    if len(raw) != expected:
        raise FormatError(f"truncated feature file {path}: expected {expected} bytes, "
                          f"found {len(raw)}")
    body = np.frombuffer(raw, dtype=record, count=n, offset=_HEADER.size)
    mpath = manifest_path(path)
    if not mpath.exists():
        raise FormatError(f"missing split manifest {mpath}")
    manifest = json.loads(mpath.read_text())
    missing = {"base", "val", "novel", "scale_min", "scale_max"} - set(manifest)
    if missing:
        raise FormatError(f"manifest {mpath} lacks keys {sorted(missing)}")
    return FeatureDataset(
        features=body["feat"].reshape(n, d, h, w).copy(),
        class_ids=body["cid"].astype(np.int64),
        splits={k: manifest[k] for k in SPLIT_NAMES},
        scale_min=float(manifest["scale_min"]),
        scale_max=float(manifest["scale_max"]),
    )


def _resolve_split_counts(num_classes: int,
                          split_counts: Optional[Tuple[int, int, int]]) -> Tuple[int, int, int]:
    if split_counts is None:
        nb = max(1, int(np.ceil(0.6 * num_classes)))
        rest = num_classes - nb
        nv = rest // 2
        nn = rest - nv
        return nb, nv, nn
    nb, nv, nn = (int(c) for c in split_counts)
    if min(nb, nv, nn) < 0 or nb + nv + nn != num_classes:
        raise ValueError(f"split counts {split_counts} do not partition {num_classes} classes")
    return nb, nv, nn


def _split_map(num_classes: int, counts: Tuple[int, int, int]) -> Dict[str, List[int]]:
    nb, nv, nn = counts
    ids = list(range(num_classes))
    return {"base": ids[:nb], "val": ids[nb:nb + nv], "novel": ids[nb + nv:]}


def synth_clusters(num_classes: int, examples_per_class: int,
                   feature_shape: Tuple[int, int, int], intra_class_std: float,
                   seed: int, split_counts: Optional[Tuple[int, int, int]] = None
                   ) -> FeatureDataset:
    """Gaussian class clusters with random spatially smooth means in (0, 1),
    clipped to [0, 1]."""
    if num_classes < 1 or examples_per_class < 1 or intra_class_std < 0:
        raise ValueError("synth_clusters: counts must be positive and std nonnegative")
    rng = np.random.default_rng(seed)
    shape = tuple(feature_shape)
    means = _squash(2.5 * _smooth3(rng.standard_normal((num_classes,) + shape)))
    noise = rng.standard_normal((num_classes, examples_per_class) + shape) * intra_class_std
    feats = np.clip(means[:, None] + noise, 0.0, 1.0).astype(np.float32)
    features = feats.reshape((num_classes * examples_per_class,) + shape)
    class_ids = np.repeat(np.arange(num_classes), examples_per_class)
    splits = _split_map(num_classes, _resolve_split_counts(num_classes, split_counts))
    lo, hi = _base_scale_stats(features, class_ids, splits["base"])
    return FeatureDataset(features, class_ids, splits, lo, hi)


def synth_low_rank(num_classes: int, examples_per_class: int,
                   feature_shape: Tuple[int, int, int], rank: int,
                   intra_class_std: float, seed: int,
                   split_counts: Optional[Tuple[int, int, int]] = None) -> FeatureDataset:
    """Clusters whose means share a low-rank factor structure across all splits.

    Every class mean is a squashed linear combination of `rank` shared factor
    tensors, so base and novel classes live on one manifold; this is the
    benchmark used for cross-split transfer checks.
    """
    if rank < 1:
        raise ValueError("synth_low_rank: rank must be positive")
    rng = np.random.default_rng(seed)
    shape = tuple(feature_shape)
    factors = _smooth3(rng.standard_normal((rank,) + shape))
    coef = rng.standard_normal((num_classes, rank)) / np.sqrt(rank)
    means = _squash(6.0 * np.tensordot(coef, factors, axes=(1, 0)))
    noise = rng.standard_normal((num_classes, examples_per_class) + shape) * intra_class_std
    feats = np.clip(means[:, None] + noise, 0.0, 1.0).astype(np.float32)
    features = feats.reshape((num_classes * examples_per_class,) + shape)
    class_ids = np.repeat(np.arange(num_classes), examples_per_class)
    splits = _split_map(num_classes, _resolve_split_counts(num_classes, split_counts))
    lo, hi = _base_scale_stats(features, class_ids, splits["base"])
    return FeatureDataset(features, class_ids, splits, lo, hi)


@dataclass
class EpisodeSpec:
    """An N-way K-shot task description."""

    n_way: int = 5
    k_shot: int = 1
    queries_per_class: int = 15
    generated_count: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError(f"n_way must be >= 2, got {self.n_way}")
        if self.k_shot < 1:
            raise ValueError(f"k_shot must be >= 1, got {self.k_shot}")
        if self.queries_per_class < 0 or self.generated_count < 0:
            raise ValueError("queries_per_class and generated_count must be >= 0")


@dataclass
class Episode:
    """A sampled task: per-class support and query example indices."""

    class_ids: np.ndarray        # (N,)
    support_indices: np.ndarray  # (N, K)
    query_indices: np.ndarray    # (N, Q)


def sample_episode(dataset: FeatureDataset, split: str, spec: EpisodeSpec,
                   rng: np.random.Generator) -> Episode:
    """Sample classes and per-class examples uniformly without replacement."""
    need = spec.k_shot + spec.queries_per_class
    eligible = [c for c in dataset.classes(split)
                if dataset.indices_of_class(c).size >= need]
    if len(eligible) < spec.n_way:
        raise ValueError(f"split {split!r} has {len(eligible)} classes with >= {need} "
                         f"examples; an episode needs {spec.n_way}")
    chosen = rng.choice(np.asarray(eligible), size=spec.n_way, replace=False)
    support = np.empty((spec.n_way, spec.k_shot), dtype=np.int64)
    query = np.empty((spec.n_way, spec.queries_per_class), dtype=np.int64)
    for row, cid in enumerate(chosen):
        picked = rng.choice(dataset.indices_of_class(cid), size=need, replace=False)
        support[row] = picked[:spec.k_shot]
        query[row] = picked[spec.k_shot:]
    return Episode(class_ids=chosen.astype(np.int64), support_indices=support,
                   query_indices=query)


def episode_feature_arrays(dataset: FeatureDataset, episode: Episode, dtype=np.float64,
                           scaled: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Gather (N, K, d, h, w) support and (N, Q, d, h, w) query feature arrays."""
    sup = dataset.features[episode.support_indices].astype(dtype)
    qry = dataset.features[episode.query_indices].astype(dtype)
    if scaled:
        sup = dataset.scale(sup)
        qry = dataset.scale(qry)
    return sup, qry
