"""Networks: tensor/vector conditioner-generator pairs, the toy convolutional
backbone, the base classifier head, noise sampling, and checkpoint I/O.

At full scale the tensor conditioner runs (512,7,7) -> conv(512ch, pad 1) ->
ReLU -> conv(256ch) -> flatten 6400 -> linear 1024; the generator unflattens
(k+d') to 1x1 and applies transposed 3x3 stride-1 convs (512ch each) up to
7x7, sigmoid last.  Both builders generalize: conditioner channels are
(d, d//2) and the generator uses (h-1)//2 transposed layers, so a (d, h, h)
feature shape with odd h >= 3 works at any size.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .data import FormatError
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor

_CKPT_MAGIC = b"HALC"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIIII")
_VARIANT_TAGS = {"tensor": 0, "vector": 1, "backbone": 2}


def _uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int,
                  dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv2d:
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng=None, dtype=DEFAULT_DTYPE):
        k = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = _uniform_init(rng, (out_channels, in_channels, k, k),
                                    in_channels * k * k, dtype)
        self.bias = _zeros(out_channels, dtype)

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d:
    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 rng=None, dtype=DEFAULT_DTYPE):
        k = kernel_size
        self.stride = stride
        self.weight = _uniform_init(rng, (in_channels, out_channels, k, k),
                                    in_channels * k * k, dtype)
        self.bias = _zeros(out_channels, dtype)

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return ops.conv2d_transpose(x, self.weight, self.bias, self.stride)


class Linear:
    def __init__(self, in_features, out_features, rng=None, dtype=DEFAULT_DTYPE):
        self.weight = _uniform_init(rng, (in_features, out_features), in_features, dtype)
        self.bias = _zeros(out_features, dtype)

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        if x.data.ndim == 1:
            out = ops.matmul(ops.reshape(x, (1, x.shape[0])), self.weight)
            return ops.reshape(ops.add_rowvec(out, self.bias), (self.weight.shape[1],))
        if x.data.ndim == 2:
            return ops.add_rowvec(ops.matmul(x, self.weight), self.bias)
        raise ShapeError(f"Linear: expects rank 1 or 2 input, got {x.shape}")


class ReLU:
    def parameters(self):
        return []

    def __call__(self, x):
        return ops.relu(x)


class Sigmoid:
    def parameters(self):
        return []

    def __call__(self, x):
        return ops.sigmoid(x)


class Flatten:
    def parameters(self):
        return []

    def __call__(self, x):
        if x.data.ndim == 3:
            return ops.reshape(x, (x.size,))
        if x.data.ndim == 4:
            return ops.reshape(x, (x.shape[0], x.data[0].size))
        raise ShapeError(f"Flatten: expects rank 3 or 4 input, got {x.shape}")


class Unflatten:
    """Vector -> (c, 1, 1) feature map (batched or single)."""

    def parameters(self):
        return []

    def __call__(self, x):
        if x.data.ndim == 1:
            return ops.reshape(x, (x.shape[0], 1, 1))
        if x.data.ndim == 2:
            return ops.reshape(x, (x.shape[0], x.shape[1], 1, 1))
        raise ShapeError(f"Unflatten: expects rank 1 or 2 input, got {x.shape}")


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def forward_all(self, x) -> List[Tensor]:
        """Outputs of every layer in order (for shape/scale assertions)."""
        outs = []
        for layer in self.layers:
            x = layer(x)
            outs.append(x)
        return outs


def _clone_sequential(net: Sequential) -> Sequential:
    copy = Sequential.__new__(Sequential)
    copy.layers = []
    for layer in net.layers:
        dup = layer.__class__.__new__(layer.__class__)
        dup.__dict__.update({k: v for k, v in getattr(layer, "__dict__", {}).items()})
        for name in ("weight", "bias"):
            if hasattr(layer, name):
                setattr(dup, name, Tensor(getattr(layer, name).data.copy(), requires_grad=True))
        copy.layers.append(dup)
    return copy


def same_architecture(a: Sequential, b: Sequential) -> bool:
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if type(la) is not type(lb):
            return False
        for pa, pb in zip(la.parameters(), lb.parameters()):
            if pa.shape != pb.shape:
                return False
        if len(la.parameters()) != len(lb.parameters()):
            return False
    return True


# ---------------------------------------------------------------------------
# noise

class NoiseSampler:
    """Seeded stream of standard-normal noise vectors of fixed dimension."""

    def __init__(self, seed, dim: int, dtype=DEFAULT_DTYPE):
        self.dim = int(dim)
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(seed)

    def sample(self, count: int) -> np.ndarray:
        return self._rng.standard_normal((count, self.dim)).astype(self.dtype)

    def sample_one(self) -> np.ndarray:
        return self._rng.standard_normal(self.dim).astype(self.dtype)


# ---------------------------------------------------------------------------
# hallucinator

def _check_generator_geometry(feature_shape) -> int:
    d, h, w = feature_shape
    if h != w or h < 3 or h % 2 == 0:
        raise ShapeError(f"generator needs square odd spatial dims >= 3, got {feature_shape}")
    return (h - 1) // 2  # number of 3x3 stride-1 transposed layers: 1 -> 3 -> 5 -> ...


def build_tensor_conditioner(feature_shape, cond_dim: int, rng=None,
                             dtype=DEFAULT_DTYPE) -> Sequential:
    """conv(d ch, pad 1) -> ReLU -> conv(d//2 ch) -> flatten -> linear to cond_dim."""
    d, h, w = feature_shape
    if h < 3 or w < 3:
        raise ShapeError(f"conditioner needs spatial dims >= 3, got {feature_shape}")
    rng = np.random.default_rng(rng)
    mid = max(1, d // 2)
    flat = mid * (h - 2) * (w - 2)
    return Sequential([
        Conv2d(d, d, 3, stride=1, padding=1, rng=rng, dtype=dtype),
        ReLU(),
        Conv2d(d, mid, 3, stride=1, padding=0, rng=rng, dtype=dtype),
        Flatten(),
        Linear(flat, cond_dim, rng=rng, dtype=dtype),
    ])


def build_tensor_generator(noise_dim: int, cond_dim: int, feature_shape, rng=None,
                           dtype=DEFAULT_DTYPE) -> Sequential:
    """Unflatten (k+d') -> transposed 3x3 stride-1 convs with ReLU between,
    sigmoid last; channel width d throughout."""
    d, _, _ = feature_shape
    n_layers = _check_generator_geometry(feature_shape)
    rng = np.random.default_rng(rng)
    layers: list = [Unflatten()]
    channels = noise_dim + cond_dim
    for i in range(n_layers):
        layers.append(ConvTranspose2d(channels, d, 3, stride=1, rng=rng, dtype=dtype))
        channels = d
        if i < n_layers - 1:
            layers.append(ReLU())
    layers.append(Sigmoid())
    return Sequential(layers)


def build_vector_conditioner(dim: int, cond_dim: int, hidden_dim: int = 512, rng=None,
                             dtype=DEFAULT_DTYPE) -> Sequential:
    rng = np.random.default_rng(rng)
    return Sequential([
        Linear(dim, hidden_dim, rng=rng, dtype=dtype),
        ReLU(),
        Linear(hidden_dim, cond_dim, rng=rng, dtype=dtype),
    ])


def build_vector_generator(noise_dim: int, cond_dim: int, dim: int, hidden_dim: int = 512,
                           rng=None, dtype=DEFAULT_DTYPE) -> Sequential:
    rng = np.random.default_rng(rng)
    return Sequential([
        Linear(noise_dim + cond_dim, hidden_dim, rng=rng, dtype=dtype),
        ReLU(),
        Linear(hidden_dim, dim, rng=rng, dtype=dtype),
        Sigmoid(),
    ])


@dataclass
class HallucinatorModel:
    """Conditioner h plus generator g, with noise dim k and conditioning dim d'."""

    conditioner: Sequential
    generator: Sequential
    noise_dim: int
    cond_dim: int
    feature_shape: Tuple[int, ...]
    variant: str                      # "tensor" | "vector"
    hidden_dim: Optional[int] = None  # vector variant only
    dtype: np.dtype = DEFAULT_DTYPE

    def parameters(self) -> List[Tensor]:
        return self.conditioner.parameters() + self.generator.parameters()

    def condition(self, prototype: Tensor) -> Tensor:
        if prototype.shape != tuple(self.feature_shape):
            raise ShapeError(f"prototype shape {prototype.shape} does not match "
                             f"model feature shape {self.feature_shape}")
        return self.conditioner(prototype)

    def generate(self, z: Union[Tensor, np.ndarray], cond: Tensor) -> Tensor:
        """Generate from noise rows z and one conditioning vector."""
        if not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=self.dtype))
        if z.data.ndim == 1:
            return self.generator(ops.concat([z, cond], axis=0))
        batch = ops.concat([z, ops.tile_leading(cond, z.shape[0])], axis=1)
        return self.generator(batch)

    def hallucinate_batch(self, prototype: Tensor, count: int, sampler: NoiseSampler) -> Tensor:
        """`count` class-conditional features for one prototype, as one batch."""
        cond = self.condition(prototype)
        if count == 0:
            return Tensor(np.empty((0,) + tuple(self.feature_shape), dtype=self.dtype))
        return self.generate(Tensor(sampler.sample(count).astype(self.dtype)), cond)

    def clone(self) -> "HallucinatorModel":
        return HallucinatorModel(
            conditioner=_clone_sequential(self.conditioner),
            generator=_clone_sequential(self.generator),
            noise_dim=self.noise_dim, cond_dim=self.cond_dim,
            feature_shape=tuple(self.feature_shape), variant=self.variant,
            hidden_dim=self.hidden_dim, dtype=self.dtype,
        )


def hallucinate(model: HallucinatorModel, prototype: Tensor, count: int,
                sampler: NoiseSampler) -> List[Tensor]:
    """Condition once on the prototype, then generate `count` features."""
    batch = model.hallucinate_batch(prototype, count, sampler)
    return [Tensor(batch.data[i]) for i in range(count)]


def build_tensor_hallucinator(feature_shape, cond_dim: int = 1024, noise_dim: int = 1024,
                              seed: int = 0, dtype=DEFAULT_DTYPE) -> HallucinatorModel:
    rng = np.random.default_rng(seed)
    return HallucinatorModel(
        conditioner=build_tensor_conditioner(feature_shape, cond_dim, rng, dtype),
        generator=build_tensor_generator(noise_dim, cond_dim, feature_shape, rng, dtype),
        noise_dim=noise_dim, cond_dim=cond_dim,
        feature_shape=tuple(feature_shape), variant="tensor", dtype=np.dtype(dtype),
    )


def build_vector_hallucinator(dim: int, cond_dim: int = 512, noise_dim: int = 512,
                              hidden_dim: int = 512, seed: int = 0,
                              dtype=DEFAULT_DTYPE) -> HallucinatorModel:
    rng = np.random.default_rng(seed)
    return HallucinatorModel(
        conditioner=build_vector_conditioner(dim, cond_dim, hidden_dim, rng, dtype),
        generator=build_vector_generator(noise_dim, cond_dim, dim, hidden_dim, rng, dtype),
        noise_dim=noise_dim, cond_dim=cond_dim,
        feature_shape=(dim,), variant="vector", hidden_dim=hidden_dim,
        dtype=np.dtype(dtype),
    )


# ---------------------------------------------------------------------------
# toy backbone and classifier head

def _halvings(input_hw: Tuple[int, int], target_hw: Tuple[int, int]) -> int:
    h, w = input_hw
    th, tw = target_hw
    steps = 0
    while (h, w) != (th, tw):
        if h < th or w < tw:
            raise ShapeError(f"feature spatial dims {target_hw} unreachable from "
                             f"{input_hw} by stride-2 convs")
        h = (h - 1) // 2 + 1
        w = (w - 1) // 2 + 1
        steps += 1
    return steps


@dataclass
class BackboneModel:
    """Small conv stack mapping raw inputs to nonnegative (d, h, w) features."""

    net: Sequential
    input_shape: Tuple[int, int, int]
    feature_shape: Tuple[int, int, int]
    dtype: np.dtype = DEFAULT_DTYPE

    def parameters(self) -> List[Tensor]:
        return self.net.parameters()

    def features(self, x: Tensor) -> Tensor:
        return self.net(x)

    def pooled(self, x: Tensor) -> Tensor:
        return ops.global_average_pool(self.features(x))


@dataclass
class ClassifierHead:
    linear: Linear
    num_base_classes: int

    def parameters(self) -> List[Tensor]:
        return self.linear.parameters()

    def __call__(self, pooled: Tensor) -> Tensor:
        return self.linear(pooled)


def build_toy_backbone(input_shape, feature_shape, seed: int = 0,
                       dtype=DEFAULT_DTYPE) -> BackboneModel:
    """Stride-2 3x3 conv stack (ReLU after each) from input to feature geometry."""
    in_c, in_h, in_w = input_shape
    d, fh, fw = feature_shape
    steps = _halvings((in_h, in_w), (fh, fw))
    rng = np.random.default_rng(seed)
    layers: list = []
    prev = in_c
    if steps == 0:
        layers += [Conv2d(prev, d, 3, stride=1, padding=1, rng=rng, dtype=dtype), ReLU()]
    else:
        for i in range(steps):
            out_c = max(1, d // 2 ** (steps - 1 - i))
            layers += [Conv2d(prev, out_c, 3, stride=2, padding=1, rng=rng, dtype=dtype), ReLU()]
            prev = out_c
    return BackboneModel(Sequential(layers), tuple(input_shape), tuple(feature_shape),
                         np.dtype(dtype))


def build_classifier_head(feature_dim: int, num_base_classes: int, seed: int = 0,
                          dtype=DEFAULT_DTYPE) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    return ClassifierHead(Linear(feature_dim, num_base_classes, rng=rng, dtype=dtype),
                          num_base_classes)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian): magic "HALC", u32 version, u32 variant tag
# (0 tensor hallucinator, 1 vector hallucinator, 2 backbone+classifier),
# u32 dims (k, d', d, h, w), then the parameter arrays in declaration order
# as float32.  The vector variant stores its hidden width in the h slot
# (w = 0); the backbone variant appends u32 (in_c, in_h, in_w, num_classes)
# before the arrays.  See docs/formats.md.

def _write_params(fh, params: Sequence[Tensor]) -> None:
    for p in params:
        fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _read_params(raw: bytes, offset: int, params: Sequence[Tensor], dtype, path) -> None:
    expected = offset + 4 * sum(p.size for p in params)
    if len(raw) != expected:
        raise FormatError(f"truncated checkpoint {path}: expected {expected} bytes, "
                          f"found {len(raw)}")
    for p in params:
        flat = np.frombuffer(raw, dtype="<f4", count=p.size, offset=offset)
        p.data = flat.astype(dtype).reshape(p.shape)
        offset += 4 * p.size


def save_hallucinator(path, model: HallucinatorModel) -> None:
    if model.variant == "tensor":
        d, h, w = model.feature_shape
    else:
        d, h, w = model.feature_shape[0], model.hidden_dim, 0
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, _VARIANT_TAGS[model.variant],
                                   model.noise_dim, model.cond_dim, d, h, w))
        _write_params(fh, model.parameters())


def _read_header(raw: bytes, path):
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"truncated checkpoint {path}: {len(raw)} bytes is smaller than "
                          f"the {_CKPT_HEADER.size}-byte header")
    magic, version, variant, k, dc, d, h, w = _CKPT_HEADER.unpack_from(raw)
    if magic != _CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r} in {path}; expected {_CKPT_MAGIC!r}")
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} in {path}")
    return variant, k, dc, d, h, w


def load_hallucinator(path, dtype=DEFAULT_DTYPE) -> HallucinatorModel:
    raw = Path(path).read_bytes()
    variant, k, dc, d, h, w = _read_header(raw, path)
    if variant == _VARIANT_TAGS["tensor"]:
        model = build_tensor_hallucinator((d, h, w), cond_dim=dc, noise_dim=k, dtype=dtype)
    elif variant == _VARIANT_TAGS["vector"]:
        model = build_vector_hallucinator(d, cond_dim=dc, noise_dim=k, hidden_dim=h,
                                          dtype=dtype)
    else:
        raise FormatError(f"checkpoint {path} holds variant tag {variant}, "
                          f"not a hallucinator")
    _read_params(raw, _CKPT_HEADER.size, model.parameters(), dtype, path)
    return model


def save_backbone(path, backbone: BackboneModel, head: ClassifierHead) -> None:
    d, h, w = backbone.feature_shape
    in_c, in_h, in_w = backbone.input_shape
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, _VARIANT_TAGS["backbone"],
                                   0, 0, d, h, w))
        fh.write(struct.pack("<IIII", in_c, in_h, in_w, head.num_base_classes))
        _write_params(fh, backbone.parameters() + head.parameters())


def load_backbone(path, dtype=DEFAULT_DTYPE) -> Tuple[BackboneModel, ClassifierHead]:
    raw = Path(path).read_bytes()
    variant, _, _, d, h, w = _read_header(raw, path)
    if variant != _VARIANT_TAGS["backbone"]:
        raise FormatError(f"checkpoint {path} holds variant tag {variant}, not a backbone")
    extra = struct.Struct("<IIII")
    if len(raw) < _CKPT_HEADER.size + extra.size:
        raise FormatError(f"truncated checkpoint {path}")
    in_c, in_h, in_w, num_classes = extra.unpack_from(raw, _CKPT_HEADER.size)
    backbone = build_toy_backbone((in_c, in_h, in_w), (d, h, w), dtype=dtype)
    head = build_classifier_head(d, num_classes, dtype=dtype)
    _read_params(raw, _CKPT_HEADER.size + extra.size,
                 backbone.parameters() + head.parameters(), dtype, path)
    return backbone, head
