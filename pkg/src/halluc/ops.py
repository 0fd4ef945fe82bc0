"""Differentiable tensor operations.

Shape discipline: elementwise ops require equal shapes (Python scalars are the
only broadcast); everything else is explicit (reshape, concat, tile_leading,
add_rowvec).  Convolution is cross-correlation (no kernel flip), the usual
deep-learning convention; see docs/formats.md.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, make_op

Scalar = Union[int, float]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return make_op(a.data + b, [a], lambda g: (g,))
    _check_same_shape(a, b, "add")
    return make_op(a.data + b.data, [a, b], lambda g: (g, g))


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return make_op(a.data - b, [a], lambda g: (g,))
    _check_same_shape(a, b, "sub")
    return make_op(a.data - b.data, [a, b], lambda g: (g, -g))


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return make_op(a.data * b, [a], lambda g: (g * b,))
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, [a, b], lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, [a], lambda g: (-g,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op(np.asarray(a.data.sum()), [a],
                   lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


# ---------------------------------------------------------------------------
# structure

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}")
    return make_op(data, [a], lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input")
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * g.ndim
        out = []
        for i in range(len(sizes)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            out.append(g[tuple(slicer)])
        return tuple(out)

    return make_op(data, list(tensors), backward)


def tile_leading(a: Tensor, count: int) -> Tensor:
    """Stack `count` copies of `a` along a new leading axis; grad sums them."""
    if count < 0:
        raise ShapeError(f"tile_leading: negative count {count}")
    data = np.broadcast_to(a.data, (count,) + a.shape).copy()
    return make_op(data, [a], lambda g: (g.sum(axis=0),))


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-m vector to every row of an (n, m) matrix."""
    if a.data.ndim != 2 or v.data.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: got {a.shape} and {v.shape}")
    return make_op(a.data + v.data[None, :], [a, v], lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad @ bd, [a, b], lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------------------
# activations

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0
    return make_op(np.where(mask, a.data, 0.0), [a], lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_op(s, [a], lambda g: (g * s * (1.0 - s),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return ((g - dot) * p,)

    return make_op(p, [a], backward)


# ---------------------------------------------------------------------------
# pooling

def global_average_pool(a: Tensor) -> Tensor:
    """Spatial mean: (d, h, w) -> (d,), or batched (n, d, h, w) -> (n, d)."""
    if a.data.ndim not in (3, 4):
        raise ShapeError(f"global_average_pool: expects rank 3 or 4, got {a.shape}")
    h, w = a.shape[-2], a.shape[-1]
    data = a.data.mean(axis=(-2, -1))
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g[..., None, None], a.shape) * scale,)

    return make_op(data, [a], backward)


# ---------------------------------------------------------------------------
# losses

def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a single logit vector, max-stabilized."""
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy: expects a logit vector, got {logits.shape}")
    n_classes = logits.shape[0]
    if not 0 <= label < n_classes:
        raise ShapeError(f"softmax_cross_entropy: label {label} out of range [0, {n_classes})")
    shifted = logits.data - logits.data.max()
    log_z = np.log(np.exp(shifted).sum())
    loss = log_z - shifted[label]
    p = np.exp(shifted - log_z)

    def backward(g):
        grad = p.copy()
        grad[label] -= 1.0
        return (g * grad,)

    return make_op(np.asarray(loss), [logits], backward)


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch mean of -log softmax(logits_i)[labels_i] over an (n, C) matrix."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_mean: expects (n, C) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy_mean: labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ShapeError(f"cross_entropy_mean: label out of range [0, {n_classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (log_z - shifted[rows, labels]).mean()
    p = np.exp(shifted - log_z[:, None])

    def backward(g):
        grad = p.copy()
        grad[rows, labels] -= 1.0
        return (g * grad / n,)

    return make_op(np.asarray(loss), [logits], backward)


def _check_prob_rows(p: np.ndarray, name: str) -> None:
    if np.any(p < 0):
        raise ShapeError(f"kl_divergence: {name} has negative entries")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ShapeError(f"kl_divergence: {name} rows do not sum to 1 (max |sum-1| = "
                         f"{np.abs(sums - 1.0).max():.3e})")


def _kl_rows(student: np.ndarray, teacher: np.ndarray):
    """Row-wise sum teacher * (log teacher - log student), with 0*log0 = 0."""
    mask = teacher > 0
    if np.any(mask & (student <= 0)):
        raise ShapeError("kl_divergence: student assigns zero probability where teacher does not")
    ratio = np.zeros_like(teacher)
    np.divide(teacher, student, out=ratio, where=mask)
    terms = np.zeros_like(teacher)
    np.multiply(teacher, np.log(ratio, out=np.zeros_like(ratio), where=mask),
                out=terms, where=mask)
    grad_student = -ratio  # d/ds of t*(log t - log s); zero where t == 0
    return terms.sum(axis=-1), grad_student


def kl_divergence(student_probs: Tensor, teacher_probs: Tensor) -> Tensor:
    """KL of teacher from student over one probability vector.

    The teacher is a fixed target: no gradient flows to it.
    """
    _check_same_shape(student_probs, teacher_probs, "kl_divergence")
    if student_probs.data.ndim != 1:
        raise ShapeError(f"kl_divergence: expects probability vectors, got {student_probs.shape}")
    _check_prob_rows(student_probs.data, "student")
    _check_prob_rows(teacher_probs.data, "teacher")
    value, grad_student = _kl_rows(student_probs.data, teacher_probs.data)
    return make_op(np.asarray(value), [student_probs, teacher_probs],
                   lambda g: (g * grad_student, None))


def kl_divergence_mean(student_probs: Tensor, teacher_probs: Tensor) -> Tensor:
    """Batch mean KL over (n, C) probability matrices; teacher fixed."""
    _check_same_shape(student_probs, teacher_probs, "kl_divergence")
    if student_probs.data.ndim != 2:
        raise ShapeError(f"kl_divergence_mean: expects (n, C) matrices, got {student_probs.shape}")
    _check_prob_rows(student_probs.data, "student")
    _check_prob_rows(teacher_probs.data, "teacher")
    values, grad_student = _kl_rows(student_probs.data, teacher_probs.data)
    n = student_probs.shape[0]
    return make_op(np.asarray(values.mean()), [student_probs, teacher_probs],
                   lambda g: (g * grad_student / n, None))


def mse_to_target(x: Tensor, target: Tensor) -> Tensor:
    """Squared Frobenius distance: sum over all elements of (x - target)^2."""
    _check_same_shape(x, target, "mse_to_target")
    diff = x.data - target.data
    return make_op(np.asarray((diff * diff).sum()), [x, target],
                   lambda g: (g * 2.0 * diff, g * (-2.0) * diff))


# ---------------------------------------------------------------------------
# convolution

def _conv_geometry(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _as_batched(x: Tensor, op: str):
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expects (c, h, w) or (n, c, h, w) input, got {x.shape}")


def conv2d(x: Tensor, kernels_t: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (c_in, h, w) input with (c_out, c_in, kh, kw) kernels.

    A leading batch axis on the input is accepted and preserved.
    """
    xd, squeeze = _as_batched(x, "conv2d")
    if kernels_t.data.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be (c_out, c_in, kh, kw), got {kernels_t.shape}")
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernels_t.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: input channels {c_in} do not match kernel channels {kc}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel ({kh}x{kw}) larger than padded input "
                         f"({h + 2 * padding}x{w + 2 * padding})")
    oh = _conv_geometry(h, kh, stride, padding)
    ow = _conv_geometry(w, kw, stride, padding)

    dtype = np.result_type(xd.dtype, kernels_t.dtype, bias.dtype)
    xd = np.ascontiguousarray(xd, dtype=dtype)
    wd = np.ascontiguousarray(kernels_t.data, dtype=dtype)
    bd = bias.data.astype(dtype, copy=False)

    cols = kernels.im2col(xd, kh, kw, stride, padding)       # (n, c_in*kh*kw, oh*ow)
    w2 = wd.reshape(c_out, -1)
    out = np.matmul(w2, cols) + bd[:, None]                  # (n, c_out, oh*ow)
    out = out.reshape(n, c_out, oh, ow)

    def backward(g):
        g4 = g[None] if squeeze else g
        gr = np.ascontiguousarray(g4, dtype=dtype).reshape(n, c_out, oh * ow)
        grad_w = np.tensordot(gr, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        grad_b = gr.sum(axis=(0, 2))
        dcols = np.matmul(w2.T, gr)
        grad_x = kernels.col2im(np.ascontiguousarray(dcols), c_in, h, w, kh, kw, stride, padding)
        if squeeze:
            grad_x = grad_x[0]
        return grad_x, grad_w, grad_b

    return make_op(out[0] if squeeze else out, [x, kernels_t, bias], backward)


def conv2d_transpose(x: Tensor, kernels_t: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution (adjoint of conv2d geometry, no padding).

    Kernels are (c_in, c_out, kh, kw); output spatial size is (h-1)*stride + kh.
    A leading batch axis on the input is accepted and preserved.
    """
    xd, squeeze = _as_batched(x, "conv2d_transpose")
    if kernels_t.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose: kernels must be (c_in, c_out, kh, kw), "
                         f"got {kernels_t.shape}")
    n, c_in, h, w = xd.shape
    kc, c_out, kh, kw = kernels_t.shape
    if kc != c_in:
        raise ShapeError(f"conv2d_transpose: input channels {c_in} do not match kernel "
                         f"channels {kc}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d_transpose: bias shape {bias.shape} does not match "
                         f"{c_out} output channels")
    if stride < 1:
        raise ShapeError(f"conv2d_transpose: invalid stride {stride}")
    oh = (h - 1) * stride + kh
    ow = (w - 1) * stride + kw

    dtype = np.result_type(xd.dtype, kernels_t.dtype, bias.dtype)
    xd = np.ascontiguousarray(xd, dtype=dtype)
    wd = np.ascontiguousarray(kernels_t.data, dtype=dtype)
    bd = bias.data.astype(dtype, copy=False)

    xr = xd.reshape(n, c_in, h * w)
    w2 = wd.reshape(c_in, c_out * kh * kw)
    cols = np.matmul(w2.T, xr)                               # (n, c_out*kh*kw, h*w)
    out = kernels.col2im(np.ascontiguousarray(cols), c_out, oh, ow, kh, kw, stride, 0)
    out = out + bd[None, :, None, None]

    def backward(g):
        g4 = g[None] if squeeze else g
        g4 = np.ascontiguousarray(g4, dtype=dtype)
        gcols = kernels.im2col(g4, kh, kw, stride, 0)        # (n, c_out*kh*kw, h*w)
        grad_x = np.matmul(w2, gcols).reshape(n, c_in, h, w)
        grad_w = np.tensordot(xr, gcols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        grad_b = g4.sum(axis=(0, 2, 3))
        if squeeze:
            grad_x = grad_x[0]
        return grad_x, grad_w, grad_b

    return make_op(out[0] if squeeze else out, [x, kernels_t, bias], backward)


# ---------------------------------------------------------------------------
# operator sugar

def _radd(self, other):
    return add(self, other)


def _rsub(self, other):
    return add(neg(self), other)


def _rmul(self, other):
    return mul(self, other)


Tensor.__add__ = add
Tensor.__radd__ = _radd
Tensor.__sub__ = sub
Tensor.__rsub__ = _rsub
Tensor.__mul__ = mul
Tensor.__rmul__ = _rmul
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
