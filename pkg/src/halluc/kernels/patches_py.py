"""Pure-numpy patch kernels: the fallback when the compiled extension is absent.

Both backends share one contract.  ``im2col`` gathers every kh x kw window of a
(n, c, h, w) batch into a (n, c*kh*kw, oh*ow) column matrix; ``col2im`` is its
adjoint scatter-add.  Zero padding is implicit: out-of-range taps read as 0 and
scatter contributions outside the image are dropped.
"""

import numpy as np


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = _out_size(h, kh, stride, padding)
    ow = _out_size(w, kw, stride, padding)
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return np.ascontiguousarray(cols.reshape(n, c * kh * kw, oh * ow))


def col2im(cols: np.ndarray, c: int, h: int, w: int,
           kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n = cols.shape[0]
    oh = _out_size(h, kh, stride, padding)
    ow = _out_size(w, kw, stride, padding)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(out)
