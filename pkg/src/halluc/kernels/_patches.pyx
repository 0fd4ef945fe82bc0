# Compiled patch-extraction kernels backing conv2d / conv2d_transpose.
# Same contract as kernels.patches_py; selected at import in kernels/__init__.

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


@cython.boundscheck(False)
@cython.wraparound(False)
def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int padding):
    """Gather kh*kw patches of a (n, c, h, w) array into (n, c*kh*kw, oh*ow)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - kw) // stride + 1
    out_np = np.zeros((n, c * kh * kw, oh * ow),
                      dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, ::1] out = out_np
    cdef Py_ssize_t b, ch, ki, kj, oi, oj, row, ii, jj
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for oi in range(oh):
                            ii = oi * stride + ki - padding
                            if ii < 0 or ii >= h:
                                continue
                            for oj in range(ow):
                                jj = oj * stride + kj - padding
                                if jj < 0 or jj >= w:
                                    continue
                                out[b, row, oi * ow + oj] = x[b, ch, ii, jj]
    return out_np


@cython.boundscheck(False)
@cython.wraparound(False)
def col2im(floating[:, :, ::1] cols, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           int kh, int kw, int stride, int padding):
    """Scatter-add (n, c*kh*kw, oh*ow) patch columns back into (n, c, h, w)."""
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - kw) // stride + 1
    out_np = np.zeros((n, c, h, w),
                      dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, :, ::1] out = out_np
    cdef Py_ssize_t b, ch, ki, kj, oi, oj, row, ii, jj
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for oi in range(oh):
                            ii = oi * stride + ki - padding
                            if ii < 0 or ii >= h:
                                continue
                            for oj in range(ow):
                                jj = oj * stride + kj - padding
                                if jj < 0 or jj >= w:
                                    continue
                                out[b, ch, ii, jj] += cols[b, row, oi * ow + oj]
    return out_np
