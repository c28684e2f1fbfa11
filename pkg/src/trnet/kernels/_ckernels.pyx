# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, floor, fabs, round as cround

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col3d(real[:, :, :, :, ::1] xp):
    cdef Py_ssize_t n = xp.shape[0], C = xp.shape[1], S = xp.shape[2] - 2
    cdef Py_ssize_t S3 = S * S * S
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, C * 27, S3), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t i, c, a, b, d, z, y, x, row, p
    with nogil:
        for i in range(n):
            for c in range(C):
                for a in range(3):
                    for b in range(3):
                        for d in range(3):
                            row = c * 27 + a * 9 + b * 3 + d
                            p = 0
                            for z in range(S):
                                for y in range(S):
                                    for x in range(S):
                                        cols[i, row, p] = xp[i, c, z + a, y + b, x + d]
                                        p += 1
    return out


def _col2im3d(real[:, :, ::1] cols, Py_ssize_t S):
    cdef Py_ssize_t n = cols.shape[0], C = cols.shape[1] // 27
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, C, S + 2, S + 2, S + 2), dtype=dtype)
    cdef real[:, :, :, :, ::1] xp = out
    cdef Py_ssize_t i, c, a, b, d, z, y, x, row, p
    with nogil:
        for i in range(n):
            for c in range(C):
                for a in range(3):
                    for b in range(3):
                        for d in range(3):
                            row = c * 27 + a * 9 + b * 3 + d
                            p = 0
                            for z in range(S):
                                for y in range(S):
                                    for x in range(S):
                                        xp[i, c, z + a, y + b, x + d] += cols[i, row, p]
                                        p += 1
    return out[:, :, 1:-1, 1:-1, 1:-1]


def _maxpool3d_forward(real[:, :, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], C = x.shape[1], S = x.shape[2], h = S // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, C, h, h, h), dtype=dtype)
    arg_arr = np.empty((n, C, h, h, h), dtype=np.int8)
    cdef real[:, :, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t i, c, z, y, w, k, bz, by, bx
    cdef real best, v
    cdef cnp.int8_t bk
    with nogil:
        for i in range(n):
            for c in range(C):
                for z in range(h):
                    for y in range(h):
                        for w in range(h):
                            best = x[i, c, 2 * z, 2 * y, 2 * w]
                            bk = 0
                            for k in range(1, 8):
                                bz = k >> 2
                                by = (k >> 1) & 1
                                bx = k & 1
                                v = x[i, c, 2 * z + bz, 2 * y + by, 2 * w + bx]
                                if v > best:
                                    best = v
                                    bk = <cnp.int8_t>k
                            out[i, c, z, y, w] = best
                            arg[i, c, z, y, w] = bk
    return out_arr, arg_arr


def _maxpool3d_backward(real[:, :, :, :, ::1] dy, cnp.int8_t[:, :, :, :, ::1] arg, Py_ssize_t S):
    cdef Py_ssize_t n = dy.shape[0], C = dy.shape[1], h = dy.shape[2]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((n, C, S, S, S), dtype=dtype)
    cdef real[:, :, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t i, c, z, y, w, k
    with nogil:
        for i in range(n):
            for c in range(C):
                for z in range(h):
                    for y in range(h):
                        for w in range(h):
                            k = arg[i, c, z, y, w]
                            dx[i, c, 2 * z + (k >> 2), 2 * y + ((k >> 1) & 1), 2 * w + (k & 1)] = dy[i, c, z, y, w]
    return dx_arr


cdef inline double _snap(double v) nogil:
    cdef double r = cround(v)
    if fabs(v - r) < 1e-9:
        return r
    return v


def rotate_slices(cube, double angle):
    src = np.asarray(cube)
    dtype = src.dtype if src.dtype.kind == "f" else np.float64
    cdef double[:, :, ::1] c = np.ascontiguousarray(src, dtype=np.float64)
    cdef Py_ssize_t D = c.shape[0], H = c.shape[1], W = c.shape[2]
    out_arr = np.empty((D, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0
    cdef double ca = cos(angle), sa = sin(angle)
    cdef double yy, xx, sy, sx, ty, tx
    cdef Py_ssize_t z, i, j, y0, x0, y1, x1
    with nogil:
        for i in range(H):
            for j in range(W):
                yy = i - cy
                xx = j - cx
                sy = _snap(ca * yy - sa * xx + cy)
                sx = _snap(sa * yy + ca * xx + cx)
                if sy < 0:
                    sy = 0
                elif sy > H - 1:
                    sy = H - 1
                if sx < 0:
                    sx = 0
                elif sx > W - 1:
                    sx = W - 1
                y0 = <Py_ssize_t>floor(sy)
                x0 = <Py_ssize_t>floor(sx)
                if H > 1 and y0 > H - 2:
                    y0 = H - 2
                if W > 1 and x0 > W - 2:
                    x0 = W - 2
                y1 = y0 + 1 if y0 + 1 < H else H - 1
                x1 = x0 + 1 if x0 + 1 < W else W - 1
                ty = sy - y0
                tx = sx - x0
                for z in range(D):
                    out[z, i, j] = ((1 - ty) * (1 - tx) * c[z, y0, x0] + (1 - ty) * tx * c[z, y0, x1]
                                    + ty * (1 - tx) * c[z, y1, x0] + ty * tx * c[z, y1, x1])
    return out_arr.astype(dtype, copy=False)


def im2col3d(xp):
    return _im2col3d(np.ascontiguousarray(xp))


def col2im3d(cols, S):
    return _col2im3d(np.ascontiguousarray(cols), S)


def maxpool3d_forward(x):
    return _maxpool3d_forward(np.ascontiguousarray(x))


def maxpool3d_backward(dy, arg, S):
    return _maxpool3d_backward(np.ascontiguousarray(dy), np.ascontiguousarray(arg), S)
