# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: 3x3 same-padding convolution and 2x2 max pooling.

Same contracts and layouts as reference.py (channels-last, [3,3,Cin,Cout]
kernels, argmax index 2*di+dj with first-max-wins ties).
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def conv3x3_forward(cnp.ndarray[double, ndim=4] x, cnp.ndarray[double, ndim=4] w):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Ci = x.shape[3]
    cdef Py_ssize_t Co = w.shape[3]
    cdef cnp.ndarray[double, ndim=4] y = np.zeros((B, H, W, Co))
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w)
    cdef double[:, :, :, ::1] yv = y
    cdef Py_ssize_t b, i, j, di, dj, ci, co, p, q
    cdef double v
    for b in range(B):
        for i in range(H):
            for j in range(W):
                for di in range(3):
                    p = i + di - 1
                    if p < 0 or p >= H:
                        continue
                    for dj in range(3):
                        q = j + dj - 1
                        if q < 0 or q >= W:
                            continue
                        for ci in range(Ci):
                            v = xv[b, p, q, ci]
                            if v == 0.0:
                                continue
                            for co in range(Co):
                                yv[b, i, j, co] += v * wv[di, dj, ci, co]
    return y


def conv3x3_backward(cnp.ndarray[double, ndim=4] x, cnp.ndarray[double, ndim=4] w,
                     cnp.ndarray[double, ndim=4] gy):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Ci = x.shape[3]
    cdef Py_ssize_t Co = w.shape[3]
    cdef cnp.ndarray[double, ndim=4] gx = np.zeros((B, H, W, Ci))
    cdef cnp.ndarray[double, ndim=4] gw = np.zeros((3, 3, Ci, Co))
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w)
    cdef double[:, :, :, ::1] gyv = np.ascontiguousarray(gy)
    cdef double[:, :, :, ::1] gxv = gx
    cdef double[:, :, :, ::1] gwv = gw
    cdef Py_ssize_t b, i, j, di, dj, ci, co, p, q
    cdef double g
    for b in range(B):
        for i in range(H):
            for j in range(W):
                for di in range(3):
                    p = i + di - 1
                    if p < 0 or p >= H:
                        continue
                    for dj in range(3):
                        q = j + dj - 1
                        if q < 0 or q >= W:
                            continue
                        for co in range(Co):
                            g = gyv[b, i, j, co]
                            if g == 0.0:
                                continue
                            for ci in range(Ci):
                                gxv[b, p, q, ci] += g * wv[di, dj, ci, co]
                                gwv[di, dj, ci, co] += g * xv[b, p, q, ci]
    return gx, gw


def maxpool2_forward(cnp.ndarray[double, ndim=4] x):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t H2 = H // 2, W2 = W // 2
    cdef cnp.ndarray[double, ndim=4] y = np.empty((B, H2, W2, C))
    cdef cnp.ndarray[cnp.int8_t, ndim=4] idx = np.zeros((B, H2, W2, C), dtype=np.int8)
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef double[:, :, :, ::1] yv = y
    cdef cnp.int8_t[:, :, :, ::1] iv = idx
    cdef Py_ssize_t b, i, j, c, di, dj
    cdef double best, v
    cdef cnp.int8_t bi
    for b in range(B):
        for i in range(H2):
            for j in range(W2):
                for c in range(C):
                    best = xv[b, 2 * i, 2 * j, c]
                    bi = 0
                    for di in range(2):
                        for dj in range(2):
                            v = xv[b, 2 * i + di, 2 * j + dj, c]
                            if v > best:
                                best = v
                                bi = <cnp.int8_t>(2 * di + dj)
                    yv[b, i, j, c] = best
                    iv[b, i, j, c] = bi
    return y, idx


def maxpool2_backward(cnp.ndarray[cnp.int8_t, ndim=4] idx,
                      cnp.ndarray[double, ndim=4] gy, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t B = gy.shape[0], H2 = gy.shape[1], W2 = gy.shape[2], C = gy.shape[3]
    cdef cnp.ndarray[double, ndim=4] gx = np.zeros((B, h, w, C))
    cdef double[:, :, :, ::1] gxv = gx
    cdef double[:, :, :, ::1] gyv = np.ascontiguousarray(gy)
    cdef cnp.int8_t[:, :, :, ::1] iv = np.ascontiguousarray(idx)
    cdef Py_ssize_t b, i, j, c
    cdef cnp.int8_t k
    for b in range(B):
        for i in range(H2):
            for j in range(W2):
                for c in range(C):
                    k = iv[b, i, j, c]
                    gxv[b, 2 * i + (k >> 1), 2 * j + (k & 1), c] += gyv[b, i, j, c]
    return gx
