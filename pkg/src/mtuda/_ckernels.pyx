# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in :mod:`mtuda._pykernels`."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t x) noexcept nogil:
    cdef Py_ssize_t root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        x, parent[x] = parent[x], root
    return root


def label_components_4(cnp.uint8_t[:, :] binary):
    cdef Py_ssize_t h = binary.shape[0], w = binary.shape[1]
    cdef Py_ssize_t n = h * w
    cdef Py_ssize_t r, c, i, up, left, a, b
    cdef Py_ssize_t[::1] parent = np.arange(n, dtype=np.intp)
    labels_arr = np.zeros((h, w), dtype=np.int32)
    cdef int[:, ::1] labels = labels_arr
    cdef Py_ssize_t[::1] remap = np.full(n, -1, dtype=np.intp)
    cdef int count = 0

    with nogil:
        for r in range(h):
            for c in range(w):
                if not binary[r, c]:
                    continue
                i = r * w + c
                if r > 0 and binary[r - 1, c]:
                    a = _find(parent, i)
                    b = _find(parent, i - w)
                    if a != b:
                        if a < b:
                            parent[b] = a
                        else:
                            parent[a] = b
                if c > 0 and binary[r, c - 1]:
                    a = _find(parent, i)
                    b = _find(parent, i - 1)
                    if a != b:
                        if a < b:
                            parent[b] = a
                        else:
                            parent[a] = b
        # roots are the smallest flat index of their component, so scan order
        # assigns labels by first row-major pixel
        for r in range(h):
            for c in range(w):
                if not binary[r, c]:
                    continue
                i = r * w + c
                a = _find(parent, i)
                if remap[a] < 0:
                    count += 1
                    remap[a] = count
                labels[r, c] = <int>remap[a]
    return labels_arr, count


def histogram_bin_map(cnp.int64_t[::1] src_cum, cnp.int64_t[::1] tgt_cum):
    cdef Py_ssize_t bins_src = src_cum.shape[0], bins_tgt = tgt_cum.shape[0]
    cdef cnp.int64_t n_src = src_cum[bins_src - 1], n_tgt = tgt_cum[bins_tgt - 1]
    out_arr = np.empty(bins_src, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t k, j = 0
    with nogil:
        for k in range(bins_src):
            while j < bins_tgt - 1 and tgt_cum[j] * n_src < src_cum[k] * n_tgt:
                j += 1
            out[k] = j
    return out_arr
