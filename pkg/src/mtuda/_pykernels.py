"""Pure-Python/numpy reference kernels.

These are always importable and define the semantics the compiled
``_ckernels`` module must reproduce exactly.
"""
from collections import deque

import numpy as np


def label_components_4(binary):
    """Label 4-connected foreground regions of a 2D uint8 array.

    Labels start at 1 and are assigned in row-major order of each
    component's first pixel. Returns ``(labels, count)``.
    """
    binary = np.asarray(binary, dtype=bool)
    h, w = binary.shape
    labels = np.zeros((h, w), dtype=np.int32)
    count = 0
    for r0 in range(h):
        for c0 in range(w):
            if not binary[r0, c0] or labels[r0, c0]:
                continue
            count += 1
            labels[r0, c0] = count
            todo = deque([(r0, c0)])
            while todo:
                r, c = todo.popleft()
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < h and 0 <= cc < w and binary[rr, cc] and not labels[rr, cc]:
                        labels[rr, cc] = count
                        todo.append((rr, cc))
    return labels, count


def histogram_bin_map(src_cum, tgt_cum):
    """For each source bin, the smallest target bin whose CDF reaches it.

    Both inputs are cumulative pixel counts; CDFs are compared exactly in
    integer arithmetic by cross-multiplying with the other image's total.
    """
    src_cum = np.asarray(src_cum, dtype=np.int64)
    tgt_cum = np.asarray(tgt_cum, dtype=np.int64)
    lhs = tgt_cum * src_cum[-1]
    rhs = src_cum * tgt_cum[-1]
    out = np.searchsorted(lhs, rhs, side="left")
    return np.minimum(out, len(tgt_cum) - 1).astype(np.int64)
