"""Kernel dispatch: compiled Cython core when built, pure Python otherwise.

Set ``MTUDA_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MTUDA_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def label_components_4(binary):
    binary = np.ascontiguousarray(binary, dtype=np.uint8)
    if binary.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {binary.shape}")
    return _impl.label_components_4(binary)


def histogram_bin_map(src_cum, tgt_cum):
    src_cum = np.ascontiguousarray(src_cum, dtype=np.int64)
    tgt_cum = np.ascontiguousarray(tgt_cum, dtype=np.int64)
    return _impl.histogram_bin_map(src_cum, tgt_cum)
