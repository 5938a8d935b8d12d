"""Backend selection for the segment kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over. Set ``TGAP_KERNELS=python`` to force the
fallback (the benchmark and the backend-parity tests do this).
"""
import os
from contextlib import contextmanager

import numpy as np

from . import _segment_py

try:
    from . import _segment as _compiled
except ImportError:
    _compiled = None

HAVE_EXTENSION = _compiled is not None
_want_python = os.environ.get("TGAP_KERNELS", "").lower() == "python"
BACKEND = "cython" if HAVE_EXTENSION and not _want_python else "python"
_impl = _compiled if BACKEND == "cython" else _segment_py


def _prep(values, seg):
    values = np.ascontiguousarray(values)
    squeeze = values.ndim == 1
    if squeeze:
        values = values.reshape(-1, 1)
    return values, np.ascontiguousarray(seg, dtype=np.int64), squeeze


def _finish(out, squeeze):
    return out.reshape(-1) if squeeze else out


def segment_sum(values, seg, num):
    """Sum rows of ``values`` into ``num`` buckets given by ``seg``."""
    values, seg, squeeze = _prep(values, seg)
    return _finish(_impl.segment_sum(values, seg, int(num)), squeeze)


def segment_max(values, seg, num):
    values, seg, squeeze = _prep(values, seg)
    return _finish(_impl.segment_max(values, seg, int(num)), squeeze)


def segment_softmax(logits, seg, num):
    """Softmax over the rows sharing a segment id, independently per column."""
    logits, seg, squeeze = _prep(logits, seg)
    return _finish(_impl.segment_softmax(logits, seg, int(num)), squeeze)


def segment_softmax_backward(probs, grad, seg, num):
    probs, seg, squeeze = _prep(probs, seg)
    grad = np.ascontiguousarray(grad, dtype=probs.dtype).reshape(probs.shape)
    return _finish(_impl.segment_softmax_backward(probs, grad, seg, int(num)), squeeze)


def use_backend(name):
    """Switch backend at runtime ("cython" or "python"); returns the previous name."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled segment kernels are not built")
        _impl = _compiled
    elif name == "python":
        _impl = _segment_py
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    return previous


@contextmanager
def using(name):
    previous = use_backend(name)
    try:
        yield
    finally:
        use_backend(previous)
