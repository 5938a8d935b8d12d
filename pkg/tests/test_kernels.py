import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tgap import _segment_py, kernels

needs_ext = pytest.mark.skipif(not kernels.HAVE_EXTENSION, reason="compiled kernels not built")


@st.composite
def segmented(draw):
    n = draw(st.integers(0, 60))
    c = draw(st.integers(1, 4))
    num = draw(st.integers(1, 10))
    vals = draw(hnp.arrays(np.float64, (n, c), elements=st.floats(-30, 30)))
    seg = draw(hnp.arrays(np.int64, (n,), elements=st.integers(0, num - 1)))
    return vals, seg, num


@needs_ext
@settings(max_examples=80, deadline=None)
@given(segmented())
def test_backends_agree(case):
    vals, seg, num = case
    grad = np.cos(vals)
    res = {}
    for name in ("cython", "python"):
        with kernels.using(name):
            p = kernels.segment_softmax(vals, seg, num)
            res[name] = (kernels.segment_sum(vals, seg, num), kernels.segment_max(vals, seg, num), p,
                         kernels.segment_softmax_backward(p, grad, seg, num))
    for a, b in zip(res["cython"], res["python"]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_keep_dtype(dtype):
    vals = np.arange(6, dtype=dtype).reshape(3, 2)
    for name in ("cython", "python"):
        with kernels.using(name):
            assert kernels.segment_sum(vals, [0, 1, 0], 2).dtype == dtype
            assert kernels.segment_softmax(vals, [0, 1, 0], 2).dtype == dtype


def test_segment_sum_matches_dense_oracle():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(50, 3))
    seg = rng.integers(0, 7, 50)
    dense = np.zeros((7, 50))
    dense[seg, np.arange(50)] = 1.0
    np.testing.assert_allclose(kernels.segment_sum(vals, seg, 7), dense @ vals, atol=1e-12)


def test_one_dimensional_input_round_trips():
    out = kernels.segment_softmax(np.array([1.0, 1.0, 5.0]), np.array([0, 0, 1]), 2)
    assert out.shape == (3,)
    np.testing.assert_allclose(out, [0.5, 0.5, 1.0])


def test_empty_segments_are_zero():
    out = kernels.segment_sum(np.ones((2, 2)), np.array([3, 3]), 5)
    assert out[:3].sum() == 0 and out[3].tolist() == [2.0, 2.0]


def test_softmax_survives_large_logits():
    p = kernels.segment_softmax(np.array([1000.0, 999.0, -1000.0]), np.array([0, 0, 0]), 1)
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-15


def test_python_kernels_are_the_reference():
    vals = np.array([[1.0], [2.0], [3.0]])
    np.testing.assert_array_equal(_segment_py.segment_sum(vals, np.array([1, 0, 1]), 2), [[2.0], [4.0]])


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


def test_environment_variable_forces_fallback():
    env = dict(os.environ, TGAP_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "from tgap import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
