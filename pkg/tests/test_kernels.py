import json
import os
import subprocess
import sys

import numpy as np
import pytest

from stilt_bench import kernels
from stilt_bench._accel import HAVE_NUMBA, USE_NUMBA

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


@needs_numba
def test_gelu_loop_matches_numpy():
    x = np.linspace(-8, 8, 2001).reshape(23, 87)
    g = np.cos(x)
    np.testing.assert_allclose(kernels._gelu_forward_loop(x), kernels._gelu_forward_np(x),
                               rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(kernels._gelu_backward_loop(x, g), kernels._gelu_backward_np(x, g),
                               rtol=1e-14, atol=1e-15)


@needs_numba
def test_signed_rank_loop_matches_numpy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        r = rng.integers(1, 40, rng.integers(1, 20))
        np.testing.assert_array_equal(kernels._signed_rank_counts_loop(r),
                                      kernels._signed_rank_counts_np(r))


@needs_numba
def test_confusion_loop_matches_numpy():
    rng = np.random.default_rng(1)
    y, p = rng.integers(0, 3, 500), rng.integers(0, 3, 500)
    np.testing.assert_array_equal(kernels._confusion_matrix_loop(y, p, 3),
                                  kernels._confusion_matrix_np(y, p, 3))


def test_signed_rank_counts_total_is_power_of_two():
    counts = kernels.signed_rank_counts(np.array([2, 4, 6, 8]))
    assert counts.sum() == 16
    assert counts[0] == 1 and counts[20] == 1


def test_dispatch_follows_env_flag():
    code = "import json, stilt_bench._accel as a; print(json.dumps(a.USE_NUMBA))"
    env = dict(os.environ, STILT_BENCH_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert json.loads(out.stdout) is False
    assert USE_NUMBA == (HAVE_NUMBA and os.environ.get("STILT_BENCH_DISABLE_NUMBA", "0") in ("", "0"))


def test_numpy_path_end_to_end():
    """The pure-numpy fallback gives the same test results as the default path."""
    code = (
        "import json\n"
        "import numpy as np\n"
        "from stilt_bench import kernels\n"
        "from stilt_bench.stats import wilcoxon_signed_rank\n"
        "x = np.linspace(-3, 3, 7)\n"
        "print(json.dumps(kernels.gelu_forward(x).tolist()))\n"
        "print(json.dumps(wilcoxon_signed_rank([1, 2, 3, -4, 5, 6]).p_two_sided))\n"
    )
    env = dict(os.environ, STILT_BENCH_DISABLE_NUMBA="1")
    slow = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    lines = slow.stdout.splitlines()
    fast = kernels.gelu_forward(np.linspace(-3, 3, 7)).tolist()
    np.testing.assert_allclose(json.loads(lines[0]), fast, rtol=1e-14)
    from stilt_bench.stats import wilcoxon_signed_rank

    assert json.loads(lines[1]) == wilcoxon_signed_rank([1, 2, 3, -4, 5, 6]).p_two_sided
