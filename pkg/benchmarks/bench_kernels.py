"""Time the numba kernels against their numpy twins, then a short training run
with each backend (the second run happens in a subprocess with
STILT_BENCH_DISABLE_NUMBA=1).

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from stilt_bench import kernels
from stilt_bench._accel import USE_NUMBA

END_TO_END = """
import time
from stilt_bench.core import DeterministicRng
from stilt_bench.data import SyntheticSpec, generate_synthetic
from stilt_bench.model import ModelConfig
from stilt_bench.training import ProtocolSpec, TrainConfig, run_protocol
data = generate_synthetic(SyntheticSpec(seed=0, dimension=32, image_only_counts=(100,) * 3,
                                        text_only_counts=(100,) * 3))
spec = ProtocolSpec("text_stilt", data["memes"], data["texts"],
                    TrainConfig.memes(lr_max=1e-3, lr_min=1e-4, max_epochs=5, patience=10),
                    TrainConfig.unimodal(lr_max=1e-3, lr_min=1e-4, max_epochs=3),
                    ModelConfig(dim=32, fused_dim=32), seed=0)
run_protocol(spec)  # warm-up (jit compile / cache load)
t = time.perf_counter()
run_protocol(spec)
print(time.perf_counter() - t)
"""


def bench(label, fn, repeat):
    best = min(timeit.repeat(fn, number=1, repeat=repeat))
    return label, best


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(256, 1024))
    g = rng.normal(size=x.shape)
    ranks = np.arange(2, 2 * 26, 2, dtype=np.int64)
    y = rng.integers(0, 3, 200_000)
    p = rng.integers(0, 3, 200_000)
    cases = [
        ("gelu_forward 256x1024", lambda: kernels._gelu_forward_loop(x), lambda: kernels._gelu_forward_np(x)),
        ("gelu_backward 256x1024", lambda: kernels._gelu_backward_loop(x, g),
         lambda: kernels._gelu_backward_np(x, g)),
        ("signed_rank_counts n=25", lambda: kernels._signed_rank_counts_loop(ranks),
         lambda: kernels._signed_rank_counts_np(ranks)),
        ("confusion_matrix n=2e5", lambda: kernels._confusion_matrix_loop(y, p, 3),
         lambda: kernels._confusion_matrix_np(y, p, 3)),
    ]
    for name, loop, vec in cases:
        loop()  # compile
        yield name, bench("loop", loop, repeat)[1], bench("numpy", vec, repeat)[1]


def end_to_end(disable):
    env = dict(os.environ, STILT_BENCH_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not USE_NUMBA:
        print("numba is disabled or missing; loop kernels run as plain Python")
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'ratio':>7s}")
    for name, t_loop, t_np in kernel_rows(args.repeat):
        print(f"{name:28s} {t_loop * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_loop:7.2f}")
    fast, slow = end_to_end(False), end_to_end(True)
    print(f"\ntext_stilt run, D=32, 8 epochs: numba {fast:.2f}s, numpy {slow:.2f}s")


if __name__ == "__main__":
    main()
