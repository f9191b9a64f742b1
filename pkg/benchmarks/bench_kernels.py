"""Compare the numba direct-loop kernels against the numpy im2col/BLAS
path for the 3D convolution primitives and the distance transform.

Run:  python benchmarks/bench_kernels.py
The conv backend is chosen at import time, so this script re-executes the
timing body in subprocesses with NORMSHAPE_CONV / NORMSHAPE_NUMBA set.
"""

import json
import os
import subprocess
import sys
import textwrap

BODY = textwrap.dedent(
    """
    import json, time
    import numpy as np
    from normshape import kernels
    from normshape.volume import MaskVolume, signed_distance
    from normshape.synth import ShapeGenParams, gen_healthy

    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 8, 48, 32, 16)).astype(np.float32)
    w = rng.standard_normal((16, 8, 3, 3, 3)).astype(np.float32)
    g = rng.standard_normal((8, 16, 24, 16, 8)).astype(np.float32)
    mask = gen_healthy(ShapeGenParams(seed=0))

    def timeit(fn, reps=5):
        fn()  # warm-up (numba compilation)
        t0 = time.perf_counter()
        for _ in range(reps):
            fn()
        return (time.perf_counter() - t0) / reps

    out = {
        "conv_forward_s2": timeit(lambda: kernels.conv3d_forward(x, w, 2, 1)),
        "conv_weight_grad": timeit(lambda: kernels.conv3d_weight_grad(x, g, 3, 2, 1)),
        "tconv_forward": timeit(lambda: kernels.conv3d_transpose_forward(g, w, 2, 1, 1)),
        "signed_distance": timeit(lambda: signed_distance(mask)),
    }
    print(json.dumps(out))
    """
)


def run(env_extra):
    env = dict(os.environ, **env_extra)
    res = subprocess.run(
        [sys.executable, "-c", BODY], capture_output=True, text=True, env=env
    )
    if res.returncode != 0:
        print(res.stderr, file=sys.stderr)
        raise SystemExit(1)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    configs = [
        ("numpy (im2col/BLAS)", {"NORMSHAPE_NUMBA": "0"}),
        ("numba direct", {"NORMSHAPE_NUMBA": "1", "NORMSHAPE_CONV": "direct"}),
    ]
    results = {name: run(env) for name, env in configs}
    keys = list(next(iter(results.values())))
    print(f"{'kernel':<20}" + "".join(f"{name:>24}" for name in results))
    for k in keys:
        row = f"{k:<20}"
        for name in results:
            row += f"{results[name][k] * 1e3:>22.2f}ms"
        print(row)


if __name__ == "__main__":
    main()
