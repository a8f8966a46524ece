"""Compare the compiled and numpy kernel backends.

Kernel timings use shapes from a default-size model (d_k=128, 4 heads,
19 tokens) at training batch sizes. The end-to-end row times full
training steps in a subprocess per backend, because the active backend
is fixed when ``spackle.kernels`` is imported.

    python3 benchmarks/bench_kernels.py [--batch 32] [--repeat 20]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from spackle import kernels

STEP_SCRIPT = r"""
import json, sys, time
import numpy as np
from spackle import kernels, model as mdl
B, steps = int(sys.argv[1]), int(sys.argv[2])
cfg = mdl.ModelConfig(g=32)
params = mdl.init_params(cfg, 0)
rng = np.random.default_rng(0)
e_x = rng.normal(size=(B, 19, 32))
e_m = e_x * (rng.random(e_x.shape) > 0.3)
presence = np.ones((B, 19), bool)
mdl.loss_and_gradients(params, cfg, e_x, e_m, presence)
t = time.perf_counter()
for _ in range(steps):
    mdl.loss_and_gradients(params, cfg, e_x, e_m, presence)
print(json.dumps({"backend": kernels.BACKEND, "ms": 1e3 * (time.perf_counter() - t) / steps}))
"""


def kernel_cases(batch, dtype):
    rng = np.random.default_rng(0)
    d, ffn, heads, t = 128, 512, 4, 19
    x = rng.normal(size=(batch * t, d)).astype(dtype)
    h = rng.normal(size=(batch * t, ffn)).astype(dtype)
    gamma, beta = np.ones(d, dtype), np.zeros(d, dtype)
    scores = rng.normal(size=(batch * heads, t, t)).astype(dtype)
    presence = (rng.random((batch, t)) < 0.9).astype(np.uint8)
    presence[:, 0] = 1
    bufs = dict(o=np.empty_like(x), xh=np.empty_like(x), rs=np.empty(len(x), dtype), ho=np.empty_like(h),
                p=np.empty_like(scores), ds=np.empty_like(scores), dx=np.empty_like(x),
                dg=np.empty_like(gamma), db=np.empty_like(beta), dh=np.empty_like(h))
    return {
        "layernorm fwd": lambda k: k.layernorm_forward(x, gamma, beta, 1e-5, bufs["o"], bufs["xh"], bufs["rs"]),
        "layernorm bwd": lambda k: k.layernorm_backward(x, bufs["xh"], bufs["rs"], gamma, bufs["dx"],
                                                        bufs["dg"], bufs["db"]),
        "gelu fwd": lambda k: k.gelu_forward(h.reshape(-1), bufs["ho"].reshape(-1)),
        "gelu bwd": lambda k: k.gelu_backward(h.reshape(-1), h.reshape(-1), bufs["dh"].reshape(-1)),
        "softmax fwd": lambda k: k.masked_softmax_forward(scores, presence, heads, bufs["p"]),
        "softmax bwd": lambda k: k.softmax_backward(bufs["p"], scores, bufs["ds"]),
    }


def step_time(backend, batch, steps):
    env = dict(os.environ, SPACKLE_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", STEP_SCRIPT, str(batch), str(steps)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args()

    py = kernels.get_backend("python")
    try:
        cy = kernels.get_backend("cython")
    except ImportError:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    print(f"{'kernel':<16}{'dtype':<9}{'python ms':>11}{'cython ms':>11}{'speedup':>9}")
    for dtype in (np.float32, np.float64):
        for name, fn in kernel_cases(args.batch, dtype).items():
            t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
            t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<16}{np.dtype(dtype).name:<9}{t_py:>11.3f}{t_cy:>11.3f}{t_py / t_cy:>8.1f}x")

    rows = {b: step_time(b, args.batch, args.steps) for b in ("python", "cython")}
    assert rows["cython"]["backend"] == "cython" and rows["python"]["backend"] == "python"
    t_py, t_cy = rows["python"]["ms"], rows["cython"]["ms"]
    print(f"{'train step':<16}{'float32':<9}{t_py:>11.2f}{t_cy:>11.2f}{t_py / t_cy:>8.1f}x")


if __name__ == "__main__":
    main()
