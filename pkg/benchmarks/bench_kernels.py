"""Benchmark the compiled kernels against the numpy fallback.

Times each hot kernel on training-shaped inputs, then a full model
training step with each backend. Run from the repo root:

    python benchmarks/bench_kernels.py [--repeats 50]

Backend selection for the full-step comparison happens at import, so the
script re-executes itself with LORADROP_KERNELS set per backend.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def time_fn(fn, repeats):
    fn()  # warmup
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_kernels(repeats):
    from loradrop._kernels import _numpy_impl as np_impl

    try:
        from loradrop._kernels import _core as cy_impl
    except ImportError:
        print("compiled extension unavailable; nothing to compare")
        return

    rng = np.random.default_rng(0)
    sm_x = rng.normal(size=(8192, 32))
    sm_y = np_impl.softmax_rows(sm_x)
    sm_dy = rng.normal(size=sm_x.shape)
    ge_x = rng.normal(size=512 * 1024)
    ge_dy = rng.normal(size=ge_x.shape)
    ln_x = rng.normal(size=(2048, 64))
    ln_g = rng.uniform(0.5, 1.5, size=64)
    ln_b = rng.normal(size=64)
    _, ln_mu, ln_rstd = np_impl.layernorm(ln_x, ln_g, ln_b, 1e-5)
    ln_dy = rng.normal(size=ln_x.shape)

    cases = [
        ("softmax_rows [8192x32]", lambda m: m.softmax_rows(sm_x)),
        ("softmax_rows_grad", lambda m: m.softmax_rows_grad(sm_y, sm_dy)),
        ("gelu [512k]", lambda m: m.gelu(ge_x)),
        ("gelu_grad", lambda m: m.gelu_grad(ge_x, ge_dy)),
        ("layernorm [2048x64]", lambda m: m.layernorm(ln_x, ln_g, ln_b, 1e-5)),
        ("layernorm_grad", lambda m: m.layernorm_grad(ln_x, ln_g, ln_mu, ln_rstd, ln_dy)),
    ]
    print(f"{'kernel':<26} {'numpy':>10} {'cython':>10} {'speedup':>8}")
    for name, call in cases:
        t_np = time_fn(lambda: call(np_impl), repeats)
        t_cy = time_fn(lambda: call(cy_impl), repeats)
        print(f"{name:<26} {t_np * 1e3:>8.3f}ms {t_cy * 1e3:>8.3f}ms {t_np / t_cy:>7.2f}x")


def bench_train_step(repeats):
    """Runs in a subprocess per backend so the import-time selection applies."""
    results = {}
    for backend in ("numpy", "cython"):
        env = dict(os.environ, LORADROP_KERNELS=backend)
        out = subprocess.run(
            [sys.executable, __file__, "--train-step-worker", "--repeats", str(repeats)],
            capture_output=True, text=True, env=env,
        )
        if out.returncode != 0:
            print(f"{backend}: unavailable ({out.stderr.strip().splitlines()[-1]})")
            continue
        results[backend] = json.loads(out.stdout)
    if len(results) == 2:
        t_np, t_cy = results["numpy"]["step_ms"], results["cython"]["step_ms"]
        print(f"\n{'full train step':<26} {t_np:>8.3f}ms {t_cy:>8.3f}ms {t_np / t_cy:>7.2f}x")


def train_step_worker(repeats):
    from loradrop import kernels_backend
    from loradrop import tensor as T
    from loradrop.dropout import DropoutSpec, Position
    from loradrop.losses import CompensationSpec, twin_pass_step
    from loradrop.masks import StructuralPattern
    from loradrop.model import Model, ModelConfig
    from loradrop.optim import AdamW

    model = Model(ModelConfig(), [
        DropoutSpec(position=Position.ATTN_LOGITS, pattern=StructuralPattern.COLUMN, rate=0.1),
        DropoutSpec(position=Position.FFN_HIDDEN, pattern=StructuralPattern.ELEMENT, rate=0.1),
    ], init_seed=1)
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 32, size=(32, 32))
    targets = rng.integers(0, 32, size=32)
    opt = AdamW(model.trainable_parameters(), lr=1e-3)
    comp = CompensationSpec()

    def step(i):
        r = twin_pass_step((tokens, targets), model, comp, step_seed=i)
        model.zero_grad()
        T.backward(r.loss)
        opt.step()

    step(0)
    t0 = time.perf_counter()
    for i in range(1, repeats + 1):
        step(i)
    ms = (time.perf_counter() - t0) / repeats * 1e3
    print(json.dumps({"backend": kernels_backend(), "step_ms": ms}))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--train-step-worker", action="store_true")
    args = ap.parse_args()
    if args.train_step_worker:
        train_step_worker(min(args.repeats, 30))
        return
    bench_kernels(args.repeats)
    bench_train_step(min(args.repeats, 30))


if __name__ == "__main__":
    main()
