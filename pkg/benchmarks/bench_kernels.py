"""Compiled kernels against the numpy reference.

    python benchmarks/bench_kernels.py [--steps N] [--repeat R]

Prints one line per case with the best-of-R wall time for each backend.
"""

import argparse
import timeit

import numpy as np

from scoredistill import _backend, _reference
from scoredistill.config import parse_config
from scoredistill.generator import Adam, run_distillation
from scoredistill.harness import seed_streams
from scoredistill.schedule import TimestepSampler


def distill_case(steps):
    cfg = parse_config({"preset": "two-class", "steps": steps})
    oracle, schedule = cfg.build_oracle(), cfg.build_schedule()
    gen, combiner, weight = cfg.build_generator(oracle), cfg.build_combiner(), cfg.build_weight()
    t_ss, eps_ss, _ = seed_streams(0)
    ts = TimestepSampler.for_schedule(schedule, t_ss, cfg.t_min, cfg.t_max).draw(steps)
    theta0 = gen.initial(oracle, np.random.default_rng(0))

    def go(use_kernel):
        run = run_distillation(
            gen, theta0, oracle, schedule, combiner, 0, ts,
            np.random.default_rng(eps_ss), weight, Adam(lr=0.01), use_kernel=use_kernel,
        )  # fmt: skip
        return run.final

    return go


def splat_case(n_splats, size):
    rng = np.random.default_rng(0)
    params = np.column_stack([
        rng.uniform(0, 1, (n_splats, 2)), np.full(n_splats, np.log(0.1)),
        rng.uniform(0, 1, (n_splats, 3)), rng.normal(0, 1, n_splats),
    ])  # fmt: skip
    cot = rng.normal(size=size * size * 3)

    def go(mod):
        img = np.empty(size * size * 3)
        grad = np.empty_like(params)
        mod.splat_render(params, size, size, img)
        mod.splat_vjp(params, size, size, cot, grad)
        return grad

    return go


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not _backend.HAVE_EXT:
        raise SystemExit("compiled extension not importable; build it with `pip install -e . --no-build-isolation`")

    go = distill_case(args.steps)
    np.testing.assert_allclose(go(True), go(False), rtol=1e-9, atol=1e-12)
    fused, step = best(lambda: go(True), args.repeat), best(lambda: go(False), 1)
    print(f"direct distillation, {args.steps} steps: fused {fused:.3f} s, stepwise {step:.3f} s, x{step / fused:.0f}")

    for n, size in [(12, 8), (64, 32)]:
        go = splat_case(n, size)
        np.testing.assert_allclose(go(_backend._ext), go(_reference), rtol=1e-9, atol=1e-12)
        reps = 200
        c = best(lambda: [go(_backend._ext) for _ in range(reps)], args.repeat) / reps
        p = best(lambda: [go(_reference) for _ in range(reps)], args.repeat) / reps
        print(f"splat render+vjp, {n} splats on {size}x{size}: compiled {c * 1e6:.1f} us, python {p * 1e6:.1f} us, x{p / c:.0f}")


if __name__ == "__main__":
    main()
