#!/usr/bin/env python3
"""Run the state-norm theory checks end to end and print a small report.

Covers: Monte Carlo vs the uniform closed form, quadrature vs closed form,
a general (triangular) density vs lambda-sampled Monte Carlo, the
logarithmic-divergence slope toward lambda -> 1, and the linear-vanishing
regime toward lambda -> 0.
"""

import argparse
import math
import time

import numpy as np

from ssmlab.statenorm import (
    LambdaLaw,
    NormExperiment,
    closed_form_norm,
    density_limit,
    divergence_slope,
    simulate_state_norm,
    vanishing_ratio,
)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--d", type=int, default=512)
    ap.add_argument("--t-max", type=int, default=5000)
    ap.add_argument("--trials", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    print("== Monte Carlo vs closed form (uniform [0.5, 0.9]) ==")
    spec = NormExperiment(
        d=args.d, m=args.d, t_max=args.t_max, trials=args.trials,
        lambda_law=LambdaLaw("uniform", 0.5, 0.9),
        sigma_b2=1.0 / (2 * args.d), seed=args.seed,
    )
    t0 = time.time()
    res = simulate_state_norm(spec, workers=args.threads)
    print(f"  mc = {res.mc_estimate:.4f} +- {res.mc_stderr:.4f}")
    print(f"  closed form = {res.closed_form:.4f}  ratio = {res.ratio:.4f}")
    print(f"  ({time.time() - t0:.1f} s)")

    print("== Quadrature vs closed form ==")
    p_uniform = lambda lam: np.full_like(np.asarray(lam, dtype=float), 2.5)
    quad_val = density_limit(p_uniform, 0.5, 0.9, res.e_bx2)
    closed = closed_form_norm(0.5, 0.9, res.e_bx2)
    print(f"  quadrature = {quad_val:.6f}  closed = {closed:.6f} "
          f" rel = {abs(quad_val - closed) / closed:.2e}")

    print("== Triangular density vs lambda-sampled Monte Carlo ==")
    def tri(lam):
        lam = np.asarray(lam, dtype=float)
        up = (lam - 0.2) / 0.09
        down = (0.8 - lam) / 0.09
        return np.where(lam <= 0.5, up, down).clip(min=0.0)
    got = density_limit(tri, 0.2, 0.8, 1.0)
    rng = np.random.default_rng(args.seed)
    draws = 1.0 / (1.0 - rng.triangular(0.2, 0.5, 0.8, 200_000) ** 2)
    se = draws.std(ddof=1) / math.sqrt(draws.size)
    print(f"  quadrature = {got:.6f}  mc = {draws.mean():.6f} +- {se:.6f}")

    print("== Divergence slope near lambda -> 1 ==")
    sweep = 1.0 - np.geomspace(1e-3, 1e-6, 6)
    slope, _ = divergence_slope(
        lambda lam: np.ones_like(np.asarray(lam, dtype=float)), sweep)
    print(f"  uniform density: slope = {slope:.4f} (predicted p(1)/2 = 0.5)")

    print("== Linear vanishing near lambda -> 0 ==")
    for lam_max in (1e-3, 1e-2):
        print(f"  lam_max = {lam_max:g}: integral / (p(0) lam_max) = "
              f"{vanishing_ratio(lam_max):.6f}")


if __name__ == "__main__":
    main()
