#!/usr/bin/env python3
"""Train a toy byte-level model, then compare scaling strategies at long
context: baseline, constant scaling of the transition diagonal or the step
sizes, and SPSA-calibrated per-channel factors for both targets.

The model freezes its dynamics parameters during training so the spread of
transition eigenvalues survives, mimicking a pretrained backbone; the
length pathology is then visible at eval lengths past the training window.
"""

import argparse
import time

import numpy as np

from ssmlab.calibrate import (
    CalibrationConfig,
    constant_factors,
    init_factors,
    resolve_scales,
    spsa_calibrate,
)
from ssmlab.model import ToyModelConfig, build_model, perplexity_by_length, train
from ssmlab.spectrum import model_spectrum
from ssmlab.statenorm import state_norm_ratios, track_model_state_norms
from ssmlab.tasks import lm_batches, synthetic_corpus


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--d-m", type=int, default=64)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--target-length", type=int, default=2048)
    ap.add_argument("--spsa-iterations", type=int, default=120)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    lengths = [256, 512, 1024, args.target_length]
    cfg = ToyModelConfig(vocab_size=256, d_m=args.d_m, d_h=16,
                         n_layers=args.layers, train_length=256, seed=args.seed,
                         a_init_range=(0.01, 8.0), train_dynamics=False)
    model = build_model(cfg)
    corpus = synthetic_corpus(500_000, seed=100)
    held = synthetic_corpus(120_000, seed=200)
    calib_corpus = synthetic_corpus(60_000, seed=300)

    t0 = time.time()
    curve = train(model, lm_batches(corpus, 256, 8, seed=1), steps=args.steps, lr=3e-3)
    print(f"trained {args.steps} steps, loss {curve[0]:.3f} -> "
          f"{np.mean(curve[-50:]):.3f} ({time.time() - t0:.0f} s)")

    report = model_spectrum(model)
    print("spectrum lam_max per layer:", report.lam_max.round(4))
    ratios = state_norm_ratios(track_model_state_norms(model, held, lengths))
    print("state-norm max/min ratios:", {k: round(v) for k, v in ratios.items()})

    def show(name, factors):
        table = perplexity_by_length(model, held, lengths,
                                     scales=resolve_scales(factors, model),
                                     max_windows=12)
        print(f"{name:>18}: " + "  ".join(f"{p:8.3f}" for _, p in table))

    show("baseline", None)
    show("constant a x2", constant_factors(model, 2.0, "a"))
    show("constant delta x.5", constant_factors(model, 0.5, "delta"))

    n_calib, length = 6, args.target_length
    calib = [calib_corpus[i * (length + 1):(i + 1) * (length + 1)]
             for i in range(n_calib)]
    for target in ("a", "delta"):
        s0 = init_factors(cfg.n_layers, cfg.d_h, seed=args.seed, target=target,
                          granularity="channel")
        ccfg = CalibrationConfig(calib_set=calib, c=0.05, eta=0.01,
                                 iterations=args.spsa_iterations, seed=args.seed)
        t0 = time.time()
        factors, _ = spsa_calibrate(model, ccfg, s0)
        print(f"calibrated {target} in {time.time() - t0:.0f} s "
              f"(S range {factors.values.min():.3f}..{factors.values.max():.3f})")
        show(f"calibrated {target}", factors)


if __name__ == "__main__":
    main()
