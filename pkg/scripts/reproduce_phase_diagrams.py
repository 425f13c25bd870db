#!/usr/bin/env python3
"""
Desk-scale phase-diagram numbers for BiFAMP
Run: python scripts/reproduce_phase_diagrams.py [--quick]
"""
import argparse
import logging
import os
import sys
import time

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from bifamp.schemas.problem import Application, ProblemSpec
from bifamp.schemas.run import AmpOptions, InitMode, SeInit, SeOptions
from bifamp.services.amp import amp_run, evaluate_mse
from bifamp.services.factory import build_model
from bifamp.services.instances import STREAM_SOLVER, generate, substream
from bifamp.services.phase import (
    counting_bound,
    find_recovery_edge,
    find_spinodal,
    jacobian_crossing,
    stability_thresholds,
    sweep_grid,
    uninformative_stability,
)
from bifamp.services.state_evolution import se_run


def banner(title: str):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def timed(label: str, fn):
    start = time.perf_counter()
    value = fn()
    print(f"   {label}: {value}  ({time.perf_counter() - start:.1f} s)")
    return value


def dictionary_learning():
    banner("1. DICTIONARY LEARNING (alpha=0.5, rho=0.2, delta=0)")
    problem = ProblemSpec(application=Application.DICTIONARY, alpha=0.5, pi=2.0, rho=0.2)
    print(f"   counting bound pi* = {counting_bound(problem).value:.4f}")
    print(f"   uninformative stability pi_F = {uninformative_stability(problem).value:.4f}")
    for pi in (1.6, 1.7, 2.0, 3.0):
        run = se_run(problem.with_value("pi", pi), SeOptions(init=SeInit.INFORMATIVE, check_quadrature=False),
                     keep_trajectory=False)
        print(f"   pi={pi:.2f} informative init: E_X={run.e_x:.3e} E_F={run.e_f:.3e}")
    timed("informative edge", lambda: find_recovery_edge(problem, "pi", (1.5, 2.0), SeInit.INFORMATIVE).value)
    timed("jacobian pi_F", lambda: jacobian_crossing(problem, "pi", 2.0).value)


def compressed_sensing():
    banner("2. COMPRESSED SENSING ANCHOR (F known, alpha=0.5, delta=1e-12)")
    problem = ProblemSpec(application=Application.CS, alpha=0.5, pi=1.0, rho=0.3, delta=1e-12)
    timed("spinodal rho", lambda: find_spinodal(problem, "rho", (0.2, 0.45)).value)


def completion(quick: bool):
    banner("3. MATRIX COMPLETION (alpha=pi=4)")
    problem = ProblemSpec(application=Application.COMPLETION, alpha=4.0, pi=4.0, eps=0.55)
    print(f"   counting bound eps* = {counting_bound(problem).value:.4f}")
    for eps in (0.45, 0.55):
        run = se_run(problem.with_value("eps", eps), SeOptions(check_quadrature=False), keep_trajectory=False)
        print(f"   eps={eps:.2f} uninformative: E_X={run.e_x:.3e}")
    timed("transition", lambda: find_spinodal(problem, "eps", (0.4, 0.6)).value)
    noisy = problem.with_value("delta", 1e-2)
    grid = np.round(np.arange(0.30, 0.71 if not quick else 0.41, 0.01), 2).tolist()
    rows = sweep_grid(noisy, {"eps": grid})
    jumps = np.abs(np.diff([row.mmse_x for row in rows]))
    print(f"   delta=1e-2 sweep over {len(rows)} points: largest adjacent jump {jumps.max():.4f}")


def robust_pca():
    banner("4. ROBUST PCA (alpha=pi=4, delta_s=0, delta_l=1)")
    problem = ProblemSpec(application=Application.ROBUST_PCA, alpha=4.0, pi=4.0, eps=0.5, delta_s=0.0, delta_l=1.0)
    print(f"   counting bound eps* = {counting_bound(problem).value:.4f}")
    timed("transition", lambda: find_spinodal(problem, "eps", (0.4, 0.6)).value)
    run = se_run(problem.with_value("eps", 0.05), SeOptions(check_quadrature=False), keep_trajectory=False)
    print(f"   eps=0.05: E_X={run.e_x:.4f}")


def factor_analysis():
    banner("5. FACTOR ANALYSIS (psi=(0.5, 2), alpha=2)")
    problem = ProblemSpec(application=Application.FACTOR_ANALYSIS, alpha=2.0, pi=1.8, psi=[0.5, 2.0])
    report = stability_thresholds(problem)
    print(f"   closed-form pi_c = {report.uninformative_stability.value:.4f}")
    for check in report.jacobian_checks:
        print(f"   jacobian pi_c = {check.value:.4f}")


def amp_demo(n: int):
    banner(f"6. AMP ON A DICTIONARY INSTANCE (N={n}, pi=3)")
    problem = ProblemSpec(application=Application.DICTIONARY, alpha=0.5, pi=3.0, rho=0.2, delta=1e-8)
    instance = generate(problem, n, seed=1)
    model = build_model(problem, instance)
    options = AmpOptions(max_iterations=200, init=InitMode.RANDOM)
    result = amp_run(problem, instance.Y, options, substream(1, STREAM_SOLVER), n, model,
                     (instance.F0, instance.X0), track_free_entropy=False)
    mse = evaluate_mse(result.state.a, result.state.r, instance.X0, instance.F0)
    print(f"   iterations={result.iterations} converged={result.converged}")
    print(f"   mse_z={mse.mse_z:.3e} mse_x={mse.mse_x_aligned:.3e} mse_f={mse.mse_f_aligned:.3e}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="Skip the slow searches and use a small AMP run")
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)

    print("=" * 60)
    print("BIFAMP PHASE DIAGRAMS")
    print("=" * 60)
    dictionary_learning()
    factor_analysis()
    completion(args.quick)
    robust_pca()
    if not args.quick:
        compressed_sensing()
    amp_demo(100 if args.quick else 500)
    print("\nDone.")


if __name__ == "__main__":
    main()
