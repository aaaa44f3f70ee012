#!/usr/bin/env python3
"""Walk through the attack calculus that fixes the system parameters.

Shows, step by step, how each knob is pinned by one concrete attack:
the repeated-query averaging attack fixes the per-query epsilon, the
differencing attack fixes the information budget, and the unique-count
threshold breach fixes delta and the call budget.  Ends with the composed
per-period guarantee.
"""

from __future__ import annotations

import argparse

from dpquery.calibration import (
    averaging_attack_prob,
    full_report,
    max_stable_k,
    small_noise_prob,
    suggested_info_budget,
    threshold_breach_bound,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--eps", type=float, default=0.15)
    parser.add_argument("--delta", type=float, default=1e-10)
    parser.add_argument("--k-star", type=int, default=3000)
    parser.add_argument("--ell-star", type=int, default=30)
    parser.add_argument("--delta-prime", type=float, default=1e-9)
    parser.add_argument("--days", type=int, default=30)
    parser.add_argument("--d-bar", type=int, default=1000)
    args = parser.parse_args()

    print(f"1. averaging attack: repeat one query daily for {args.days} days")
    print(f"   P(average within 1/2 of truth) = "
          f"{averaging_attack_prob(args.eps, args.days):.4f} at eps={args.eps}\n")

    p = small_noise_prob(args.eps)
    k = max_stable_k(p)
    print("2. differencing attack: two top-k results with fresh noise")
    print(f"   P(one count has noise under 1/2) = {p:.4f}")
    print(f"   expected small-noise overlap stays below one up to k = {k}")
    print(f"   information budget covering two counted top-k results: "
          f"{suggested_info_budget(k)}\n")

    bound = threshold_breach_bound(args.eps, args.delta, args.ell_star, args.d_bar)
    print("3. unique-count breach: a single-member count clears the threshold")
    print(f"   per query  <= {bound.per_query:.3e}")
    print(f"   per period <= {bound.per_period:.3e} "
          f"(about 1 in {1 / bound.per_period:,.0f})\n")

    report = full_report(
        args.eps, args.delta, args.k_star, args.ell_star, args.delta_prime,
        n_days=args.days, d_bar=args.d_bar,
    )
    print("4. composed per-period guarantee")
    print(report.to_text())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
