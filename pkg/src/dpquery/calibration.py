"""Closed-form attack calculators that rationalize the system parameters.

Each calculator bounds the success probability of a concrete attack and is
used to pick one knob:

 - averaging attack: an analyst repeats one query daily over the retention
   window and averages the noisy answers; bounds the per-unit epsilon.
 - differencing attack: two top-k results with fresh noise may both carry
   counts whose noise was under half a unit; bounds k and hence the
   information budget.
 - threshold breach: a unique (single-member) count may clear the noisy
   release threshold; bounds delta and the call budget.

The full report assembles these with the composition accountant into the
overall per-period guarantee.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from .composition import PerQueryParams, overall_guarantee
from .mechanisms import solve_delta_hat

__all__ = [
    "AttackReport",
    "BreachBound",
    "normal_cdf",
    "averaging_attack_prob",
    "small_noise_prob",
    "hypergeometric_pmf",
    "expected_overlap",
    "max_stable_k",
    "suggested_info_budget",
    "threshold_breach_bound",
    "restricted_threshold_breach_bound",
    "full_report",
]


def normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def averaging_attack_prob(eps_per: float, n_days: int = 30) -> float:
    """P(daily-averaged noise lands within 1/2 of the true count).

    The analyst sees n_days independent Laplace(2/eps) draws on the same
    count (the seed changes with the date); their mean is approximated by a
    normal with variance 8 / (n * eps^2), giving

        2 * Phi(eps * sqrt(n) / (4 * sqrt(2))) - 1.
    """
    if eps_per <= 0:
        raise ValueError(f"eps_per must be positive, got {eps_per}")
    if n_days < 1:
        raise ValueError(f"n_days must be >= 1, got {n_days}")
    return 2.0 * normal_cdf(eps_per * math.sqrt(n_days) / (4.0 * math.sqrt(2.0))) - 1.0


def small_noise_prob(eps_per: float) -> float:
    """p = P(|Laplace(2/eps)| < 1/2) = 1 - e^(-eps/4).

    The chance that one released count carries noise too small to mask it
    after rounding.
    """
    if eps_per <= 0:
        raise ValueError(f"eps_per must be positive, got {eps_per}")
    return -math.expm1(-eps_per / 4.0)


def _log_choose(n: int, r: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(r + 1) - math.lgamma(n - r + 1)


def hypergeometric_pmf(k: int, m: int, s: int) -> float:
    """P(intersection size = s) for two uniform m-subsets of a k-set:

        C(m, s) * C(k - m, m - s) / C(k, m)

    evaluated through log-gamma for numerical range.
    """
    if not 0 <= m <= k:
        raise ValueError(f"need 0 <= m <= k, got m={m}, k={k}")
    if not 0 <= s <= m:
        raise ValueError(f"need 0 <= s <= m, got s={s}")
    if m - s > k - m:
        return 0.0
    return math.exp(
        _log_choose(m, s) + _log_choose(k - m, m - s) - _log_choose(k, m)
    )


def expected_overlap(k: int, p: float) -> float:
    """Expected intersection of the two small-noise sets: p^2 * k."""
    return p * p * k


def max_stable_k(p: float) -> int:
    """Largest k keeping the expected small-noise overlap below one."""
    if not 0 < p < 1:
        raise ValueError(f"p must be in (0, 1), got {p}")
    return math.floor(1.0 / (p * p))


def suggested_info_budget(k: int) -> int:
    """Information budget covering two top-k results with counts: 4k + 2.

    Two results of k elements each, doubled because counts are released
    alongside, plus one threshold charge per query.
    """
    return 4 * k + 2


@dataclass(frozen=True)
class BreachBound:
    """Bounds on a unique count clearing the noisy release threshold.

    ``per_query`` is the union bound over the d_bar fetched counts using
    the pessimistic threshold index; ``single_query`` is its closed-form
    relaxation delta * e^(-eps); ``per_period`` multiplies by the call
    budget.
    """

    per_query: float
    single_query: float
    per_period: float


def threshold_breach_bound(
    eps_per: float, delta: float, ell_star: int, d_bar: int = 1000
) -> BreachBound:
    """Breach bounds for the unrestricted unknown-domain mechanism.

    The selection noise difference between a count and the threshold is
    logistic, so one count breaches with probability at most

        1 - 1 / (1 + e^(-eps) * delta / d_bar)

    and the union over d_bar counts relaxes to delta * e^(-eps).
    """
    if eps_per <= 0 or delta < 0 or ell_star < 1 or d_bar < 1:
        raise ValueError("parameters must be positive (delta may be zero)")
    x = math.exp(-eps_per) * delta / d_bar
    per_query = d_bar * (x / (1.0 + x))  # algebraic form of 1 - 1/(1+x), no cancellation
    single = delta * math.exp(-eps_per)
    return BreachBound(per_query=per_query, single_query=single, per_period=ell_star * single)


def restricted_threshold_breach_bound(
    eps_per: float,
    delta: float,
    delta_sensitivity: int,
    tau: int,
    d_bar: int,
) -> float:
    """Per-query breach bound for the restricted unknown-domain mechanism.

    With all counts tied at the bottom rank, a release requires the
    difference of two Laplace(b) draws, b = 2*tau*Delta/eps, to exceed the
    threshold gap t = tau * (1 + 2*Delta*ln(Delta/delta_hat)/eps).  The
    difference tail is (2 + t/b) * e^(-t/b) / 4, unioned over d_bar counts.
    """
    delta_hat = solve_delta_hat(delta, eps_per, delta_sensitivity)
    b = 2.0 * tau * delta_sensitivity / eps_per
    t = tau * (1.0 + 2.0 * delta_sensitivity * math.log(delta_sensitivity / delta_hat) / eps_per)
    per_count = 0.25 * (2.0 + t / b) * math.exp(-t / b)
    return min(1.0, d_bar * per_count)


@dataclass(frozen=True)
class AttackReport:
    """All attack probabilities plus the overall guarantee they support."""

    eps_per: float
    delta: float
    k_star: int
    ell_star: int
    delta_prime: float
    averaging_prob: float
    small_noise_p: float
    max_k: int
    suggested_info_budget: int
    breach_bound: BreachBound
    overall: tuple[float, float]

    def to_dict(self) -> Mapping[str, object]:
        return {
            "per_query": {"eps_per": self.eps_per, "delta": self.delta},
            "budgets": {"info": self.k_star, "calls": self.ell_star},
            "averaging_attack_prob": self.averaging_prob,
            "small_noise_prob": self.small_noise_p,
            "max_stable_k": self.max_k,
            "suggested_info_budget": self.suggested_info_budget,
            "threshold_breach": {
                "per_query": self.breach_bound.per_query,
                "single_query": self.breach_bound.single_query,
                "per_period": self.breach_bound.per_period,
            },
            "overall": {"eps_max": self.overall[0], "delta_star": self.overall[1]},
        }

    def to_text(self) -> str:
        eps_max, delta_star = self.overall
        rows = [
            ("per-query parameters", f"eps={self.eps_per:g}, delta={self.delta:g}"),
            ("budgets (info, calls)", f"({self.k_star}, {self.ell_star})"),
            ("averaging attack prob (30 days)", f"{self.averaging_prob:.4f}"),
            ("small-noise prob p", f"{self.small_noise_p:.4f}"),
            ("max stable top-k", f"{self.max_k}"),
            ("suggested info budget", f"{self.suggested_info_budget}"),
            ("threshold breach, per query", f"{self.breach_bound.per_query:.3e}"),
            ("threshold breach, per period", f"{self.breach_bound.per_period:.3e}"),
            ("overall period guarantee", f"(eps={eps_max:.4g}, delta={delta_star:.3g})"),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


def full_report(
    eps_per: float,
    delta: float,
    k_star: int,
    ell_star: int,
    delta_prime: float,
    n_days: int = 30,
    d_bar: int = 1000,
) -> AttackReport:
    """Assemble every calculator plus the composed overall guarantee."""
    p = small_noise_prob(eps_per)
    k = max_stable_k(p)
    overall = overall_guarantee(
        PerQueryParams(eps_per=eps_per, delta=delta, delta_prime=delta_prime),
        k_star,
        ell_star,
    )
    return AttackReport(
        eps_per=eps_per,
        delta=delta,
        k_star=k_star,
        ell_star=ell_star,
        delta_prime=delta_prime,
        averaging_prob=averaging_attack_prob(eps_per, n_days),
        small_noise_p=p,
        max_k=k,
        suggested_info_budget=suggested_info_budget(k),
        breach_bound=threshold_breach_bound(eps_per, delta, ell_star, d_bar),
        overall=overall,
    )
