"""Service configuration loading.

A single JSON config file carries the secret key reference, per-query or
system-level privacy parameters, budget defaults and overrides, the fetch
rule for unknown domains, and table snapshot locations.  See
docs/formats.md for the schema.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .composition import SystemPrivacyBudget, solve_eps_per
from .mechanisms import PrivacyParams
from .noise import ConfigurationError

__all__ = ["FetchRule", "BudgetConfig", "ServiceConfig", "load_config"]

MIN_SECRET_BYTES = 32


@dataclass(frozen=True)
class FetchRule:
    """Unknown-domain fetch size: max(k_multiplier * k, min_fetch)."""

    k_multiplier: int = 10
    min_fetch: int = 1000


@dataclass(frozen=True)
class BudgetConfig:
    default_info: int = 3000
    default_calls: int = 30
    period: str = "monthly"
    overrides: Mapping[str, tuple[int, int]] = field(default_factory=dict)


@dataclass(frozen=True)
class ServiceConfig:
    secret: bytes
    params: PrivacyParams
    delta_prime: float
    budget: BudgetConfig
    fetch: FetchRule
    state_dir: str | None = None
    tables: Mapping[str, str] = field(default_factory=dict)


def _load_secret(raw: Mapping[str, object], base: Path) -> bytes:
    if "secret_hex" in raw:
        hex_text = str(raw["secret_hex"]).strip()
    elif "secret_env" in raw:
        var = str(raw["secret_env"])
        hex_text = os.environ.get(var, "")
        if not hex_text:
            raise ConfigurationError(f"environment variable {var!r} is empty or unset")
    elif "secret_file" in raw:
        hex_text = (base / str(raw["secret_file"])).read_text().strip()
    else:
        raise ConfigurationError("config must provide secret_hex, secret_env or secret_file")
    try:
        secret = bytes.fromhex(hex_text)
    except ValueError:
        raise ConfigurationError("secret must be hex-encoded") from None
    if len(secret) < MIN_SECRET_BYTES:
        raise ConfigurationError(
            f"secret must be at least {MIN_SECRET_BYTES} bytes, got {len(secret)}"
        )
    return secret


def _load_privacy(raw: Mapping[str, object]) -> tuple[PrivacyParams, float]:
    privacy = raw.get("privacy")
    if not isinstance(privacy, Mapping):
        raise ConfigurationError("config must provide a privacy section")
    if "eps_per" in privacy:
        params = PrivacyParams(
            eps_per=float(privacy["eps_per"]), delta=float(privacy.get("delta", 0.0))
        )
        return params, float(privacy.get("delta_prime", 0.0))
    # System-level budget; derive the per-query parameters.
    budget = SystemPrivacyBudget(
        eps_max=float(privacy["eps_max"]),
        delta_star=float(privacy["delta_star"]),
        k_star=int(privacy["k_star"]),
        ell_star=int(privacy["ell_star"]),
    )
    solved = solve_eps_per(budget)
    return (
        PrivacyParams(eps_per=solved.eps_per, delta=solved.delta),
        solved.delta_prime,
    )


def load_config(path: str | Path) -> ServiceConfig:
    path = Path(path)
    raw = json.loads(path.read_text())
    params, delta_prime = _load_privacy(raw)

    budget_raw = raw.get("budget", {})
    overrides = {
        analyst: (int(pair[0]), int(pair[1]))
        for analyst, pair in dict(budget_raw.get("overrides", {})).items()
    }
    budget = BudgetConfig(
        default_info=int(budget_raw.get("info", 3000)),
        default_calls=int(budget_raw.get("calls", 30)),
        period=str(budget_raw.get("period", "monthly")),
        overrides=overrides,
    )

    fetch_raw = raw.get("fetch", {})
    fetch = FetchRule(
        k_multiplier=int(fetch_raw.get("k_multiplier", 10)),
        min_fetch=int(fetch_raw.get("min_fetch", 1000)),
    )

    state_dir = raw.get("state_dir")
    if state_dir is not None:
        state_dir = str((path.parent / str(state_dir)).resolve())

    tables = {
        name: str((path.parent / str(loc)).resolve())
        for name, loc in dict(raw.get("tables", {})).items()
    }
    return ServiceConfig(
        secret=_load_secret(raw, path.parent),
        params=params,
        delta_prime=delta_prime,
        budget=budget,
        fetch=fetch,
        state_dir=state_dir,
        tables=tables,
    )
