"""Deterministic, keyed noise generation.

Identical queries over the identical data snapshot must produce identical
noisy results, so all randomness is derived from a keyed hash of
(system secret, canonical query text, snapshot date).  Per-element noise
comes from independent substreams keyed by a stable label, which makes the
noise vector invariant to the order in which elements are enumerated.

Sampling uses inverse-CDF transforms of counter-mode PRF uniforms:

    Laplace(b):  x = -b * sign(u - 1/2) * ln(1 - 2|u - 1/2|)
    Gumbel(b):   x = -b * ln(-ln u)

Uniforms are clamped away from {0, 1} so neither transform can return an
infinity.
"""

from __future__ import annotations

import hashlib
import hmac
import math
import urllib.parse
from dataclasses import dataclass
from datetime import date
from typing import Mapping, Protocol, Sequence

import numpy as np

__all__ = [
    "NoiseKey",
    "NoiseStream",
    "ConfigurationError",
    "ParameterError",
    "THRESHOLD_STREAM_ID",
    "canonical_filter",
    "canonical_query",
    "derive_seed",
    "substream",
    "laplace_from_uniform",
    "gumbel_from_uniform",
    "laplace",
    "gumbel",
    "KeyedNoise",
    "SimNoise",
    "ZeroNoise",
]


class ConfigurationError(ValueError):
    """Raised for invalid system-level configuration (e.g. empty secret)."""


class ParameterError(ValueError):
    """Raised for invalid per-call parameters (e.g. non-positive scale)."""


# Reserved substream label for the noisy release threshold.  Element labels
# are always role-prefixed, so no element id can collide with it.
THRESHOLD_STREAM_ID = "⊥-threshold"

# Smallest / largest uniforms handed to the inverse CDFs.
_U_MIN = 2.0**-53
_U_MAX = 1.0 - 2.0**-53


def _quote(text: str) -> str:
    return urllib.parse.quote(text, safe="")


def canonical_filter(filter_spec: Mapping[str, object] | None) -> str:
    """Serialize a filter predicate to its canonical byte form.

    A filter is a conjunction of ``column = value`` and ``column in set``
    terms, given as a mapping from column name to a string (equality) or to
    an iterable of strings (membership).  Terms are sorted by column name,
    membership values are sorted and deduplicated, and every name and value
    is percent-encoded, so two filters that mean the same thing serialize
    identically.
    """
    if not filter_spec:
        return ""
    terms = []
    for column in sorted(filter_spec):
        value = filter_spec[column]
        if isinstance(value, str):
            terms.append(f"{_quote(column)}={_quote(value)}")
        else:
            values = sorted({str(v) for v in value})
            if not values:
                raise ParameterError(f"empty membership set for column {column!r}")
            terms.append(f"{_quote(column)}@" + ",".join(_quote(v) for v in values))
    return ";".join(terms)


def canonical_query(
    table: str,
    group_by: str,
    filter_spec: Mapping[str, object] | None,
    k: int,
    sensitivity: str,
    tau: int,
    delta_sensitivity: int,
) -> str:
    """Canonical query text used to key the pseudorandom seed.

    Two requests that describe the same query must canonicalize to the same
    bytes; see docs/formats.md for the exact grammar.  The snapshot date is
    deliberately not part of this text, it enters the key separately.
    """
    pairs = {
        "delta": str(int(delta_sensitivity)),
        "filter": canonical_filter(filter_spec),
        "group_by": _quote(group_by),
        "k": str(int(k)),
        "sensitivity": sensitivity,
        "table": _quote(table),
        "tau": str(int(tau)),
    }
    return "&".join(f"{name}={pairs[name]}" for name in sorted(pairs))


@dataclass(frozen=True)
class NoiseKey:
    """Inputs that fully determine the noise for one query on one snapshot."""

    secret: bytes
    query_canon: str
    data_date: date


def _length_prefixed(data: bytes) -> bytes:
    return len(data).to_bytes(8, "big") + data


def derive_seed(key: NoiseKey) -> bytes:
    """Derive the 256-bit noise seed for a query.

    HMAC-SHA256 keyed by the system secret over the length-prefixed
    canonical query text and snapshot date.  The seed cannot be recovered
    from the query and date alone, and changing any of the three inputs
    changes the seed.
    """
    if not key.secret:
        raise ConfigurationError("noise secret must be non-empty")
    message = _length_prefixed(key.query_canon.encode("utf-8")) + _length_prefixed(
        key.data_date.isoformat().encode("ascii")
    )
    return hmac.new(key.secret, message, hashlib.sha256).digest()


@dataclass
class NoiseStream:
    """Counter-mode PRF stream; (seed, counter) reproducibly determine draws."""

    seed: bytes
    counter: int = 0

    def uniform(self) -> float:
        """Next uniform in [2^-53, 1 - 2^-53] with 53-bit resolution."""
        block = hashlib.blake2b(
            self.counter.to_bytes(8, "big"), key=self.seed, digest_size=8
        ).digest()
        self.counter += 1
        u = (int.from_bytes(block, "big") >> 11) * _U_MIN
        return min(max(u, _U_MIN), _U_MAX)


def substream(seed: bytes, element_id: str) -> NoiseStream:
    """Independent per-element stream; stable under element reordering."""
    child = hashlib.blake2b(
        element_id.encode("utf-8"), key=seed, digest_size=32
    ).digest()
    return NoiseStream(seed=child)


def laplace_from_uniform(u: float, scale: float) -> float:
    """Inverse-CDF Laplace transform of one uniform in (0, 1)."""
    if scale <= 0:
        raise ParameterError(f"laplace scale must be positive, got {scale}")
    q = u - 0.5
    if q == 0.0:
        return 0.0
    return -scale * math.copysign(1.0, q) * math.log1p(-2.0 * abs(q))


def gumbel_from_uniform(u: float, scale: float) -> float:
    """Inverse-CDF Gumbel transform of one uniform in (0, 1)."""
    if scale <= 0:
        raise ParameterError(f"gumbel scale must be positive, got {scale}")
    return -scale * math.log(-math.log(u))


def laplace(stream: NoiseStream, scale: float) -> float:
    return laplace_from_uniform(stream.uniform(), scale)


def gumbel(stream: NoiseStream, scale: float) -> float:
    return gumbel_from_uniform(stream.uniform(), scale)


class NoiseSource(Protocol):
    """Noise interface the mechanisms draw from.

    ``role`` scopes the purpose of a draw (selection noise, count noise,
    threshold-index noise) so that, under the keyed implementation, counts
    and selections come from disjoint substreams.
    """

    def labeled_laplace(
        self, role: str, labels: Sequence[str], scale: float
    ) -> np.ndarray: ...

    def labeled_gumbel(
        self, role: str, labels: Sequence[str], scale: float
    ) -> np.ndarray: ...

    def indexed_gumbel(self, role: str, indices: range, scale: float) -> np.ndarray: ...

    def single_laplace(self, stream_id: str, scale: float) -> float: ...

    def single_gumbel(self, stream_id: str, scale: float) -> float: ...


@dataclass
class KeyedNoise:
    """Deterministic noise source backed by per-label substreams of a seed."""

    seed: bytes

    def _draw(self, stream_id: str) -> float:
        return substream(self.seed, stream_id).uniform()

    def labeled_laplace(
        self, role: str, labels: Sequence[str], scale: float
    ) -> np.ndarray:
        return np.array(
            [laplace_from_uniform(self._draw(f"{role}:{x}"), scale) for x in labels],
            dtype=np.float64,
        )

    def labeled_gumbel(
        self, role: str, labels: Sequence[str], scale: float
    ) -> np.ndarray:
        return np.array(
            [gumbel_from_uniform(self._draw(f"{role}:{x}"), scale) for x in labels],
            dtype=np.float64,
        )

    def indexed_gumbel(self, role: str, indices: range, scale: float) -> np.ndarray:
        return np.array(
            [gumbel_from_uniform(self._draw(f"{role}:{i}"), scale) for i in indices],
            dtype=np.float64,
        )

    def single_laplace(self, stream_id: str, scale: float) -> float:
        return laplace_from_uniform(self._draw(stream_id), scale)

    def single_gumbel(self, stream_id: str, scale: float) -> float:
        return gumbel_from_uniform(self._draw(stream_id), scale)


class SimNoise:
    """Fast noise source for Monte Carlo runs; labels are ignored.

    Draws come from a numpy generator through an internal block buffer so
    repeated small requests stay cheap.  Vector draws may return views into
    the buffer; callers must not mutate them in place.  This source is for
    statistical experiments only, it provides none of the reproducibility
    guarantees of :class:`KeyedNoise`.
    """

    def __init__(self, rng: np.random.Generator | int | None = None, block: int = 1 << 16):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self._rng = rng
        self._block = block
        self._buffers: dict[tuple[str, float], tuple[np.ndarray, int]] = {}

    def _take(self, kind: str, scale: float, n: int) -> np.ndarray:
        buf, pos = self._buffers.get((kind, scale), (None, 0))
        if buf is None or pos + n > buf.shape[0]:
            size = max(self._block, n)
            if kind == "laplace":
                buf = self._rng.laplace(0.0, scale, size=size)
            else:
                # Gumbel(scale) as -scale * ln(Exp(1)); the ziggurat
                # exponential sampler is markedly faster than rng.gumbel.
                buf = self._rng.standard_exponential(size)
                np.log(buf, out=buf)
                buf *= -scale
            pos = 0
        self._buffers[(kind, scale)] = (buf, pos + n)
        return buf[pos : pos + n]

    def labeled_laplace(self, role, labels, scale: float) -> np.ndarray:
        if scale <= 0:
            raise ParameterError(f"laplace scale must be positive, got {scale}")
        return self._take("laplace", scale, len(labels))

    def labeled_gumbel(self, role, labels, scale: float) -> np.ndarray:
        if scale <= 0:
            raise ParameterError(f"gumbel scale must be positive, got {scale}")
        return self._take("gumbel", scale, len(labels))

    def indexed_gumbel(self, role, indices: range, scale: float) -> np.ndarray:
        if scale <= 0:
            raise ParameterError(f"gumbel scale must be positive, got {scale}")
        return self._take("gumbel", scale, len(indices))

    def single_laplace(self, stream_id, scale: float) -> float:
        if scale <= 0:
            raise ParameterError(f"laplace scale must be positive, got {scale}")
        return float(self._take("laplace", scale, 1)[0])

    def single_gumbel(self, stream_id, scale: float) -> float:
        if scale <= 0:
            raise ParameterError(f"gumbel scale must be positive, got {scale}")
        return float(self._take("gumbel", scale, 1)[0])


class ZeroNoise:
    """All draws are 0.0; used by structural tests to expose the noiseless
    skeleton of a mechanism.  Never wired into the production service."""

    def labeled_laplace(self, role, labels, scale: float) -> np.ndarray:
        return np.zeros(len(labels))

    def labeled_gumbel(self, role, labels, scale: float) -> np.ndarray:
        return np.zeros(len(labels))

    def indexed_gumbel(self, role, indices: range, scale: float) -> np.ndarray:
        return np.zeros(len(indices))

    def single_laplace(self, stream_id, scale: float) -> float:
        return 0.0

    def single_gumbel(self, stream_id, scale: float) -> float:
        return 0.0
