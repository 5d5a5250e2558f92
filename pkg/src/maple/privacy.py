"""zCDP accounting: Gaussian costs, composition, budget splits, (eps, delta) conversion.

Every mechanism in the package charges a :class:`SpendLedger` in units of rho
(zero-concentrated DP). Gaussian mechanisms compose additively in rho, and a
final rho converts to an (epsilon, delta) guarantee with

    epsilon = rho + 2 * sqrt(rho * ln(1 / delta)).

``epsilon = inf`` is the non-private setting; it maps to ``rho = inf`` and
``sigma = 0`` everywhere.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import BudgetExceededError, InvalidArgumentError

INF = math.inf


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon >= 0):
            raise InvalidArgumentError(f"epsilon must be >= 0, got {self.epsilon}")
        if not (0 <= self.delta < 1):
            raise InvalidArgumentError(f"delta must lie in [0, 1), got {self.delta}")

    @property
    def is_private(self) -> bool:
        return math.isfinite(self.epsilon)

    def to_rho(self) -> float:
        return calibrate_rho(self.epsilon, self.delta)


@dataclass(frozen=True)
class RhoBudget:
    rho: float

    def __post_init__(self):
        if not (self.rho >= 0):
            raise InvalidArgumentError(f"rho must be >= 0, got {self.rho}")


def rho_of_gaussian(sensitivity: float, sigma: float) -> float:
    """zCDP cost of adding N(0, sigma^2) noise to a query of L2 sensitivity ``sensitivity``."""
    if not sensitivity > 0:
        raise InvalidArgumentError(f"sensitivity must be positive, got {sensitivity}")
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    return sensitivity**2 / (2.0 * sigma**2)


def sigma_for_rho(sensitivity: float, rho: float) -> float:
    """Noise scale at which a Gaussian mechanism costs exactly ``rho``; 0 when rho is infinite."""
    if not sensitivity > 0:
        raise InvalidArgumentError(f"sensitivity must be positive, got {sensitivity}")
    if not rho > 0:
        raise InvalidArgumentError(f"rho must be positive, got {rho}")
    if math.isinf(rho):
        return 0.0
    return sensitivity / math.sqrt(2.0 * rho)


def gaussian_cost(sensitivity: float, sigma: float) -> float:
    """Like :func:`rho_of_gaussian` but maps the noiseless case sigma=0 to infinite cost."""
    if sigma == 0:
        return INF
    return rho_of_gaussian(sensitivity, sigma)


def compose(rhos: Iterable[float] | "SpendLedger") -> float:
    """Sequential composition: the sum of the per-mechanism rhos.

    ``math.fsum`` is exactly rounded, so the result does not depend on entry order.
    """
    if isinstance(rhos, SpendLedger):
        rhos = [rho for _, rho in rhos.entries]
    values = list(rhos)
    if any(math.isinf(v) for v in values):
        return INF
    return math.fsum(values)


def fits_within(rhos: Iterable[float], budget: float) -> bool:
    """Whether the exact (unrounded) sum of ``rhos`` is at most ``budget``.

    Parts that each fit their own share can still round past the whole when their
    floating-point sums are combined, so planners check exactly.
    """
    values = list(rhos)
    if math.isinf(budget):
        return True
    if any(math.isinf(v) for v in values):
        return False
    return sum(map(Fraction, values), Fraction(0)) <= Fraction(budget)


def zcdp_to_approx_dp(rho: float, delta: float) -> float:
    if not (0 < delta < 1):
        raise InvalidArgumentError(f"delta must lie in (0, 1), got {delta}")
    if not rho >= 0:
        raise InvalidArgumentError(f"rho must be >= 0, got {rho}")
    if rho == 0:
        return 0.0
    if math.isinf(rho):
        return INF
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def calibrate_rho(epsilon: float, delta: float) -> float:
    """Largest rho whose (epsilon, delta) conversion does not exceed ``epsilon``.

    With t = sqrt(rho) and a = ln(1/delta) the conversion reads t^2 + 2 t sqrt(a) = epsilon,
    so t = sqrt(a + epsilon) - sqrt(a). The difference is rewritten to avoid cancellation
    and then polished with a couple of Newton steps.
    """
    if not (0 < delta < 1):
        raise InvalidArgumentError(f"delta must lie in (0, 1), got {delta}")
    if not epsilon > 0:
        raise InvalidArgumentError(f"epsilon must be positive, got {epsilon}")
    if math.isinf(epsilon):
        return INF
    a = math.log(1.0 / delta)
    sa = math.sqrt(a)
    t = epsilon / (math.sqrt(a + epsilon) + sa)
    for _ in range(2):
        f = t * t + 2.0 * t * sa - epsilon
        t -= f / (2.0 * t + 2.0 * sa)
    return t * t


def split_budget(rho_total: float, ratio_meta_to_pe: Sequence[float] = (1.0, 9.0)) -> tuple[float, float]:
    """Split ``rho_total`` between the metadata synthesizer and the PE loop.

    The exact sum of the two parts never exceeds ``rho_total`` and falls short by at most an ulp.
    """
    a, b = ratio_meta_to_pe
    if not (a > 0 and b > 0):
        raise InvalidArgumentError(f"ratio parts must be positive, got {ratio_meta_to_pe}")
    if not rho_total >= 0:
        raise InvalidArgumentError(f"rho_total must be >= 0, got {rho_total}")
    if math.isinf(rho_total):
        return INF, INF
    rho_meta = rho_total * (a / (a + b))
    rho_pe = rho_total - rho_meta
    # rounding of the subtraction can leave the sum one ulp off
    while rho_pe > 0 and not fits_within([rho_meta, rho_pe], rho_total):
        rho_pe = math.nextafter(rho_pe, 0.0)
    while fits_within([rho_meta, math.nextafter(rho_pe, INF)], rho_total):
        rho_pe = math.nextafter(rho_pe, INF)
    return rho_meta, rho_pe


def even_splits(rho_total: float, parts: int) -> list[float]:
    """``parts`` near-equal shares whose composed total never exceeds ``rho_total``."""
    if parts < 1:
        raise InvalidArgumentError(f"parts must be >= 1, got {parts}")
    if math.isinf(rho_total):
        return [INF] * parts
    shares = [rho_total / parts] * parts
    while not fits_within(shares, rho_total):
        shares[-1] = math.nextafter(shares[-1], 0.0)
    return shares


class SpendLedger:
    """Append-only log of (label, rho) charges.

    A ledger may carry a ``granted`` cap; a charge that would push the composed total
    past it raises :class:`BudgetExceededError` and is not recorded. One writer may append
    while other threads read.
    """

    def __init__(self, granted: float | None = None, entries: Iterable[tuple[str, float]] = ()):
        self.granted = granted
        self._entries: list[tuple[str, float]] = []
        self._lock = threading.Lock()
        for label, rho in entries:
            self.charge(label, rho)

    @property
    def entries(self) -> list[tuple[str, float]]:
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def total(self) -> float:
        return compose(rho for _, rho in self.entries)

    @property
    def remaining(self) -> float:
        if self.granted is None:
            return INF
        if math.isinf(self.granted):
            return INF
        return max(0.0, self.granted - self.total)

    def can_afford(self, rho: float) -> bool:
        if self.granted is None or math.isinf(self.granted):
            return True
        if math.isinf(rho):
            return False
        return compose([r for _, r in self.entries] + [rho]) <= self.granted

    def charge(self, label: str, rho: float) -> None:
        if not rho >= 0:
            raise InvalidArgumentError(f"rho must be >= 0, got {rho}")
        with self._lock:
            if self.granted is not None and not math.isinf(self.granted):
                new_total = compose([r for _, r in self._entries] + [rho])
                if new_total > self.granted:
                    raise BudgetExceededError(
                        f"charging {rho!r} for {label!r} would spend {new_total!r} > granted {self.granted!r}"
                    )
            self._entries.append((label, float(rho)))

    def labels(self, prefix: str = "") -> list[str]:
        return [label for label, _ in self.entries if label.startswith(prefix)]

    def spent(self, prefix: str) -> float:
        return compose(rho for label, rho in self.entries if label.startswith(prefix))

    def to_dict(self) -> dict:
        return {
            "granted": _encode_rho(self.granted),
            "entries": [{"label": label, "rho": _encode_rho(rho)} for label, rho in self.entries],
            "total": _encode_rho(self.total),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SpendLedger":
        granted = data.get("granted")
        ledger = cls(None if granted is None else _decode_rho(granted))
        for entry in data.get("entries", []):
            ledger.charge(entry["label"], _decode_rho(entry["rho"]))
        return ledger

    def __repr__(self) -> str:
        return f"SpendLedger(total={self.total!r}, granted={self.granted!r}, entries={len(self)})"


def _encode_rho(value: float | None):
    if value is None:
        return None
    return "inf" if math.isinf(value) else value


def _decode_rho(value) -> float:
    return INF if value == "inf" else float(value)
