"""Noise mechanism, clipping, sensitivity calculators and the privacy ledger.

The gradient perturbation draws a vector whose norm is exponentially
distributed with scale ``sensitivity / epsilon`` and whose direction is
uniform on the unit sphere.  This gives ``E[eta] = 0`` and
``E||eta||^2 = 2 (sensitivity / epsilon)^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


class PrivacyError(ValueError):
    """Invalid privacy parameters or ledger misuse."""


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float
    sensitivity: float

    def __post_init__(self):
        for name in ("epsilon", "delta", "sensitivity"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise PrivacyError(f"{name} must be finite, got {value!r}")
        if self.epsilon <= 0:
            raise PrivacyError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise PrivacyError(f"delta must lie in (0, 1), got {self.delta}")
        if self.sensitivity <= 0:
            raise PrivacyError(f"sensitivity must be positive, got {self.sensitivity}")

    @property
    def scale(self) -> float:
        return self.sensitivity / self.epsilon

    def with_sensitivity(self, sensitivity: float) -> "PrivacySpec":
        return PrivacySpec(self.epsilon, self.delta, sensitivity)


@dataclass(frozen=True)
class NoiseSample:
    vector: np.ndarray
    norm: float


def _unit_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    z = rng.standard_normal((n, dim))
    norms = np.linalg.norm(z, axis=1)
    bad = norms == 0.0
    while bad.any():  # probability ~0; resample the degenerate rows only
        z[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms[bad] = np.linalg.norm(z[bad], axis=1)
        bad = norms == 0.0
    return z / norms[:, None]


def sample_noise(spec: PrivacySpec, dim: int, rng: np.random.Generator) -> NoiseSample:
    """Draw one noise vector for a gradient of dimension ``dim``."""
    if dim < 1:
        raise PrivacyError(f"dim must be >= 1, got {dim}")
    direction = _unit_directions(rng, 1, dim)[0]
    radius = rng.exponential(spec.scale)
    vector = radius * direction
    return NoiseSample(vector, float(radius))


def sample_noise_batch(spec: PrivacySpec, dim: int, n: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` independent noise vectors as an ``(n, dim)`` array."""
    if dim < 1 or n < 1:
        raise PrivacyError("dim and n must be >= 1")
    directions = _unit_directions(rng, n, dim)
    radii = rng.exponential(spec.scale, size=n)
    return directions * radii[:, None]


def clip_gradient(g: np.ndarray, clip_bound: float) -> np.ndarray:
    """Rescale ``g`` so that its Euclidean norm is at most ``clip_bound``."""
    if not clip_bound > 0 or not math.isfinite(clip_bound):
        raise PrivacyError(f"clip_bound must be positive and finite, got {clip_bound}")
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise PrivacyError("gradient contains non-finite entries")
    norm = float(np.linalg.norm(g))
    return g / max(1.0, norm / clip_bound)


def sensitivity_from_bound(G: float, b: int) -> float:
    """Sensitivity of a size-``b`` mini-batch mean when every per-sample
    gradient has norm at most ``G``."""
    if not G > 0:
        raise PrivacyError(f"G must be positive, got {G}")
    if b < 1:
        raise PrivacyError(f"batch size must be >= 1, got {b}")
    return 2.0 * G / b


def initial_sensitivity(sigma: float, b: int, delta: float) -> float:
    """Smallest sensitivity with ``(1 - 4 sigma^2 / (b^2 S^2))^2 >= 1 - delta``."""
    if not 0 < delta < 1:
        raise PrivacyError(f"delta must lie in (0, 1), got {delta}")
    if not sigma > 0 or not math.isfinite(sigma):
        raise PrivacyError(f"sigma must be positive, got {sigma}")
    if b < 1:
        raise PrivacyError(f"batch size must be >= 1, got {b}")
    # 1 - sqrt(1 - delta) loses precision for tiny delta; -expm1(log1p(-delta)/2) does not
    gap = -math.expm1(0.5 * math.log1p(-delta))
    return 2.0 * sigma / (b * math.sqrt(gap))


def density_ratio_bound(g1, g2, nu, spec: PrivacySpec) -> float:
    """Ratio of the noise densities at output ``nu`` given true gradients
    ``g1`` and ``g2``.  Bounded by ``exp(epsilon)`` whenever
    ``||g1 - g2|| <= sensitivity``."""
    g1, g2, nu = (np.asarray(v, dtype=float) for v in (g1, g2, nu))
    if not (g1.shape == g2.shape == nu.shape):
        raise PrivacyError("vectors must share one shape")
    d1 = float(np.linalg.norm(nu - g1))
    d2 = float(np.linalg.norm(nu - g2))
    # |d2 - d1| <= ||g1 - g2|| holds exactly; rounding can break it when nu,
    # g1 and g2 are collinear
    gap = float(np.linalg.norm(g1 - g2))
    diff = min(max(d2 - d1, -gap), gap)
    return math.exp(spec.epsilon * diff / spec.sensitivity)


@dataclass
class BudgetLedger:
    """Linear composition of per-iteration privacy budgets.

    The running total is kept as an exact rational sum of the float entries,
    so ``total`` is the correctly rounded sum regardless of length.
    """

    per_iteration: list = field(default_factory=list)
    _exact: Fraction = field(default=Fraction(0), repr=False)

    @property
    def total(self) -> float:
        return float(self._exact)

    @property
    def last_index(self):
        return self.per_iteration[-1][0] if self.per_iteration else None

    def copy(self) -> "BudgetLedger":
        return BudgetLedger(list(self.per_iteration), self._exact)


def compose_budget(ledger: BudgetLedger, epsilon: float, t: int) -> BudgetLedger:
    """Append ``epsilon`` spent at iteration ``t`` (mutates and returns ``ledger``)."""
    if not epsilon > 0 or not math.isfinite(epsilon):
        raise PrivacyError(f"epsilon must be positive and finite, got {epsilon}")
    last = ledger.last_index
    if last is not None and t <= last:
        raise PrivacyError(f"iteration {t} not after last recorded iteration {last}")
    ledger.per_iteration.append((t, float(epsilon)))
    ledger._exact += Fraction(float(epsilon))
    return ledger
