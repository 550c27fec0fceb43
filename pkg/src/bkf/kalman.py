"""Single-step Kalman and behavioral Kalman updates for a two-signal observation.

The latent state is scalar and is observed twice per step, once through a
micro (idiosyncratic) signal and once through a macro (aggregate) signal, so
the observation matrix is fixed at ``H = [1, 1]^T``.  All 2x2 algebra is done
in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class InvalidParameterError(ValueError):
    """Raised when a filter parameter violates its domain."""


class SingularInnovationError(ArithmeticError):
    """Raised when the innovation covariance cannot be inverted."""


def _require_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise InvalidParameterError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class StateEstimate:
    """Belief about the latent state: mean (percent) and variance (percent^2)."""

    mean: float
    variance: float

    def __post_init__(self) -> None:
        _require_finite("mean", self.mean)
        _require_finite("variance", self.variance)
        if self.variance < 0:
            raise InvalidParameterError(f"variance must be >= 0, got {self.variance}")


@dataclass(frozen=True)
class SignalVector:
    mic: float
    mac: float

    def __post_init__(self) -> None:
        _require_finite("mic", self.mic)
        _require_finite("mac", self.mac)


@dataclass(frozen=True)
class NoiseSpec:
    """Perceived signal noise.  ``rho = 0`` gives the diagonal (rational) case."""

    sigma_mic: float
    sigma_mac: float
    rho: float = 0.0

    def __post_init__(self) -> None:
        for name in ("sigma_mic", "sigma_mac", "rho"):
            _require_finite(name, getattr(self, name))
        if self.sigma_mic <= 0 or self.sigma_mac <= 0:
            raise InvalidParameterError(
                f"noise scales must be > 0, got sigma_mic={self.sigma_mic}, "
                f"sigma_mac={self.sigma_mac}"
            )
        if not -1.0 < self.rho < 1.0:
            raise InvalidParameterError(f"rho must lie strictly inside (-1, 1), got {self.rho}")


@dataclass(frozen=True)
class BehavioralParams:
    alpha: float
    noise: NoiseSpec

    def __post_init__(self) -> None:
        _require_finite("alpha", self.alpha)
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidParameterError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class GainVector:
    g_mic: float
    g_mac: float

    @property
    def total(self) -> float:
        return self.g_mic + self.g_mac


Matrix2 = tuple[tuple[float, float], tuple[float, float]]


def subjective_covariance(noise: NoiseSpec) -> Matrix2:
    """Return the perceived 2x2 signal noise covariance."""
    if not isinstance(noise, NoiseSpec):
        raise InvalidParameterError("noise must be a NoiseSpec")
    off = noise.rho * noise.sigma_mic * noise.sigma_mac
    return ((noise.sigma_mic**2, off), (off, noise.sigma_mac**2))


def gain(prior_variance: float, noise: NoiseSpec) -> GainVector:
    """Gain row vector ``P H^T (H P H^T + Sigma)^-1`` for ``H = [1, 1]^T``.

    With ``noise.rho == 0`` this is the classical Kalman gain.
    """
    _require_finite("prior_variance", prior_variance)
    if prior_variance < 0:
        raise InvalidParameterError(f"prior_variance must be >= 0, got {prior_variance}")
    (s11, s12), (s21, s22) = subjective_covariance(noise)
    p = prior_variance
    a, b, c, d = p + s11, p + s12, p + s21, p + s22
    det = a * d - b * c
    if det == 0.0 or not math.isfinite(det):
        raise SingularInnovationError(f"innovation covariance is singular (det={det})")
    # [p, p] @ inv([[a, b], [c, d]]), with inv = [[d, -b], [-c, a]] / det
    return GainVector(g_mic=p * (d - c) / det, g_mac=p * (a - b) / det)


def _update(
    prior: StateEstimate, signals: SignalVector, g: GainVector, alpha: float
) -> StateEstimate:
    x = prior.mean
    mean = alpha * x + g.g_mic * (signals.mic - x) + g.g_mac * (signals.mac - x)
    variance = max(0.0, (1.0 - g.total) * prior.variance)
    return StateEstimate(mean=mean, variance=variance)


def standard_update(
    prior: StateEstimate, signals: SignalVector, noise: NoiseSpec
) -> StateEstimate:
    """Classical one-step update; requires uncorrelated signal noise."""
    if noise.rho != 0.0:
        raise InvalidParameterError(
            f"standard_update requires rho == 0, got {noise.rho}; use behavioral_update"
        )
    return _update(prior, signals, gain(prior.variance, noise), alpha=1.0)


def behavioral_update(
    prior: StateEstimate, signals: SignalVector, params: BehavioralParams
) -> StateEstimate:
    """Update with prior discounting ``alpha`` and the subjective covariance.

    The innovation is taken against the undiscounted prior mean; only the
    carried-forward prior term is scaled by ``alpha``.
    """
    return _update(prior, signals, gain(prior.variance, params.noise), params.alpha)


def discounted_mean(
    prior_mean: float, signals: SignalVector, g: GainVector, alpha: float
) -> float:
    """Updated mean for an explicitly supplied gain.  Useful for what-if checks."""
    x = prior_mean
    return alpha * x + g.g_mic * (signals.mic - x) + g.g_mac * (signals.mac - x)
