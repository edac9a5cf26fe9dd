"""Photon sources: weak coherent pulses (WCP) and single-photon pulses (SPP).

A WCP is an attenuated laser pulse with Poissonian photon number. An SPP comes
from a pulsed quantum emitter; its two-photon probability is the Poissonian
value scaled by the zero-delay correlation area ``C``. Only the mean and the
two-photon probability of an SPP are physically pinned, so the number law is
truncated at two photons::

    P(2) = C mu^2 / 2
    P(1) = mu - 2 P(2)
    P(0) = 1 - P(1) - P(2)

Three photons and up are O(mu^3) and ignored.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

NV_LIFETIME_NS = 23.0
PULSE_PERIOD_NS = 187.5


class SourceKind(str, enum.Enum):
    WCP = "wcp"
    SPP = "spp"


class InvalidSourceError(ValueError):
    pass


@dataclass(frozen=True)
class SourceModel:
    """Per-pulse photon statistics of a source.

    ``suppression_c`` is forced to 1 for WCP.
    """

    kind: SourceKind
    mu: float
    suppression_c: float = 1.0
    lifetime_ns: float = NV_LIFETIME_NS
    pulse_period_ns: float = PULSE_PERIOD_NS

    def __post_init__(self):
        object.__setattr__(self, "kind", SourceKind(self.kind))
        if self.kind is SourceKind.WCP:
            object.__setattr__(self, "suppression_c", 1.0)
        if not math.isfinite(self.mu) or self.mu < 0:
            raise InvalidSourceError(f"mu must be >= 0, got {self.mu}")
        if not 0.0 <= self.suppression_c <= 1.0:
            raise InvalidSourceError(f"suppression_c must lie in [0, 1], got {self.suppression_c}")
        if self.lifetime_ns <= 0 or self.pulse_period_ns <= 0:
            raise InvalidSourceError("lifetime_ns and pulse_period_ns must be positive")
        if self.kind is SourceKind.SPP:
            p2 = self.suppression_c * self.mu**2 / 2
            p1 = self.mu - 2 * p2
            if p1 < 0:
                raise InvalidSourceError(
                    f"P(1) = {p1:.3g} < 0 for mu={self.mu}, C={self.suppression_c}"
                )
            if 1 - p1 - p2 < -1e-15:
                raise InvalidSourceError(
                    f"P(0) < 0 for mu={self.mu}, C={self.suppression_c}"
                )

    @classmethod
    def wcp(cls, mu: float, **kw) -> "SourceModel":
        return cls(SourceKind.WCP, mu, 1.0, **kw)

    @classmethod
    def spp(cls, mu: float, c: float, **kw) -> "SourceModel":
        return cls(SourceKind.SPP, mu, c, **kw)

    def scaled(self, transmittance: float) -> "SourceModel":
        """The model seen after independent per-photon loss.

        Binomial thinning maps Poisson(mu) to Poisson(t mu), and maps the
        truncated SPP law with (mu, C) onto the same law with (t mu, C), since
        P(2) picks up exactly t^2 and the mean exactly t.
        """
        return SourceModel(self.kind, self.mu * transmittance, self.suppression_c,
                           self.lifetime_ns, self.pulse_period_ns)


@dataclass
class EmittedPulse:
    slot_index: int
    photon_count: int
    emission_offsets_ns: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.photon_count < 0:
            raise ValueError("photon_count must be non-negative")
        if len(self.emission_offsets_ns) != self.photon_count:
            raise ValueError("one emission offset per photon required")
        if any(t < 0 for t in self.emission_offsets_ns):
            raise ValueError("emission offsets must be >= 0")


def multiphoton_probability(model: SourceModel) -> float:
    """Closed-form probability of two or more photons in a pulse (mu^2/2 scaled by C)."""
    return model.suppression_c * model.mu**2 / 2


def photon_number_pmf(model: SourceModel, n_max: int | None = None) -> np.ndarray:
    """P(n) for n = 0..n_max.

    For WCP the Poisson tail beyond ``n_max`` is folded into the last entry so
    the vector always sums to one. Default ``n_max`` is 2 for SPP and large
    enough for double precision for WCP.
    """
    if model.kind is SourceKind.SPP:
        p2 = multiphoton_probability(model)
        p1 = model.mu - 2 * p2
        pmf = np.array([max(0.0, 1 - p1 - p2), p1, p2])
        if n_max is not None and n_max > 2:
            pmf = np.concatenate([pmf, np.zeros(n_max - 2)])
        elif n_max is not None and n_max < 2:
            pmf = np.concatenate([pmf[:n_max], [pmf[n_max:].sum()]])
        return pmf
    mu = model.mu
    if n_max is None:
        n_max = max(8, int(mu + 12 * math.sqrt(mu) + 12))
    pmf = np.zeros(n_max + 1)
    if mu == 0:
        pmf[0] = 1.0
        return pmf
    pmf[:] = [math.exp(k * math.log(mu) - mu - math.lgamma(k + 1)) for k in range(n_max + 1)]
    pmf[-1] += max(0.0, 1.0 - pmf.sum())
    return pmf


def sample_photon_number(model: SourceModel, rng: np.random.Generator, size: int | None = None):
    """Draw photon numbers, one per pulse. Returns an int for ``size=None``."""
    if model.kind is SourceKind.WCP:
        out = rng.poisson(model.mu, size=size)
    else:
        pmf = photon_number_pmf(model)
        u = rng.random(size)
        out = (u >= pmf[0]).astype(np.int64) + (u >= pmf[0] + pmf[1])
    if size is None:
        return int(out)
    return np.asarray(out, dtype=np.int64)


def sample_emission_times(count: int, lifetime_ns: float, rng: np.random.Generator) -> np.ndarray:
    """Independent exponential delays after the excitation instant."""
    if count < 0:
        raise ValueError("count must be >= 0")
    if lifetime_ns <= 0:
        raise InvalidSourceError("lifetime_ns must be positive")
    return rng.exponential(lifetime_ns, size=count)


def emission_offsets(model: SourceModel, count: int, rng: np.random.Generator) -> np.ndarray:
    # laser pulses (0.8 ns) are treated as instantaneous
    if model.kind is SourceKind.WCP:
        return np.zeros(count)
    return sample_emission_times(count, model.lifetime_ns, rng)


def emit_pulse(model: SourceModel, slot_index: int, rng: np.random.Generator) -> EmittedPulse:
    n = sample_photon_number(model, rng)
    return EmittedPulse(slot_index, n, emission_offsets(model, n, rng).tolist())
