"""Secure gain per pulse against individual attacks, and loss/mean-photon curves.

With click probability ``p`` per pulse, multiphoton probability ``s`` at the
sender's output, bit error rate ``e`` and reconciliation inefficiency ``f``,
the number of secret bits per pulse is::

    G = p/2 * { (p - s)/p * (1 - log2[1 + 4e' - 4e'^2]) - f * h(e) },
    e' = e p / (p - s),

with ``h`` the binary entropy. Multiphoton pulses are assumed fully known to
the eavesdropper, so only the ``p - s`` single-photon clicks feed the
privacy-amplification term, at their correspondingly inflated error rate e'.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace
from typing import IO

import numpy as np

from . import experiment as ref
from .optics import gate_fractions
from .source import SourceKind, SourceModel, multiphoton_probability


def binary_entropy(x: float) -> float:
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


class InsecureRegime(ValueError):
    pass


@dataclass(frozen=True)
class OperatingPoint:
    p_exp: float
    s_m: float
    e: float
    f_e: float = ref.F_SHANNON
    pulse_rate_hz: float = ref.PULSE_RATE_HZ

    def __post_init__(self):
        if not 0 < self.p_exp <= 1:
            raise ValueError(f"p_exp must lie in (0, 1], got {self.p_exp}")
        if not 0 <= self.s_m <= 1:
            raise ValueError(f"s_m must lie in [0, 1], got {self.s_m}")
        if not 0 <= self.e <= 0.5:
            raise ValueError(f"e must lie in [0, 0.5], got {self.e}")
        if self.f_e < 1:
            raise ValueError("f_e below the Shannon limit (1) is impossible")


@dataclass(frozen=True)
class GainResult:
    g: float  # clamped at zero
    raw: float  # unclamped; -inf when no single-photon clicks remain
    insecure: bool


def evaluate_gain(op: OperatingPoint) -> GainResult:
    p, s, e = op.p_exp, op.s_m, op.e
    if s >= p:
        return GainResult(0.0, -math.inf, True)
    single = (p - s) / p
    e1 = e / single
    if e1 >= 0.5:
        # eavesdropper holds everything on the single-photon part
        amplified = 0.0
    else:
        amplified = single * (1 - math.log2(1 + 4 * e1 - 4 * e1 * e1))
    corrected = op.f_e * (e * math.log2(e) + (1 - e) * math.log2(1 - e)) if 0 < e < 1 else 0.0
    raw = 0.5 * p * (amplified + corrected)
    return GainResult(max(raw, 0.0), raw, raw <= 0.0)


def secure_gain(op: OperatingPoint) -> float:
    """Secret bits per pulse, clamped at zero."""
    return evaluate_gain(op).g


def secure_rate(op: OperatingPoint) -> float:
    return secure_gain(op) * op.pulse_rate_hz


def secret_fraction(op: OperatingPoint) -> float:
    """Secret bits per sifted bit, 2G/p_exp."""
    return 2 * secure_gain(op) / op.p_exp


def amplification_fraction(op: OperatingPoint) -> float:
    """The privacy-amplification share alone, i.e. the secret fraction before paying for error correction."""
    if op.s_m >= op.p_exp:
        return 0.0
    single = (op.p_exp - op.s_m) / op.p_exp
    e1 = op.e / single
    if e1 >= 0.5:
        return 0.0
    return single * (1 - math.log2(1 + 4 * e1 - 4 * e1 * e1))


def reconciliation_efficiency(e: float, best_known: bool = False, allow_extrapolation: bool = False) -> float:
    """f[e]: 1 at the Shannon limit, or 1.16 for the best known algorithm (valid for e <= 5 %)."""
    if not best_known:
        return ref.F_SHANNON
    if e > ref.F_BEST_KNOWN_MAX_QBER and not allow_extrapolation:
        raise ValueError(f"f = {ref.F_BEST_KNOWN} only holds for e <= {ref.F_BEST_KNOWN_MAX_QBER}")
    return ref.F_BEST_KNOWN


# -- link model ---------------------------------------------------------------

class SmConvention(str, enum.Enum):
    FORMULA = "formula"  # C mu^2 / 2 at the sender's output
    DIRECT = "direct"  # caller-supplied value, used verbatim


@dataclass(frozen=True)
class LinkModel:
    """Analytic link used for rate curves.

    ``dark_click_probability`` is summed over the four detectors for one gate.
    For WCP the gate is short and ``eta_g`` is 1 (no emission tail).
    """

    kind: SourceKind
    mu: float
    suppression_c: float
    detection_efficiency: float
    dark_click_probability: float
    misalignment: float
    eta_g: float = 1.0
    beta_g: float = 1.0
    loss_db: float = 0.0
    f_e: float = ref.F_SHANNON
    s_m_convention: SmConvention = SmConvention.FORMULA
    s_m_direct: float | None = None
    pulse_rate_hz: float = ref.PULSE_RATE_HZ

    def __post_init__(self):
        object.__setattr__(self, "kind", SourceKind(self.kind))
        object.__setattr__(self, "s_m_convention", SmConvention(self.s_m_convention))
        if self.kind is SourceKind.WCP:
            object.__setattr__(self, "suppression_c", 1.0)
        for name in ("detection_efficiency", "dark_click_probability", "misalignment", "eta_g", "beta_g"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.loss_db < 0:
            raise ValueError("loss_db must be >= 0")
        if self.s_m_convention is SmConvention.DIRECT and self.s_m_direct is None:
            raise ValueError("direct S_m convention needs s_m_direct")
        # validates (mu, C)
        self.source

    @property
    def source(self) -> SourceModel:
        return SourceModel(self.kind, self.mu, self.suppression_c)

    @property
    def transmittance(self) -> float:
        return 10 ** (-self.loss_db / 10)

    def with_(self, **changes) -> "LinkModel":
        return replace(self, **changes)

    @classmethod
    def reference(cls, kind: SourceKind | str, mu: float = ref.MU, c: float = ref.SUPPRESSION_C,
                  loss_db: float = 0.0, **overrides) -> "LinkModel":
        """Receiver of the reference experiment; 50 ns gate for SPP, 2 ns and eta_g = 1 for WCP."""
        kind = SourceKind(kind)
        darks = sum(ref.DARK_RATES_HZ.values())
        if kind is SourceKind.SPP:
            gate = ref.GATE_SPP_NS
            eta_g, beta_g = gate_fractions(gate, ref.LIFETIME_NS, ref.PULSE_PERIOD_NS)
        else:
            gate = ref.GATE_WCP_NS
            eta_g, beta_g = 1.0, gate / ref.PULSE_PERIOD_NS
        params = dict(
            kind=kind,
            mu=mu,
            suppression_c=c if kind is SourceKind.SPP else 1.0,
            detection_efficiency=ref.APD_EFFICIENCY * ref.RECEIVER_TRANSMISSION,
            dark_click_probability=darks * gate * 1e-9,
            misalignment=(ref.POL_ERROR_HV + ref.POL_ERROR_LR) / 2,
            eta_g=eta_g,
            beta_g=beta_g,
            loss_db=loss_db,
        )
        params.update(overrides)
        return cls(**params)


def operating_point_from_link(link: LinkModel) -> OperatingPoint:
    p_signal = link.mu * link.transmittance * link.detection_efficiency * link.eta_g
    p_dark = link.dark_click_probability
    # 1 - (1 - a)(1 - b) without the cancellation at tiny a, b
    p_exp = p_signal + p_dark - p_signal * p_dark
    if p_exp <= 0:
        raise InsecureRegime("no clicks at all: p_exp = 0")
    # <= 1/2 analytically; clamp rounding
    e = min(0.5, (link.misalignment * p_signal + 0.5 * p_dark) / p_exp)
    if link.s_m_convention is SmConvention.DIRECT:
        s_m = link.s_m_direct
    else:
        s_m = multiphoton_probability(link.source)
    return OperatingPoint(p_exp, s_m, e, link.f_e, link.pulse_rate_hz)


def link_gain(link: LinkModel) -> float:
    return secure_gain(operating_point_from_link(link))


# -- curves -------------------------------------------------------------------

class Abscissa(str, enum.Enum):
    LOSS_DB = "loss_db"
    MU = "mu"


@dataclass
class RateCurve:
    abscissa: Abscissa
    samples: list[tuple[float, float]]
    metadata: dict = field(default_factory=dict)
    ordinate: str = "G"

    @property
    def x(self) -> np.ndarray:
        return np.array([s[0] for s in self.samples])

    @property
    def y(self) -> np.ndarray:
        return np.array([s[1] for s in self.samples])

    def write_csv(self, fh: IO[str], comments: dict | None = None) -> None:
        """Comment lines (``# key: value``), a header row, then x,y at 12 significant digits."""
        for key, value in {**self.metadata, **(comments or {})}.items():
            fh.write(f"# {key}: {value}\n")
        fh.write(f"{Abscissa(self.abscissa).value},{self.ordinate}\n")
        for x, y in self.samples:
            fh.write(f"{x:.12g},{y:.12g}\n")


def _link_metadata(link: LinkModel) -> dict:
    meta = {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in asdict(link).items()}
    return meta


def sweep_curve(link: LinkModel, abscissa: Abscissa | str, start: float, stop: float, steps: int) -> RateCurve:
    """G sampled on an even grid of loss (dB) or mean photon number."""
    abscissa = Abscissa(abscissa)
    if steps < 2:
        raise ValueError("steps must be >= 2")
    xs = np.linspace(start, stop, steps)
    field_name = "loss_db" if abscissa is Abscissa.LOSS_DB else "mu"
    samples = [(float(x), link_gain(link.with_(**{field_name: float(x)}))) for x in xs]
    samples.sort(key=lambda s: s[0])
    meta = _link_metadata(link)
    meta.pop(field_name)
    return RateCurve(abscissa, samples, meta)


def max_tolerable_loss(link: LinkModel, g_threshold: float = 1e-6, max_loss_db: float = 200.0,
                       rel_tol: float = 1e-6, max_iter: int = 80, grid: int = 256) -> float:
    """Loss (dB) at which G falls to ``g_threshold``, by bisection past the peak of G(loss)."""
    g0 = link_gain(link.with_(loss_db=0.0))
    if g0 <= g_threshold:
        raise InsecureRegime(f"G(0 dB) = {g0:.3g} is already at or below the threshold {g_threshold:.3g}")
    losses = np.linspace(0.0, max_loss_db, grid)
    gains = np.array([link_gain(link.with_(loss_db=float(x))) for x in losses])
    peak = int(np.argmax(gains))
    below = np.flatnonzero(gains[peak:] < g_threshold)
    if below.size == 0:
        raise InsecureRegime(f"G stays above threshold up to {max_loss_db} dB")
    hi_i = peak + int(below[0])
    tail = gains[peak:hi_i + 1]
    if np.any(np.diff(tail) > 1e-12 * max(tail[0], 1e-300)):
        raise ArithmeticError("G(loss) is not monotone past its peak; bisection bracket is unsafe")
    lo, hi = float(losses[hi_i - 1]), float(losses[hi_i])
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        g = link_gain(link.with_(loss_db=mid))
        if abs(g - g_threshold) < rel_tol * g_threshold:
            break
        if g > g_threshold:
            lo = mid
        else:
            hi = mid
    return mid


def max_loss_curve(link: LinkModel, mus: np.ndarray, g_threshold: float = 1e-6) -> RateCurve:
    """Maximum tolerable loss against mean photon number; insecure points are recorded as 0 dB."""
    samples = []
    for mu in np.sort(np.asarray(mus, dtype=float)):
        try:
            loss = max_tolerable_loss(link.with_(mu=float(mu)), g_threshold)
        except InsecureRegime:
            loss = 0.0
        samples.append((float(mu), loss))
    meta = _link_metadata(link)
    meta.pop("mu")
    meta["g_threshold"] = g_threshold
    return RateCurve(Abscissa.MU, samples, meta, ordinate="max_loss_db")
