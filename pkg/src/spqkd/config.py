"""Run configuration: flat ``section.key = value`` text.

Every key has a default equal to the reference experiment, so an empty file
is a complete configuration. ``#`` starts a comment. Unknown keys, repeated
keys and values of the wrong type are errors that name the line.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields

from . import experiment as ref


class ConfigError(ValueError):
    def __init__(self, message: str, lineno: int | None = None, key: str | None = None):
        where = f"line {lineno}: " if lineno is not None else ""
        what = f"{key}: " if key else ""
        super().__init__(f"{where}{what}{message}")
        self.lineno = lineno
        self.key = key


def _choice(*options: str):
    return {"choices": options}


@dataclass
class RunSection:
    seed: int = 1
    transport: str = field(default="loopback", metadata=_choice("loopback", "socket"))


@dataclass
class SourceSection:
    kind: str = field(default="spp", metadata=_choice("spp", "wcp"))
    mu: float = ref.MU  # at the sender's output
    suppression_c: float = ref.SUPPRESSION_C
    lifetime_ns: float = ref.LIFETIME_NS
    pulse_period_ns: float = ref.PULSE_PERIOD_NS
    pulse_rate_hz: float = ref.PULSE_RATE_HZ


@dataclass
class AliceSection:
    t_eom: float = ref.T_EOM
    # QBER the EOM flip knob is tuned to reproduce; 0 turns the knob off
    target_qber: float = 0.0
    bit_generator: str = field(default="lfsr", metadata=_choice("lfsr", "numpy"))


@dataclass
class ChannelSection:
    loss_db: float = 0.0


@dataclass
class BobSection:
    apd_efficiency: float = ref.APD_EFFICIENCY
    receiver_transmission: float = ref.RECEIVER_TRANSMISSION
    dark_h_hz: float = ref.DARK_RATES_HZ["H"]
    dark_v_hz: float = ref.DARK_RATES_HZ["V"]
    dark_l_hz: float = ref.DARK_RATES_HZ["L"]
    dark_r_hz: float = ref.DARK_RATES_HZ["R"]
    gate_width_ns: float = ref.GATE_SPP_NS
    wcp_gate_width_ns: float = ref.GATE_WCP_NS  # used instead of gate_width_ns when source.kind = wcp
    pol_error_hv: float = ref.POL_ERROR_HV
    pol_error_lr: float = ref.POL_ERROR_LR
    double_click_policy: str = field(default="discard", metadata=_choice("discard", "random_assign"))


@dataclass
class ProtocolSection:
    slots: int = ref.SLOTS_PER_ACQUISITION
    repetitions: int = 1
    qber_mode: str = field(default="sampled", metadata=_choice("sampled", "reconciled", "full"))
    sample_fraction: float = 0.1
    qber_prior: float = ref.MEASURED_QBER


@dataclass
class DistillSection:
    pa_mode: str = field(default="formula", metadata=_choice("formula", "ledger_exact"))
    f_e: float = ref.F_SHANNON


@dataclass
class SecuritySection:
    s_m_convention: str = field(default="formula", metadata=_choice("formula", "direct"))
    s_m_direct: float = ref.S_M_QUOTED
    g_threshold: float = 1e-6


@dataclass
class SweepSection:
    x: str = field(default="loss_db", metadata=_choice("loss_db", "mu"))
    start: float = 0.0
    stop: float = 20.0
    steps: int = 101


@dataclass
class MaxLossSection:
    mu_start: float = 1e-3
    mu_stop: float = 0.2
    steps: int = 60


@dataclass
class HbtSection:
    rate_hz: float = ref.HBT_RATE_PER_DETECTOR
    duration_s: float = ref.HBT_DURATION_S
    bin_width_ns: float = 1.0
    range_ns: float = 2.5 * ref.PULSE_PERIOD_NS
    background_hz: float = 0.0
    fit: bool = True
    timestamps: str = ""  # read this file instead of simulating


@dataclass
class EvalGSection:
    p_exp: float = ref.P_EXP
    s_m: float = ref.S_M_QUOTED
    e: float = ref.MEASURED_QBER
    f_e: float = ref.F_SHANNON


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    source: SourceSection = field(default_factory=SourceSection)
    alice: AliceSection = field(default_factory=AliceSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    bob: BobSection = field(default_factory=BobSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    distill: DistillSection = field(default_factory=DistillSection)
    security: SecuritySection = field(default_factory=SecuritySection)
    sweep: SweepSection = field(default_factory=SweepSection)
    maxloss: MaxLossSection = field(default_factory=MaxLossSection)
    hbt: HbtSection = field(default_factory=HbtSection)
    evalg: EvalGSection = field(default_factory=EvalGSection)

    def keys(self) -> list[str]:
        return [f"{s.name}.{f.name}" for s in fields(self) for f in fields(getattr(self, s.name))]

    def get(self, key: str):
        section, name = _split(key)
        return getattr(getattr(self, section), name)

    def set(self, key: str, text: str, lineno: int | None = None) -> None:
        section, name = _split(key, lineno)
        sec = getattr(self, section)
        f = next(f for f in fields(sec) if f.name == name)
        setattr(sec, name, _convert(f, text.strip(), key, lineno))

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]


def _split(key: str, lineno: int | None = None) -> tuple[str, str]:
    section, dot, name = key.strip().partition(".")
    if not dot or not section or not name:
        raise ConfigError("keys have the form section.name", lineno, key)
    sections = {f.name: f for f in fields(RunConfig)}
    if section not in sections:
        raise ConfigError("unknown section", lineno, key)
    if name not in {f.name for f in fields(sections[section].default_factory)}:
        raise ConfigError("unknown key", lineno, key)
    return section, name


def _convert(f: dataclasses.Field, text: str, key: str, lineno: int | None):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            value = low in ("true", "1", "yes")
        elif kind == "int":
            value = int(text, 0)
        elif kind == "float":
            value = float(text)
            if math.isnan(value):
                raise ValueError
        else:
            value = text
    except ValueError:
        raise ConfigError(f"expected {kind}, got {text!r}", lineno, key) from None
    choices = f.metadata.get("choices")
    if choices and value not in choices:
        raise ConfigError(f"expected one of {', '.join(choices)}, got {text!r}", lineno, key)
    return value


def load_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = _deep_copy(base) if base is not None else RunConfig()
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigError("expected 'section.key = value'", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[key]})", lineno, key)
        seen[key] = lineno
        cfg.set(key, value, lineno)
    return cfg


def _deep_copy(cfg: RunConfig) -> RunConfig:
    return RunConfig(**{s.name: dataclasses.replace(getattr(cfg, s.name)) for s in fields(cfg)})


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` strings from the command line."""
    cfg = _deep_copy(cfg)
    for item in overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"override {item!r} is not key=value")
        cfg.set(key, value)
    return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for s in fields(cfg):
        sec = getattr(cfg, s.name)
        for f in fields(sec):
            lines.append(f"{s.name}.{f.name} = {_format(getattr(sec, f.name))}")
    return "\n".join(lines) + "\n"
