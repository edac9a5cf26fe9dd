"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config
from .hbt import build_histogram, read_timestamps
from .runner import analyse_hbt, build_link_model, evalg_point, run_sessions, simulate_hbt
from .security import Abscissa, evaluate_gain, max_loss_curve, secure_rate, sweep_curve

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="config file (section.key = value lines)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--seed", type=int, help="top-level seed (run.seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spqkd", description="BB84 link simulation with single-photon and coherent sources")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("session", help="simulate link and run Alice/Bob over a byte stream")
    _common(p)
    p.add_argument("--duration-ms", type=float, help="acquisition length; sets protocol.slots")
    p.add_argument("--slots", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--qber-mode", choices=["sampled", "reconciled", "full"])
    p.add_argument("--transport", choices=["loopback", "socket"])
    p.add_argument("--loss-db", type=float)

    p = sub.add_parser("sweep", help="secure gain against loss or mean photon number")
    _common(p)
    p.add_argument("--x", choices=["loss", "loss_db", "mu"])
    p.add_argument("--source", choices=["spp", "wcp"])
    p.add_argument("--mu", type=float)
    p.add_argument("--c", type=float, dest="suppression_c")
    p.add_argument("--loss-db", type=float)
    p.add_argument("--start", type=float)
    p.add_argument("--stop", type=float)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("maxloss", help="maximum tolerable loss against mean photon number")
    _common(p)
    p.add_argument("--source", choices=["spp", "wcp"])
    p.add_argument("--c", type=float, dest="suppression_c")
    p.add_argument("--mu-start", type=float)
    p.add_argument("--mu-stop", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--g-threshold", type=float)

    p = sub.add_parser("hbt", help="coincidence histogram, peak areas and fits")
    _common(p)
    p.add_argument("--source", choices=["spp", "wcp"])
    p.add_argument("--duration-s", type=float)
    p.add_argument("--rate", type=float, help="count rate per detector (1/s)")
    p.add_argument("--timestamps", type=Path, help="analyse this timestamp file instead of simulating")

    p = sub.add_parser("evalg", help="secure gain and rate for one operating point")
    _common(p)
    p.add_argument("--p-exp", type=float)
    p.add_argument("--s-m", type=float)
    p.add_argument("--e", type=float)
    p.add_argument("--f", type=float, dest="f_e")
    return parser


_FLAG_KEYS = {
    "session": {"slots": "protocol.slots", "repetitions": "protocol.repetitions",
                "qber_mode": "protocol.qber_mode", "transport": "run.transport", "loss_db": "channel.loss_db"},
    "sweep": {"x": "sweep.x", "source": "source.kind", "mu": "source.mu", "suppression_c": "source.suppression_c",
              "loss_db": "channel.loss_db", "start": "sweep.start", "stop": "sweep.stop", "steps": "sweep.steps"},
    "maxloss": {"source": "source.kind", "suppression_c": "source.suppression_c", "mu_start": "maxloss.mu_start",
                "mu_stop": "maxloss.mu_stop", "steps": "maxloss.steps", "g_threshold": "security.g_threshold"},
    "hbt": {"source": "source.kind", "duration_s": "hbt.duration_s", "rate": "hbt.rate_hz",
            "timestamps": "hbt.timestamps"},
    "evalg": {"p_exp": "evalg.p_exp", "s_m": "evalg.s_m", "e": "evalg.e", "f_e": "evalg.f_e"},
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc.strerror}") from None
        try:
            cfg = load_config(text)
        except ConfigError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    flags = []
    for attr, key in _FLAG_KEYS[args.command].items():
        value = getattr(args, attr, None)
        if value is not None:
            if attr == "x" and value == "loss":
                value = "loss_db"
            flags.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    if args.seed is not None:
        flags.append(f"run.seed={args.seed}")
    if getattr(args, "duration_ms", None) is not None:
        flags.append(f"protocol.slots={round(args.duration_ms * 1e-3 * cfg.source.pulse_rate_hz)}")
    # explicit --set wins over convenience flags
    return apply_overrides(cfg, flags + args.set)


def _provenance(cfg: RunConfig) -> dict:
    return {"seed": cfg.run.seed, "config_digest": cfg.digest()}


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_session(cfg: RunConfig, out: Path) -> None:
    batch = run_sessions(cfg)
    report = {**_provenance(cfg), "aggregate": batch.aggregate(), "sessions": batch.summaries}
    _write(out / "session_summary.json", json.dumps(report, indent=2) + "\n")
    (out / "session_transcript.bin").write_bytes(batch.first.transcript.to_bytes())
    if len(batch.summaries) == 1:
        print(batch.first.summary_text(), end="")
    else:
        print(json.dumps(batch.aggregate(), indent=2))


def cmd_sweep(cfg: RunConfig, out: Path) -> None:
    link = build_link_model(cfg)
    curve = sweep_curve(link, Abscissa(cfg.sweep.x), cfg.sweep.start, cfg.sweep.stop, cfg.sweep.steps)
    path = out / f"sweep_{cfg.source.kind}_{cfg.sweep.x}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        curve.write_csv(fh, _provenance(cfg))
    print(path)


def cmd_maxloss(cfg: RunConfig, out: Path) -> None:
    link = build_link_model(cfg)
    m = cfg.maxloss
    mus = np.linspace(m.mu_start, m.mu_stop, m.steps)
    curve = max_loss_curve(link, mus, cfg.security.g_threshold)
    path = out / f"maxloss_{cfg.source.kind}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        curve.write_csv(fh, _provenance(cfg))
    print(path)


def cmd_hbt(cfg: RunConfig, out: Path) -> None:
    if cfg.hbt.timestamps:
        with open(cfg.hbt.timestamps) as fh:
            streams = read_timestamps(fh)
        hist = build_histogram(streams[1], streams[2], cfg.hbt.bin_width_ns, cfg.hbt.range_ns,
                               cfg.source.pulse_period_ns)
        run = analyse_hbt(hist, fit=cfg.hbt.fit)
    else:
        run = simulate_hbt(cfg)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "hbt_histogram.csv").open("w") as fh:
        run.histogram.write_csv(fh, _provenance(cfg))
    lines = [f"# {k}: {v}" for k, v in _provenance(cfg).items()]
    if run.fit is not None:
        lines.append(f"# background_per_ns: {run.fit.background:.6g}")
        lines.append(f"# residual_rms: {run.fit.residual_rms:.6g}")
        lines.append(f"# converged: {run.fit.converged}")
    lines.append("peak,center_ns,area,amplitude,lifetime_ns,flagged")
    for r in run.areas:
        lines.append(f"{r.index},{r.center_ns:.6g},{r.area:.6g},{r.amplitude:.6g},{r.lifetime_ns:.6g},{r.flagged}")
    _write(out / "hbt_peaks.csv", "\n".join(lines) + "\n")
    for r in run.areas:
        print(f"peak {r.index:+d}: area {r.area:.3f}" + ("" if r.lifetime_ns != r.lifetime_ns
                                                         else f"  lifetime {r.lifetime_ns:.1f} ns"))


def cmd_evalg(cfg: RunConfig, out: Path) -> None:
    op = evalg_point(cfg)
    res = evaluate_gain(op)
    print(f"G = {res.g:.4e}")
    print(f"N_QKD = {secure_rate(op):.4e} 1/s at {op.pulse_rate_hz:.4g} Hz")
    if res.insecure:
        print("insecure: no positive key at this operating point")


COMMANDS = {"session": cmd_session, "sweep": cmd_sweep, "maxloss": cmd_maxloss, "hbt": cmd_hbt, "evalg": cmd_evalg}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command != "evalg":
            _write(args.out / "config.txt", dump_config(cfg))
        COMMANDS[args.command](cfg, args.out)
    except (ValueError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
