"""Experiment runner: simulate, solve periodically, compare sensitivity methods.

Config files are INI (``configparser``)::

    [experiment]
    netlist = buck            ; builtin name (buck, rc_demo) or path to a netlist
    qoi_node = 4              ; default 4 for buck, 2 for rc_demo
    methods = dsa, asa_periodic
    periods = 20              ; transient horizon in periods
    steps_per_period = 1000
    period =                  ; seconds; default from the switching/source frequency
    h_rel = 1e-6              ; finite-difference step for method fd
    out = results

    [pppc]
    n_subintervals = 2
    threshold = 1e-4
    max_iterations = 50
    fine_steps =              ; per subinterval; default steps_per_period / N
    coarse_steps = 10
    workers = 1

Every key is optional. Command-line flags override the file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .mna import QoiSpec, assemble
from .netlist import Circuit, NetlistError, list_parameters, load_builtin, parse_netlist
from .parareal import PararealConfig
from .sensitivity import (
    METHODS,
    SensitivityReport,
    TransientRun,
    asa_periodic,
    asa_periodic_literature,
    asa_transient,
    dsa,
    dsa_integral,
    fd_oracle,
    solve_periodic,
)
from .transient import PropagatorSpec, SimulationError, integrate, write_trajectory_csv

log = logging.getLogger("pasa")

BUILTINS = {"buck": 4, "rc_demo": 2}

# reference values of the published buck experiment (Xyce DSA column), for
# manual comparison only; duty cycle and switch model there are unknown
PAPER_BUCK_REFERENCE = {"R": 116.6009e-6, "R_L": -74.2263e-6, "L": 397.5767e-9, "C": 6.358981e-9}

EXIT_OK, EXIT_CONFIG, EXIT_METHOD = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    netlist: str = "buck"
    qoi_node: int | None = None
    methods: tuple[str, ...] = ("dsa", "asa_periodic")
    periods: int = 20
    steps_per_period: int = 1000
    period: float | None = None
    h_rel: float = 1e-6
    pppc: PararealConfig = field(default_factory=PararealConfig)
    out: Path = Path("results")

    def validate(self) -> None:
        if not self.methods:
            raise ConfigError("select at least one method")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown method(s) {unknown}; choose from {list(METHODS)}")
        if self.periods < 1:
            raise ConfigError("periods must be >= 1")
        if "asa_periodic_literature" in self.methods and self.periods < 2:
            raise ConfigError("asa_periodic_literature needs a horizon of at least 2 periods")
        if self.steps_per_period < 1:
            raise ConfigError("steps_per_period must be >= 1")
        if self.period is not None and not self.period > 0:
            raise ConfigError("period must be > 0")
        if not 1e-8 <= self.h_rel <= 1e-2:
            raise ConfigError("h_rel must lie in [1e-8, 1e-2]")

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_parser(parser, **overrides)

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser, **overrides) -> "ExperimentConfig":
        known = {"experiment", "pppc"}
        extra = set(parser.sections()) - known
        if extra:
            raise ConfigError(f"unknown config section(s) {sorted(extra)}")
        exp = parser["experiment"] if parser.has_section("experiment") else {}
        pp = parser["pppc"] if parser.has_section("pppc") else {}
        _check_keys(exp, {"netlist", "qoi_node", "methods", "periods", "steps_per_period", "period", "h_rel", "out"}, "experiment")
        _check_keys(pp, {"n_subintervals", "threshold", "max_iterations", "fine_steps", "coarse_steps", "workers"}, "pppc")

        def get(sec, key, conv, default):
            raw = overrides.get(key)
            if raw is None:
                raw = sec.get(key, "").strip() if sec else ""
                if raw == "":
                    return default
            try:
                return conv(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from None

        methods = get(exp, "methods", _split_methods, ("dsa", "asa_periodic"))
        steps = get(exp, "steps_per_period", int, 1000)
        n_sub = get(pp, "n_subintervals", int, 2)
        fine = get(pp, "fine_steps", int, None)
        if fine is None:
            fine = max(steps // max(n_sub, 1), 1)
        try:
            pcfg = PararealConfig(
                n_subintervals=n_sub,
                threshold=get(pp, "threshold", float, 1e-4),
                max_iterations=get(pp, "max_iterations", int, 50),
                fine=PropagatorSpec(steps_per_interval=fine),
                coarse=PropagatorSpec(steps_per_interval=get(pp, "coarse_steps", int, 10)),
                workers=get(pp, "workers", int, 1),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls(
            netlist=get(exp, "netlist", str, "buck"),
            qoi_node=get(exp, "qoi_node", int, None),
            methods=methods,
            periods=get(exp, "periods", int, 20),
            steps_per_period=steps,
            period=get(exp, "period", float, None),
            h_rel=get(exp, "h_rel", float, 1e-6),
            pppc=pcfg,
            out=Path(get(exp, "out", str, "results")),
        )
        cfg.validate()
        return cfg


def _check_keys(section, allowed, name) -> None:
    extra = set(section) - allowed if section else set()
    if extra:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(extra)}")


def _split_methods(raw) -> tuple[str, ...]:
    if isinstance(raw, (list, tuple)):
        items = [m for part in raw for m in str(part).split(",")]
    else:
        items = str(raw).split(",")
    return tuple(dict.fromkeys(m.strip() for m in items if m.strip()))


def load_circuit(netlist: str) -> Circuit:
    if netlist in BUILTINS:
        return load_builtin(netlist)
    path = Path(netlist)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read netlist {netlist}: {exc}") from None
    return parse_netlist(text)


def circuit_period(circuit: Circuit) -> float:
    """Common period of PWM switches and SIN sources."""
    freqs = set(circuit.switching_frequencies)
    freqs |= {d.waveform[3] for d in circuit.devices if d.waveform and d.waveform[0] == "sin"}
    if not freqs:
        raise ConfigError("circuit has no periodic excitation; set 'period' in the config")
    if len(freqs) > 1:
        raise ConfigError(f"several excitation frequencies {sorted(freqs)}; set 'period' in the config")
    return 1.0 / freqs.pop()


@dataclass(frozen=True)
class OverheadStats:
    overhead_pct: float
    steady_fraction_pct: float

    def __str__(self) -> str:
        return (
            f"transient overhead {self.overhead_pct:.2f} %, "
            f"steady-state period is {self.steady_fraction_pct:.2f} % of the horizon"
        )


def emit_overhead_stats(horizon: float, period: float, stream=None) -> OverheadStats:
    """Share of a transient run spent before the single steady-state period."""
    if not period > 0 or horizon < period:
        raise ValueError("need period > 0 and horizon >= period")
    stats = OverheadStats((1.0 - period / horizon) * 100.0, period / horizon * 100.0)
    if stream is not None:
        print(stats, file=stream)
    return stats


@dataclass
class ExperimentResult:
    report: SensitivityReport
    failures: dict[str, str]
    timing: dict[str, float]
    files: list[Path]

    @property
    def exit_code(self) -> int:
        return EXIT_METHOD if self.failures else EXIT_OK


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run the selected methods and write the CSV outputs into ``cfg.out``."""
    cfg.validate()
    circuit, sysm, qoi, period = _setup(cfg)
    horizon = cfg.periods * period
    window = (horizon - period, horizon)
    names = [p.name for p in list_parameters(circuit)]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    ref = "dsa" if "dsa" in cfg.methods else cfg.methods[0]
    report = SensitivityReport(names, window, period, ref_method=ref)
    failures, timing, files = {}, {}, []
    spec = PropagatorSpec(steps_per_interval=cfg.steps_per_period * cfg.periods)

    t = time.perf_counter()
    forward = integrate(sysm, np.zeros(sysm.dim), 0.0, horizon, spec)
    timing["serial_transient"] = time.perf_counter() - t
    vout = out / "vout.csv"
    _write_rows(vout, ["t", "vout"], ([f"{a:.17g}", f"{b:.17g}"] for a, b in zip(forward.grid, qoi(forward.states))))
    files.append(vout)

    for method in cfg.methods:
        t = time.perf_counter()
        try:
            if method == "dsa":
                sens = dsa(sysm, forward, names)
                report.add(method, dsa_integral(sens, qoi, window))
                for nm, tr in sens.items():
                    path = out / f"sens_{nm}.csv"
                    _write_rows(path, ["t", f"dvout_d{nm}"],
                                ([f"{a:.17g}", f"{b:.17g}"] for a, b in zip(tr.grid, qoi(tr.states))))
                    files.append(path)
            elif method == "asa_transient":
                report.add(method, asa_transient(sysm, forward, qoi, names, *window))
            elif method == "asa_periodic_literature":
                report.add(method, asa_periodic_literature(sysm, forward, qoi, names, period))
            elif method == "asa_periodic":
                sol = solve_periodic(sysm, qoi, period, cfg.pppc)
                report.add(method, asa_periodic(sol, sysm, names))
                path = out / "pppc_history.csv"
                rows = [("forward", k, f"{m:.17g}") for k, m in enumerate(sol.forward_result.history, 1)]
                rows += [("adjoint", k, f"{m:.17g}") for k, m in enumerate(sol.adjoint_result.history, 1)]
                _write_rows(path, ["solve", "iteration", "metric"], rows)
                files.append(path)
            elif method == "fd":
                run = TransientRun(horizon, spec)
                report.add(method, {nm: fd_oracle(circuit, nm, cfg.h_rel, qoi, window, run) for nm in names})
        except (SimulationError, np.linalg.LinAlgError, ValueError) as exc:
            failures[method] = str(exc)
            log.error("method %s failed: %s", method, exc)
        timing[method] = time.perf_counter() - t

    path = out / "report.csv"
    report.to_csv(path)
    files.append(path)
    path = out / "timing.csv"
    _write_rows(path, ["stage", "seconds"], ([k, f"{v:.6f}"] for k, v in timing.items()))
    files.append(path)
    return ExperimentResult(report, failures, timing, files)


def _setup(cfg: ExperimentConfig):
    circuit = load_circuit(cfg.netlist)
    node = cfg.qoi_node if cfg.qoi_node is not None else BUILTINS.get(cfg.netlist)
    if node is None:
        raise ConfigError("qoi_node is required for a netlist file")
    sysm = assemble(circuit)
    try:
        qoi = QoiSpec.node_voltage(sysm, node)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    period = cfg.period or circuit_period(circuit)
    return circuit, sysm, qoi, period


def run_oracle(cfg: ExperimentConfig, param: str) -> tuple[float, float]:
    """(finite difference, DSA) values of dU/dp over the last period."""
    circuit, sysm, qoi, period = _setup(cfg)
    if param not in sysm.params:
        raise ConfigError(f"unknown parameter {param!r}")
    horizon = cfg.periods * period
    window = (horizon - period, horizon)
    spec = PropagatorSpec(steps_per_interval=cfg.steps_per_period * cfg.periods)
    forward = integrate(sysm, np.zeros(sysm.dim), 0.0, horizon, spec)
    v_dsa = dsa_integral(dsa(sysm, forward, [param]), qoi, window)[param]
    v_fd = fd_oracle(circuit, param, cfg.h_rel, qoi, window, TransientRun(horizon, spec))
    return v_fd, v_dsa


def format_report(report: SensitivityReport, reference: dict[str, float] | None = None) -> str:
    lines = [f"{'param':<6} {'method':<24} {'dU/dp':>14} {'per period':>14} {'rel err':>10}"]
    for p, m, v, vp, ref, err in report.rows():
        e = "" if math.isnan(err) else f"{err:.3e}"
        lines.append(f"{p:<6} {m:<24} {v:>14.6e} {vp:>14.6e} {e:>10}")
    if reference:
        lines.append("published reference values (different duty cycle and switch model):")
        for p, v in reference.items():
            lines.append(f"  {p:<6} {v:.6e}")
    return "\n".join(lines)


# -- command line --------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pasa", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def overrides(p):
        p.add_argument("--netlist")
        p.add_argument("--method", action="append", help="repeatable or comma separated")
        p.add_argument("--periods", type=int)
        p.add_argument("--n-subintervals", type=int)
        p.add_argument("--threshold", type=float)
        p.add_argument("--out")

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", required=True)
    overrides(run)

    demo = sub.add_parser("demo", help="built-in experiments")
    demo.add_argument("name", choices=["buck"])
    overrides(demo)

    orc = sub.add_parser("oracle", help="finite-difference check of one parameter against DSA")
    orc.add_argument("--param", required=True)
    orc.add_argument("--h-rel", type=float, default=1e-6)
    orc.add_argument("--config")
    overrides(orc)
    return ap


def _overrides(args) -> dict:
    return {
        "netlist": args.netlist,
        "methods": args.method,
        "periods": args.periods,
        "n_subintervals": args.n_subintervals,
        "threshold": args.threshold,
        "out": args.out,
    }


def _config(args, **extra) -> ExperimentConfig:
    ov = {k: v for k, v in {**_overrides(args), **extra}.items() if v is not None}
    if getattr(args, "config", None):
        return ExperimentConfig.from_file(args.config, **ov)
    return ExperimentConfig.from_parser(configparser.ConfigParser(), **ov)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = _config(args)
        elif args.command == "demo":
            cfg = _config(args, methods=args.method or ["dsa,asa_periodic_literature,asa_periodic"],
                          out=args.out or "demo_buck")
        else:
            cfg = _config(args)
            cfg = replace(cfg, h_rel=args.h_rel)
            cfg.validate()
            v_fd, v_dsa = run_oracle(cfg, args.param)
            err = abs(v_fd - v_dsa) / abs(v_dsa) if v_dsa else math.inf
            print(f"{args.param}: fd {v_fd:.12e}  dsa {v_dsa:.12e}  rel err {err:.3e}")
            return EXIT_OK
        result = run_experiment(cfg)
    except (ConfigError, NetlistError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_METHOD

    report = result.report
    ref = PAPER_BUCK_REFERENCE if args.command == "demo" else None
    print(format_report(report, ref))
    emit_overhead_stats(cfg.periods * report.period, report.period, sys.stdout)
    if args.command == "demo":
        print("published horizon of 74 periods: ", end="")
        emit_overhead_stats(74 * report.period, report.period, sys.stdout)
    for method, msg in result.failures.items():
        print(f"method {method} failed: {msg}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
