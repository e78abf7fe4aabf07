"""Circuit descriptions: netlist parsing, serialization and builders.

Supported netlist lines (``*`` starts a comment, blank lines ignored)::

    R<label> n+ n- <ohms>
    C<label> n+ n- <farads>
    L<label> n+ n- <henries>
    V<label> n+ n- DC <volts>
    V<label> n+ n- SIN <offset> <amplitude> <hertz>
    I<label> n+ n- DC <amps>
    S<label> n+ n- PWM f=<hertz> d=<fraction> ron=<ohms> roff=<ohms>
    D<label> n+ n- is=<amps> vt=<volts>

Node 0 is ground. Every R, L and C device registers a differentiable
parameter named after the device.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources

KINDS = {
    "R": "resistor",
    "C": "capacitor",
    "L": "inductor",
    "V": "voltage_source",
    "I": "current_source",
    "S": "pwm_switch",
    "D": "diode",
}
PARAM_KINDS = ("resistor", "capacitor", "inductor")

_NAME_RE = re.compile(r"^[RCLVISD]\w*$")


class NetlistError(ValueError):
    """Invalid netlist or circuit description."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class ParamDescriptor:
    name: str
    nominal: float
    role: str  # kind of the owning device: resistor | capacitor | inductor


@dataclass(frozen=True)
class Device:
    """One circuit element.

    ``value`` is the element value for R/L/C, the DC level for DC sources.
    ``waveform`` is ``("dc", level)`` or ``("sin", offset, amplitude, hertz)``
    for sources. ``options`` carries the PWM switch (f, d, ron, roff) and
    diode (is, vt) model constants.
    """

    name: str
    kind: str
    nodes: tuple[int, int]
    value: float | None = None
    waveform: tuple | None = None
    options: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Circuit:
    devices: tuple[Device, ...]
    node_count: int
    params: tuple[ParamDescriptor, ...]

    def device(self, name: str) -> Device:
        for dev in self.devices:
            if dev.name == name:
                return dev
        raise KeyError(name)

    def param(self, name: str) -> ParamDescriptor:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(f"unknown parameter {name!r}")

    def with_params(self, values: dict[str, float]) -> "Circuit":
        """Copy of the circuit with some parameter values replaced."""
        known = {p.name for p in self.params}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown parameter(s) {sorted(unknown)}")
        devices = [
            replace(dev, value=float(values[dev.name])) if dev.name in values else dev
            for dev in self.devices
        ]
        return make_circuit(devices)

    @property
    def switching_frequencies(self) -> list[float]:
        return [d.options["f"] for d in self.devices if d.kind == "pwm_switch"]


def _validate_device(dev: Device, line: int | None = None) -> None:
    if not _NAME_RE.match(dev.name):
        raise NetlistError(f"invalid device label {dev.name!r}", line)
    a, b = dev.nodes
    if a < 0 or b < 0:
        raise NetlistError(f"{dev.name}: negative node index", line)
    if dev.kind in PARAM_KINDS:
        if not (dev.value is not None and math.isfinite(dev.value) and dev.value > 0):
            raise NetlistError(f"{dev.name}: non-positive element value {dev.value}", line)
    elif dev.kind == "pwm_switch":
        o = dev.options
        if not o.get("f", 0) > 0:
            raise NetlistError(f"{dev.name}: PWM frequency must be > 0", line)
        if not 0 < o.get("d", 0) < 1:
            raise NetlistError(f"{dev.name}: duty cycle must lie in (0, 1)", line)
        if not 0 < o.get("ron", 0) < o.get("roff", 0):
            raise NetlistError(f"{dev.name}: need 0 < ron < roff", line)
    elif dev.kind == "diode":
        if not (dev.options.get("is", 0) > 0 and dev.options.get("vt", 0) > 0):
            raise NetlistError(f"{dev.name}: diode needs is > 0 and vt > 0", line)
    elif dev.kind in ("voltage_source", "current_source"):
        wf = dev.waveform
        if wf is None or wf[0] not in ("dc", "sin"):
            raise NetlistError(f"{dev.name}: missing source waveform", line)
        if wf[0] == "sin" and not wf[3] > 0:
            raise NetlistError(f"{dev.name}: SIN frequency must be > 0", line)
    else:
        raise NetlistError(f"unsupported device kind {dev.kind!r}", line)


def make_circuit(devices, lines: list[int] | None = None) -> Circuit:
    """Validate a device list and register its parameters."""
    devices = tuple(devices)
    seen = set()
    for i, dev in enumerate(devices):
        line = lines[i] if lines else None
        _validate_device(dev, line)
        if dev.name in seen:
            raise NetlistError(f"duplicate device label {dev.name!r}", line)
        seen.add(dev.name)

    used = {n for dev in devices for n in dev.nodes}
    node_count = max(used, default=0)
    missing = sorted(set(range(1, node_count + 1)) - used)
    if missing:
        raise NetlistError(f"dangling node(s) {missing}: index not connected to any device")
    if devices and 0 not in used:
        raise NetlistError("circuit has no connection to ground (node 0)")

    params = tuple(
        ParamDescriptor(dev.name, dev.value, dev.kind)
        for dev in devices
        if dev.kind in PARAM_KINDS
    )
    return Circuit(devices, node_count, params)


def list_parameters(circuit: Circuit) -> list[ParamDescriptor]:
    return list(circuit.params)


def _float(tok: str, line: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise NetlistError(f"cannot parse number {tok!r}", line) from None


def _keyvals(tokens: list[str], required: tuple[str, ...], line: int) -> dict:
    out = {}
    for tok in tokens:
        key, sep, val = tok.partition("=")
        if not sep:
            raise NetlistError(f"expected key=value, got {tok!r}", line)
        out[key.lower()] = _float(val, line)
    missing = [k for k in required if k not in out]
    if missing:
        raise NetlistError(f"missing option(s) {missing}", line)
    extra = set(out) - set(required)
    if extra:
        raise NetlistError(f"unknown option(s) {sorted(extra)}", line)
    return out


def _parse_line(tokens: list[str], lineno: int) -> Device:
    name = tokens[0]
    letter = name[0].upper()
    if letter not in KINDS or not _NAME_RE.match(letter + name[1:]):
        raise NetlistError(f"unknown device {name!r}", lineno)
    name = letter + name[1:]
    kind = KINDS[letter]
    if len(tokens) < 4:
        raise NetlistError(f"{name}: expected at least two nodes and a value", lineno)
    try:
        nodes = (int(tokens[1]), int(tokens[2]))
    except ValueError:
        raise NetlistError(f"{name}: node indices must be integers", lineno) from None
    rest = tokens[3:]

    if kind in PARAM_KINDS:
        if len(rest) != 1:
            raise NetlistError(f"{name}: expected a single value", lineno)
        return Device(name, kind, nodes, value=_float(rest[0], lineno))
    if kind in ("voltage_source", "current_source"):
        mode = rest[0].upper()
        if mode == "DC" and len(rest) == 2:
            level = _float(rest[1], lineno)
            return Device(name, kind, nodes, value=level, waveform=("dc", level))
        if mode == "SIN" and len(rest) == 4 and kind == "voltage_source":
            off, amp, freq = (_float(t, lineno) for t in rest[1:])
            return Device(name, kind, nodes, waveform=("sin", off, amp, freq))
        raise NetlistError(f"{name}: bad source specification {' '.join(rest)!r}", lineno)
    if kind == "pwm_switch":
        if rest[0].upper() != "PWM":
            raise NetlistError(f"{name}: switch must be PWM", lineno)
        opts = _keyvals(rest[1:], ("f", "d", "ron", "roff"), lineno)
        return Device(name, kind, nodes, options=opts)
    opts = _keyvals(rest, ("is", "vt"), lineno)
    return Device(name, kind, nodes, options=opts)


def parse_netlist(text: str) -> Circuit:
    devices, lines = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("*"):
            continue
        devices.append(_parse_line(line.split(), lineno))
        lines.append(lineno)
    return make_circuit(devices, lines)


def _fmt(v: float) -> str:
    return repr(float(v))


def serialize_netlist(circuit: Circuit) -> str:
    out = []
    for dev in circuit.devices:
        head = f"{dev.name} {dev.nodes[0]} {dev.nodes[1]}"
        if dev.kind in PARAM_KINDS:
            out.append(f"{head} {_fmt(dev.value)}")
        elif dev.kind in ("voltage_source", "current_source"):
            wf = dev.waveform
            if wf[0] == "dc":
                out.append(f"{head} DC {_fmt(wf[1])}")
            else:
                out.append(f"{head} SIN {' '.join(_fmt(v) for v in wf[1:])}")
        elif dev.kind == "pwm_switch":
            o = dev.options
            out.append(
                f"{head} PWM f={_fmt(o['f'])} d={_fmt(o['d'])} "
                f"ron={_fmt(o['ron'])} roff={_fmt(o['roff'])}"
            )
        else:
            o = dev.options
            out.append(f"{head} is={_fmt(o['is'])} vt={_fmt(o['vt'])}")
    return "\n".join(out) + "\n"


def build_buck_converter(
    vin: float = 100.0,
    fs: float = 500.0,
    L: float = 1e-3,
    RL: float = 10e-3,
    C: float = 100e-6,
    R: float = 0.8,
    duty: float = 0.5,
    ron: float = 1e-3,
    roff: float = 1e6,
    i_sat: float = 1e-12,
    vt: float = 25.85e-3,
) -> Circuit:
    """DC-DC buck converter with a PWM switch and freewheeling diode.

    Nodes: 1 input, 2 switch node, 3 between inductor and its series
    resistance, 4 output. Parameters come out as ``[R, R_L, L, C]``.
    Defaults are the values of the reference experiment; the duty cycle is
    not part of that record and defaults to 0.5.
    """
    devices = [
        Device("Vin", "voltage_source", (1, 0), value=vin, waveform=("dc", vin)),
        Device("S", "pwm_switch", (1, 2), options={"f": fs, "d": duty, "ron": ron, "roff": roff}),
        Device("D", "diode", (0, 2), options={"is": i_sat, "vt": vt}),
        Device("R", "resistor", (4, 0), value=R),
        Device("R_L", "resistor", (3, 4), value=RL),
        Device("L", "inductor", (2, 3), value=L),
        Device("C", "capacitor", (4, 0), value=C),
    ]
    return make_circuit(devices)


def build_rc_demo(
    amplitude: float = 1.0,
    offset: float = 1.0,
    freq: float = 1e3,
    R1: float = 1e3,
    C1: float = 1e-6,
    R2: float = 1e3,
) -> Circuit:
    """Sine-driven RC low-pass with a resistive load; output is node 2."""
    devices = [
        Device("V1", "voltage_source", (1, 0), waveform=("sin", offset, amplitude, freq)),
        Device("R1", "resistor", (1, 2), value=R1),
        Device("C1", "capacitor", (2, 0), value=C1),
        Device("R2", "resistor", (2, 0), value=R2),
    ]
    return make_circuit(devices)


def load_builtin(name: str) -> Circuit:
    """Parse one of the netlists shipped in ``pasa/data`` (``buck``, ``rc_demo``)."""
    text = resources.files("pasa.data").joinpath(f"{name}.cir").read_text(encoding="utf-8")
    return parse_netlist(text)
