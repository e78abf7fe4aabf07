import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pasa import (
    Device,
    NetlistError,
    build_buck_converter,
    build_rc_demo,
    list_parameters,
    load_builtin,
    parse_netlist,
    serialize_netlist,
)
from pasa.netlist import make_circuit

BUCK_TEXT = """\
* buck
V1 1 0 DC 100
S1 1 2 PWM f=500 d=0.5 ron=1e-3 roff=1e6
D1 0 2 is=1e-12 vt=25.85e-3

L1 2 3 1e-3
RL1 3 4 10e-3
C1 4 0 100e-6
R1 4 0 0.8
"""


def test_parse_buck_reference():
    c = parse_netlist(BUCK_TEXT)
    assert c.node_count == 4
    assert [p.name for p in list_parameters(c)] == ["L1", "RL1", "C1", "R1"]
    assert c.param("C1").nominal == 100e-6
    assert c.param("RL1").role == "resistor"
    s = c.device("S1")
    assert s.kind == "pwm_switch"
    assert s.options == {"f": 500.0, "d": 0.5, "ron": 1e-3, "roff": 1e6}
    assert c.device("D1").options == {"is": 1e-12, "vt": 25.85e-3}
    assert c.switching_frequencies == [500.0]


def test_builtin_netlists_match_builders():
    buck = load_builtin("buck")
    assert len(buck.devices) == 7
    assert {p.nominal for p in buck.params} == {p.nominal for p in build_buck_converter().params}
    rc = load_builtin("rc_demo")
    assert [(p.name, p.nominal) for p in rc.params] == [(p.name, p.nominal) for p in build_rc_demo().params]


def test_builder_parameter_order():
    assert [p.name for p in build_buck_converter().params] == ["R", "R_L", "L", "C"]


def test_comments_blank_lines_and_case():
    c = parse_netlist("* header\n\n   * indented comment\nr1 1 0 5\nv1 1 0 dc 2\n")
    assert [d.name for d in c.devices] == ["R1", "V1"]
    assert c.device("V1").waveform == ("dc", 2.0)


def test_sin_source():
    c = parse_netlist("V1 1 0 SIN 1 2 1000\nR1 1 0 1\n")
    assert c.device("V1").waveform == ("sin", 1.0, 2.0, 1000.0)


@pytest.mark.parametrize(
    "text, fragment, line",
    [
        ("R1 1 0 -5\n", "non-positive", 1),
        ("R1 1 0 0\n", "non-positive", 1),
        ("R1 1 0 1\nR1 1 0 2\n", "duplicate", 2),
        ("R1 1 0 1\nC1 3 0 1\n", "dangling", None),
        ("R1 1 2 1\n", "ground", None),
        ("X1 1 0 1\n", "unknown device", 1),
        ("R1 1 0 abc\n", "cannot parse", 1),
        ("R1 a 0 1\n", "integers", 1),
        ("S1 1 0 PWM f=500 d=1.5 ron=1 roff=2\n", "duty", 1),
        ("S1 1 0 PWM f=500 d=0.5 ron=3 roff=2\n", "ron < roff", 1),
        ("S1 1 0 PWM f=500 d=0.5 ron=1\n", "missing", 1),
        ("D1 1 0 is=0 vt=1\n", "diode", 1),
        ("D1 1 0 is=1 vt=1 n=2\n", "unknown option", 1),
        ("V1 1 0 PULSE 1\n", "bad source", 1),
        ("R1 1 0\n", "at least", 1),
    ],
)
def test_invalid_netlists(text, fragment, line):
    with pytest.raises(NetlistError, match=fragment) as exc:
        parse_netlist(text)
    assert exc.value.line == line


def test_with_params_replaces_values():
    c = build_rc_demo()
    c2 = c.with_params({"R1": 2e3})
    assert c2.param("R1").nominal == 2e3
    assert c.param("R1").nominal == 1e3
    with pytest.raises(KeyError):
        c.with_params({"nope": 1.0})
    with pytest.raises(NetlistError):
        c.with_params({"C1": -1.0})


def test_make_circuit_rejects_unsupported_kind():
    with pytest.raises(NetlistError):
        make_circuit([Device("R1", "memristor", (1, 0), value=1.0)])


_values = st.floats(min_value=1e-12, max_value=1e12, allow_nan=False).filter(lambda v: v > 0)


@st.composite
def ladder(draw):
    """Random RLC ladder driven by one source; every node index is used."""
    n = draw(st.integers(min_value=1, max_value=6))
    if draw(st.booleans()):
        level = draw(_values)
        src = Device("V1", "voltage_source", (1, 0), value=level, waveform=("dc", level))
    else:
        src = Device("V1", "voltage_source", (1, 0), waveform=("sin", draw(_values), draw(_values), draw(_values)))
    devices = [src]
    for k in range(1, n + 1):
        kind = draw(st.sampled_from(["R", "L", "C"]))
        a, b = k, (k + 1 if k < n else 0)
        devices.append(Device(f"{kind}{k}", {"R": "resistor", "L": "inductor", "C": "capacitor"}[kind], (a, b), value=draw(_values)))
    if draw(st.booleans()):
        d = draw(st.floats(min_value=0.01, max_value=0.99))
        ron = draw(_values)
        devices.append(Device("S1", "pwm_switch", (1, 0), options={"f": draw(_values), "d": d, "ron": ron, "roff": ron * 1e6}))
    if draw(st.booleans()):
        devices.append(Device("D1", "diode", (0, 1), options={"is": draw(_values), "vt": draw(_values)}))
    return make_circuit(devices)


@settings(max_examples=200, deadline=None)
@given(ladder())
def test_serialize_parse_round_trip(circuit):
    text = serialize_netlist(circuit)
    again = parse_netlist(text)
    assert again == circuit
    assert serialize_netlist(again) == text


@given(st.floats(min_value=1e-300, max_value=1e300))
def test_values_round_trip_exactly(v):
    c = make_circuit([Device("R1", "resistor", (1, 0), value=v)])
    assert parse_netlist(serialize_netlist(c)).param("R1").nominal == v
