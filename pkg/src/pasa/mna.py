"""Modified nodal analysis of a :class:`~pasa.netlist.Circuit`.

The circuit is written as the DAE

    J_C xdot + J_G(x, t) x = i_s(t)

with unknowns ``x = [node voltages 1..n, branch currents]``. Voltage sources
and inductors carry a branch current. The diode is the only nonlinear
element; its current enters through :meth:`MnaSystem.conductive_current` and
its companion conductance through :meth:`MnaSystem.jg`.

PWM switch states are evaluated as one-sided limits: ``side=-1`` gives the
state on the interval ending at ``t``, ``side=+1`` the state on the interval
starting at ``t``. Time-steppers always evaluate coefficients on the side of
the step they are integrating, so switching instants on the grid are
unambiguous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .netlist import Circuit, ParamDescriptor

# phase tolerance (fraction of a switching period) when deciding on which side
# of a PWM edge a time instant lies
_EDGE_TOL = 1e-9
_DIODE_EXP_LIMIT = 40.0


def pwm_on(t: float, f: float, d: float, side: int = -1) -> bool:
    """Switch state of a PWM signal that is on for phase in (0, d] of each period."""
    s = t * f
    frac = s - math.floor(s)
    if side < 0:
        if frac < _EDGE_TOL:
            frac = 1.0
        return frac <= d + _EDGE_TOL
    if frac > 1.0 - _EDGE_TOL:
        frac = 0.0
    return frac < d - _EDGE_TOL


def _pair(n: int, a: int, b: int) -> np.ndarray:
    """Two-terminal conductance pattern on ground-eliminated indices."""
    m = np.zeros((n, n))
    i, j = a - 1, b - 1
    if i >= 0:
        m[i, i] += 1.0
    if j >= 0:
        m[j, j] += 1.0
    if i >= 0 and j >= 0:
        m[i, j] -= 1.0
        m[j, i] -= 1.0
    return m


def _incidence(n: int, a: int, b: int) -> np.ndarray:
    v = np.zeros(n)
    if a > 0:
        v[a - 1] = 1.0
    if b > 0:
        v[b - 1] = -1.0
    return v


@dataclass(frozen=True)
class QoiSpec:
    """Linear quantity of interest ``u(x) = selector @ x``."""

    selector: np.ndarray

    @classmethod
    def node_voltage(cls, sys: "MnaSystem", node: int, scale: float = 1.0) -> "QoiSpec":
        if not 1 <= node <= sys.circuit.node_count:
            raise ValueError(f"node {node} is not a non-ground node of the circuit")
        q = np.zeros(sys.dim)
        q[node - 1] = scale
        return cls(q)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.selector


class MnaSystem:
    """Dense MNA evaluators for a circuit.

    The linear time-invariant part of J_G is precomputed; PWM switches and
    diodes are added per evaluation.
    """

    def __init__(self, circuit: Circuit):
        self.circuit = circuit
        nn = circuit.node_count
        branch = [d for d in circuit.devices if d.kind in ("voltage_source", "inductor")]
        self.branch_index = {d.name: nn + k for k, d in enumerate(branch)}
        n = self.dim = nn + len(branch)

        jc = np.zeros((n, n))
        g0 = np.zeros((n, n))
        self._switches = []
        self._diodes = []
        self._vsources = []
        self._isources = []
        self._param_mats = {}
        for dev in circuit.devices:
            a, b = dev.nodes
            if dev.kind == "resistor":
                pat = _pair(n, a, b)
                g0 += pat / dev.value
                self._param_mats[dev.name] = (None, -pat / dev.value**2)
            elif dev.kind == "capacitor":
                pat = _pair(n, a, b)
                jc += dev.value * pat
                self._param_mats[dev.name] = (pat, None)
            elif dev.kind == "inductor":
                k = self.branch_index[dev.name]
                inc = _incidence(n, a, b)
                g0[:, k] += inc
                g0[k, :] -= inc
                jc[k, k] = dev.value
                pat = np.zeros((n, n))
                pat[k, k] = 1.0
                self._param_mats[dev.name] = (pat, None)
            elif dev.kind == "voltage_source":
                k = self.branch_index[dev.name]
                inc = _incidence(n, a, b)
                g0[:, k] += inc
                g0[k, :] += inc
                self._vsources.append((k, dev.waveform))
            elif dev.kind == "current_source":
                self._isources.append((_incidence(n, a, b), dev.waveform))
            elif dev.kind == "pwm_switch":
                o = dev.options
                self._switches.append((_pair(n, a, b), o["f"], o["d"], 1 / o["ron"], 1 / o["roff"]))
            elif dev.kind == "diode":
                o = dev.options
                self._diodes.append((_incidence(n, a, b), o["is"], o["vt"]))
            else:
                raise ValueError(f"unsupported device kind {dev.kind!r}")
        self._jc = jc
        self._g0 = g0
        self.params = {p.name: p for p in circuit.params}

    # -- structure -----------------------------------------------------------
    @property
    def is_linear(self) -> bool:
        return not self._diodes

    @property
    def is_time_invariant(self) -> bool:
        return not self._switches

    def pwm_edges(self, t0: float, t1: float) -> np.ndarray:
        """All switching instants in [t0, t1], sorted."""
        edges = []
        for _, f, d, _, _ in self._switches:
            for m in range(math.floor(t0 * f) - 1, math.ceil(t1 * f) + 1):
                for e in ((m) / f, (m + d) / f):
                    if t0 <= e <= t1:
                        edges.append(e)
        return np.unique(np.array(edges, dtype=float))

    # -- evaluators ----------------------------------------------------------
    def jc(self, xdot=None, t: float = 0.0) -> np.ndarray:
        return self._jc

    def _g_lin(self, t: float, side: int) -> np.ndarray:
        if not self._switches:
            return self._g0
        g = self._g0.copy()
        for pat, f, d, gon, goff in self._switches:
            g += (gon if pwm_on(t, f, d, side) else goff) * pat
        return g

    def _diode_iv(self, x: np.ndarray):
        for inc, i_sat, vt in self._diodes:
            v = inc @ x
            vcrit = _DIODE_EXP_LIMIT * vt
            if v > vcrit:
                e = math.exp(_DIODE_EXP_LIMIT)
                i = i_sat * (e * (1.0 + (v - vcrit) / vt) - 1.0)
                g = i_sat * e / vt
            else:
                e = math.exp(v / vt)
                i = i_sat * (e - 1.0)
                g = i_sat * e / vt
            yield inc, i, g

    def jg(self, x: np.ndarray, t: float, side: int = -1) -> np.ndarray:
        """Newton linearization d(J_G(x,t) x)/dx.

        For linear circuits this is J_G itself; diodes contribute their
        companion conductance g_eq = (I_s/V_T) exp(v/V_T).
        """
        g = self._g_lin(t, side)
        if self._diodes:
            g = g.copy()
            for inc, _, gd in self._diode_iv(x):
                g += gd * np.outer(inc, inc)
        return g

    def conductive_current(self, x: np.ndarray, t: float, side: int = -1) -> np.ndarray:
        """J_G(x,t) x including the exact diode currents."""
        out = self._g_lin(t, side) @ x
        for inc, i, _ in self._diode_iv(x):
            out += i * inc
        return out

    def source(self, t: float) -> np.ndarray:
        s = np.zeros(self.dim)
        for k, wf in self._vsources:
            s[k] += _waveform(wf, t)
        for inc, wf in self._isources:
            s -= _waveform(wf, t) * inc
        return s

    def param_matrices(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """(dJ_C/dp, dJ_G/dp) for a registered parameter."""
        if name not in self._param_mats:
            raise KeyError(f"unknown parameter {name!r}")
        djc, djg = self._param_mats[name]
        zero = np.zeros((self.dim, self.dim))
        return (zero if djc is None else djc), (zero if djg is None else djg)

    def param_action(self, name: str, x: np.ndarray, xdot: np.ndarray, t: float = 0.0) -> np.ndarray:
        if name not in self._param_mats:
            raise KeyError(f"unknown parameter {name!r}")
        djc, djg = self._param_mats[name]
        out = np.zeros(np.shape(x))
        if djc is not None:
            out = out + xdot @ djc.T
        if djg is not None:
            out = out + x @ djg.T
        return out


def _waveform(wf: tuple, t: float) -> float:
    if wf[0] == "dc":
        return wf[1]
    _, off, amp, freq = wf
    return off + amp * math.sin(2 * math.pi * freq * t)


def assemble(circuit: Circuit) -> MnaSystem:
    return MnaSystem(circuit)


def residual(sys: MnaSystem, x, xdot, t: float, side: int = -1) -> np.ndarray:
    """J_C xdot + J_G(x,t) x - i_s(t)."""
    x = np.asarray(x, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    if x.shape != (sys.dim,) or xdot.shape != (sys.dim,):
        raise ValueError(f"expected state vectors of length {sys.dim}")
    return sys.jc(xdot, t) @ xdot + sys.conductive_current(x, t, side) - sys.source(t)


def param_stamp_action(sys: MnaSystem, p: ParamDescriptor | str, x, xdot, t: float = 0.0) -> np.ndarray:
    """(dJ_C/dp) xdot + (dJ_G/dp) x, differentiated stamp by stamp."""
    name = p if isinstance(p, str) else p.name
    if name not in sys.params:
        raise KeyError(f"parameter {name!r} is not registered in this circuit")
    return sys.param_action(name, np.asarray(x, float), np.asarray(xdot, float), t)
