"""Sensitivity engines for window integrals ``U = int u(x(t)) dt``.

* :func:`dsa` propagates dx/dp alongside the forward solution.
* :func:`asa_transient` solves the adjoint backwards with a zero terminal
  value and integrates  -lam^T [(dJ_C/dp) xdot + (dJ_G/dp) x].
* :func:`asa_periodic_literature` differences two transient adjoint
  integrals ending one period apart.
* :func:`asa_periodic` uses a periodic forward orbit and a periodic adjoint
  (both from PP-PC) over a single period and drops the boundary term.
* :func:`fd_oracle` central differences of full re-simulations.

All quadratures are discretely consistent with backward Euler: the adjoint
source carries trapezoidal weights, and each step's stamp action
(dJ_C/dp)(x_k - x_{k-1})/h_k + (dJ_G/dp) x_k is paired with the adjoint value
at the step's left end. Adjoint and direct results therefore agree to
round-off for the same grid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .mna import MnaSystem, QoiSpec, assemble
from .netlist import Circuit, ParamDescriptor
from .parareal import PararealConfig, PararealResult, pppc_solve
from .transient import (
    PropagatorSpec,
    SimulationError,
    TimeReversedAdjoint,
    Trajectory,
    _adjoint_sweep,
    integrate,
    trapezoid_density,
)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

METHODS = ("dsa", "asa_transient", "asa_periodic_literature", "asa_periodic", "fd")


class PeriodicityError(SimulationError):
    pass


def _names(sys: MnaSystem, params) -> list[str]:
    if params is None:
        return list(sys.params)
    names = [p if isinstance(p, str) else p.name for p in params]
    for name in names:
        if name not in sys.params:
            raise KeyError(f"parameter {name!r} is not registered in this circuit")
    return names


def _require_be(traj: Trajectory) -> None:
    if traj.scheme != "backward_euler":
        raise ValueError(f"sensitivities need a backward_euler trajectory, got {traj.scheme!r}")


def integrate_qoi(forward: Trajectory, qoi: QoiSpec, window: tuple[float, float] | None = None) -> float:
    """Trapezoidal integral of ``q^T x`` over ``window`` (grid points of ``forward``)."""
    ta, tb = (forward.t0, forward.t1) if window is None else window
    if not forward.covers(ta, tb):
        raise ValueError(f"window [{ta}, {tb}] not covered by trajectory [{forward.t0}, {forward.t1}]")
    part = forward.window(ta, tb)
    return float(_trapezoid(part.states @ qoi.selector, part.grid))


# -- direct sensitivities ------------------------------------------------------


def _step_actions(sys: MnaSystem, forward: Trajectory, name: str) -> np.ndarray:
    """Stamp action b_k for every step k = 1..M (row k-1)."""
    x = forward.states
    h = np.diff(forward.grid)[:, None]
    xdot = (x[1:] - x[:-1]) / h
    djc, djg = sys.param_matrices(name)
    return xdot @ djc.T + x[1:] @ djg.T


def dsa(sys: MnaSystem, forward: Trajectory, params=None) -> dict[str, Trajectory]:
    """dx/dp on the forward grid, starting from dx/dp(t_0) = 0.

    Each step solves the derivative of the backward Euler step:
    (J_C/h + A_k) y_k = J_C y_{k-1}/h - b_k.
    """
    _require_be(forward)
    names = _names(sys, params)
    m, n = len(forward.grid), sys.dim
    if not names:
        return {}
    b = np.stack([_step_actions(sys, forward, nm) for nm in names], axis=2)  # (M, n, P)
    y = np.zeros((m, n, len(names)))
    jc = sys.jc()
    for k in range(1, m):
        h = forward.grid[k] - forward.grid[k - 1]
        a = jc / h + sys.jg(forward.states[k], forward.grid[k], -1)
        y[k] = np.linalg.solve(a, jc @ y[k - 1] / h - b[k - 1])
    return {nm: Trajectory(forward.grid, y[:, :, i], "sensitivity", forward.scheme) for i, nm in enumerate(names)}


def dsa_integral(sens: dict[str, Trajectory], qoi: QoiSpec, window=None) -> dict[str, float]:
    return {nm: integrate_qoi(tr, qoi, window) for nm, tr in sens.items()}


# -- adjoint sensitivities -----------------------------------------------------


def stamp_integral(sys: MnaSystem, forward: Trajectory, lam: np.ndarray, params=None) -> dict[str, float]:
    """-sum_k h_k lam_{k-1}^T b_k over all steps of ``forward``.

    ``lam`` holds adjoint states aligned with ``forward.grid``.
    """
    names = _names(sys, params)
    h = np.diff(forward.grid)
    out = {}
    for nm in names:
        b = _step_actions(sys, forward, nm)
        out[nm] = float(-np.sum(h * np.einsum("ij,ij->i", lam[:-1], b)))
    return out


def transient_adjoint(sys: MnaSystem, forward: Trajectory, qoi: QoiSpec, t0: float, t_end: float) -> Trajectory:
    """Adjoint with lam(t_end) = 0 for the window [t0, t_end], swept back to the
    start of ``forward``."""
    _require_be(forward)
    if not forward.covers(t0, t_end):
        raise ValueError(f"window [{t0}, {t_end}] not covered by trajectory [{forward.t0}, {forward.t1}]")
    part = forward.window(forward.t0, t_end)
    rho = trapezoid_density(part.grid, t0, t_end)
    lam = _adjoint_sweep(
        sys, part, qoi.selector, np.zeros(sys.dim), part.grid, lambda k, j, lo, hi: rho[j]
    )
    return Trajectory(part.grid, lam, "adjoint", "backward_euler")


def asa_transient(sys: MnaSystem, forward: Trajectory, qoi: QoiSpec, params=None, t0=None, t_end=None) -> dict[str, float]:
    """dU/dp for U = int_{t0}^{t_end} q^T x dt with a terminal-value adjoint.

    ``forward`` must start at a state independent of the parameters (the zero
    state in practice); the adjoint is swept back to that start.
    """
    t0 = forward.t0 if t0 is None else t0
    t_end = forward.t1 if t_end is None else t_end
    adj = transient_adjoint(sys, forward, qoi, t0, t_end)
    part = forward.window(forward.t0, t_end)
    return stamp_integral(sys, part, adj.states, params)


def asa_periodic_literature(sys: MnaSystem, forward: Trajectory, qoi: QoiSpec, params=None, period: float = None) -> dict[str, float]:
    """Difference of transient adjoint integrals up to t_end and t_end - period."""
    if period is None or not period > 0:
        raise ValueError("period must be > 0")
    t_end = forward.t1
    if t_end - forward.t0 < 2 * period * (1 - 1e-12):
        raise ValueError("transient window shorter than two periods")
    full = asa_transient(sys, forward, qoi, params, forward.t0, t_end)
    head = asa_transient(sys, forward, qoi, params, forward.t0, t_end - period)
    return {nm: full[nm] - head[nm] for nm in full}


# -- periodic adjoint ----------------------------------------------------------


@dataclass
class PeriodicSolution:
    """Forward orbit and adjoint orbit over the window [t_m - period, t_m]."""

    forward: Trajectory
    adjoint: Trajectory
    t_m: float
    period: float
    threshold: float
    forward_result: PararealResult | None = None
    adjoint_result: PararealResult | None = None

    def periodicity(self) -> tuple[float, float]:
        """Relative end-point mismatch of forward and adjoint orbits."""

        def rel(tr):
            a, b = tr.states[-1], tr.states[0]
            return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300))

        return rel(self.forward), rel(self.adjoint)


def periodic_adjoint(
    sys: MnaSystem, forward: Trajectory, qoi: QoiSpec, cfg: PararealConfig, initial_guess=None
) -> tuple[Trajectory, PararealResult]:
    """Periodic adjoint over the span of ``forward`` by PP-PC in reversed time.

    No terminal condition is imposed; periodicity replaces it.
    """
    rho = trapezoid_density(forward.grid, forward.t0, forward.t1, periodic=True)
    rev = TimeReversedAdjoint(sys, forward, qoi, forward.t1, density=rho)
    res = pppc_solve(rev, 0.0, forward.t1 - forward.t0, cfg, initial_guess)
    lam = rev.to_time(res.trajectory())
    return lam, res


def solve_periodic(
    sys: MnaSystem,
    qoi: QoiSpec,
    period: float,
    cfg: PararealConfig,
    adjoint_cfg: PararealConfig | None = None,
    t_start: float = 0.0,
) -> PeriodicSolution:
    """Forward and adjoint periodic orbits over [t_start, t_start + period]."""
    fres = pppc_solve(sys, t_start, t_start + period, cfg)
    fwd = fres.trajectory()
    lam, ares = periodic_adjoint(sys, fwd, qoi, adjoint_cfg or cfg)
    return PeriodicSolution(fwd, lam, t_start + period, period, (adjoint_cfg or cfg).threshold, fres, ares)


def _aligned_adjoint(sol: PeriodicSolution) -> np.ndarray:
    fg, ag = sol.forward.grid, sol.adjoint.grid
    if len(fg) != len(ag) or np.max(np.abs(fg - ag)) > 1e-9 * sol.period:
        raise ValueError("forward and adjoint orbits are not on the same grid")
    return sol.adjoint.states


def asa_periodic(sol: PeriodicSolution, sys: MnaSystem, params=None, check: bool = True) -> dict[str, float]:
    """One-period dU/dp from periodic orbits, boundary term dropped."""
    _require_be(sol.forward)
    if check:
        fx, fl = sol.periodicity()
        limit = 10 * sol.threshold
        if fx > limit or fl > limit:
            raise PeriodicityError(
                f"orbits not periodic (forward {fx:.2e}, adjoint {fl:.2e} > {limit:.1e}); "
                "dropping the boundary term would bias the result"
            )
    return stamp_integral(sys, sol.forward, _aligned_adjoint(sol), params)


def boundary_term_residual(
    sol: PeriodicSolution, sys: MnaSystem, p: ParamDescriptor | str, dxdp_at_tm, dxdp_at_tm_minus_Tp,
    scale: float | None = None,
) -> float:
    """|lam^T J_C dx/dp|_{t_m} - lam^T J_C dx/dp|_{t_m - T_p}| relative to the one-period dU/dp.

    ``scale`` replaces the one-period dU/dp as the denominator, for
    parameters whose period integral cancels to (near) zero.
    """
    name = p if isinstance(p, str) else p.name
    y1 = np.asarray(dxdp_at_tm, float)
    y0 = np.asarray(dxdp_at_tm_minus_Tp, float)
    if y1.shape != (sys.dim,) or y0.shape != (sys.dim,):
        raise ValueError(f"sensitivity states must have length {sys.dim}")
    lam = sol.adjoint.states
    jc = sys.jc()
    term = abs(lam[-1] @ jc @ y1 - lam[0] @ jc @ y0)
    if scale is None:
        scale = abs(asa_periodic(sol, sys, [name], check=False)[name])
    return float(term / max(scale, 1e-300))


# -- finite differences --------------------------------------------------------


@dataclass(frozen=True)
class TransientRun:
    """Serial integration from the zero state over [0, t_end]."""

    t_end: float
    spec: PropagatorSpec = field(default_factory=PropagatorSpec)
    steps: int | None = None  # total steps; defaults to spec.steps_per_interval

    def solve(self, sys: MnaSystem) -> Trajectory:
        spec = self.spec
        if self.steps is not None:
            spec = PropagatorSpec(spec.scheme, self.steps, spec.newton)
        return integrate(sys, np.zeros(sys.dim), 0.0, self.t_end, spec)


@dataclass(frozen=True)
class PeriodicRun:
    """PP-PC periodic orbit over [t_start, t_start + period]."""

    period: float
    cfg: PararealConfig = field(default_factory=PararealConfig)
    t_start: float = 0.0

    def solve(self, sys: MnaSystem) -> Trajectory:
        return pppc_solve(sys, self.t_start, self.t_start + self.period, self.cfg).trajectory()


def fd_oracle(circuit: Circuit, p: ParamDescriptor | str, h_rel: float, qoi: QoiSpec, window, run) -> float:
    """Central difference (U(p+h) - U(p-h)) / 2h with h = h_rel * nominal."""
    if not 1e-8 <= h_rel <= 1e-2:
        raise ValueError("h_rel must lie in [1e-8, 1e-2]")
    name = p if isinstance(p, str) else p.name
    nominal = circuit.param(name).nominal
    h = h_rel * nominal
    vals = []
    for sign in (+1, -1):
        sys = assemble(circuit.with_params({name: nominal + sign * h}))
        vals.append(integrate_qoi(run.solve(sys), qoi, window))
    return (vals[0] - vals[1]) / (2 * h)


# -- reporting -----------------------------------------------------------------


def rel_error(value: float, ref: float) -> float:
    if ref == 0:
        return 0.0 if value == 0 else math.inf
    return abs(value - ref) / abs(ref)


@dataclass
class SensitivityReport:
    """Integrated sensitivities per (parameter, method) over ``window``.

    ``value_per_period`` divides by the period (a volt-per-unit average).
    """

    params: list[str]
    window: tuple[float, float]
    period: float
    values: dict[tuple[str, str], float] = field(default_factory=dict)
    ref_method: str = "dsa"

    def add(self, method: str, results: dict[str, float]) -> None:
        for nm, v in results.items():
            self.values[(nm, method)] = float(v)

    @property
    def methods(self) -> list[str]:
        seen = []
        for _, m in self.values:
            if m not in seen:
                seen.append(m)
        return seen

    def get(self, param: str, method: str) -> float:
        return self.values[(param, method)]

    def rel_error(self, param: str, method: str, ref: str | None = None) -> float:
        ref = ref or self.ref_method
        if (param, ref) not in self.values or (param, method) not in self.values:
            return math.nan
        return rel_error(self.values[(param, method)], self.values[(param, ref)])

    def rows(self):
        for p in self.params:
            for m in self.methods:
                if (p, m) not in self.values:
                    continue
                v = self.values[(p, m)]
                ref = self.ref_method if (p, self.ref_method) in self.values and m != self.ref_method else ""
                err = self.rel_error(p, m) if ref else math.nan
                yield p, m, v, v / self.period, ref, err

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["parameter", "method", "value_raw", "value_per_period", "ref_method", "rel_error"])
            for p, m, v, vp, ref, err in self.rows():
                w.writerow([p, m, f"{v:.17g}", f"{vp:.17g}", ref, "" if math.isnan(err) else f"{err:.17g}"])
