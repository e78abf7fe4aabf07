"""Implicit time integration of the forward DAE and its adjoint.

The forward stepper solves the discretized MNA residual with Newton's method
at every step. The adjoint stepper is the exact transpose of the backward
Euler forward step, so gradients assembled from it agree with direct
sensitivities of the same discretization to round-off.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .mna import MnaSystem, QoiSpec


class SimulationError(RuntimeError):
    pass


class ConvergenceError(SimulationError):
    def __init__(self, message: str, residual_norm: float):
        super().__init__(f"{message} (last residual norm {residual_norm:.3e})")
        self.residual_norm = residual_norm


class SingularMatrixError(SimulationError):
    pass


SCHEMES = ("backward_euler", "trapezoidal")


@dataclass(frozen=True)
class NewtonOptions:
    tol: float = 1e-10
    max_iter: int = 50

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("newton tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("newton max_iter must be >= 1")


@dataclass(frozen=True)
class PropagatorSpec:
    scheme: str = "backward_euler"
    steps_per_interval: int = 100
    newton: NewtonOptions = field(default_factory=NewtonOptions)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.steps_per_interval < 1:
            raise ValueError("steps_per_interval must be >= 1")


@dataclass
class Trajectory:
    """States sampled on a strictly increasing time grid.

    ``kind`` is ``"forward"``, ``"adjoint"`` or ``"sensitivity"``.
    """

    grid: np.ndarray
    states: np.ndarray
    kind: str = "forward"
    scheme: str = "backward_euler"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.grid.ndim != 1 or self.states.ndim != 2:
            raise ValueError("grid must be 1-D and states 2-D")
        if len(self.grid) != len(self.states):
            raise ValueError("states count must equal grid count")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")

    @property
    def t0(self) -> float:
        return float(self.grid[0])

    @property
    def t1(self) -> float:
        return float(self.grid[-1])

    def index_of(self, t: float, rtol: float = 1e-9) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid point."""
        tol = rtol * max(self.t1 - self.t0, abs(self.t1), 1e-300)
        k = int(np.searchsorted(self.grid, t))
        for j in (k - 1, k):
            if 0 <= j < len(self.grid) and abs(self.grid[j] - t) <= tol:
                return j
        raise ValueError(f"t={t!r} is not a grid point of the trajectory")

    def covers(self, t0: float, t1: float) -> bool:
        tol = 1e-9 * max(self.t1 - self.t0, 1e-300)
        return self.t0 - tol <= t0 and t1 <= self.t1 + tol

    def at(self, t: float) -> np.ndarray:
        """Linearly interpolated state."""
        if not self.covers(t, t):
            raise ValueError(f"t={t!r} outside trajectory [{self.t0}, {self.t1}]")
        k = int(np.searchsorted(self.grid, t))
        if k < len(self.grid) and self.grid[k] == t:
            return self.states[k].copy()
        k = min(max(k, 1), len(self.grid) - 1)
        ta, tb = self.grid[k - 1], self.grid[k]
        w = (t - ta) / (tb - ta)
        return (1 - w) * self.states[k - 1] + w * self.states[k]

    def window(self, t0: float, t1: float) -> "Trajectory":
        i, j = self.index_of(t0), self.index_of(t1)
        return Trajectory(self.grid[i : j + 1], self.states[i : j + 1], self.kind, self.scheme)

    def to_csv(self, path) -> None:
        write_trajectory_csv(self, path)


def write_trajectory_csv(traj: Trajectory, path, header: list[str] | None = None) -> None:
    n = traj.states.shape[1]
    header = header or ["t"] + [f"x{i}" for i in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, x in zip(traj.grid, traj.states):
            w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in x])


def time_grid(sys: MnaSystem, t0: float, t1: float, steps: int) -> np.ndarray:
    """Uniform grid with every PWM edge in (t0, t1) inserted.

    Uniform points within 1e-3 of a step from an edge are moved onto it so
    no step straddles a switching instant and no sliver steps appear.
    """
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    pts = np.linspace(t0, t1, steps + 1)
    h = (t1 - t0) / steps
    extra = []
    for e in sys.pwm_edges(t0, t1):
        j = int(round((e - t0) / h))
        if abs(pts[j] - e) <= 1e-3 * h:
            if 0 < j < steps:
                pts[j] = e
        else:
            extra.append(e)
    if extra:
        pts = np.unique(np.concatenate([pts, extra]))
    return pts


def _solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"singular iteration matrix: {exc}") from None


def newton_step(
    sys: MnaSystem,
    x_prev: np.ndarray,
    t_prev: float,
    dt: float,
    spec: PropagatorSpec = PropagatorSpec(),
    guess: np.ndarray | None = None,
) -> tuple[np.ndarray, int, float]:
    """One implicit step; returns ``(x_next, newton_iterations, residual_norm)``."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    t = t_prev + dt
    jc = sys.jc(None, t)
    s = sys.source(t)
    trap = spec.scheme == "trapezoidal"
    if trap:
        # state of the step interval seen from its left end
        rhs_prev = 0.5 * (sys.source(t_prev) - sys.conductive_current(x_prev, t_prev, +1))
        s = 0.5 * s + rhs_prev
        wnew = 0.5
    else:
        wnew = 1.0
    x = np.array(x_prev if guess is None else guess, dtype=float)
    tol = spec.newton.tol
    norm = math.inf
    for it in range(spec.newton.max_iter + 1):
        r = jc @ (x - x_prev) / dt + wnew * sys.conductive_current(x, t, -1) - s
        norm = float(np.max(np.abs(r))) if r.size else 0.0
        # at least one correction: a small residual at the old state can
        # still hide a sizeable voltage error behind small conductances
        if norm <= tol and it > 0:
            return x, it, norm
        if it == spec.newton.max_iter:
            break
        jac = jc / dt + wnew * sys.jg(x, t, -1)
        dx = _solve(jac, -r)
        x = x + dx
        # stagnation at machine precision counts as converged
        if np.max(np.abs(dx)) <= 1e-14 * max(1.0, float(np.max(np.abs(x)))):
            r = jc @ (x - x_prev) / dt + wnew * sys.conductive_current(x, t, -1) - s
            return x, it + 1, float(np.max(np.abs(r)))
    raise ConvergenceError(f"Newton did not converge at t={t:.9g}", norm)


def step(sys: MnaSystem, x_prev, t_prev: float, dt: float, spec: PropagatorSpec = PropagatorSpec()) -> np.ndarray:
    x, _, _ = newton_step(sys, np.asarray(x_prev, float), t_prev, dt, spec)
    return x


def integrate_on_grid(sys: MnaSystem, x0, grid: np.ndarray, spec: PropagatorSpec = PropagatorSpec()) -> Trajectory:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (sys.dim,):
        raise ValueError(f"initial state must have length {sys.dim}")
    states = np.empty((len(grid), sys.dim))
    states[0] = x0
    x = x0
    for k in range(1, len(grid)):
        x, _, _ = newton_step(sys, x, grid[k - 1], grid[k] - grid[k - 1], spec)
        states[k] = x
    return Trajectory(grid, states, "forward", spec.scheme)


def integrate(sys: MnaSystem, x0, t0: float, t1: float, spec: PropagatorSpec = PropagatorSpec()) -> Trajectory:
    """Serial integration over [t0, t1] with ``spec.steps_per_interval`` steps
    (plus inserted PWM edges)."""
    return integrate_on_grid(sys, x0, time_grid(sys, t0, t1, spec.steps_per_interval), spec)


# -- adjoint -----------------------------------------------------------------


def _adjoint_sweep(
    sys: MnaSystem,
    forward: Trajectory,
    q: np.ndarray,
    lam_end: np.ndarray,
    grid: np.ndarray,
    density,
) -> np.ndarray:
    """Backward sweep of  -J_C^T lam' + J_G^T lam = rho q  on ``grid``.

    The step from t_hi back to t_lo solves

        (J_C/h + A(x(t_hi), t_hi-))^T lam_lo = J_C^T lam_hi / h + rho(t_hi) q

    which is the transpose of the backward Euler step that produced x(t_hi).
    Returns states aligned with ``grid``.
    """
    n = sys.dim
    out = np.empty((len(grid), n))
    out[-1] = lam_end
    lam = np.asarray(lam_end, float)
    jct = sys.jc().T
    exact = _grid_lookup(forward, grid)
    for k in range(len(grid) - 1, 0, -1):
        t_hi, t_lo = grid[k], grid[k - 1]
        h = t_hi - t_lo
        j = exact[k]
        x_hi = forward.states[j] if j >= 0 else forward.at(t_hi)
        a = (sys.jc() / h + sys.jg(x_hi, t_hi, -1)).T
        rhs = jct @ lam / h
        rho = density(k, j, t_lo, t_hi)
        if rho:
            rhs = rhs + rho * q
        lam = _solve(a, rhs)
        out[k - 1] = lam
    return out


def _grid_lookup(forward: Trajectory, grid: np.ndarray) -> np.ndarray:
    """Forward index of every grid point, -1 where it is not a forward grid point."""
    tol = 1e-9 * max(forward.t1 - forward.t0, 1e-300)
    k = np.clip(np.searchsorted(forward.grid, grid), 1, len(forward.grid) - 1)
    left, right = forward.grid[k - 1], forward.grid[k]
    idx = np.where(np.abs(grid - left) <= np.abs(grid - right), k - 1, k)
    hit = np.abs(forward.grid[idx] - grid) <= tol
    return np.where(hit, idx, -1)


def trapezoid_density(grid: np.ndarray, ta: float, tb: float, periodic: bool = False) -> np.ndarray:
    """Per-step quadrature density ``w_k / h_k`` for the step ending at grid[k].

    ``w`` are trapezoidal weights of the window [ta, tb] on ``grid``; with
    ``periodic`` the window is the whole grid and the end points wrap.
    Entry 0 is unused (no step ends at grid[0]).
    """
    h = np.diff(grid)
    m = len(grid) - 1
    rho = np.zeros(m + 1)
    if periodic:
        hn = np.append(h[1:], h[0])
        rho[1:] = 0.5 * (h + hn) / h
        return rho
    tol = 1e-9 * (grid[-1] - grid[0])
    a = int(np.argmin(np.abs(grid - ta)))
    b = int(np.argmin(np.abs(grid - tb)))
    if abs(grid[a] - ta) > tol or abs(grid[b] - tb) > tol or b <= a:
        raise ValueError(f"window [{ta}, {tb}] is not spanned by grid points")
    w = np.zeros(m + 1)
    for k in range(a, b):
        w[k] += 0.5 * h[k]
        w[k + 1] += 0.5 * h[k]
    rho[1:] = w[1:] / h
    return rho


def integrate_adjoint(
    sys: MnaSystem,
    forward: Trajectory,
    qoi: QoiSpec,
    lambda_terminal,
    t0: float,
    t1: float,
    spec: PropagatorSpec | None = None,
    density: np.ndarray | None = None,
) -> Trajectory:
    """Solve  J_C^T lam' - J_G^T lam = -q  backwards from ``lambda_terminal`` at t1.

    Coefficients are evaluated on ``forward`` (linear interpolation off its
    grid). Without ``spec`` the forward grid restricted to [t0, t1] is used.
    ``density`` optionally scales the source per forward-grid step (see
    :func:`trapezoid_density`); by default it is 1.
    """
    if spec is not None and spec.scheme != "backward_euler":
        raise ValueError("adjoint integration supports backward_euler only")
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    if not forward.covers(t0, t1):
        raise ValueError(f"forward trajectory [{forward.t0}, {forward.t1}] does not cover [{t0}, {t1}]")
    lam_end = np.asarray(lambda_terminal, dtype=float)
    if lam_end.shape != (sys.dim,):
        raise ValueError(f"lambda_terminal must have length {sys.dim}")
    if spec is None:
        grid = forward.window(t0, t1).grid
    else:
        grid = time_grid(sys, t0, t1, spec.steps_per_interval)

    if density is None:
        def dens(k, j, t_lo, t_hi):
            return 1.0
    else:
        def dens(k, j, t_lo, t_hi):
            return density[j] if j >= 0 else 1.0

    states = _adjoint_sweep(sys, forward, qoi.selector, lam_end, grid, dens)
    states[-1] = lam_end
    return Trajectory(grid, states, "adjoint", "backward_euler")


class TimeReversedAdjoint:
    """The adjoint DAE in reversed time ``tau = t_end - t``.

    In ``tau`` the adjoint reads  J_C^T dlam/dtau + J_G^T lam = q, an
    initial-value problem of the same shape as the forward DAE, so the
    Parareal drivers can propagate it forwards in ``tau``.
    """

    def __init__(
        self,
        sys: MnaSystem,
        forward: Trajectory,
        qoi: QoiSpec,
        t_end: float,
        density: np.ndarray | None = None,
    ):
        self.sys = sys
        self.forward = forward
        self.qoi = qoi
        self.t_end = float(t_end)
        self.density = density
        self.dim = sys.dim

    def to_tau(self, t):
        return self.t_end - np.asarray(t)

    def propagate(self, lam0, tau0: float, tau1: float, spec: PropagatorSpec) -> Trajectory:
        if spec.scheme != "backward_euler":
            raise ValueError("adjoint propagation supports backward_euler only")
        t_hi, t_lo = self.t_end - tau0, self.t_end - tau1
        grid = time_grid(self.sys, t_lo, t_hi, spec.steps_per_interval)
        # pin the interval ends to the requested values after the tau round trip
        grid[0], grid[-1] = t_lo, t_hi
        density = self.density

        def dens(k, j, lo, hi):
            if density is not None and j >= 0:
                return density[j]
            return 1.0

        states = _adjoint_sweep(self.sys, self.forward, self.qoi.selector, np.asarray(lam0, float), grid, dens)
        tau = self.t_end - grid[::-1]
        tau[0], tau[-1] = tau0, tau1
        return Trajectory(tau, states[::-1], "adjoint", "backward_euler")

    def to_time(self, traj: Trajectory) -> Trajectory:
        """Convert a tau-trajectory into forward-time ordering."""
        return Trajectory(self.t_end - traj.grid[::-1], traj.states[::-1], "adjoint", traj.scheme)


def propagate(sys, x0, t0: float, t1: float, spec: PropagatorSpec) -> Trajectory:
    """Propagator used by the Parareal drivers (forward or time-reversed adjoint)."""
    if isinstance(sys, TimeReversedAdjoint):
        return sys.propagate(x0, t0, t1, spec)
    return integrate(sys, x0, t0, t1, spec)
