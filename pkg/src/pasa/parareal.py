"""Parareal and periodic Parareal with a periodic coarse problem (PP-PC).

Both drivers work on anything :func:`pasa.transient.propagate` accepts: an
:class:`~pasa.mna.MnaSystem` (forward circuit) or a
:class:`~pasa.transient.TimeReversedAdjoint` (adjoint in reversed time).

Update rule, with F the fine and G the coarse propagator over one
subinterval::

    X[n]^{k+1} = F(X[n-1]^k) + G(X[n-1]^{k+1}) - G(X[n-1]^k)

PP-PC additionally wraps around the period::

    X[0]^{k+1} = F(X[N-1]^k) + G(X[N-1]^{k+1}) - G(X[N-1]^k)

The new-iterate coupling is resolved by a sequential sweep n = 1..N-1 followed
by the wrap-around update of X[0].
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .transient import PropagatorSpec, SimulationError, Trajectory, propagate

log = logging.getLogger(__name__)

METRIC_FLOOR = 1e-12


@dataclass(frozen=True)
class PararealConfig:
    n_subintervals: int = 2
    threshold: float = 1e-4
    max_iterations: int = 50
    fine: PropagatorSpec = field(default_factory=lambda: PropagatorSpec(steps_per_interval=500))
    coarse: PropagatorSpec = field(default_factory=lambda: PropagatorSpec(steps_per_interval=10))
    workers: int = 1  # threads for the fine stage; results do not depend on it

    def __post_init__(self):
        if self.n_subintervals < 2:
            raise ValueError("n_subintervals must be >= 2")
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.fine.steps_per_interval < self.coarse.steps_per_interval:
            raise ValueError("fine propagator must not be coarser than the coarse one")


@dataclass
class PararealResult:
    boundary_states: np.ndarray  # (N+1, n): X_0..X_N; fine_trajectories[n] starts at X_n
    fine_trajectories: list[Trajectory]
    iterations: int
    history: list[float]
    converged: bool
    boundaries: np.ndarray  # subinterval boundary times t_0..t_N

    def trajectory(self) -> Trajectory:
        """Fine trajectories concatenated; junctions take the next subinterval's start state."""
        grids = [self.fine_trajectories[0].grid]
        states = [self.fine_trajectories[0].states]
        for tr in self.fine_trajectories[1:]:
            grids[-1] = grids[-1][:-1]
            states[-1] = states[-1][:-1]
            grids.append(tr.grid)
            states.append(tr.states)
        tr0 = self.fine_trajectories[0]
        return Trajectory(np.concatenate(grids), np.concatenate(states), tr0.kind, tr0.scheme)

    def write_history_csv(self, path) -> None:
        write_history_csv(self.history, path)


class PararealDivergence(SimulationError):
    def __init__(self, message: str, result: PararealResult):
        super().__init__(message)
        self.result = result


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "metric"])
        for k, m in enumerate(history, start=1):
            w.writerow([k, f"{m:.17g}"])


def convergence_metric(prev, curr) -> float:
    """max_n ||curr_n - prev_n||_inf / max(||curr_n||_inf, 1e-12)."""
    prev = np.asarray(prev, dtype=float)
    curr = np.asarray(curr, dtype=float)
    if prev.shape != curr.shape:
        raise ValueError(f"shape mismatch {prev.shape} vs {curr.shape}")
    if prev.ndim == 1:
        prev, curr = prev[None], curr[None]
    diff = np.max(np.abs(curr - prev), axis=1)
    scale = np.maximum(np.max(np.abs(curr), axis=1), METRIC_FLOOR)
    return float(np.max(diff / scale))


def _boundaries(t0: float, t1: float, n: int) -> np.ndarray:
    b = np.linspace(t0, t1, n + 1)
    b[0], b[-1] = t0, t1
    return b


def _fine_stage(sys, starts, bounds, spec, workers, order=None):
    """Independent fine solves; ``order`` only permutes scheduling."""
    idx = list(range(len(starts))) if order is None else list(order)

    def job(n):
        return n, propagate(sys, starts[n], bounds[n], bounds[n + 1], spec)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = dict(pool.map(job, idx))
    else:
        done = dict(job(n) for n in idx)
    return [done[n] for n in range(len(starts))]


def _coarse(sys, x, ta, tb, spec) -> np.ndarray:
    return propagate(sys, x, ta, tb, spec).states[-1]


def parareal_solve(sys, x0, t0: float, t1: float, cfg: PararealConfig, fine_order=None) -> PararealResult:
    """Standard Parareal for the initial-value problem x(t0) = x0.

    Stops when the convergence metric drops to ``cfg.threshold`` or after N
    iterations, when every boundary state equals serial fine integration.
    """
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    n_sub = cfg.n_subintervals
    bounds = _boundaries(t0, t1, n_sub)
    x0 = np.asarray(x0, dtype=float)

    X = np.empty((n_sub + 1, x0.size))
    X[0] = x0
    g_old = np.empty_like(X)
    for n in range(n_sub):
        g_old[n + 1] = _coarse(sys, X[n], bounds[n], bounds[n + 1], cfg.coarse)
        X[n + 1] = g_old[n + 1]

    history = []
    for k in range(1, cfg.max_iterations + 1):
        fine = _fine_stage(sys, X[:-1], bounds, cfg.fine, cfg.workers, fine_order)
        X_new = X.copy()
        g_new = np.empty_like(X)
        for n in range(n_sub):
            g_new[n + 1] = _coarse(sys, X_new[n], bounds[n], bounds[n + 1], cfg.coarse)
            X_new[n + 1] = fine[n].states[-1] + g_new[n + 1] - g_old[n + 1]
        metric = convergence_metric(X, X_new)
        history.append(metric)
        log.debug("parareal iteration %d metric %.3e", k, metric)
        X, g_old = X_new, g_new
        if metric <= cfg.threshold or k >= n_sub:
            fine = _fine_stage(sys, X[:-1], bounds, cfg.fine, cfg.workers, fine_order)
            return PararealResult(X, fine, k, history, True, bounds)
    result = PararealResult(X, fine, cfg.max_iterations, history, False, bounds)
    raise PararealDivergence(f"Parareal did not converge in {cfg.max_iterations} iterations", result)


def pppc_solve(sys, t0: float, t1: float, cfg: PararealConfig, initial_guess=None, fine_order=None) -> PararealResult:
    """Periodic orbit over [t0, t1] by PP-PC.

    The window must span an integer number of periods of the system's
    coefficients and sources. After the converged update one more fine sweep
    starts from the newest boundary states, so ``fine_trajectories[n]``
    starts at ``boundary_states[n]`` and ``boundary_states[N]`` is the fine
    end state of the last subinterval.
    """
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    n_sub = cfg.n_subintervals
    bounds = _boundaries(t0, t1, n_sub)
    dim = sys.dim
    if initial_guess is None:
        X = np.zeros((n_sub, dim))
    else:
        X = np.array(initial_guess, dtype=float)
        if X.shape == (n_sub + 1, dim):
            X = X[:-1]
        if X.shape != (n_sub, dim):
            raise ValueError(f"initial_guess must have shape ({n_sub}, {dim})")

    # g_old[n] = G(X_n) over subinterval n; entry 0 is never needed because
    # X_0 is the one boundary not yet updated when the sweep reaches n = 1
    g_old = np.array([_coarse(sys, X[n], bounds[n], bounds[n + 1], cfg.coarse) for n in range(n_sub)])
    history = []
    fine = None
    for k in range(1, cfg.max_iterations + 1):
        fine = _fine_stage(sys, X, bounds, cfg.fine, cfg.workers, fine_order)
        f_end = np.array([tr.states[-1] for tr in fine])
        X_new = X.copy()
        g_new = g_old.copy()
        X_new[1] = f_end[0]
        for n in range(2, n_sub):
            g_new[n - 1] = _coarse(sys, X_new[n - 1], bounds[n - 1], bounds[n], cfg.coarse)
            X_new[n] = f_end[n - 1] + g_new[n - 1] - g_old[n - 1]
        g_new[n_sub - 1] = _coarse(sys, X_new[n_sub - 1], bounds[n_sub - 1], bounds[n_sub], cfg.coarse)
        X_new[0] = f_end[n_sub - 1] + g_new[n_sub - 1] - g_old[n_sub - 1]

        metric = convergence_metric(X, X_new)
        history.append(metric)
        log.debug("pppc iteration %d metric %.3e", k, metric)
        X, g_old = X_new, g_new
        if metric <= cfg.threshold:
            fine = _fine_stage(sys, X, bounds, cfg.fine, cfg.workers, fine_order)
            full = np.vstack([X, fine[-1].states[-1]])
            return PararealResult(full, fine, k, history, True, bounds)

    full = np.vstack([X, fine[-1].states[-1]])
    result = PararealResult(full, fine, cfg.max_iterations, history, False, bounds)
    raise PararealDivergence(
        f"PP-PC did not converge in {cfg.max_iterations} iterations "
        f"(last metric {history[-1]:.3e}, threshold {cfg.threshold:.1e})",
        result,
    )
