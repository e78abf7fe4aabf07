"""Periodic adjoint sensitivity analysis of switched nonlinear circuits."""

from .mna import MnaSystem, QoiSpec, assemble, param_stamp_action, residual
from .netlist import (
    Circuit,
    Device,
    NetlistError,
    ParamDescriptor,
    build_buck_converter,
    build_rc_demo,
    list_parameters,
    load_builtin,
    parse_netlist,
    serialize_netlist,
)
from .parareal import PararealConfig, PararealResult, convergence_metric, parareal_solve, pppc_solve
from .sensitivity import (
    PeriodicSolution,
    SensitivityReport,
    asa_periodic,
    asa_periodic_literature,
    asa_transient,
    boundary_term_residual,
    dsa,
    fd_oracle,
    integrate_qoi,
    solve_periodic,
)
from .transient import PropagatorSpec, Trajectory, integrate, integrate_adjoint, step

__version__ = "0.1.0"
