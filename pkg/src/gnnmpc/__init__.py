"""Learned graph dynamics, linear-scaling condensing, and receding-horizon
control for chain-structured plants."""

from .graph import (
    GraphTopology,
    InputVector,
    NodeState,
    SystemState,
    Trajectory,
    chain_topology,
    flatten_state,
    unflatten_state,
)
from .gnn import GnnModel, LinearizedDynamics, gnn_step, linearize_stage, linearize_trajectory, load_model, rollout, save_model
from .qpsolver import QpProblem, QpSolution, QpStatus, SolverSettings, solve_qp

__all__ = [
    "GraphTopology",
    "InputVector",
    "NodeState",
    "SystemState",
    "Trajectory",
    "chain_topology",
    "flatten_state",
    "unflatten_state",
    "GnnModel",
    "LinearizedDynamics",
    "gnn_step",
    "linearize_stage",
    "linearize_trajectory",
    "load_model",
    "rollout",
    "save_model",
    "QpProblem",
    "QpSolution",
    "QpStatus",
    "SolverSettings",
    "solve_qp",
]
