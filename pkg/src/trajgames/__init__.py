"""Differentiable trajectory games: solve generalized Nash games as MCPs,
differentiate solutions with respect to game parameters, and plan against
opponents whose objectives are estimated online."""

from .mcp import (
    BoxBounds,
    MCPProblem,
    MCPSolution,
    SolveStatus,
    SolverConfig,
    fischer_burmeister,
    mcp_residual,
    solve_mcp,
)

__all__ = [
    "BoxBounds",
    "MCPProblem",
    "MCPSolution",
    "SolveStatus",
    "SolverConfig",
    "fischer_burmeister",
    "mcp_residual",
    "solve_mcp",
]

__version__ = "0.1.0"
