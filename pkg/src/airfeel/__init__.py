"""Over-the-air federated edge learning with integrated sensing,
communication, and computation: per-round cost model, convergence-bound
evaluators, joint batch-size/resource optimizer, and a training simulator.
"""

from .core import (
    ChannelRealization,
    ConvergenceError,
    DeviceConfig,
    DivergenceError,
    InfeasibleError,
    RoundAllocation,
    SenseSample,
    SystemConfig,
)
from .bounds import BoundInputs, ConvergenceBound
from .optimizer import (
    AllocationResult,
    DualState,
    GridSpec,
    SolverOptions,
    optimize_allocation,
)

__version__ = "0.1.0"

__all__ = [
    "SystemConfig",
    "DeviceConfig",
    "RoundAllocation",
    "SenseSample",
    "ChannelRealization",
    "BoundInputs",
    "ConvergenceBound",
    "SolverOptions",
    "DualState",
    "GridSpec",
    "AllocationResult",
    "optimize_allocation",
    "InfeasibleError",
    "ConvergenceError",
    "DivergenceError",
    "__version__",
]
