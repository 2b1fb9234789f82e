"""Channel-aware gradient quantization for federated learning over a Gaussian MAC.

Users quantize local gradients with per-user multi-level stochastic quantizers,
budgets are allocated against the MAC capacity region and the gradients'
dynamic ranges, and the parameter server aggregates the decoded gradients.
"""

from macquant.channel import InfeasibleRateError, MacSpec, budget_cap, is_feasible, sum_capacity, transmit
from macquant.quantizer import (
    QuantizedGradient,
    QuantizerRng,
    decode_bits,
    dequantize,
    encode_bits,
    level_value,
    quantize,
    variance_bound,
)
from macquant.allocator import (
    Allocation,
    AllocationProblem,
    InfeasibleBudgetError,
    allocate,
    objective,
    round_allocation,
    solve_exhaustive,
    solve_relaxed,
    solve_two_user,
    solve_uniform,
)
from macquant.trainer import (
    LossSpec,
    Model,
    RoundMetrics,
    TrainingSetup,
    UserDataset,
    aggregate,
    convergence_bound,
    run_training,
    update,
)

__all__ = [
    "Allocation",
    "AllocationProblem",
    "InfeasibleBudgetError",
    "InfeasibleRateError",
    "LossSpec",
    "MacSpec",
    "Model",
    "QuantizedGradient",
    "QuantizerRng",
    "RoundMetrics",
    "TrainingSetup",
    "UserDataset",
    "aggregate",
    "allocate",
    "budget_cap",
    "convergence_bound",
    "decode_bits",
    "dequantize",
    "encode_bits",
    "is_feasible",
    "level_value",
    "objective",
    "quantize",
    "round_allocation",
    "run_training",
    "solve_exhaustive",
    "solve_relaxed",
    "solve_two_user",
    "solve_uniform",
    "sum_capacity",
    "transmit",
    "update",
    "variance_bound",
]

__version__ = "0.1.0"
