"""Adaptive power, rate and subcarrier allocation for OFDMA cognitive radio
with imperfect cross-link channel knowledge."""

from .allocator import (AllocationResult, DualState, ScenarioKind, ScenarioSpec, ScenarioWeights,
                        SolverError, SolverOptions, ase, solve, solve_batch, verify_kkt, zeta)
from .distributions import (DomainError, GaussianParams, ScaledChiSquare, SinrDistParams,
                            collision_prob, deterministic_cap, power_sum_gaussian, sinr_cdf,
                            sinr_pdf, weighted_chi_square_approx)
from .experiments import SweepResult, SweepSpec, run_sweep
from .model import (ChannelRealization, EstimationModel, ParameterError, SystemConfig,
                    sample_realization)

__version__ = "0.1.0"
