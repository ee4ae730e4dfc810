"""Population dynamics with delayed, network-estimated payoffs.

Finite-population revision simulators, mean-field closed-loop integration,
passivity certificates and exact stationary analysis for a multi-task
resource-collection game.
"""

from .exceptions import (
    ConfigError,
    GraphSamplingExhausted,
    InsufficientResolution,
    NoEquilibrium,
    NotConverged,
    NumericalBlowup,
    NumericalError,
    PopdynError,
    StateSpaceTooLarge,
)
from .core import RngSpec, make_rng, kl_divergence
from .protocols import KLDRL, Smith, KLDRLChoice, kld_rl_choice, smith_row, smith_matrix
from .game import (
    GameParams,
    RESOURCE_COLLECTION,
    TaskAllocationGame,
    completion_rates,
    solve_equilibrium,
)
from .network import CommGraph, EstimateBank, sample_er_digraph
from .finite_sim import FiniteSimulator, SimConfig, run_finite
from .meanfield import MeanFieldConfig, MeanFieldModel, integrate_closed_loop
from .passivity import AntistorageSpec, StorageSpec, check_dissipation_bound
from .stationary import StationaryChain, monte_carlo_moments

__version__ = "0.1.0"
