"""Energy-minimal scheduling for two-way relaying with digital network coding."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    Allocation,
    ArrivalRates,
    ChannelGains,
    ModeDistributions,
    PointMass,
    Rayleigh,
    power_for_rate,
    virtual_rates,
)
from .static_opt import (  # noqa: E402
    InfeasibleError,
    StaticSolution,
    approx_small_lambda,
    brute_force_oracle,
    solve_conventional,
    solve_static,
)
from .ergodic_opt import ErgodicSolution, solve_ergodic  # noqa: E402
from .markov import actual_energy, analyze_pair, build_fading_chain, build_static_chain, stationary  # noqa: E402
from .sim import SimConfig, SimReport, run_eersp  # noqa: E402
from .scenario import Scenario  # noqa: E402
