"""DC-microgrid simulation and distributed fault detection/estimation."""

from .errors import (ConfigError, DimensionMismatch, IllConditioned, Infeasible,
                     NegativeVariance, NonFinite, NonHurwitz, RankDeficient,
                     SingularK, SingularPsi, VoltageCollapse, ZeroZbar)
from .grid import (ActuatorFault, DgParams, FaultSchedule, GridSpec,
                   IncipientProfile, LineFault, LineParams, LoadSchedule,
                   NoiseSpec, ScenarioTrace, ShortCircuitProfile, StepProfile,
                   aggregate_fault_current, build_closed_loop, equilibrium,
                   simulate, table1_grid)
from .pipeline import DiagnosisSuite, build_suite, design_filters, run_scenario
from .synthesis import (DaeSystem, DenominatorPoly, FilterDesign, actuator_dae,
                        build_hbar, h2_sq, line_dae, synthesize)

__version__ = "0.1.0"
