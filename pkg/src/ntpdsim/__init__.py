"""Intracavity triple-photon downconversion cascade simulator.

Quantum-jump and master-equation propagation of three downconverted cavity
modes cascaded into virtual output cavities, with high-order-moment
entanglement and steering witnesses, temporal-mode extraction, and
homodyne-conditioned Wigner analysis.
"""

__version__ = "0.1.0"

from .fock import (
    DensityOperator,
    LayoutError,
    ModeLayout,
    SparseOperator,
    StateVector,
    coherent_state,
    expectation,
    fock_state,
    make_ladder,
    partial_trace,
    vacuum_state,
)
from .model import GeneratorSet, ModelParams, cascade_layout
from .trajectories import (
    CorrelationKernel,
    DimensionGuardError,
    EnsembleEstimate,
    TrajectoryRecord,
    ensemble_average,
    evolve_trajectory,
    integrate_master,
    integrate_unitary,
    run_ensemble,
    two_time_correlation,
    uniform_grid,
)
from .temporal_modes import (
    CouplingSchedule,
    TemporalMode,
    constant_coupling,
    coupling_from_mode,
    most_populated_mode,
)
from .witnesses import (
    CriteriaReport,
    MomentSet,
    accumulate_moments,
    criteria_report,
    optimal_gains,
    symmetric_criteria,
    variance_criteria,
)
from .conditioning import (
    QuadratureProjector,
    WignerGrid,
    condition_on_homodyne,
    negativity,
    purity,
    wigner,
)
from .scenario import RunReport, ScenarioConfig, ValidationError, run_scenario, sweep
