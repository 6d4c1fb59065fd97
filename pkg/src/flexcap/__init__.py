"""Grid-aware probabilistic aggregation of DER flexibility for ancillary
services: exact and linearized network models, resource capability blocks,
joint uncertainty sets, the robust conic aggregation problem with affine
disaggregation policies, multifeeder combination and Monte Carlo validation.
"""

from .aggregator import (
    ActivationError,
    AggregationError,
    AggregationResult,
    BaseloadMode,
    Disaggregation,
    InfeasibleError,
    ServiceSpec,
    UnboundedError,
    build_problem,
    disaggregate,
    evaluate_rows,
    flexibility_value,
    network_block,
    solve_aggregation,
)
from .conic import ConicProgram, ConicSolution, count_cones
from .netmodel import (
    BasisDecomposition,
    LinearGridModel,
    NetworkDescription,
    NetworkFormatError,
    PowerFlowError,
    PowerFlowSolution,
    copperplate_model,
    linearize,
    load_network,
    reduce_equalities,
    solve_power_flow,
)
from .resources import (
    BessSpec,
    FcrEnergyStats,
    HpSpec,
    LinearConstraintBlock,
    PvSpec,
    bess_block,
    concat_blocks,
    cycle_cost,
    embed_block,
    fcr_energy_requirements,
    hp_block,
    pv_block,
)
from .uncertainty import (
    DegenerateGeometryError,
    ScenarioSet,
    UncertaintySet,
    coverage_ellipsoid,
    fit_gaussian_ellipsoid,
    hyperbox,
    membership,
    min_volume_ellipsoid,
)

__version__ = "0.1.0"
