"""Gap networks of stiff spherical inclusions.

Generate random ball configurations, build their gap multigraph, minimize
the discrete gap energy, test homogenization criteria over growing boxes,
and compute a network effective-conductivity tensor.
"""

__version__ = "0.1.0"

from .geometry import (            # noqa: F401
    ComponentSet,
    Sphere,
    SphereConfig,
    cluster_moment_statistic,
    components,
    generate_chain_forest,
    generate_hardcore,
    generate_lattice_jitter,
    restrict_box,
)
from .multigraph import (          # noqa: F401
    Edge,
    InclusionGraph,
    Node,
    build_graph,
    closest_points,
    clusters,
    is_cycle_free,
    short_at,
    short_kappa,
)
from .energy import (              # noqa: F401
    BoundaryFamily,
    EnergyBreakdown,
    KellerParams,
    LaplacianAssembly,
    PotentialFamily,
    SolverError,
    SolverOptions,
    affine_boundary_family,
    cycle_free_potentials,
    energy,
    energy_gradient,
    keller_energy,
    lift_short_potentials,
    midpoint_boundary_family,
    minimize_energy,
)
from .criteria import (            # noqa: F401
    CriterionSeries,
    H2Estimate,
    H2Options,
    density_estimate,
    derive_cell_seed,
    h1_statistic,
    h2_exact_s2,
    h2_ratio,
    h2_statistic,
    log_moment_statistic,
    scan_limsup,
)
from .effective import (           # noqa: F401
    EffectiveTensor,
    boundary_nodes,
    effective_scan,
    network_effective_tensor,
)
