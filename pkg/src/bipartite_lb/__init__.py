"""Load balancing on bipartite compatibility graphs with heterogeneous servers.

Subpackages:

* ``model``  - system description and closed-form theory (mean-field
  occupancies, response-time lower bound, buffer window, drift constants)
* ``graph``  - compatibility graphs: random constructions, connectivity
  checks, serialization
* ``policy`` - routing rules (jfsq, jfiq, jsq, jiq, jsq22, random)
* ``sim``    - discrete-event simulator with a compiled kernel and a
  pure-Python fallback, replications, Lyapunov-style diagnostics
* ``exact``  - stationary-distribution oracle for tiny systems
* ``cli``    - experiment harness (``bipartite-lb`` entry point)
"""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    BufferWindow,
    CapacityError,
    EpsilonRangeError,
    ServerClass,
    SystemSpec,
    ReferenceBounds,
    TheoryParams,
    build_system,
    check_buffer_window,
    derive_theory,
    evaluate_reference_bounds,
    make_classes,
)
from .graph import (  # noqa: F401
    BipartiteGraph,
    ConnectivityReport,
    check_well_connected_exact,
    check_well_connected_sampled,
    deficiency,
    generate_heterogeneous,
    generate_homogeneous,
    generate_sim_random,
    read_graph,
    write_graph,
)
from .policy import BLOCKED, POLICY_NAMES, route, routing_distribution  # noqa: F401
from .sim import (  # noqa: F401
    AggregateMetrics,
    Metrics,
    SimResult,
    Trace,
    lyapunov_trace,
    simulate,
    simulate_replications,
)
from .exact import exact_metrics, stationary  # noqa: F401
