"""Labeled stochastic block models: BP/EM inference and algorithmic detectability analysis."""

__version__ = "0.1.0"

from .graph_model import (  # noqa: F401
    LabeledGraph,
    ModelParams,
    ModularPattern,
    build_affinity,
    chain4_pattern,
    generate,
    identity_pattern,
    make_pattern,
    overlap,
    read_graph,
    write_graph,
)
from .bp import MessageSet, bp_sweep, exact_marginals_bruteforce, init_messages, run_bp  # noqa: F401
from .em import EmConfig, run_em, xi_statistics  # noqa: F401
from .spectral import (  # noqa: F401
    NonbacktrackingOperator,
    band_radius_formula,
    band_radius_trace_bound,
    empirical_spectrum,
    isolated_eigenvalue_formula,
)
from .threshold import (  # noqa: F401
    adt_boundary,
    classify,
    infeasibility_window,
    nishimori_boundary,
    stall_point,
    transient_map,
)
