"""Wave-curve construction for conservation laws whose characteristic speeds
coincide along loci and whose characteristic families lose genuine
nonlinearity on inflection loci.

The package builds rarefaction curves, shock (jump-locus) curves and
composite curves, classifies the degeneracies met along the way, and
concatenates the pieces into solutions of Riemann problems.
"""

__version__ = "0.1.0"

from .models import (  # noqa: F401
    CoreyQuadParams,
    IcdowParams,
    ModelDescriptor,
    PlanarBoundary,
    buckley_leverett_model,
    build_model,
    corey_model,
    crossing_pencil_model,
    fold_pencil_model,
    icdow_model,
    synthetic_pencil_model,
)
from .geneig import (  # noqa: F401
    asymptotic_state,
    discriminant,
    eigenvalue_gradient,
    jordan_chain,
    sheet_coordinates,
    solve_pencil,
    taylor_R,
    versal_derivatives,
)
from .rarefaction import (  # noqa: F401
    Event,
    RarefactionSegment,
    continue_across_coincidence,
    detect_coincidence_stop,
    detect_inflection_stop,
    detect_planar_stop,
    integrate_rarefaction,
)
