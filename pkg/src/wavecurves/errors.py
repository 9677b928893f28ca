"""Exception hierarchy for the wave-curve package.

All domain errors derive from :class:`WaveCurveError` so callers can catch
the package's failures with a single except clause while still matching the
specific condition by class.
"""


class WaveCurveError(Exception):
    """Base class for all domain-specific failures."""


# --- pencil / eigenstructure ------------------------------------------------

class SingularPencil(WaveCurveError):
    """det(A - lambda*B) vanishes identically (numerically)."""


class ComplexPair(WaveCurveError):
    """A complex-conjugate eigenvalue pair was found (elliptic state)."""


class PseudoinverseUndefined(WaveCurveError):
    """Discriminant undefined: B not invertible and no 2-eigenvalue reduction."""


class RankDeficient(WaveCurveError):
    """Matrix lacks full row rank; right pseudoinverse undefined."""


class NotDoubleEigenvalue(WaveCurveError):
    """lambda0 is not a double eigenvalue of the pencil."""


class FullGeometricMultiplicity(WaveCurveError):
    """Double eigenvalue with two independent eigenvectors: no Jordan chain."""


class SingularZ(WaveCurveError):
    """Regularized chain matrix Z is numerically singular."""


class TangentCoincidence(WaveCurveError):
    """grad p is orthogonal to r0: quadratic asymptotics do not apply."""


# --- rarefaction curves -----------------------------------------------------

class StartsOnCoincidence(WaveCurveError):
    """Rarefaction start state lies on the coincidence locus."""


class EigenfieldUndefined(WaveCurveError):
    """Requested characteristic family does not exist at the state."""


class NoCoincidenceNearby(WaveCurveError):
    """Coincidence refinement did not converge to a locus point."""


class FormulaInvalid(WaveCurveError):
    """Monitor function is identically below tolerance; no isolated zero."""


class NoAdmissibleContinuation(WaveCurveError):
    """No rarefaction branch continues past the coincidence point."""


class AsymptoticsInvalid(WaveCurveError):
    """Neither quadratic asymptotics nor the linear fallback applies."""


# --- shock curves -----------------------------------------------------------

class DegenerateJump(WaveCurveError):
    """Jump too small: shock speed undefined (0/0)."""


class NotOnLocus(WaveCurveError):
    """State pair does not satisfy the jump condition to tolerance."""


class TangentUndefined(WaveCurveError):
    """Continuation tangent undefined (Jacobian of the jump system rank-deficient)."""


# --- composite curves -------------------------------------------------------

class SingularField(WaveCurveError):
    """Composite right-hand side undefined (determinant factor vanishes)."""


class AmbiguousClassification(WaveCurveError):
    """Two characteristic families resonate simultaneously."""


class InvariantDrift(WaveCurveError):
    """Jump-condition invariant drifted beyond tolerance during integration."""


class RankDeficientReduction(WaveCurveError):
    """Reduced system of the resonant continuation is rank deficient."""


class QuasiNewtonDivergence(WaveCurveError):
    """Quasi-Newton iteration for the constrained continuation diverged."""


# --- Riemann assembly -------------------------------------------------------

class NoIntersection(WaveCurveError):
    """Forward and backward wave curves do not intersect."""


class NoSolutionFound(WaveCurveError):
    """No admissible Riemann solution found for the given data."""
